// ppg: generate synthetic data, train, evaluate and plot.
//
// Exit codes: 0 success, 1 invalid input (flags, configs, files, bundles),
// 2 runtime failure (divergence, generation failure, failed gradcheck).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "ppmn/bundle.hpp"
#include "ppmn/config_io.hpp"
#include "ppmn/errors.hpp"
#include "ppmn/evaluation.hpp"
#include "ppmn/gradcheck.hpp"
#include "ppmn/kernels.hpp"
#include "ppmn/scene.hpp"
#include "ppmn/trainer.hpp"

namespace fs = std::filesystem;
using namespace ppmn;

namespace {

nlohmann::json read_json_file(const fs::path& path, const std::string& flag) {
    std::ifstream in(path);
    if (!in) throw FormatError(flag + ": cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(flag + ": malformed JSON in '" + path.string() + "': " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out << text;
}

void require_dir(const fs::path& path, const std::string& flag) {
    if (!fs::is_directory(path)) throw FormatError(flag + ": '" + path.string() + "' is not a directory");
}

struct GenArgs {
    std::string out;
    std::string config;
    std::size_t samples = 10;
    std::uint64_t seed = 0;
    SceneConfig scene;
};

int run_gen(const GenArgs& a, const CLI::App& cmd) {
    SceneConfig cfg = a.config.empty() ? SceneConfig{} : scene_config_from_json(read_json_file(a.config, "--config"));
    const SceneConfig& flags = a.scene;
    // Explicit flags override the config file.
    if (cmd.count("--height")) cfg.height = flags.height;
    if (cmd.count("--width")) cfg.width = flags.width;
    if (cmd.count("--phrases")) cfg.num_phrases = flags.num_phrases;
    if (cmd.count("--classes")) cfg.num_classes = flags.num_classes;
    if (cmd.count("--noise")) cfg.noise_sigma = flags.noise_sigma;
    if (cmd.count("--visual-dim")) cfg.visual_dim = flags.visual_dim;
    if (cmd.count("--phrase-dim")) cfg.phrase_dim = flags.phrase_dim;
    if (cmd.count("--things-fraction")) cfg.things_fraction = flags.things_fraction;
    if (cmd.count("--plural-fraction")) cfg.plural_fraction = flags.plural_fraction;
    if (cmd.count("--ungrounded-fraction")) cfg.ungrounded_fraction = flags.ungrounded_fraction;
    if (cmd.count("--jitter")) cfg.appearance_jitter = flags.appearance_jitter;
    if (cmd.count("--max-words")) cfg.max_words = flags.max_words;
    if (cmd.count("--seed") || a.config.empty()) cfg.seed = a.seed;
    cfg.validate();
    if (a.samples == 0) throw ConfigError("--samples must be at least 1");

    const auto samples = generate_dataset(cfg, a.samples);
    write_dataset(samples, a.out);
    write_text(fs::path(a.out) / "scene.json", to_json(cfg).dump(2) + "\n");
    std::printf("wrote %zu samples to %s\n", samples.size(), a.out.c_str());
    return 0;
}

struct TrainArgs {
    std::string data, out, config;
    std::size_t max_steps = 0;
};

int run_train(const TrainArgs& a, const CLI::App& cmd, const CLI::App& root) {
    require_dir(a.data, "--data");
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(a.config, "--config"));
    if (root.count("--threads")) cfg.threads = kernels::num_threads();
    if (cmd.count("--max-steps")) cfg.max_steps = a.max_steps;
    cfg.validate();
    const auto dataset = read_dataset(a.data);
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "config.json", to_json(cfg).dump(2) + "\n");
    const auto result = train(cfg, dataset, {fs::path(a.out)});
    const auto& last = result.steps.back();
    std::printf("trained %zu steps, final loss %.6f", last.step, last.loss_total);
    if (result.best_ar) std::printf(", best training AR %.4f", *result.best_ar);
    std::printf("\n");
    return 0;
}

struct EvalArgs {
    std::string checkpoint, data, report, curve;
    bool word_average = false;
    double threshold = 0.5;
};

int run_eval(const EvalArgs& a) {
    require_dir(a.checkpoint, "--checkpoint");
    require_dir(a.data, "--data");
    const auto params = read_checkpoint(a.checkpoint);
    const auto dataset = read_dataset(a.data);
    const auto report = evaluate(params, dataset, {a.word_average, a.threshold});
    write_text(a.report, report_to_json(report).dump(2) + "\n");
    if (!a.curve.empty()) write_text(a.curve, curve_csv(report.overall.curve));
    const auto show = [](const char* name, const SplitResult& s) {
        if (s.ar) {
            std::printf("%-10s AR %.4f  (%zu phrases)\n", name, *s.ar, s.count);
        } else {
            std::printf("%-10s AR n/a    (0 phrases)\n", name);
        }
    };
    show("overall", report.overall);
    show("things", report.things);
    show("stuff", report.stuff);
    show("singulars", report.singulars);
    show("plurals", report.plurals);
    return 0;
}

int run_curve(const std::string& report_path, const std::string& svg_path) {
    const auto report = report_from_json(read_json_file(report_path, "--report"));
    write_text(svg_path, report_svg(report));
    std::printf("wrote %s\n", svg_path.c_str());
    return 0;
}

int run_gradcheck(const GradSuiteOptions& opts) {
    const auto reports = gradcheck_suite(opts);
    bool all = true;
    std::printf("%-20s %14s %10s  %s\n", "op", "max_rel_error", "tolerance", "passed");
    for (const auto& r : reports) {
        std::printf("%-20s %14.3e %10.1e  %s\n", r.op_name.c_str(), r.max_rel_error, r.tolerance,
                    r.passed ? "yes" : "NO");
        all = all && r.passed;
    }
    return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Panoptic narrative grounding on synthetic scenes"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "Worker threads for per-sample stages")->check(CLI::PositiveNumber);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Write a synthetic dataset");
    gen_cmd->add_option("--out", gen.out, "Output dataset directory")->required();
    gen_cmd->add_option("--samples", gen.samples, "Number of samples");
    gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
    gen_cmd->add_option("--config", gen.config, "Scene config JSON (flags override it)");
    gen_cmd->add_option("--height", gen.scene.height);
    gen_cmd->add_option("--width", gen.scene.width);
    gen_cmd->add_option("--phrases", gen.scene.num_phrases);
    gen_cmd->add_option("--classes", gen.scene.num_classes);
    gen_cmd->add_option("--noise", gen.scene.noise_sigma);
    gen_cmd->add_option("--visual-dim", gen.scene.visual_dim);
    gen_cmd->add_option("--phrase-dim", gen.scene.phrase_dim);
    gen_cmd->add_option("--things-fraction", gen.scene.things_fraction);
    gen_cmd->add_option("--plural-fraction", gen.scene.plural_fraction);
    gen_cmd->add_option("--ungrounded-fraction", gen.scene.ungrounded_fraction);
    gen_cmd->add_option("--jitter", gen.scene.appearance_jitter, "Per-segment appearance jitter");
    gen_cmd->add_option("--max-words", gen.scene.max_words);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
    train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "Run directory (metrics, checkpoints)")->required();
    train_cmd->add_option("--config", tr.config, "TrainConfig JSON");
    train_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint bundle directory")->required();
    eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
    eval_cmd->add_option("--report", ev.report, "Report JSON to write")->required();
    eval_cmd->add_option("--curve", ev.curve, "Overall recall curve CSV to write");
    eval_cmd->add_flag("--word-average", ev.word_average, "Score phrases by averaging their word maps");
    eval_cmd->add_option("--threshold", ev.threshold, "Binarisation threshold")->check(CLI::Range(0.0, 1.0));

    std::string report_path, svg_path;
    auto* curve_cmd = app.add_subcommand("curve", "Render a report as an SVG recall curve");
    curve_cmd->add_option("--report", report_path, "Report JSON")->required();
    curve_cmd->add_option("--svg", svg_path, "SVG to write")->required();

    GradSuiteOptions gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gc_cmd->add_option("--seed", gc.seed);
    gc_cmd->add_option("--points", gc.points, "Random points per op");
    gc_cmd->add_option("--model-points", gc.model_points, "Random points for the end-to-end model");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    // Reductions are ordered by sample index whatever the thread count, so
    // PPG_DETERMINISTIC=1 needs no separate code path.
    kernels::set_num_threads(threads);

    try {
        if (*gen_cmd) return run_gen(gen, *gen_cmd);
        if (*train_cmd) return run_train(tr, *train_cmd, app);
        if (*eval_cmd) return run_eval(ev);
        if (*curve_cmd) return run_curve(report_path, svg_path);
        if (*gc_cmd) return run_gradcheck(gc);
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const GenerationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
