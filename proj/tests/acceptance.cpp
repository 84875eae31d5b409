// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "helpers.hpp"

#include "json.hpp"
#include "ppmn/bundle.hpp"
#include "ppmn/evaluation.hpp"
#include "ppmn/gradcheck.hpp"
#include "ppmn/objectives.hpp"
#include "ppmn/ops.hpp"
#include "ppmn/trainer.hpp"

using namespace ppmn;
using ppmn::test::random_maps;
using ppmn::test::random_truth;
using ppmn::test::TempDir;

namespace fs = std::filesystem;

namespace {

// Pinned from the reference run of criterion 4 (100 steps, lr 1e-3).
constexpr double kOverfitReferenceAr = 0.995;
constexpr double kOverfitBand = 0.05;
constexpr double kOverfitTarget = 0.85;
constexpr double kAblationBand = 0.02;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return out;
}

Outcome bce_identity() {
    const auto t0 = Clock::now();
    CounterRng rng(1);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t n = 1 + rng.below(8), h = 1 + rng.below(16);
        auto y = random_truth(rng, n, h, h, 0.8);
        auto m = random_maps(rng, {n, h, h}, 1e-4, 1 - 1e-4);
        worst = std::max(worst, std::abs(bce_loss(m, y).item() - multilabel_view_loss(m, y)));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-6 && secs < 5, fmt("max |bce - multilabel| %.2e over 100 pairs (tol 1e-6), %.2fs (< 5s)", worst, secs)};
}

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    const auto reports = gradcheck_suite(GradSuiteOptions{});
    const double secs = seconds_since(t0);
    bool all = true;
    double worst = 0;
    std::string failed;
    for (const auto& r : reports) {
        all = all && r.passed;
        worst = std::max(worst, r.max_rel_error);
        if (!r.passed) failed += " " + r.op_name;
    }
    return {all && secs < 60, fmt("%g checks, worst rel error %.2e (tol 1e-4), %.1fs (< 60s)", double(reports.size()), worst, secs) +
                                  (failed.empty() ? "" : "; failed:" + failed)};
}

Outcome metric_oracle() {
    const auto t0 = Clock::now();
    struct Row {
        double iou;
        Category c;
        Plurality p;
    };
    const std::vector<Row> rows = {{0.82, Category::thing, Plurality::singular}, {0.35, Category::thing, Plurality::plural},
                                   {0.50, Category::stuff, Plurality::singular}, {0.00, Category::stuff, Plurality::singular},
                                   {0.97, Category::thing, Plurality::plural},   {0.64, Category::stuff, Plurality::plural}};
    std::vector<PhraseResult> results;
    for (const auto& r : rows) results.push_back({r.iou, r.c, r.p});

    // Brute force: count hits per grid point, integrate with halved endpoints.
    const auto oracle = [&](const std::function<bool(const Row&)>& keep, std::vector<double>& rec) {
        rec.assign(101, 0.0);
        double members = 0;
        for (const auto& r : rows) members += keep(r) ? 1 : 0;
        for (int k = 0; k <= 100; ++k) {
            double hits = 0;
            for (const auto& r : rows) hits += keep(r) && r.iou > k / 100.0 ? 1 : 0;
            rec[k] = hits / members;
        }
        double s = 0;
        for (int k = 0; k <= 100; ++k) s += (k == 0 || k == 100 ? 0.5 : 1.0) * rec[k];
        return s / 100.0;
    };
    const auto report = split_report(results);
    const std::pair<const SplitResult*, std::function<bool(const Row&)>> splits[] = {
        {&report.overall, [](const Row&) { return true; }},
        {&report.things, [](const Row& r) { return r.c == Category::thing; }},
        {&report.stuff, [](const Row& r) { return r.c == Category::stuff; }},
        {&report.singulars, [](const Row& r) { return r.p == Plurality::singular; }},
        {&report.plurals, [](const Row& r) { return r.p == Plurality::plural; }},
    };
    double worst = 0;
    for (const auto& [split, keep] : splits) {
        std::vector<double> rec;
        const double ar = oracle(keep, rec);
        if (!split->ar) return {false, "missing split AR"};
        worst = std::max(worst, std::abs(*split->ar - ar));
        for (int k = 0; k <= 100; ++k) worst = std::max(worst, std::abs(split->curve.recalls[k] - rec[k]));
    }
    std::vector<double> rec;
    worst = std::max(worst, std::abs(average_recall(recall_curve(results)) - oracle([](const Row&) { return true; }, rec)));
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 1, fmt("max deviation from brute force %.2e (tol 1e-9), %.3fs (< 1s)", worst, secs)};
}

Outcome overfit() {
    const auto t0 = Clock::now();
    SceneConfig sc;
    sc.height = sc.width = 16;
    sc.num_phrases = 6;
    sc.num_classes = 5;
    sc.noise_sigma = 0.1;
    sc.seed = 7;
    const auto data = generate_dataset(sc, 10);
    TrainConfig tc;
    tc.model.rounds = 3;
    tc.model.compatible_pixels = 64;
    tc.lr = 1e-3;
    tc.lr_decay.start = 1000000;
    tc.batch_size = 10;
    tc.epochs = 2000;
    tc.max_steps = 100;
    tc.eval_each_epoch = false;
    tc.seed = 7;
    const auto result = train(tc, data);
    const double ar = evaluate(result.params, data).overall.ar.value_or(0.0);
    const double secs = seconds_since(t0);
    const bool pass = ar >= kOverfitTarget && std::abs(ar - kOverfitReferenceAr) <= kOverfitBand && secs < 600 &&
                      result.steps.size() <= 2000;
    return {pass, fmt("training AR %.4f after %g steps (target >= 0.85, pinned 0.995 +/- 0.05), %.0fs (< 600s)", ar,
                      double(result.steps.size()), secs)};
}

Outcome ablation() {
    const auto t0 = Clock::now();
    SceneConfig sc;
    sc.height = sc.width = 16;
    sc.num_phrases = 6;
    sc.num_classes = 5;
    sc.noise_sigma = 0.1;
    sc.seed = 7;
    const auto train_set = generate_dataset(sc, 50);
    SceneConfig hc = sc;
    hc.seed = 1000;
    hc.codebook_seed = sc.seed;
    const auto held_out = generate_dataset(hc, 50);

    std::map<std::size_t, double> ar;
    for (std::size_t rounds : {0, 1, 3}) {
        TrainConfig tc;
        tc.model.rounds = rounds;
        tc.model.compatible_pixels = 64;
        tc.lr = 1e-3;
        tc.lr_decay.start = 1000000;
        tc.batch_size = 10;
        tc.epochs = 1000;
        tc.max_steps = 300;
        tc.eval_each_epoch = false;
        tc.seed = 7;
        const auto result = train(tc, train_set);
        ar[rounds] = evaluate(result.params, held_out).overall.ar.value_or(0.0);
    }
    const double secs = seconds_since(t0);
    const bool pass = ar[1] > ar[0] && ar[3] >= ar[1] - kAblationBand && secs < 1800;
    return {pass, fmt("held-out AR  L=0 %.4f  L=1 %.4f  L=3 %.4f", ar[0], ar[1], ar[3]) +
                      fmt(" (need L1 > L0 and L3 >= L1 - 0.02), %.0fs (< 1800s)", secs)};
}

int run_ppg(const std::string& args) {
    const std::string cmd = std::string("PPG_DETERMINISTIC=1 ") + PPG_BINARY + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
    TempDir dir("accept_det");
    const auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
    if (run_ppg("gen --out " + q(dir / "data") + " --samples 4 --seed 3") != 0) return {false, "gen failed"};
    TrainConfig tc;
    tc.model.rounds = 2;
    tc.model.compatible_pixels = 32;
    tc.epochs = 3;
    tc.batch_size = 2;
    tc.lr = 1e-3;
    tc.seed = 11;
    std::ofstream(dir / "train.json") << to_json(tc).dump(2);
    for (const char* run : {"a", "b"}) {
        if (run_ppg("train --data " + q(dir / "data") + " --out " + q(dir / run) + " --config " + q(dir / "train.json")) != 0) {
            return {false, "train failed"};
        }
    }
    const auto a = snapshot(dir / "a"), b = snapshot(dir / "b");
    std::size_t checkpoints = 0;
    for (const auto& [name, bytes] : a) checkpoints += name.ends_with(".bin") ? 1 : 0;
    const bool pass = a == b && a.count("metrics.ndjson") && a.count("final/manifest.json") && checkpoints > 0;
    return {pass, fmt("%g files compared across two runs (metrics, epoch log, %g checkpoint payloads)", double(a.size()),
                      double(checkpoints)) +
                      (a == b ? ", all byte-identical" : ", MISMATCH")};
}

Outcome round_trip() {
    TempDir dir("accept_rt");
    SceneConfig sc;
    sc.ungrounded_fraction = 0.2;
    sc.plural_fraction = 0.5;
    std::size_t identical = 0;
    for (std::uint64_t i = 0; i < 20; ++i) {
        sc.seed = 500 + i;
        const auto s = generate_scene(sc);
        const auto a = dir / ("s" + std::to_string(i) + "a"), b = dir / ("s" + std::to_string(i) + "b");
        write_sample(s, a);
        const auto back = read_sample(a);
        write_sample(back, b);
        identical += (back == s && snapshot(a) == snapshot(b)) ? 1 : 0;
    }
    const auto params = init_params<float>(ModelConfig{}, 5);
    write_checkpoint(params, dir / "ca");
    write_checkpoint(read_checkpoint(dir / "ca"), dir / "cb");
    const bool ckpt = snapshot(dir / "ca") == snapshot(dir / "cb");
    return {identical == 20 && ckpt, fmt("%g/20 samples and %g/1 checkpoint byte-identical after write, read, write",
                                         double(identical), ckpt ? 1.0 : 0.0)};
}

Outcome loss_bounds() {
    CounterRng rng(8);
    std::size_t bad = 0;
    double min_bce = 1e9, min_dice = 1e9, max_dice = -1e9;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = 1 + rng.below(8), h = 1 + rng.below(16);
        auto y = random_truth(rng, n, h, h, 0.8);
        auto logits = test::random_tensor<double>(rng, {n, h, h}, false, 1.0 + 20.0 * rng.uniform());
        auto m = sigmoid(logits);
        for (double v : m.data()) bad += (v > 0.0 && v < 1.0) ? 0 : 1;
        const double b = bce_loss(m, y).item(), d = dice_loss(m, y).item();
        min_bce = std::min(min_bce, b);
        min_dice = std::min(min_dice, d);
        max_dice = std::max(max_dice, d);
    }
    const bool pass = bad == 0 && min_bce >= 0 && min_dice >= 0 && max_dice <= 1;
    return {pass, fmt("bce min %.3e, dice range [%.3e, %.6f], ", min_bce, min_dice, max_dice) +
                      std::to_string(bad) + " sigmoid outputs outside (0, 1) over 1000 inputs"};
}

}  // namespace

int main() {
    const std::pair<const char*, std::function<Outcome()>> criteria[] = {
        {"bce / multilabel identity", bce_identity},
        {"gradient suite", gradient_suite},
        {"metric oracle", metric_oracle},
        {"overfit", overfit},
        {"rounds ablation", ablation},
        {"determinism", determinism},
        {"format round-trip", round_trip},
        {"loss bounds", loss_bounds},
    };
    int failures = 0;
    int index = 1;
    for (const auto& [name, run] : criteria) {
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("criterion %d %-26s %s  %s\n", index++, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
