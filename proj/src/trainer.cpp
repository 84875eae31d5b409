#include "ppmn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>

#include <omp.h>

#include "ppmn/bundle.hpp"
#include "ppmn/config_io.hpp"
#include "ppmn/errors.hpp"
#include "ppmn/kernels.hpp"
#include "ppmn/rng.hpp"

namespace fs = std::filesystem;

namespace ppmn {

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train config: lr must be positive");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (lr_decay.table.empty()) {
        if (lr_decay.start < 1 || lr_decay.every < 1) throw ConfigError("train config: lr_decay start/every must be >= 1");
        if (!(lr_decay.factor > 0.0) || lr_decay.factor > 1.0) throw ConfigError("train config: lr_decay factor must be in (0, 1]");
    }
    for (double v : lr_decay.table) {
        if (!(v > 0.0)) throw ConfigError("train config: lr_decay table entries must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train config: betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train config: adam_eps must be positive");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("train config: grad_clip must be positive");
    for (const auto& [prefix, scale] : group_lr) {
        if (!(scale >= 0.0)) throw ConfigError("train config: group_lr '" + prefix + "' must be non-negative");
    }
    if (threads < 1) throw ConfigError("train config: threads must be >= 1");
    model.validate();
    loss.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json decay = {{"start", c.lr_decay.start}, {"every", c.lr_decay.every}, {"factor", c.lr_decay.factor},
                            {"table", c.lr_decay.table}};
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [k, v] : c.group_lr) groups[k] = v;
    return {
        {"lr", c.lr},
        {"lr_decay", decay},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"betas", {c.beta1, c.beta2}},
        {"adam_eps", c.adam_eps},
        {"grad_clip", c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr)},
        {"max_steps", c.max_steps},
        {"group_lr", groups},
        {"threads", c.threads},
        {"eval_each_epoch", c.eval_each_epoch},
        {"word_average", c.word_average},
        {"model", to_json(c.model)},
        {"loss", to_json(c.loss)},
    };
}

namespace {

template <typename V>
void read(const nlohmann::json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("train config: key '") + key + "' has the wrong type");
    }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j,
                        {"lr", "lr_decay", "epochs", "batch_size", "seed", "betas", "adam_eps", "grad_clip",
                         "max_steps", "group_lr", "threads", "eval_each_epoch", "word_average", "model", "loss"},
                        "train config");
    TrainConfig c;
    read(j, "lr", c.lr);
    if (j.contains("lr_decay")) {
        const auto& d = j.at("lr_decay");
        reject_unknown_keys(d, {"start", "every", "factor", "table"}, "train config lr_decay");
        read(d, "start", c.lr_decay.start);
        read(d, "every", c.lr_decay.every);
        read(d, "factor", c.lr_decay.factor);
        read(d, "table", c.lr_decay.table);
    }
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "seed", c.seed);
    if (j.contains("betas")) {
        std::vector<double> b;
        read(j, "betas", b);
        if (b.size() != 2) throw ConfigError("train config: betas must hold two numbers");
        c.beta1 = b[0];
        c.beta2 = b[1];
    }
    read(j, "adam_eps", c.adam_eps);
    if (j.contains("grad_clip") && !j.at("grad_clip").is_null()) {
        double g = 0.0;
        read(j, "grad_clip", g);
        c.grad_clip = g;
    }
    read(j, "max_steps", c.max_steps);
    read(j, "group_lr", c.group_lr);
    read(j, "threads", c.threads);
    read(j, "eval_each_epoch", c.eval_each_epoch);
    read(j, "word_average", c.word_average);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
    c.validate();
    return c;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch < 1) throw UsageError("lr_at: epochs are numbered from 1");
    const auto& d = cfg.lr_decay;
    if (!d.table.empty()) return d.table[std::min(epoch, d.table.size()) - 1];
    if (epoch < d.start) return cfg.lr;
    const std::size_t halvings = 1 + (epoch - d.start) / d.every;
    return cfg.lr * std::pow(d.factor, static_cast<double>(halvings));
}

template <typename T>
void adam_step(std::span<const ParamSlot<T>> slots, AdamState<T>& state, const AdamHyper& hyper) {
    for (const auto& s : slots) {
        if (s.value.size() != s.grad.size()) {
            throw DimensionError("adam_step: gradient of '" + s.name + "' has " + std::to_string(s.grad.size()) +
                                 " entries, parameter has " + std::to_string(s.value.size()));
        }
        for (std::size_t i = 0; i < s.grad.size(); ++i) {
            if (!std::isfinite(s.grad[i])) {
                throw NumericError("adam_step: non-finite gradient in parameter '" + s.name + "' at element " +
                                   std::to_string(i));
            }
        }
    }
    if (state.m.empty()) {
        for (const auto& s : slots) {
            state.m.emplace_back(s.value.size(), T(0));
            state.v.emplace_back(s.value.size(), T(0));
        }
    }
    if (state.m.size() != slots.size()) throw DimensionError("adam_step: state does not match parameter list");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const auto& s = slots[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != s.value.size()) throw DimensionError("adam_step: moment buffer of '" + s.name + "' has wrong size");
        for (std::size_t i = 0; i < s.value.size(); ++i) {
            const double g = s.grad[i];
            const double mi = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            const double vi = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = s.lr * (mi / c1) / (std::sqrt(vi / c2) + hyper.eps);
            s.value[i] = static_cast<T>(s.value[i] - update);
        }
    }
}

template void adam_step<float>(std::span<const ParamSlot<float>>, AdamState<float>&, const AdamHyper&);
template void adam_step<double>(std::span<const ParamSlot<double>>, AdamState<double>&, const AdamHyper&);

namespace {

Tensor<float> visual_tensor(const Sample& s) {
    return Tensor<float>::from({s.height, s.width, s.visual_dim}, s.visual);
}

Tensor<float> phrase_tensor(const Sample& s) {
    return Tensor<float>::from({s.num_phrases(), s.phrase_dim}, s.phrases);
}

void check_sample(const Sample& s, const ModelConfig& cfg) {
    if (s.visual_dim != cfg.visual_dim || s.phrase_dim != cfg.phrase_dim) {
        throw ConfigError("sample feature dims (" + std::to_string(s.visual_dim) + ", " + std::to_string(s.phrase_dim) +
                          ") do not match the model (" + std::to_string(cfg.visual_dim) + ", " +
                          std::to_string(cfg.phrase_dim) + ")");
    }
    if (cfg.rounds > 0 && cfg.compatible_pixels > s.height * s.width) {
        throw ConfigError("compatible_pixels S=" + std::to_string(cfg.compatible_pixels) + " exceeds the " +
                          std::to_string(s.height * s.width) + " pixels of a sample");
    }
}

// Runs `body(i)` for i in [0, n) across threads and rethrows the first
// failure by index, so the reported error does not depend on scheduling.
template <typename F>
void parallel_for_samples(std::size_t n, F&& body) {
    std::vector<std::exception_ptr> errors(n);
    const int threads = std::max(1, std::min<int>(kernels::num_threads(), static_cast<int>(n)));
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

std::vector<PhraseResult> predict(const ModelParams<float>& params, std::span<const Sample> samples,
                                  const PredictOptions& opts) {
    for (const auto& s : samples) check_sample(s, params.config);
    std::vector<std::vector<PhraseResult>> per_sample(samples.size());
    parallel_for_samples(samples.size(), [&](std::size_t i) {
        const Sample& s = samples[i];
        const std::size_t pixels = s.height * s.width;
        std::vector<std::vector<double>> maps(s.num_phrases());
        if (opts.word_average) {
            auto words = Tensor<float>::from({s.num_words(), s.phrase_dim}, s.words);
            const auto fwd = forward(visual_tensor(s), words, params);
            const auto m = fwd.responses.back().data();
            std::vector<std::vector<double>> word_maps(s.num_words());
            for (std::size_t w = 0; w < word_maps.size(); ++w) {
                word_maps[w].assign(m.begin() + w * pixels, m.begin() + (w + 1) * pixels);
            }
            for (std::size_t n = 0; n < maps.size(); ++n) {
                maps[n] = average_word_maps(word_maps, s.annotations[n].word_span);
            }
        } else {
            const auto fwd = forward(visual_tensor(s), phrase_tensor(s), params);
            const auto m = fwd.responses.back().data();
            for (std::size_t n = 0; n < maps.size(); ++n) {
                maps[n].assign(m.begin() + n * pixels, m.begin() + (n + 1) * pixels);
            }
        }
        for (std::size_t n = 0; n < maps.size(); ++n) {
            const auto& a = s.annotations[n];
            if (!a.grounded) continue;
            const auto pred = binarize(std::span<const double>(maps[n]), opts.threshold);
            const std::span<const std::uint8_t> truth(s.truth.row(n), pixels);
            per_sample[i].push_back({iou(pred, truth), a.category, a.plurality});
        }
    });
    std::vector<PhraseResult> out;
    for (auto& v : per_sample) out.insert(out.end(), v.begin(), v.end());
    return out;
}

EvalReport evaluate(const ModelParams<float>& params, std::span<const Sample> samples, const PredictOptions& opts,
                    const CurveConfig& curve) {
    const auto results = predict(params, samples, opts);
    return split_report(results, curve);
}

nlohmann::json to_json(const StepRecord& r) {
    return {
        {"step", r.step},
        {"epoch", r.epoch},
        {"lr", r.lr},
        {"loss_total", r.loss_total},
        {"loss_bce", r.loss_bce},
        {"loss_dice", r.loss_dice},
        {"per_round_losses", r.per_round},
    };
}

BatchGrad batch_gradient(const ModelParams<float>& params, std::span<const Sample* const> batch,
                         const LossConfig& loss) {
    if (batch.empty()) throw UsageError("batch_gradient: empty batch");
    struct Partial {
        std::vector<std::vector<float>> grads;
        LossBreakdown<float> loss;
    };
    std::vector<Partial> parts(batch.size());
    parallel_for_samples(batch.size(), [&](std::size_t i) {
        const Sample& s = *batch[i];
        auto local = cast_params<float, float>(params, true);
        const auto fwd = forward(visual_tensor(s), phrase_tensor(s), local);
        auto lb = total_loss<float>(fwd.responses, s.truth, loss);
        backward(lb.total);
        local.visit([&](const std::string&, const Tensor<float>& t) {
            const auto g = t.grad();
            if (g.empty()) {
                parts[i].grads.emplace_back(t.numel(), 0.0f);
            } else {
                parts[i].grads.emplace_back(g.begin(), g.end());
            }
        });
        parts[i].loss = std::move(lb);
    });

    BatchGrad out;
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.grads.resize(parts[0].grads.size());
    for (std::size_t k = 0; k < out.grads.size(); ++k) {
        std::vector<double> acc(parts[0].grads[k].size(), 0.0);
        for (const auto& p : parts) {
            for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += p.grads[k][e];
        }
        out.grads[k].resize(acc.size());
        for (std::size_t e = 0; e < acc.size(); ++e) out.grads[k][e] = static_cast<float>(acc[e] * inv);
    }
    out.per_round.assign(parts[0].loss.per_round.size(), 0.0);
    for (const auto& p : parts) {
        out.loss_total += p.loss.total.item() * inv;
        out.loss_bce += p.loss.bce * inv;
        out.loss_dice += p.loss.dice * inv;
        for (std::size_t r = 0; r < out.per_round.size(); ++r) out.per_round[r] += p.loss.per_round[r] * inv;
    }
    return out;
}

namespace {

double group_scale(const std::string& name, const std::map<std::string, double>& groups) {
    double scale = 1.0;
    std::size_t best = 0;
    for (const auto& [prefix, s] : groups) {
        if (name.rfind(prefix, 0) == 0 && prefix.size() >= best) {
            best = prefix.size();
            scale = s;
        }
    }
    return scale;
}

void clip_gradients(std::vector<std::vector<float>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (float x : g) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const float s = static_cast<float>(max_norm / norm);
    for (auto& g : grads) {
        for (auto& x : g) x *= s;
    }
}

class NdjsonWriter {
public:
    explicit NdjsonWriter(const std::optional<fs::path>& path) {
        if (!path) return;
        out_.open(*path, std::ios::trunc);
        if (!out_) throw FormatError("cannot open '" + path->string() + "' for writing");
    }
    void write(const nlohmann::json& j) {
        if (!out_.is_open()) return;
        out_ << j.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, std::span<const Sample> dataset, const TrainOutputs& out) {
    cfg.validate();
    if (dataset.empty()) throw UsageError("train: dataset is empty");
    for (const auto& s : dataset) check_sample(s, cfg.model);

    const int saved_threads = kernels::num_threads();
    kernels::set_num_threads(cfg.threads);
    struct Restore {
        int n;
        ~Restore() { kernels::set_num_threads(n); }
    } restore{saved_threads};

    std::optional<fs::path> metrics_path, epochs_path;
    if (out.dir) {
        fs::create_directories(*out.dir);
        metrics_path = *out.dir / "metrics.ndjson";
        epochs_path = *out.dir / "epochs.ndjson";
    }
    NdjsonWriter metrics(metrics_path);
    NdjsonWriter epochs_log(cfg.eval_each_epoch ? epochs_path : std::nullopt);

    TrainResult result{init_params<float>(cfg.model, cfg.seed), {}, {}, std::nullopt};
    auto& params = result.params;
    std::vector<std::string> names;
    params.visit([&](const std::string& name, const Tensor<float>&) { names.push_back(name); });

    AdamState<float> state;
    const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.adam_eps};
    CounterRng shuffle_rng(cfg.seed ^ 0x53485546464C4531ULL);
    std::vector<std::size_t> order(dataset.size());
    std::size_t step = 0;
    bool done = false;

    for (std::size_t epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        const double lr = lr_at(epoch, cfg);

        for (std::size_t b = 0; b < order.size() && !done; b += cfg.batch_size) {
            std::vector<const Sample*> batch;
            for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&dataset[order[i]]);
            try {
                auto bg = batch_gradient(params, batch, cfg.loss);
                if (!std::isfinite(bg.loss_total)) throw NumericError("train: loss became non-finite at step " + std::to_string(step + 1));
                if (cfg.grad_clip) clip_gradients(bg.grads, *cfg.grad_clip);

                std::vector<ParamSlot<float>> slots;
                std::size_t k = 0;
                params.visit([&](const std::string& name, Tensor<float>& t) {
                    slots.push_back({name, t.mutable_data(), bg.grads[k], lr * group_scale(name, cfg.group_lr)});
                    ++k;
                });
                adam_step<float>(slots, state, hyper);

                ++step;
                StepRecord rec{step, epoch, lr, bg.loss_total, bg.loss_bce, bg.loss_dice, bg.per_round};
                metrics.write(to_json(rec));
                result.steps.push_back(std::move(rec));
            } catch (const NumericError&) {
                if (out.dir) write_checkpoint(params, *out.dir / "last");
                throw;
            }
            if (cfg.max_steps && step >= cfg.max_steps) done = true;
        }

        if (cfg.eval_each_epoch) {
            const auto report = evaluate(params, dataset, {cfg.word_average, 0.5});
            const double ar = report.overall.ar.value_or(0.0);
            result.epoch_ar.push_back(ar);
            epochs_log.write({{"epoch", epoch}, {"step", step}, {"lr", lr}, {"ar", ar}});
            if (!result.best_ar || ar > *result.best_ar) {
                result.best_ar = ar;
                if (out.dir) write_checkpoint(params, *out.dir / "best");
            }
        }
    }
    if (out.dir) {
        write_checkpoint(params, *out.dir / "final");
        if (!cfg.eval_each_epoch) write_checkpoint(params, *out.dir / "best");
    }
    return result;
}

}  // namespace ppmn
