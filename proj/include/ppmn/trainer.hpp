#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ppmn/evaluation.hpp"
#include "ppmn/model.hpp"
#include "ppmn/objectives.hpp"
#include "ppmn/scene.hpp"

namespace ppmn {

// Step schedule: lr * factor^k where k counts the boundaries start,
// start + every, start + 2*every, ... that are <= epoch. A nonempty
// `table` overrides it (entry e-1 is the lr of epoch e; the last entry
// repeats).
struct LrDecay {
    std::size_t start = 10;
    std::size_t every = 2;
    double factor = 0.5;
    std::vector<double> table;
};

struct TrainConfig {
    double lr = 1e-4;
    LrDecay lr_decay;
    std::size_t epochs = 14;
    std::size_t batch_size = 12;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::optional<double> grad_clip;  // global L2 norm; off by default
    std::size_t max_steps = 0;        // 0: run all epochs
    // Parameter-name prefix -> multiplier on the scheduled lr. The longest
    // matching prefix wins.
    std::map<std::string, double> group_lr;
    int threads = 1;
    bool eval_each_epoch = true;
    bool word_average = false;
    ModelConfig model;
    LossConfig loss;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t step = 0;
};

template <typename T>
struct ParamSlot {
    std::string name;
    std::span<T> value;
    std::span<const T> grad;
    double lr = 0.0;
};

// One bias-corrected Adam update over all slots. Gradients are checked
// before anything is written, so a NumericError leaves params and state
// untouched. Moment buffers are created on the first call.
template <typename T>
void adam_step(std::span<const ParamSlot<T>> slots, AdamState<T>& state, const AdamHyper& hyper);

struct PredictOptions {
    bool word_average = false;  // score each phrase by the mean of its word maps
    double threshold = 0.5;
};

// IoU of every grounded phrase against its (instance-union) mask, using
// the final response map.
std::vector<PhraseResult> predict(const ModelParams<float>& params, std::span<const Sample> samples,
                                  const PredictOptions& opts = {});
EvalReport evaluate(const ModelParams<float>& params, std::span<const Sample> samples,
                    const PredictOptions& opts = {}, const CurveConfig& curve = {});

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_bce = 0.0;
    double loss_dice = 0.0;
    std::vector<double> per_round;
};

nlohmann::json to_json(const StepRecord& r);

struct TrainResult {
    ModelParams<float> params;
    std::vector<StepRecord> steps;
    std::vector<double> epoch_ar;  // training-set AR after each epoch, when enabled
    std::optional<double> best_ar;
};

struct TrainOutputs {
    std::optional<std::filesystem::path> dir;  // metrics.ndjson, epochs.ndjson, final/, best/, last/
};

// Runs the full optimisation. On a numeric failure the parameters from
// before the failing step are written to `dir/last` and the error is
// rethrown.
TrainResult train(const TrainConfig& cfg, std::span<const Sample> dataset, const TrainOutputs& out = {});

// Mean loss gradient of a batch, reduced in sample order. Exposed for tests.
struct BatchGrad {
    std::vector<std::vector<float>> grads;  // in ModelParams::visit order
    double loss_total = 0.0;
    double loss_bce = 0.0;
    double loss_dice = 0.0;
    std::vector<double> per_round;
};

BatchGrad batch_gradient(const ModelParams<float>& params, std::span<const Sample* const> batch,
                         const LossConfig& loss);

}  // namespace ppmn
