#pragma once

#include <span>
#include <vector>

#include "ppmn/ground_truth.hpp"
#include "ppmn/tensor.hpp"

namespace ppmn {

// Which response maps of a forward pass receive the loss.
enum class SupervisionPolicy {
    all_rounds,     // M^0 .. M^L
    skip_final,  // M^0 .. M^{L-1}; a single map is still supervised
};

struct LossConfig {
    double bce_weight = 1.0;
    double dice_weight = 1.0;
    double dice_eps = 1e-6;
    SupervisionPolicy supervise = SupervisionPolicy::all_rounds;

    void validate() const;
};

// Mean binary cross-entropy over grounded phrases and all their pixels.
// `m` is N x H x W (or N x P) with values strictly inside (0, 1). Returns 0
// when no phrase is grounded.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& m, const GroundTruth& y);

// Per-pixel multi-label view of the same quantity: the mean over pixels of
// the mean BCE across grounded phrases. Value only.
template <typename T>
T multilabel_view_loss(const Tensor<T>& m, const GroundTruth& y);

// Mean over grounded phrases of 1 - (2 sum(m y) + eps) / (sum(m) + sum(y) + eps).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& m, const GroundTruth& y, double eps = 1e-6);

template <typename T>
Tensor<T> ppm_loss(const Tensor<T>& m, const GroundTruth& y, const LossConfig& cfg);

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double bce = 0.0;   // summed over supervised maps
    double dice = 0.0;  // summed over supervised maps
    std::vector<double> per_round;  // ppm loss of each supervised map
};

// Deep supervision: sum of ppm_loss over the maps selected by cfg.supervise.
template <typename T>
LossBreakdown<T> total_loss(std::span<const Tensor<T>> maps, const GroundTruth& y, const LossConfig& cfg);

}  // namespace ppmn
