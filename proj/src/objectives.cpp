#include "ppmn/objectives.hpp"

#include <cmath>

#include "ppmn/ops.hpp"

namespace ppmn {

void LossConfig::validate() const {
    if (bce_weight < 0 || dice_weight < 0) throw ConfigError("loss weights must be non-negative");
    if (dice_eps < 0) throw ConfigError("dice_eps must be non-negative");
}

namespace {

template <typename T>
void check_shapes(const Tensor<T>& m, const GroundTruth& y, const char* op) {
    if (!m.defined() || m.rank() < 2 || m.dim(0) != y.phrases || m.numel() != y.phrases * y.pixels()) {
        throw DimensionError(std::string(op) + ": response maps " + (m.defined() ? shape_str(m.shape()) : "undefined") +
                             " do not match ground truth " + std::to_string(y.phrases) + "x" +
                             std::to_string(y.height) + "x" + std::to_string(y.width));
    }
    if (y.valid.size() != y.phrases) throw DimensionError(std::string(op) + ": validity flags missing");
}

template <typename T>
Tensor<T> zero_loss(const Tensor<T>& m, const char* op) {
    return Tensor<T>::make_result({1}, {T(0)}, op, {m}, [](const Node<T>&) {});
}

}  // namespace

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& m, const GroundTruth& y) {
    check_shapes(m, y, "bce_loss");
    const std::size_t valid = y.valid_count();
    if (valid == 0) return zero_loss(m, "bce_loss");
    const std::size_t p = y.pixels();
    const double count = static_cast<double>(valid * p);
    auto mv = m.data();
    double acc = 0.0;
    for (std::size_t n = 0; n < y.phrases; ++n) {
        if (!y.valid[n]) continue;
        const auto* yr = y.row(n);
        for (std::size_t i = 0; i < p; ++i) {
            const double v = mv[n * p + i];
            acc += yr[i] ? std::log(v) : std::log1p(-v);
        }
    }
    const T value = static_cast<T>(-acc / count);
    return Tensor<T>::make_result({1}, {value}, "bce_loss", {m}, [y, p, count](const Node<T>& self) {
        const auto& parent = self.parents[0];
        if (!parent->requires_grad) return;
        const T up = self.grad[0];
        const T inv = static_cast<T>(1.0 / count);
        for (std::size_t n = 0; n < y.phrases; ++n) {
            if (!y.valid[n]) continue;
            const auto* yr = y.row(n);
            for (std::size_t i = 0; i < p; ++i) {
                const T v = parent->value[n * p + i];
                const T d = yr[i] ? -T(1) / v : T(1) / (T(1) - v);
                parent->grad[n * p + i] += up * inv * d;
            }
        }
    });
}

template <typename T>
T multilabel_view_loss(const Tensor<T>& m, const GroundTruth& y) {
    check_shapes(m, y, "multilabel_view_loss");
    const std::size_t valid = y.valid_count();
    if (valid == 0) return T(0);
    const std::size_t p = y.pixels();
    auto mv = m.data();
    double outer = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        double per_pixel = 0.0;
        for (std::size_t n = 0; n < y.phrases; ++n) {
            if (!y.valid[n]) continue;
            const double v = mv[n * p + i];
            const double label = y.masks[n * p + i];
            per_pixel += label * std::log(v) + (1.0 - label) * std::log(1.0 - v);
        }
        outer += per_pixel / static_cast<double>(valid);
    }
    return static_cast<T>(-outer / static_cast<double>(p));
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& m, const GroundTruth& y, double eps) {
    check_shapes(m, y, "dice_loss");
    const std::size_t valid = y.valid_count();
    if (valid == 0) return zero_loss(m, "dice_loss");
    const std::size_t p = y.pixels();
    auto mv = m.data();
    std::vector<double> num(y.phrases, 0.0), den(y.phrases, 0.0);
    double acc = 0.0;
    for (std::size_t n = 0; n < y.phrases; ++n) {
        if (!y.valid[n]) continue;
        const auto* yr = y.row(n);
        double inter = 0.0, sm = 0.0, sy = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const double v = mv[n * p + i];
            inter += v * yr[i];
            sm += v;
            sy += yr[i];
        }
        num[n] = 2.0 * inter + eps;
        den[n] = sm + sy + eps;
        acc += 1.0 - num[n] / den[n];
    }
    const T value = static_cast<T>(acc / static_cast<double>(valid));
    return Tensor<T>::make_result(
        {1}, {value}, "dice_loss", {m},
        [y, p, valid, num = std::move(num), den = std::move(den)](const Node<T>& self) {
            const auto& parent = self.parents[0];
            if (!parent->requires_grad) return;
            const double up = static_cast<double>(self.grad[0]) / static_cast<double>(valid);
            for (std::size_t n = 0; n < y.phrases; ++n) {
                if (!y.valid[n]) continue;
                const auto* yr = y.row(n);
                const double base = num[n] / (den[n] * den[n]);
                for (std::size_t i = 0; i < p; ++i) {
                    const double d = base - 2.0 * yr[i] / den[n];
                    parent->grad[n * p + i] += static_cast<T>(up * d);
                }
            }
        });
}

template <typename T>
Tensor<T> ppm_loss(const Tensor<T>& m, const GroundTruth& y, const LossConfig& cfg) {
    return add(scale(bce_loss(m, y), static_cast<T>(cfg.bce_weight)),
               scale(dice_loss(m, y, cfg.dice_eps), static_cast<T>(cfg.dice_weight)));
}

template <typename T>
LossBreakdown<T> total_loss(std::span<const Tensor<T>> maps, const GroundTruth& y, const LossConfig& cfg) {
    if (maps.empty()) throw UsageError("total_loss: no response maps");
    cfg.validate();
    std::size_t supervised = maps.size();
    if (cfg.supervise == SupervisionPolicy::skip_final && maps.size() > 1) supervised = maps.size() - 1;

    LossBreakdown<T> out;
    for (std::size_t l = 0; l < supervised; ++l) {
        auto b = bce_loss(maps[l], y);
        auto d = dice_loss(maps[l], y, cfg.dice_eps);
        auto ppm = add(scale(b, static_cast<T>(cfg.bce_weight)), scale(d, static_cast<T>(cfg.dice_weight)));
        out.bce += b.item();
        out.dice += d.item();
        out.per_round.push_back(ppm.item());
        out.total = out.total.defined() ? add(out.total, ppm) : ppm;
    }
    return out;
}

#define PPMN_OBJECTIVES_INSTANTIATE(T)                                                      \
    template Tensor<T> bce_loss<T>(const Tensor<T>&, const GroundTruth&);                   \
    template T multilabel_view_loss<T>(const Tensor<T>&, const GroundTruth&);               \
    template Tensor<T> dice_loss<T>(const Tensor<T>&, const GroundTruth&, double);          \
    template Tensor<T> ppm_loss<T>(const Tensor<T>&, const GroundTruth&, const LossConfig&); \
    template LossBreakdown<T> total_loss<T>(std::span<const Tensor<T>>, const GroundTruth&, const LossConfig&);

PPMN_OBJECTIVES_INSTANTIATE(float)
PPMN_OBJECTIVES_INSTANTIATE(double)

#undef PPMN_OBJECTIVES_INSTANTIATE

}  // namespace ppmn
