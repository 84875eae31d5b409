#include <algorithm>
#include <cmath>

#include "ppmn/gradcheck.hpp"
#include "ppmn/model.hpp"
#include "ppmn/objectives.hpp"
#include "ppmn/ops.hpp"
#include "ppmn/rng.hpp"

namespace ppmn {

namespace {

using T = Tensor<double>;
using Inputs = std::vector<T>;

T normal(CounterRng& rng, Shape shape, bool rg = true) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.normal();
    return T::from(std::move(shape), std::move(v), rg);
}

// Values in [0.1, 2] with random sign: keeps relu inputs away from the kink.
T off_kink(CounterRng& rng, Shape shape) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.1, 2.0);
    return T::from(std::move(shape), std::move(v), true);
}

// Rows of a shuffled ramp plus noise, so every normalised group has a
// variance well above zero.
T spread_rows(CounterRng& rng, std::size_t rows, std::size_t c) {
    std::vector<double> v(rows * c);
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = v.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) row[j] = -1.5 + 3.0 * static_cast<double>(j) / static_cast<double>(c - 1);
        for (std::size_t j = c; j > 1; --j) std::swap(row[j - 1], row[rng.below(j)]);
        for (std::size_t j = 0; j < c; ++j) row[j] += 0.3 * rng.normal();
    }
    return T::from({rows, c}, std::move(v), true);
}

// Kept away from 0 and 1, where 1/m curvature swamps central differences.
T probabilities(CounterRng& rng, Shape shape) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(0.2, 0.8);
    return T::from(std::move(shape), std::move(v), true);
}

// Contracts an arbitrary output with fixed random weights so every output
// element contributes a distinct gradient.
T contract(const T& out, std::uint64_t seed) {
    CounterRng rng(seed);
    return sum(mul(out, normal(rng, out.shape(), false)));
}

GroundTruth random_truth(CounterRng& rng, std::size_t n, std::size_t h, std::size_t w) {
    GroundTruth y;
    y.phrases = n;
    y.height = h;
    y.width = w;
    y.masks.resize(n * h * w);
    for (auto& m : y.masks) m = static_cast<std::uint8_t>(rng.below(2));
    for (std::size_t i = 0; i < n; ++i) {
        y.valid.push_back(i + 1 < n || rng.below(2));
        if (!y.valid.back()) std::fill_n(y.masks.begin() + i * h * w, h * w, std::uint8_t{0});
        y.category.push_back(rng.below(2) ? Category::thing : Category::stuff);
        y.plurality.push_back(rng.below(2) ? Plurality::plural : Plurality::singular);
    }
    return y;
}

struct OpCase {
    std::string name;
    std::function<Inputs(CounterRng&)> make;
    std::function<ScalarFn(CounterRng&)> fn;  // built per point (may capture fixed data)
};

std::vector<OpCase> op_cases() {
    const auto plain = [](auto body) {
        return [body](CounterRng& rng) -> ScalarFn {
            const std::uint64_t w = rng.next_u64();
            return [body, w](const Inputs& x) { return contract(body(x), w); };
        };
    };
    std::vector<OpCase> cases;
    cases.push_back({"matmul", [](CounterRng& r) { return Inputs{normal(r, {3, 4}), normal(r, {4, 2})}; },
                     plain([](const Inputs& x) { return matmul(x[0], x[1]); })});
    cases.push_back({"matmul_nt", [](CounterRng& r) { return Inputs{normal(r, {3, 4}), normal(r, {2, 4})}; },
                     plain([](const Inputs& x) { return matmul_nt(x[0], x[1]); })});
    cases.push_back({"transpose", [](CounterRng& r) { return Inputs{normal(r, {3, 4})}; },
                     plain([](const Inputs& x) { return transpose(x[0]); })});
    cases.push_back({"reshape", [](CounterRng& r) { return Inputs{normal(r, {2, 6})}; },
                     plain([](const Inputs& x) { return reshape(x[0], {3, 4}); })});
    cases.push_back({"add", [](CounterRng& r) { return Inputs{normal(r, {3, 4}), normal(r, {3, 4})}; },
                     plain([](const Inputs& x) { return add(x[0], x[1]); })});
    cases.push_back({"mul", [](CounterRng& r) { return Inputs{normal(r, {3, 4}), normal(r, {3, 4})}; },
                     plain([](const Inputs& x) { return mul(x[0], x[1]); })});
    cases.push_back({"scale", [](CounterRng& r) { return Inputs{normal(r, {3, 4})}; },
                     plain([](const Inputs& x) { return scale(x[0], -1.7); })});
    cases.push_back({"sum", [](CounterRng& r) { return Inputs{normal(r, {3, 4})}; },
                     [](CounterRng&) -> ScalarFn { return [](const Inputs& x) { return scale(sum(mul(x[0], x[0])), 0.5); }; }});
    cases.push_back({"sigmoid", [](CounterRng& r) { return Inputs{normal(r, {3, 4})}; },
                     plain([](const Inputs& x) { return sigmoid(x[0]); })});
    cases.push_back({"relu", [](CounterRng& r) { return Inputs{off_kink(r, {3, 4})}; },
                     plain([](const Inputs& x) { return relu(x[0]); })});
    cases.push_back({"softmax", [](CounterRng& r) { return Inputs{normal(r, {3, 5})}; },
                     plain([](const Inputs& x) { return softmax(x[0], 1); })});
    cases.push_back({"softmax_axis0", [](CounterRng& r) { return Inputs{normal(r, {4, 2, 3})}; },
                     plain([](const Inputs& x) { return softmax(x[0], 0); })});
    cases.push_back({"layer_norm",
                     [](CounterRng& r) { return Inputs{spread_rows(r, 3, 6), normal(r, {6}), normal(r, {6})}; },
                     plain([](const Inputs& x) { return layer_norm(x[0], x[1], x[2]); })});
    cases.push_back({"group_norm",
                     [](CounterRng& r) { return Inputs{transpose(spread_rows(r, 6, 5)).detach(true), normal(r, {6}), normal(r, {6})}; },
                     plain([](const Inputs& x) { return group_norm(x[0], 3, x[1], x[2]); })});
    cases.push_back({"gather_pixels", [](CounterRng& r) { return Inputs{normal(r, {6, 4})}; },
                     [](CounterRng& rng) -> ScalarFn {
                         IndexTensor idx{2, 3, {}};
                         for (int i = 0; i < 6; ++i) idx.values.push_back(static_cast<std::uint32_t>(rng.below(6)));
                         const std::uint64_t w = rng.next_u64();
                         return [idx, w](const Inputs& x) { return contract(gather_pixels(x[0], idx), w); };
                     }});
    cases.push_back({"concat", [](CounterRng& r) { return Inputs{normal(r, {2, 3}), normal(r, {2, 2})}; },
                     plain([](const Inputs& x) { return concat({x[0], x[1]}, 1); })});
    cases.push_back({"narrow", [](CounterRng& r) { return Inputs{normal(r, {3, 6})}; },
                     plain([](const Inputs& x) { return narrow(x[0], 1, 2, 3); })});
    cases.push_back({"linear",
                     [](CounterRng& r) { return Inputs{normal(r, {2, 3, 4}), normal(r, {4, 5}), normal(r, {5})}; },
                     plain([](const Inputs& x) { return linear(x[0], x[1], x[2]); })});
    cases.push_back({"batched_dot", [](CounterRng& r) { return Inputs{normal(r, {2, 3}), normal(r, {2, 4, 3})}; },
                     plain([](const Inputs& x) { return batched_dot(x[0], x[1]); })});
    cases.push_back({"batched_combine",
                     [](CounterRng& r) { return Inputs{normal(r, {2, 4}), normal(r, {2, 4, 3})}; },
                     plain([](const Inputs& x) { return batched_combine(x[0], x[1]); })});

    const auto loss_case = [](std::string name, auto loss) {
        return OpCase{std::move(name), [](CounterRng& r) { return Inputs{probabilities(r, {3, 4, 4})}; },
                      [loss](CounterRng& rng) -> ScalarFn {
                          auto y = random_truth(rng, 3, 4, 4);
                          return [loss, y](const Inputs& x) { return loss(x[0], y); };
                      }};
    };
    cases.push_back(loss_case("bce_loss", [](const T& m, const GroundTruth& y) { return bce_loss(m, y); }));
    cases.push_back(loss_case("dice_loss", [](const T& m, const GroundTruth& y) { return dice_loss(m, y); }));
    cases.push_back(loss_case("ppm_loss", [](const T& m, const GroundTruth& y) { return ppm_loss(m, y, LossConfig{}); }));
    return cases;
}

}  // namespace

ModelConfig tiny_model_config() {
    ModelConfig c;
    c.visual_dim = 8;
    c.phrase_dim = 8;
    c.joint_dim = 8;
    c.heads = 2;
    c.compatible_pixels = 4;
    c.rounds = 2;
    c.norm_groups = 2;
    return c;
}

GradCheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, std::size_t points, double eps,
                                double tol, double floor) {
    constexpr std::size_t kH = 6, kW = 6, kN = 3;
    GradCheckReport worst{"end_to_end_model", 0.0, tol, true};
    for (std::size_t p = 0; p < points; ++p) {
        CounterRng rng(CounterRng::mix(seed + 0x4D4F44454CULL + p));
        auto params = init_params<double>(config, rng.next_u64());
        params.visit([&](const std::string& name, T& t) {
            const bool gain = name.ends_with("gamma");
            for (auto& x : t.mutable_data()) x = gain ? 1.0 + 0.1 * rng.normal() : 0.3 * rng.normal();
        });
        auto visual = normal(rng, {kH, kW, config.visual_dim}, false);
        auto phrases = normal(rng, {kN, config.phrase_dim}, false);
        auto y = random_truth(rng, kN, kH, kW);
        Inputs point;
        params.visit([&](const std::string&, const T& t) { point.push_back(t); });
        const ModelConfig cfg = config;
        ScalarFn fn = [cfg, visual, phrases, y](const Inputs& x) {
            auto local = init_params<double>(cfg, 0);
            std::size_t k = 0;
            local.visit([&](const std::string&, T& t) { t = x[k++]; });
            auto fwd = forward(visual, phrases, local);
            return total_loss<double>(fwd.responses, y, LossConfig{}).total;
        };
        auto r = finite_diff_check("end_to_end_model", fn, point, eps, tol, floor);
        worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
        worst.passed = worst.passed && r.passed;
    }
    return worst;
}

std::vector<GradCheckReport> gradcheck_suite(const GradSuiteOptions& opts) {
    std::vector<GradCheckReport> reports;
    auto cases = op_cases();
    for (std::size_t c = 0; c < cases.size(); ++c) {
        GradCheckReport worst{cases[c].name, 0.0, opts.tol, true};
        for (std::size_t p = 0; p < opts.points; ++p) {
            CounterRng rng(CounterRng::mix(opts.seed + 1000003ULL * (c + 1) + p));
            auto point = cases[c].make(rng);
            auto fn = cases[c].fn(rng);
            auto r = finite_diff_check(cases[c].name, fn, point, opts.eps, opts.tol);
            worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
            worst.passed = worst.passed && r.passed;
        }
        reports.push_back(worst);
    }
    if (opts.model_points > 0) {
        reports.push_back(gradcheck_model(tiny_model_config(), opts.seed, opts.model_points, opts.model_eps, opts.tol,
                                          opts.model_floor));
    }
    return reports;
}

}  // namespace ppmn
