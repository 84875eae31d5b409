#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ppmn/model.hpp"
#include "ppmn/tensor.hpp"

namespace ppmn {

struct GradCheckReport {
    std::string op_name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares reverse-mode gradients of `fn` at `point` against central
// differences (f(x + eps) - f(x - eps)) / 2eps for every element of every
// input that requires grad. Relative error uses max(|a|, |n|, floor) as the
// denominator. The inputs are restored before returning.
GradCheckReport finite_diff_check(const std::string& name, const ScalarFn& fn,
                                  std::vector<Tensor<double>> point, double eps = 1e-3,
                                  double tol = 1e-4, double floor = 1e-8);

struct GradSuiteOptions {
    std::uint64_t seed = 0;
    std::size_t points = 50;       // random points per op
    std::size_t model_points = 3;  // random points for the end-to-end check
    double eps = 1e-3;
    double model_eps = 1e-5;
    // A loss near 5 resolves differences of about ulp(5) / 2eps ~ 5e-11, so
    // the end-to-end check floors the denominator well above that.
    double model_floor = 1e-6;
    double tol = 1e-4;
};

// C=8, D=2, S=4, L=2; used on a 6x6 map with 3 phrases.
ModelConfig tiny_model_config();

// Every parameter of the model against the deep-supervised loss, at random
// parameter points (weights ~ N(0, 0.3^2), norm gains ~ 1 + N(0, 0.1^2)) on
// random features and masks. Reports the worst point.
GradCheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, std::size_t points, double eps,
                                double tol, double floor);

// One report per differentiable op (worst over `points` random draws), then
// the end-to-end model.
std::vector<GradCheckReport> gradcheck_suite(const GradSuiteOptions& opts = {});

}  // namespace ppmn
