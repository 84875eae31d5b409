#include "ppmn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ppmn {

GradCheckReport finite_diff_check(const std::string& name, const ScalarFn& fn,
                                  std::vector<Tensor<double>> point, double eps, double tol,
                                  double floor) {
    for (auto& t : point) t.zero_grad();
    Tensor<double> loss = fn(point);
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(point.size());
    for (const auto& t : point) {
        auto g = t.grad();
        if (t.requires_grad()) {
            analytic.emplace_back(g.begin(), g.end());
            analytic.back().resize(t.numel(), 0.0);
        } else {
            analytic.emplace_back();
        }
    }

    double worst = 0.0;
    for (std::size_t k = 0; k < point.size(); ++k) {
        if (!point[k].requires_grad()) continue;
        auto data = point[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double up = fn(point).item();
            data[i] = saved - eps;
            const double down = fn(point).item();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    for (auto& t : point) t.zero_grad();
    return {name, worst, tol, worst <= tol};
}

}  // namespace ppmn
