#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "ppmn/ground_truth.hpp"
#include "ppmn/rng.hpp"
#include "ppmn/tensor.hpp"

namespace ppmn::test {

template <typename T = float>
Tensor<T> tensor(Shape shape, std::vector<T> data, bool rg = false) {
    return Tensor<T>::from(std::move(shape), std::move(data), rg);
}

template <typename T = float>
Tensor<T> random_tensor(CounterRng& rng, Shape shape, bool rg = false, double sigma = 1.0) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(sigma * rng.normal());
    return Tensor<T>::from(std::move(shape), std::move(v), rg);
}

// Random masks and tags; each phrase is grounded with probability
// `grounded`, and ungrounded rows are zero.
inline GroundTruth random_truth(CounterRng& rng, std::size_t n, std::size_t h, std::size_t w,
                                double grounded = 0.8) {
    GroundTruth y;
    y.phrases = n;
    y.height = h;
    y.width = w;
    y.masks.assign(n * h * w, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const bool valid = rng.uniform() < grounded;
        y.valid.push_back(valid);
        y.category.push_back(rng.below(2) ? Category::thing : Category::stuff);
        y.plurality.push_back(rng.below(2) ? Plurality::plural : Plurality::singular);
        if (!valid) continue;
        for (std::size_t k = 0; k < h * w; ++k) y.masks[i * h * w + k] = static_cast<std::uint8_t>(rng.below(2));
    }
    return y;
}

// Response-map values drawn uniformly from [lo, hi].
template <typename T = double>
Tensor<T> random_maps(CounterRng& rng, Shape shape, double lo = 0.01, double hi = 0.99, bool rg = false) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from(std::move(shape), std::move(v), rg);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ppmn_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace ppmn::test
