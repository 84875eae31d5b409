#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ppmn/tensor.hpp"

namespace ppmn {

// Integer index tensor produced by the pooling ops (rows x cols).
struct IndexTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint32_t> values;

    std::uint32_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

enum class Activation { sigmoid, relu };

inline constexpr double kNormEpsilon = 1e-5;

// Differentiable ops. All of them validate shapes and throw DimensionError
// (or ConfigError for bad hyperparameters) before touching data.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// a * b^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return activation(x, Activation::sigmoid);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return activation(x, Activation::relu);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(kNormEpsilon));

// x holds spatial positions along all leading axes and C channels on the
// last one (H x W x C or P x C). Statistics are per group over every
// position and the group's C/groups channels.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(kNormEpsilon));

// Contiguous-bin argmax over each row of h (N x P); rows strictly increasing.
template <typename T>
IndexTensor binned_max_indices(const Tensor<T>& h, std::size_t s);

// Global top-s per row, returned in ascending pixel order.
template <typename T>
IndexTensor topk_indices(const Tensor<T>& h, std::size_t s);

// f: P x C, idx: N x S  ->  N x S x C.
template <typename T>
Tensor<T> gather_pixels(const Tensor<T>& f, const IndexTensor& idx);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
    std::vector<Tensor<T>> v(parts);
    return concat<T>(std::span<const Tensor<T>>(v), axis);
}

// Slice [start, start + length) of `axis`.
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);

// x[..., in] * w[in, out] (+ b[out]); leading axes are treated as rows.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b = std::nullopt);

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return linear(x, w, std::optional<Tensor<T>>(b));
}

// q: N x c, k: N x S x c  ->  N x S, out[n, s] = <q[n], k[n, s]>.
template <typename T>
Tensor<T> batched_dot(const Tensor<T>& q, const Tensor<T>& k);

// w: N x S, v: N x S x c  ->  N x c, out[n] = sum_s w[n, s] v[n, s].
template <typename T>
Tensor<T> batched_combine(const Tensor<T>& w, const Tensor<T>& v);

}  // namespace ppmn
