#pragma once

// Data-parallel inner loops. Every kernel exists twice: `serial` is the
// reference used by tests and benchmarks, `parallel` is the OpenMP version
// the differentiable ops call. Each output element is reduced by a single
// thread in ascending index order, so both versions agree bitwise and the
// parallel result does not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <span>

namespace ppmn::kernels {

// c (+)= op(a) * op(b) with op(a): m x k, op(b): k x n, all row-major.
// trans_a means `a` is stored k x m; trans_b means `b` is stored n x k.
struct GemmShape {
    std::size_t m = 0;
    std::size_t k = 0;
    std::size_t n = 0;
    bool trans_a = false;
    bool trans_b = false;
    bool accumulate = false;
};

namespace serial {

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c);

template <typename T>
void sigmoid(std::span<const T> x, std::span<T> y);

// out[r, :] = src[idx[r], :] for r over idx.size().
template <typename T>
void gather_rows(const T* src, std::size_t cols, std::span<const std::uint32_t> idx, T* out);

// dst[idx[r], :] += grad[r, :].
template <typename T>
void scatter_add_rows(const T* grad, std::size_t cols, std::span<const std::uint32_t> idx, T* dst);

// Argmax of each contiguous bin of each row; bin b covers
// [floor(b*cols/bins), floor((b+1)*cols/bins)). Ties go to the lowest index.
template <typename T>
void binned_argmax(const T* h, std::size_t rows, std::size_t cols, std::size_t bins, std::uint32_t* out);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c);

template <typename T>
void sigmoid(std::span<const T> x, std::span<T> y);

template <typename T>
void gather_rows(const T* src, std::size_t cols, std::span<const std::uint32_t> idx, T* out);

template <typename T>
void scatter_add_rows(const T* grad, std::size_t cols, std::span<const std::uint32_t> idx, T* dst);

template <typename T>
void binned_argmax(const T* h, std::size_t rows, std::size_t cols, std::size_t bins, std::uint32_t* out);

}  // namespace parallel

// Threads used by the parallel kernels and the per-sample training loop.
void set_num_threads(int threads);
int num_threads();

// True when PPG_DETERMINISTIC=1 is set in the environment.
bool deterministic_env();

}  // namespace ppmn::kernels
