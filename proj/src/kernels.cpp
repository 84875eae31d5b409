#include "ppmn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <string_view>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ppmn::kernels {

namespace {

template <typename T>
inline T sigmoid_scalar(T x) {
    // Stable on both tails; results are clamped into the open interval so
    // log(m) and log(1 - m) stay finite downstream.
    T s;
    if (x >= T(0)) {
        s = T(1) / (T(1) + std::exp(-x));
    } else {
        T e = std::exp(x);
        s = e / (T(1) + e);
    }
    constexpr T lo = std::numeric_limits<T>::min();
    const T hi = std::nextafter(T(1), T(0));
    if (s < lo) s = lo;
    if (s > hi) s = hi;
    return s;
}

template <typename T>
inline T a_at(const GemmShape& g, const T* a, std::size_t i, std::size_t p) {
    return g.trans_a ? a[p * g.m + i] : a[i * g.k + p];
}

template <typename T>
inline T b_at(const GemmShape& g, const T* b, std::size_t p, std::size_t j) {
    return g.trans_b ? b[j * g.k + p] : b[p * g.n + j];
}

}  // namespace

namespace serial {

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < g.m; ++i) {
        for (std::size_t j = 0; j < g.n; ++j) {
            T s = T(0);
            for (std::size_t p = 0; p < g.k; ++p) s += a_at(g, a, i, p) * b_at(g, b, p, j);
            c[i * g.n + j] = g.accumulate ? c[i * g.n + j] + s : s;
        }
    }
}

template <typename T>
void sigmoid(std::span<const T> x, std::span<T> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
}

template <typename T>
void gather_rows(const T* src, std::size_t cols, std::span<const std::uint32_t> idx, T* out) {
    for (std::size_t r = 0; r < idx.size(); ++r) {
        std::memcpy(out + r * cols, src + static_cast<std::size_t>(idx[r]) * cols, cols * sizeof(T));
    }
}

template <typename T>
void scatter_add_rows(const T* grad, std::size_t cols, std::span<const std::uint32_t> idx, T* dst) {
    for (std::size_t r = 0; r < idx.size(); ++r) {
        T* row = dst + static_cast<std::size_t>(idx[r]) * cols;
        for (std::size_t c = 0; c < cols; ++c) row[c] += grad[r * cols + c];
    }
}

template <typename T>
void binned_argmax(const T* h, std::size_t rows, std::size_t cols, std::size_t bins, std::uint32_t* out) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = h + r * cols;
        for (std::size_t b = 0; b < bins; ++b) {
            std::size_t lo = b * cols / bins;
            std::size_t hi = (b + 1) * cols / bins;
            std::size_t best = lo;
            for (std::size_t i = lo + 1; i < hi; ++i) {
                if (row[i] > row[best]) best = i;
            }
            out[r * bins + b] = static_cast<std::uint32_t>(best);
        }
    }
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(const GemmShape& g, const T* a, const T* b, T* c) {
    // Pack op(a) row-major and op(b) column-major so the inner loop is
    // contiguous. Summation order matches serial::gemm.
    std::vector<T> pa;
    const T* arow = a;
    if (g.trans_a) {
        pa.resize(g.m * g.k);
        for (std::size_t p = 0; p < g.k; ++p)
            for (std::size_t i = 0; i < g.m; ++i) pa[i * g.k + p] = a[p * g.m + i];
        arow = pa.data();
    }
    std::vector<T> pb;
    const T* bcol = b;
    if (!g.trans_b) {
        pb.resize(g.k * g.n);
        for (std::size_t p = 0; p < g.k; ++p)
            for (std::size_t j = 0; j < g.n; ++j) pb[j * g.k + p] = b[p * g.n + j];
        bcol = pb.data();
    }
    const auto m = static_cast<std::ptrdiff_t>(g.m);
#pragma omp parallel for schedule(static) if (g.m * g.n * g.k > 32768)
    for (std::ptrdiff_t ii = 0; ii < m; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const T* ar = arow + i * g.k;
        for (std::size_t j = 0; j < g.n; ++j) {
            const T* bc = bcol + j * g.k;
            T s = T(0);
            for (std::size_t p = 0; p < g.k; ++p) s += ar[p] * bc[p];
            c[i * g.n + j] = g.accumulate ? c[i * g.n + j] + s : s;
        }
    }
}

template <typename T>
void sigmoid(std::span<const T> x, std::span<T> y) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::ptrdiff_t i = 0; i < n; ++i) y[i] = sigmoid_scalar(x[i]);
}

template <typename T>
void gather_rows(const T* src, std::size_t cols, std::span<const std::uint32_t> idx, T* out) {
    const auto n = static_cast<std::ptrdiff_t>(idx.size());
#pragma omp parallel for schedule(static) if (n * static_cast<std::ptrdiff_t>(cols) > 65536)
    for (std::ptrdiff_t r = 0; r < n; ++r) {
        std::memcpy(out + r * cols, src + static_cast<std::size_t>(idx[r]) * cols, cols * sizeof(T));
    }
}

template <typename T>
void scatter_add_rows(const T* grad, std::size_t cols, std::span<const std::uint32_t> idx, T* dst) {
    // Threads own disjoint column blocks; within a block rows are added in
    // order, so every element sees the serial summation order.
    constexpr std::size_t kBlock = 64;
    const auto blocks = static_cast<std::ptrdiff_t>((cols + kBlock - 1) / kBlock);
#pragma omp parallel for schedule(static) if (idx.size() * cols > 65536 && blocks > 1)
    for (std::ptrdiff_t b = 0; b < blocks; ++b) {
        const std::size_t c0 = static_cast<std::size_t>(b) * kBlock;
        const std::size_t c1 = std::min(cols, c0 + kBlock);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            T* d = dst + static_cast<std::size_t>(idx[r]) * cols;
            const T* g = grad + r * cols;
            for (std::size_t c = c0; c < c1; ++c) d[c] += g[c];
        }
    }}

template <typename T>
void binned_argmax(const T* h, std::size_t rows, std::size_t cols, std::size_t bins, std::uint32_t* out) {
    const auto nr = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > 65536)
    for (std::ptrdiff_t rr = 0; rr < nr; ++rr) {
        serial::binned_argmax(h + rr * cols, 1, cols, bins, out + rr * bins);
    }
}

}  // namespace parallel

void set_num_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool deterministic_env() {
    const char* v = std::getenv("PPG_DETERMINISTIC");
    return v != nullptr && std::string_view(v) == "1";
}

#define PPMN_KERNELS_INSTANTIATE(NS, T)                                                          \
    template void NS::gemm<T>(const GemmShape&, const T*, const T*, T*);                         \
    template void NS::sigmoid<T>(std::span<const T>, std::span<T>);                              \
    template void NS::gather_rows<T>(const T*, std::size_t, std::span<const std::uint32_t>, T*); \
    template void NS::scatter_add_rows<T>(const T*, std::size_t, std::span<const std::uint32_t>, T*); \
    template void NS::binned_argmax<T>(const T*, std::size_t, std::size_t, std::size_t, std::uint32_t*);

PPMN_KERNELS_INSTANTIATE(serial, float)
PPMN_KERNELS_INSTANTIATE(serial, double)
PPMN_KERNELS_INSTANTIATE(parallel, float)
PPMN_KERNELS_INSTANTIATE(parallel, double)

#undef PPMN_KERNELS_INSTANTIATE

}  // namespace ppmn::kernels
