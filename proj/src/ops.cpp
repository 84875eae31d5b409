#include "ppmn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ppmn/kernels.hpp"

namespace ppmn {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

// Grad buffer of parent i, or nullptr when that parent is not tracked.
template <typename T>
T* parent_grad(const Node<T>& n, std::size_t i) {
    const auto& p = n.parents[i];
    return p->requires_grad ? p->grad.data() : nullptr;
}

template <typename T>
const T* parent_value(const Node<T>& n, std::size_t i) {
    return n.parents[i]->value.data();
}

void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* op) {
    require(t.defined() && t.rank() == r,
            std::string(op) + ": expected rank " + std::to_string(r) + " tensor, got " +
                (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit a;
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    a.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, "matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(m * n);
    kernels::parallel::gemm<T>({m, k, n, false, false, false}, a.data().data(), b.data().data(), out.data());
    return Tensor<T>::make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](const Node<T>& self) {
        const T* g = self.grad.data();
        if (T* ga = parent_grad(self, 0)) {
            kernels::parallel::gemm<T>({m, n, k, false, true, true}, g, parent_value(self, 1), ga);
        }
        if (T* gb = parent_grad(self, 1)) {
            kernels::parallel::gemm<T>({k, m, n, true, false, true}, parent_value(self, 0), g, gb);
        }
    });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    require(b.dim(1) == k, "matmul_nt: inner extents differ " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()) + "^T");
    std::vector<T> out(m * n);
    kernels::parallel::gemm<T>({m, k, n, false, true, false}, a.data().data(), b.data().data(), out.data());
    return Tensor<T>::make_result({m, n}, std::move(out), "matmul_nt", {a, b}, [m, k, n](const Node<T>& self) {
        const T* g = self.grad.data();
        if (T* ga = parent_grad(self, 0)) {
            kernels::parallel::gemm<T>({m, n, k, false, false, true}, g, parent_value(self, 1), ga);
        }
        if (T* gb = parent_grad(self, 1)) {
            kernels::parallel::gemm<T>({n, m, k, true, false, true}, g, parent_value(self, 0), gb);
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<T> out(r * c);
    auto x = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return Tensor<T>::make_result({c, r}, std::move(out), "transpose", {a}, [r, c](const Node<T>& self) {
        if (T* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
        }
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(numel(shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    return Tensor<T>::make_result(std::move(shape), x.to_vector(), "reshape", {x}, [](const Node<T>& self) {
        if (T* gx = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), "add", {a, b}, [](const Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (T* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), "mul", {a, b}, [](const Node<T>& self) {
        const T* x = parent_value(self, 0);
        const T* y = parent_value(self, 1);
        if (T* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * y[i];
        }
        if (T* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * x[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out = a.to_vector();
    for (auto& v : out) v *= factor;
    return Tensor<T>::make_result(a.shape(), std::move(out), "scale", {a}, [factor](const Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = T(0);
    for (auto v : x.data()) s += v;
    return Tensor<T>::make_result({1}, {s}, "sum", {x}, [](const Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            const T up = self.grad[0];
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += up;
        }
    });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
    std::vector<T> out(x.numel());
    auto in = x.data();
    if (kind == Activation::sigmoid) {
        kernels::parallel::sigmoid<T>(in, out);
        return Tensor<T>::make_result(x.shape(), std::move(out), "sigmoid", {x}, [](const Node<T>& self) {
            if (T* g = parent_grad(self, 0)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    const T s = self.value[i];
                    g[i] += self.grad[i] * s * (T(1) - s);
                }
            }
        });
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
    return Tensor<T>::make_result(x.shape(), std::move(out), "relu", {x}, [](const Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            const T* in = parent_value(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (in[i] > T(0)) g[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const auto sp = split_axis(x.shape(), axis);
    std::vector<T> out(x.numel());
    auto in = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t j = 0; j < sp.inner; ++j) {
            const std::size_t base = o * sp.len * sp.inner + j;
            T mx = in[base];
            for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, in[base + l * sp.inner]);
            T z = T(0);
            for (std::size_t l = 0; l < sp.len; ++l) {
                T e = std::exp(in[base + l * sp.inner] - mx);
                out[base + l * sp.inner] = e;
                z += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
        }
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), "softmax", {x}, [sp](const Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t j = 0; j < sp.inner; ++j) {
                const std::size_t base = o * sp.len * sp.inner + j;
                T dot = T(0);
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t i = base + l * sp.inner;
                    dot += self.grad[i] * self.value[i];
                }
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t i = base + l * sp.inner;
                    g[i] += self.value[i] * (self.grad[i] - dot);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require(x.rank() >= 1, "layer_norm: scalar input");
    const std::size_t c = x.shape().back();
    require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
            "layer_norm: affine parameters must have shape [" + std::to_string(c) + "]");
    const std::size_t rows = x.numel() / c;
    std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
    auto in = x.data();
    auto ga = gamma.data(), be = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * c;
        T mean = T(0);
        for (std::size_t i = 0; i < c; ++i) mean += row[i];
        mean /= T(c);
        T var = T(0);
        for (std::size_t i = 0; i < c; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= T(c);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < c; ++i) {
            xhat[r * c + i] = (row[i] - mean) * rstd[r];
            out[r * c + i] = ga[i] * xhat[r * c + i] + be[i];
        }
    }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
        [c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](const Node<T>& self) {
            const T* g = self.grad.data();
            const T* ga = parent_value(self, 1);
            T* gx = parent_grad(self, 0);
            T* gg = parent_grad(self, 1);
            T* gb = parent_grad(self, 2);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * c;
                const T* xh = xhat.data() + r * c;
                if (gg || gb) {
                    for (std::size_t i = 0; i < c; ++i) {
                        if (gg) gg[i] += gr[i] * xh[i];
                        if (gb) gb[i] += gr[i];
                    }
                }
                if (gx) {
                    T m1 = T(0), m2 = T(0);
                    for (std::size_t i = 0; i < c; ++i) {
                        const T d = gr[i] * ga[i];
                        m1 += d;
                        m2 += d * xh[i];
                    }
                    m1 /= T(c);
                    m2 /= T(c);
                    for (std::size_t i = 0; i < c; ++i) {
                        gx[r * c + i] += rstd[r] * (gr[i] * ga[i] - m1 - xh[i] * m2);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    require(x.rank() >= 2, "group_norm: expected spatial x channel input, got " + shape_str(x.shape()));
    const std::size_t c = x.shape().back();
    if (groups == 0 || c % groups != 0) {
        throw ConfigError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) + " channels");
    }
    require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
            "group_norm: affine parameters must have shape [" + std::to_string(c) + "]");
    const std::size_t positions = x.numel() / c;
    const std::size_t cg = c / groups;
    const T count = T(positions * cg);
    std::vector<T> out(x.numel()), xhat(x.numel()), rstd(groups);
    auto in = x.data();
    auto ga = gamma.data(), be = beta.data();
    for (std::size_t grp = 0; grp < groups; ++grp) {
        T mean = T(0);
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t i = grp * cg; i < (grp + 1) * cg; ++i) mean += in[p * c + i];
        mean /= count;
        T var = T(0);
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t i = grp * cg; i < (grp + 1) * cg; ++i) {
                const T d = in[p * c + i] - mean;
                var += d * d;
            }
        var /= count;
        rstd[grp] = T(1) / std::sqrt(var + eps);
        for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t i = grp * cg; i < (grp + 1) * cg; ++i) {
                xhat[p * c + i] = (in[p * c + i] - mean) * rstd[grp];
                out[p * c + i] = ga[i] * xhat[p * c + i] + be[i];
            }
    }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), "group_norm", {x, gamma, beta},
        [c, positions, cg, groups, count, xhat = std::move(xhat), rstd = std::move(rstd)](const Node<T>& self) {
            const T* g = self.grad.data();
            const T* ga = parent_value(self, 1);
            T* gx = parent_grad(self, 0);
            T* gg = parent_grad(self, 1);
            T* gb = parent_grad(self, 2);
            if (gg || gb) {
                for (std::size_t p = 0; p < positions; ++p)
                    for (std::size_t i = 0; i < c; ++i) {
                        if (gg) gg[i] += g[p * c + i] * xhat[p * c + i];
                        if (gb) gb[i] += g[p * c + i];
                    }
            }
            if (!gx) return;
            for (std::size_t grp = 0; grp < groups; ++grp) {
                T m1 = T(0), m2 = T(0);
                for (std::size_t p = 0; p < positions; ++p)
                    for (std::size_t i = grp * cg; i < (grp + 1) * cg; ++i) {
                        const T d = g[p * c + i] * ga[i];
                        m1 += d;
                        m2 += d * xhat[p * c + i];
                    }
                m1 /= count;
                m2 /= count;
                for (std::size_t p = 0; p < positions; ++p)
                    for (std::size_t i = grp * cg; i < (grp + 1) * cg; ++i) {
                        const std::size_t k = p * c + i;
                        gx[k] += rstd[grp] * (g[k] * ga[i] - m1 - xhat[k] * m2);
                    }
            }
        });
}

template <typename T>
IndexTensor binned_max_indices(const Tensor<T>& h, std::size_t s) {
    require_rank(h, 2, "binned_max_indices");
    const std::size_t rows = h.dim(0), p = h.dim(1);
    if (s < 1 || s > p) {
        throw ConfigError("binned_max_indices: need 1 <= S <= " + std::to_string(p) + ", got S=" + std::to_string(s));
    }
    IndexTensor out{rows, s, std::vector<std::uint32_t>(rows * s)};
    kernels::parallel::binned_argmax<T>(h.data().data(), rows, p, s, out.values.data());
    return out;
}

template <typename T>
IndexTensor topk_indices(const Tensor<T>& h, std::size_t s) {
    require_rank(h, 2, "topk_indices");
    const std::size_t rows = h.dim(0), p = h.dim(1);
    if (s < 1 || s > p) {
        throw ConfigError("topk_indices: need 1 <= S <= " + std::to_string(p) + ", got S=" + std::to_string(s));
    }
    IndexTensor out{rows, s, std::vector<std::uint32_t>(rows * s)};
    auto v = h.data();
    std::vector<std::uint32_t> order(p);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = v.data() + r * p;
        std::iota(order.begin(), order.end(), 0u);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s), order.end(),
                          [row](std::uint32_t a, std::uint32_t b) {
                              return row[a] > row[b] || (row[a] == row[b] && a < b);
                          });
        std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s));
        std::copy_n(order.begin(), s, out.values.begin() + static_cast<std::ptrdiff_t>(r * s));
    }
    return out;
}

template <typename T>
Tensor<T> gather_pixels(const Tensor<T>& f, const IndexTensor& idx) {
    require_rank(f, 2, "gather_pixels");
    require(idx.values.size() == idx.rows * idx.cols && idx.rows > 0 && idx.cols > 0,
            "gather_pixels: malformed index tensor");
    const std::size_t p = f.dim(0), c = f.dim(1);
    for (auto i : idx.values) {
        if (i >= p) throw BoundsError("gather_pixels: index " + std::to_string(i) + " >= " + std::to_string(p) + " pixels");
    }
    std::vector<T> out(idx.values.size() * c);
    kernels::parallel::gather_rows<T>(f.data().data(), c, idx.values, out.data());
    return Tensor<T>::make_result({idx.rows, idx.cols, c}, std::move(out), "gather_pixels", {f},
                                  [c, ids = idx.values](const Node<T>& self) {
                                      if (T* g = parent_grad(self, 0)) {
                                          kernels::parallel::scatter_add_rows<T>(self.grad.data(), c, ids, g);
                                      }
                                  });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
    if (parts.empty()) throw UsageError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape shape = first;
    shape[axis] = 0;
    for (const auto& p : parts) {
        require(p.rank() == first.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < first.size(); ++d) {
            require(d == axis || p.dim(d) == first[d],
                    "concat: off-axis extents differ " + shape_str(first) + " vs " + shape_str(p.shape()));
        }
        shape[axis] += p.dim(axis);
    }
    const auto sp = split_axis(shape, axis);
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(axis) * sp.inner);
    const std::size_t row = sp.len * sp.inner;
    std::vector<T> out(numel(shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto src = parts[k].data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                        out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
        }
        offset += widths[k];
    }
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    return Tensor<T>::make_result(std::move(shape), std::move(out), "concat", std::move(inputs),
                                  [sp, row, widths](const Node<T>& self) {
                                      std::size_t offset = 0;
                                      for (std::size_t k = 0; k < widths.size(); ++k) {
                                          if (T* g = parent_grad(self, k)) {
                                              for (std::size_t o = 0; o < sp.outer; ++o)
                                                  for (std::size_t i = 0; i < widths[k]; ++i)
                                                      g[o * widths[k] + i] += self.grad[o * row + offset + i];
                                          }
                                          offset += widths[k];
                                      }
                                  });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank()) throw DimensionError("narrow: axis out of range for " + shape_str(x.shape()));
    if (length == 0 || start + length > x.dim(axis)) {
        throw BoundsError("narrow: slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                          ") exceeds extent " + std::to_string(x.dim(axis)));
    }
    const auto sp = split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape[axis] = length;
    const std::size_t w = length * sp.inner;
    const std::size_t row = sp.len * sp.inner;
    const std::size_t off = start * sp.inner;
    std::vector<T> out(numel(shape));
    auto in = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * row + off), w,
                    out.begin() + static_cast<std::ptrdiff_t>(o * w));
    }
    return Tensor<T>::make_result(std::move(shape), std::move(out), "narrow", {x},
                                  [sp, w, row, off](const Node<T>& self) {
                                      if (T* g = parent_grad(self, 0)) {
                                          for (std::size_t o = 0; o < sp.outer; ++o)
                                              for (std::size_t i = 0; i < w; ++i)
                                                  g[o * row + off + i] += self.grad[o * w + i];
                                      }
                                  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b) {
    require(x.defined() && x.rank() >= 1, "linear: undefined input");
    require_rank(w, 2, "linear");
    const std::size_t in = x.shape().back();
    const std::size_t out_dim = w.dim(1);
    require(w.dim(0) == in, "linear: input width " + std::to_string(in) + " does not match weight " + shape_str(w.shape()));
    if (b) require(b->shape() == Shape{out_dim}, "linear: bias must have shape [" + std::to_string(out_dim) + "]");
    const std::size_t rows = x.numel() / in;
    std::vector<T> out(rows * out_dim);
    if (b) {
        auto bv = b->data();
        for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(r * out_dim));
    }
    kernels::parallel::gemm<T>({rows, in, out_dim, false, false, b.has_value()}, x.data().data(), w.data().data(), out.data());
    Shape shape = x.shape();
    shape.back() = out_dim;
    std::vector<Tensor<T>> inputs{x, w};
    if (b) inputs.push_back(*b);
    return Tensor<T>::make_result(std::move(shape), std::move(out), "linear", std::move(inputs),
                                  [rows, in, out_dim](const Node<T>& self) {
                                      const T* g = self.grad.data();
                                      if (T* gx = parent_grad(self, 0)) {
                                          kernels::parallel::gemm<T>({rows, out_dim, in, false, true, true}, g,
                                                                     parent_value(self, 1), gx);
                                      }
                                      if (T* gw = parent_grad(self, 1)) {
                                          kernels::parallel::gemm<T>({in, rows, out_dim, true, false, true},
                                                                     parent_value(self, 0), g, gw);
                                      }
                                      if (self.parents.size() > 2) {
                                          if (T* gb = parent_grad(self, 2)) {
                                              for (std::size_t r = 0; r < rows; ++r)
                                                  for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> batched_dot(const Tensor<T>& q, const Tensor<T>& k) {
    require_rank(q, 2, "batched_dot");
    require_rank(k, 3, "batched_dot");
    const std::size_t n = q.dim(0), c = q.dim(1), s = k.dim(1);
    require(k.dim(0) == n && k.dim(2) == c,
            "batched_dot: " + shape_str(q.shape()) + " incompatible with " + shape_str(k.shape()));
    std::vector<T> out(n * s);
    auto qv = q.data(), kv = k.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            T acc = T(0);
            for (std::size_t d = 0; d < c; ++d) acc += qv[i * c + d] * kv[(i * s + j) * c + d];
            out[i * s + j] = acc;
        }
    return Tensor<T>::make_result({n, s}, std::move(out), "batched_dot", {q, k}, [n, s, c](const Node<T>& self) {
        const T* qv = parent_value(self, 0);
        const T* kv = parent_value(self, 1);
        T* gq = parent_grad(self, 0);
        T* gk = parent_grad(self, 1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < s; ++j) {
                const T g = self.grad[i * s + j];
                for (std::size_t d = 0; d < c; ++d) {
                    if (gq) gq[i * c + d] += g * kv[(i * s + j) * c + d];
                    if (gk) gk[(i * s + j) * c + d] += g * qv[i * c + d];
                }
            }
    });
}

template <typename T>
Tensor<T> batched_combine(const Tensor<T>& w, const Tensor<T>& v) {
    require_rank(w, 2, "batched_combine");
    require_rank(v, 3, "batched_combine");
    const std::size_t n = w.dim(0), s = w.dim(1), c = v.dim(2);
    require(v.dim(0) == n && v.dim(1) == s,
            "batched_combine: " + shape_str(w.shape()) + " incompatible with " + shape_str(v.shape()));
    std::vector<T> out(n * c, T(0));
    auto wv = w.data(), vv = v.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < s; ++j) {
            const T a = wv[i * s + j];
            for (std::size_t d = 0; d < c; ++d) out[i * c + d] += a * vv[(i * s + j) * c + d];
        }
    return Tensor<T>::make_result({n, c}, std::move(out), "batched_combine", {w, v}, [n, s, c](const Node<T>& self) {
        const T* wv = parent_value(self, 0);
        const T* vv = parent_value(self, 1);
        T* gw = parent_grad(self, 0);
        T* gv = parent_grad(self, 1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < s; ++j) {
                T acc = T(0);
                for (std::size_t d = 0; d < c; ++d) {
                    const T g = self.grad[i * c + d];
                    acc += g * vv[(i * s + j) * c + d];
                    if (gv) gv[(i * s + j) * c + d] += wv[i * s + j] * g;
                }
                if (gw) gw[i * s + j] += acc;
            }
    });
}

#define PPMN_OPS_INSTANTIATE(T)                                                                              \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                                       \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                  \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                        \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                             \
    template Tensor<T> activation<T>(const Tensor<T>&, Activation);                                          \
    template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                            \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);               \
    template Tensor<T> group_norm<T>(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, T);  \
    template IndexTensor binned_max_indices<T>(const Tensor<T>&, std::size_t);                               \
    template IndexTensor topk_indices<T>(const Tensor<T>&, std::size_t);                                     \
    template Tensor<T> gather_pixels<T>(const Tensor<T>&, const IndexTensor&);                               \
    template Tensor<T> concat<T>(std::span<const Tensor<T>>, std::size_t);                                   \
    template Tensor<T> narrow<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                   \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&);       \
    template Tensor<T> batched_dot<T>(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> batched_combine<T>(const Tensor<T>&, const Tensor<T>&);

PPMN_OPS_INSTANTIATE(float)
PPMN_OPS_INSTANTIATE(double)

#undef PPMN_OPS_INSTANTIATE

}  // namespace ppmn
