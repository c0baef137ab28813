#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "gazemoe/kernels.hpp"
#include "gazemoe/tensor.hpp"

namespace gazemoe {
namespace ops {

namespace detail {

template <class S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

template <class S>
inline void check_axis(const Tensor<S>& x, std::size_t axis, const char* op) {
    if (axis >= x.rank())
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for shape " + shape_str(x.shape()));
}

// outer/extent/inner decomposition for a reduction axis
inline void axis_strides(const Shape& s, std::size_t axis, std::size_t& outer,
                         std::size_t& extent, std::size_t& inner) {
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    extent = s[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <class S>
inline void record(Tensor<S>& out, std::function<void()> pull) {
    out.set_requires_grad(true);
    Tape<S>::active().record(out.node(), std::move(pull));
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (grad_wanted(a, b)) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node()] {
            const std::size_t m = on->numel();
            if (an->requires_grad) {
                S* g = an->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                S* g = bn->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (grad_wanted(a, b)) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node()] {
            const std::size_t m = on->numel();
            if (an->requires_grad) {
                S* g = an->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                S* g = bn->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (grad_wanted(a, b)) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node()] {
            const std::size_t m = on->numel();
            if (an->requires_grad) {
                S* g = an->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                S* g = bn->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (grad_wanted(a)) {
        detail::record(out, [an = a.node(), on = out.node(), c] {
            if (!an->requires_grad) return;
            S* g = an->grad_buffer().data();
            const std::size_t m = on->numel();
            for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i] * c;
        });
    }
    return out;
}

// y = x * s where s is a learnable scalar tensor of shape [1]
template <class S>
Tensor<S> mul_scalar_tensor(const Tensor<S>& x, const Tensor<S>& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar_tensor: scale must be a scalar tensor");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S c = s.data()[0];
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
    if (grad_wanted(x, s)) {
        detail::record(out, [xn = x.node(), sn = s.node(), on = out.node(), c] {
            const std::size_t m = on->numel();
            if (xn->requires_grad) {
                S* g = xn->grad_buffer().data();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i] * c;
            }
            if (sn->requires_grad) {
                S acc = 0;
                for (std::size_t i = 0; i < m; ++i) acc += on->grad[i] * xn->value[i];
                sn->grad_buffer()[0] += acc;
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> exp_elem(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(x.data()[i]);
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            const std::size_t m = on->numel();
            for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i] * on->value[i];
        });
    }
    return out;
}

// exact gelu: x * Phi(x)
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
    static const S inv_sqrt2 = static_cast<S>(0.70710678118654752440);
    static const S inv_sqrt2pi = static_cast<S>(0.39894228040143267794);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const S v = x.data()[i];
        out.data()[i] = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
    }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            const std::size_t m = on->numel();
            for (std::size_t i = 0; i < m; ++i) {
                const S v = xn->value[i];
                const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                g[i] += on->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// x[..., n] + b[n], broadcast over leading dims
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.extent(0))
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) +
                             " does not match last axis of " + shape_str(x.shape()));
    const std::size_t n = b.extent(0);
    const std::size_t rows = x.numel() / n;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * n;
        S* po = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) po[j] = px[j] + b.data()[j];
    }
    if (grad_wanted(x, b)) {
        detail::record(out, [xn = x.node(), bn = b.node(), on = out.node(), rows, n] {
            if (xn->requires_grad) {
                S* g = xn->grad_buffer().data();
                const std::size_t m = on->numel();
                for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                S* g = bn->grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const S* go = on->grad.data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) g[j] += go[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor<S> out = Tensor<S>::zeros({m, n});
    kern::gemm_nn(out.data(), a.data(), b.data(), m, k, n);
    if (grad_wanted(a, b)) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            if (an->requires_grad) {
                // dA = dC * B^T
                std::vector<S> bt(k * n);
                kern::transpose2d(bt.data(), bn->value.data(), k, n);
                kern::gemm_nn(an->grad_buffer().data(), on->grad.data(), bt.data(), m, n, k);
            }
            if (bn->requires_grad) {
                // dB = A^T * dC
                kern::gemm_tn(bn->grad_buffer().data(), an->value.data(), on->grad.data(), k, m, n);
            }
        });
    }
    return out;
}

// x[..., k] * w[k, n] (+ bias[n]); leading axes of x are treated as rows
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias = nullptr) {
    if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.extent(0))
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
    if (bias && (bias->rank() != 1 || bias->extent(0) != w.extent(1)))
        throw DimensionError("linear: bias " + shape_str(bias->shape()) + " vs weight " +
                             shape_str(w.shape()));
    const std::size_t k = w.extent(0), n = w.extent(1);
    const std::size_t rows = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    if (bias) {
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(bias->data(), bias->data() + n, out.data() + r * n);
    }
    kern::gemm_nn(out.data(), x.data(), w.data(), rows, k, n);
    const bool wants = bias ? grad_wanted(x, w, *bias) : grad_wanted(x, w);
    if (wants) {
        auto biasnode = bias ? bias->node() : nullptr;
        detail::record(out, [xn = x.node(), wn = w.node(), bn = biasnode, on = out.node(), rows, k, n] {
            if (xn->requires_grad) {
                std::vector<S> wt(k * n);
                kern::transpose2d(wt.data(), wn->value.data(), k, n);
                kern::gemm_nn(xn->grad_buffer().data(), on->grad.data(), wt.data(), rows, n, k);
            }
            if (wn->requires_grad)
                kern::gemm_tn(wn->grad_buffer().data(), xn->value.data(), on->grad.data(), k, rows, n);
            if (bn && bn->requires_grad) {
                S* g = bn->grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const S* go = on->grad.data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) g[j] += go[j];
                }
            }
        });
    }
    return out;
}

// batched matmul over matching leading axes: a[..., m, k] * b[..., k, n]
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() < 2 || b.rank() != a.rank())
        throw DimensionError("bmm: ranks differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (std::size_t i = 0; i + 2 < a.rank(); ++i)
        if (a.extent(i) != b.extent(i))
            throw DimensionError("bmm: batch dims differ: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    const std::size_t m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
    if (b.extent(b.rank() - 2) != k)
        throw DimensionError("bmm: inner extents differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t n = b.extent(b.rank() - 1);
    const std::size_t batches = a.numel() / (m * k);
    Shape out_shape = a.shape();
    out_shape[out_shape.size() - 1] = n;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    for (std::size_t t = 0; t < batches; ++t)
        kern::gemm_nn(out.data() + t * m * n, a.data() + t * m * k, b.data() + t * k * n, m, k, n);
    if (grad_wanted(a, b)) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), batches, m, k, n] {
            if (an->requires_grad) {
                std::vector<S> bt(k * n);
                S* ga = an->grad_buffer().data();
                for (std::size_t t = 0; t < batches; ++t) {
                    kern::transpose2d(bt.data(), bn->value.data() + t * k * n, k, n);
                    kern::gemm_nn(ga + t * m * k, on->grad.data() + t * m * n, bt.data(), m, n, k);
                }
            }
            if (bn->requires_grad) {
                S* gb = bn->grad_buffer().data();
                for (std::size_t t = 0; t < batches; ++t)
                    kern::gemm_tn(gb + t * k * n, an->value.data() + t * m * k,
                                  on->grad.data() + t * m * n, k, m, n);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    Tensor<S> out = Tensor<S>::from_data(std::move(new_shape), x.values());
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            const std::size_t m = on->numel();
            for (std::size_t i = 0; i < m; ++i) g[i] += on->grad[i];
        });
    }
    return out;
}

// swap the last two axes
template <class S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
    if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
    const std::size_t m = x.extent(x.rank() - 2), n = x.extent(x.rank() - 1);
    const std::size_t batches = x.numel() / (m * n);
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    for (std::size_t t = 0; t < batches; ++t)
        kern::transpose2d(out.data() + t * m * n, x.data() + t * m * n, m, n);
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), batches, m, n] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            std::vector<S> tmp(m * n);
            for (std::size_t t = 0; t < batches; ++t) {
                kern::transpose2d(tmp.data(), on->grad.data() + t * m * n, n, m);
                S* gt = g + t * m * n;
                for (std::size_t i = 0; i < m * n; ++i) gt[i] += tmp[i];
            }
        });
    }
    return out;
}

// [a, b, c, d] -> [a, c, b, d]
template <class S>
Tensor<S> transpose_12(const Tensor<S>& x) {
    if (x.rank() != 4) throw DimensionError("transpose_12: expects rank 4, got " + shape_str(x.shape()));
    const std::size_t A = x.extent(0), B = x.extent(1), C = x.extent(2), D = x.extent(3);
    Tensor<S> out = Tensor<S>::zeros({A, C, B, D});
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const S* src = x.data() + ((a * B + b) * C + c) * D;
                S* dst = out.data() + ((a * C + c) * B + b) * D;
                std::copy(src, src + D, dst);
            }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), A, B, C, D] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t a = 0; a < A; ++a)
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const S* src = on->grad.data() + ((a * C + c) * B + b) * D;
                        S* dst = g + ((a * B + b) * C + c) * D;
                        for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                    }
        });
    }
    return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    detail::check_axis(parts[0], axis, "concat");
    Shape out_shape = parts[0].shape();
    std::size_t total = parts[0].extent(axis);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        if (parts[i].rank() != parts[0].rank())
            throw DimensionError("concat: rank mismatch " + shape_str(parts[i].shape()));
        for (std::size_t d = 0; d < parts[0].rank(); ++d)
            if (d != axis && parts[i].extent(d) != parts[0].extent(d))
                throw DimensionError("concat: shape mismatch " + shape_str(parts[0].shape()) +
                                     " vs " + shape_str(parts[i].shape()));
        total += parts[i].extent(axis);
    }
    out_shape[axis] = total;
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    std::size_t outer, extent_out, inner;
    detail::axis_strides(out_shape, axis, outer, extent_out, inner);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t e = p.extent(axis);
        for (std::size_t o = 0; o < outer; ++o) {
            const S* src = p.data() + o * e * inner;
            S* dst = out.data() + (o * extent_out + offset) * inner;
            std::copy(src, src + e * inner, dst);
        }
        offset += e;
    }

    bool wants = false;
    for (const auto& p : parts) wants = wants || p.requires_grad();
    if (GradMode::enabled() && wants) {
        std::vector<std::shared_ptr<TensorNode<S>>> nodes;
        std::vector<std::size_t> extents;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            extents.push_back(p.extent(axis));
        }
        detail::record(out, [nodes, extents, on = out.node(), outer, extent_out, inner] {
            std::size_t offset2 = 0;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                const std::size_t e = extents[i];
                if (nodes[i]->requires_grad) {
                    S* g = nodes[i]->grad_buffer().data();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const S* src = on->grad.data() + (o * extent_out + offset2) * inner;
                        S* dst = g + o * e * inner;
                        for (std::size_t j = 0; j < e * inner; ++j) dst[j] += src[j];
                    }
                }
                offset2 += e;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization and reductions
// ---------------------------------------------------------------------------

// numerically stable softmax along `axis`; rejects NaN input
template <class S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
    detail::check_axis(x, axis, "softmax");
    std::size_t outer, extent, inner;
    detail::axis_strides(x.shape(), axis, outer, extent, inner);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const S* px = x.data() + o * extent * inner + in;
            S* po = out.data() + o * extent * inner + in;
            S mx = px[0];
            for (std::size_t e = 0; e < extent; ++e) {
                const S v = px[e * inner];
                if (std::isnan(v)) throw NumericError("softmax: NaN input");
                if (v > mx) mx = v;
            }
            S sum = 0;
            for (std::size_t e = 0; e < extent; ++e) {
                const S w = std::exp(px[e * inner] - mx);
                po[e * inner] = w;
                sum += w;
            }
            const S inv = S(1) / sum;
            for (std::size_t e = 0; e < extent; ++e) po[e * inner] *= inv;
        }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), outer, extent, inner] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * extent * inner + in;
                    S dot = 0;
                    for (std::size_t e = 0; e < extent; ++e)
                        dot += on->grad[base + e * inner] * on->value[base + e * inner];
                    for (std::size_t e = 0; e < extent; ++e) {
                        const std::size_t i = base + e * inner;
                        g[i] += on->value[i] * (on->grad[i] - dot);
                    }
                }
        });
    }
    return out;
}

// layer norm over the last axis with learnable affine
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
    if (x.rank() < 1) throw DimensionError("layer_norm: rank 0 input");
    const std::size_t n = x.shape().back();
    if (gain.numel() != n || bias.numel() != n)
        throw DimensionError("layer_norm: affine params must have " + std::to_string(n) + " entries");
    if (eps <= S(0)) throw ContractError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / n;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> inv_sigma(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * n;
        S mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += px[j];
        mu /= static_cast<S>(n);
        S var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const S d = px[j] - mu;
            var += d * d;
        }
        var /= static_cast<S>(n);
        const S inv = S(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_sigma[r] = inv;
        S* po = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) po[j] = gain.data()[j] * (px[j] - mu) * inv + bias.data()[j];
    }
    if (grad_wanted(x, gain, bias)) {
        detail::record(out, [xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
                             rows, n, mean = std::move(mean), inv_sigma = std::move(inv_sigma)] {
            std::vector<S> xhat(n), dxhat(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const S* px = xn->value.data() + r * n;
                const S* go = on->grad.data() + r * n;
                const S inv = inv_sigma[r];
                for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (px[j] - mean[r]) * inv;
                    dxhat[j] = go[j] * gn->value[j];
                }
                if (gn->requires_grad) {
                    S* g = gn->grad_buffer().data();
                    for (std::size_t j = 0; j < n; ++j) g[j] += go[j] * xhat[j];
                }
                if (bn->requires_grad) {
                    S* g = bn->grad_buffer().data();
                    for (std::size_t j = 0; j < n; ++j) g[j] += go[j];
                }
                if (xn->requires_grad) {
                    S sum_dx = 0, sum_dx_xhat = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        sum_dx += dxhat[j];
                        sum_dx_xhat += dxhat[j] * xhat[j];
                    }
                    const S invn = S(1) / static_cast<S>(n);
                    S* g = xn->grad_buffer().data() + r * n;
                    for (std::size_t j = 0; j < n; ++j)
                        g[j] += inv * (dxhat[j] - sum_dx * invn - xhat[j] * sum_dx_xhat * invn);
                }
            }
        });
    }
    return out;
}

// unit-normalize along `axis`; full quotient-rule gradient
template <class S>
Tensor<S> l2_normalize(const Tensor<S>& x, std::size_t axis) {
    detail::check_axis(x, axis, "l2_normalize");
    std::size_t outer, extent, inner;
    detail::axis_strides(x.shape(), axis, outer, extent, inner);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> inv_norm(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * extent * inner + in;
            S sq = 0;
            for (std::size_t e = 0; e < extent; ++e) {
                const S v = x.data()[base + e * inner];
                sq += v * v;
            }
            const S norm = std::sqrt(sq);
            if (!(norm > S(1e-20)))
                throw DegenerateInputError("l2_normalize: vector norm is zero");
            const S inv = S(1) / norm;
            inv_norm[o * inner + in] = inv;
            for (std::size_t e = 0; e < extent; ++e)
                out.data()[base + e * inner] = x.data()[base + e * inner] * inv;
        }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), outer, extent, inner,
                             inv_norm = std::move(inv_norm)] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * extent * inner + in;
                    const S inv = inv_norm[o * inner + in];
                    S dot = 0;
                    for (std::size_t e = 0; e < extent; ++e)
                        dot += on->grad[base + e * inner] * on->value[base + e * inner];
                    for (std::size_t e = 0; e < extent; ++e) {
                        const std::size_t i = base + e * inner;
                        g[i] += inv * (on->grad[i] - on->value[i] * dot);
                    }
                }
        });
    }
    return out;
}

// normalize each row of a 2-D tensor to sum to 1
template <class S>
Tensor<S> row_sum_normalize(const Tensor<S>& x) {
    if (x.rank() != 2) throw DimensionError("row_sum_normalize: expects rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.extent(0), n = x.extent(1);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    std::vector<S> inv_sum(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * n;
        S s = 0;
        for (std::size_t j = 0; j < n; ++j) s += px[j];
        if (!(std::abs(s) > S(1e-30))) throw DegenerateInputError("row_sum_normalize: row sums to zero");
        inv_sum[r] = S(1) / s;
        S* po = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) po[j] = px[j] * inv_sum[r];
    }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), rows, n, inv_sum = std::move(inv_sum)] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* go = on->grad.data() + r * n;
                const S* po = on->value.data() + r * n;
                S dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += go[j] * po[j];
                for (std::size_t j = 0; j < n; ++j) g[r * n + j] += inv_sum[r] * (go[j] - dot);
            }
        });
    }
    return out;
}

// mean over one axis (the axis is squeezed out)
template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, std::size_t axis) {
    detail::check_axis(x, axis, "mean_axis");
    std::size_t outer, extent, inner;
    detail::axis_strides(x.shape(), axis, outer, extent, inner);
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.extent(i));
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const S inv = S(1) / static_cast<S>(extent);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e) {
            const S* src = x.data() + (o * extent + e) * inner;
            S* dst = out.data() + o * inner;
            for (std::size_t in = 0; in < inner; ++in) dst[in] += src[in] * inv;
        }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), outer, extent, inner, inv] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t e = 0; e < extent; ++e) {
                    S* dst = g + (o * extent + e) * inner;
                    const S* src = on->grad.data() + o * inner;
                    for (std::size_t in = 0; in < inner; ++in) dst[in] += src[in] * inv;
                }
        });
    }
    return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros({1});
    S acc = 0;
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) acc += x.data()[i];
    out.data()[0] = acc;
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), n] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            const S d = on->grad[0];
            for (std::size_t i = 0; i < n; ++i) g[i] += d;
        });
    }
    return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

// out[i] = x[idx[i]] along axis 0; gradient scatter-adds into selected rows only
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<std::size_t>& idx) {
    if (x.rank() < 1) throw DimensionError("gather_rows: rank 0 input");
    const std::size_t rows = x.extent(0);
    const std::size_t stride = x.numel() / rows;
    for (std::size_t i : idx)
        if (i >= rows)
            throw ContractError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                                std::to_string(rows) + ")");
    Shape out_shape = x.shape();
    out_shape[0] = idx.size();
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(x.data() + idx[i] * stride, x.data() + (idx[i] + 1) * stride, out.data() + i * stride);
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), idx, stride] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const S* src = on->grad.data() + i * stride;
                S* dst = g + idx[i] * stride;
                for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// inverse of gather_rows: out has `rows` rows, out[idx[i]] += x[i]
template <class S>
Tensor<S> scatter_rows(const Tensor<S>& x, const std::vector<std::size_t>& idx, std::size_t rows) {
    if (x.rank() < 1 || x.extent(0) != idx.size())
        throw DimensionError("scatter_rows: index count " + std::to_string(idx.size()) +
                             " vs input " + shape_str(x.shape()));
    const std::size_t stride = x.extent(0) ? x.numel() / x.extent(0) : 0;
    for (std::size_t i : idx)
        if (i >= rows) throw ContractError("scatter_rows: index out of range");
    Shape out_shape = x.shape();
    out_shape[0] = rows;
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const S* src = x.data() + i * stride;
        S* dst = out.data() + idx[i] * stride;
        for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
    }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), idx, stride] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const S* src = on->grad.data() + idx[i] * stride;
                S* dst = g + i * stride;
                for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// out[r, s] = x[r, idx[r*k + s]] for a 2-D x
template <class S>
Tensor<S> gather_cols(const Tensor<S>& x, const std::vector<std::size_t>& idx, std::size_t k) {
    if (x.rank() != 2) throw DimensionError("gather_cols: expects rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.extent(0), cols = x.extent(1);
    if (idx.size() != rows * k) throw ContractError("gather_cols: index count mismatch");
    for (std::size_t i : idx)
        if (i >= cols) throw ContractError("gather_cols: column index out of range");
    Tensor<S> out = Tensor<S>::zeros({rows, k});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t s = 0; s < k; ++s) out.data()[r * k + s] = x.data()[r * cols + idx[r * k + s]];
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), idx, rows, cols, k] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t s = 0; s < k; ++s)
                    g[r * cols + idx[r * k + s]] += on->grad[r * k + s];
        });
    }
    return out;
}

// scale row r of x by c[r]
template <class S>
Tensor<S> mul_colvec(const Tensor<S>& x, const Tensor<S>& c) {
    if (x.rank() != 2 || c.rank() != 1 || c.extent(0) != x.extent(0))
        throw DimensionError("mul_colvec: " + shape_str(x.shape()) + " vs " + shape_str(c.shape()));
    const std::size_t rows = x.extent(0), n = x.extent(1);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const S s = c.data()[r];
        const S* px = x.data() + r * n;
        S* po = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) po[j] = px[j] * s;
    }
    if (grad_wanted(x, c)) {
        detail::record(out, [xn = x.node(), cn = c.node(), on = out.node(), rows, n] {
            if (xn->requires_grad) {
                S* g = xn->grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const S s = cn->value[r];
                    const S* go = on->grad.data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) g[r * n + j] += go[j] * s;
                }
            }
            if (cn->requires_grad) {
                S* g = cn->grad_buffer().data();
                for (std::size_t r = 0; r < rows; ++r) {
                    S acc = 0;
                    const S* go = on->grad.data() + r * n;
                    const S* px = xn->value.data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) acc += go[j] * px[j];
                    g[r] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// discrete selections (no gradient; ties resolve to the lowest index)
// ---------------------------------------------------------------------------

template <class S>
std::vector<std::size_t> argmax_last(const Tensor<S>& x) {
    if (x.rank() < 1) throw DimensionError("argmax_last: rank 0 input");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * n;
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (px[j] > px[best]) best = j;
        out[r] = best;
    }
    return out;
}

// top-k column indices per row, by value descending then index ascending
template <class S>
std::vector<std::size_t> topk_last(const Tensor<S>& x, std::size_t k) {
    if (x.rank() != 2) throw DimensionError("topk_last: expects rank 2, got " + shape_str(x.shape()));
    const std::size_t rows = x.extent(0), n = x.extent(1);
    if (k == 0 || k > n) throw ContractError("topk_last: k must be in [1, " + std::to_string(n) + "]");
    std::vector<std::size_t> out(rows * k);
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* px = x.data() + r * n;
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [px](std::size_t a, std::size_t b) {
                              if (px[a] != px[b]) return px[a] > px[b];
                              return a < b;
                          });
        for (std::size_t s = 0; s < k; ++s) out[r * k + s] = order[s];
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution (fixed 3x3 kernel, zero padding 1)
// ---------------------------------------------------------------------------

// x[B,H,W,Ci] * w[3,3,Ci,Co] + b[Co], stride >= 1
template <class S>
Tensor<S> conv3x3(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, std::size_t stride) {
    if (x.rank() != 4) throw DimensionError("conv3x3: input must be [B,H,W,C], got " + shape_str(x.shape()));
    if (w.rank() != 4 || w.extent(0) != 3 || w.extent(1) != 3)
        throw DimensionError("conv3x3: weight must be [3,3,Ci,Co], got " + shape_str(w.shape()));
    const std::size_t B = x.extent(0), H = x.extent(1), W = x.extent(2), Ci = x.extent(3);
    const std::size_t Co = w.extent(3);
    if (w.extent(2) != Ci || b.numel() != Co)
        throw DimensionError("conv3x3: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    if (stride == 0) throw ContractError("conv3x3: stride must be >= 1");
    const std::size_t Ho = (H - 1) / stride + 1;
    const std::size_t Wo = (W - 1) / stride + 1;
    Tensor<S> out = Tensor<S>::zeros({B, Ho, Wo, Co});
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                S* po = out.data() + ((bi * Ho + oy) * Wo + ox) * Co;
                for (std::size_t c = 0; c < Co; ++c) po[c] = b.data()[c];
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                        const S* px = x.data() + ((bi * H + static_cast<std::size_t>(iy)) * W +
                                                  static_cast<std::size_t>(ix)) * Ci;
                        const S* pw = w.data() + (ky * 3 + kx) * Ci * Co;
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            const S a = px[ci];
                            const S* wr = pw + ci * Co;
                            for (std::size_t c = 0; c < Co; ++c) po[c] += a * wr[c];
                        }
                    }
                }
            }
    if (grad_wanted(x, w, b)) {
        detail::record(out, [xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(),
                             B, H, W, Ci, Co, Ho, Wo, stride] {
            std::vector<S> wt; // [ky,kx,Co,Ci] for the input-gradient pass
            if (xn->requires_grad) {
                wt.resize(9 * Co * Ci);
                for (std::size_t kk = 0; kk < 9; ++kk)
                    kern::transpose2d(wt.data() + kk * Co * Ci, wn->value.data() + kk * Ci * Co, Ci, Co);
            }
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const S* go = on->grad.data() + ((bi * Ho + oy) * Wo + ox) * Co;
                        if (bn->requires_grad) {
                            S* gb = bn->grad_buffer().data();
                            for (std::size_t c = 0; c < Co; ++c) gb[c] += go[c];
                        }
                        for (std::size_t ky = 0; ky < 3; ++ky) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kx = 0; kx < 3; ++kx) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                const std::size_t xoff =
                                    ((bi * H + static_cast<std::size_t>(iy)) * W +
                                     static_cast<std::size_t>(ix)) * Ci;
                                if (wn->requires_grad) {
                                    const S* px = xn->value.data() + xoff;
                                    S* gw = wn->grad_buffer().data() + (ky * 3 + kx) * Ci * Co;
                                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                                        const S a = px[ci];
                                        S* gr = gw + ci * Co;
                                        for (std::size_t c = 0; c < Co; ++c) gr[c] += a * go[c];
                                    }
                                }
                                if (xn->requires_grad) {
                                    S* gx = xn->grad_buffer().data() + xoff;
                                    const S* pwt = wt.data() + (ky * 3 + kx) * Co * Ci;
                                    for (std::size_t c = 0; c < Co; ++c) {
                                        const S a = go[c];
                                        const S* wr = pwt + c * Ci;
                                        for (std::size_t ci = 0; ci < Ci; ++ci) gx[ci] += a * wr[ci];
                                    }
                                }
                            }
                        }
                    }
        });
    }
    return out;
}

// mean over the batch of 1 - cos(pred_i, target_i); rows with near-zero norm are rejected
template <class S>
Tensor<S> angular_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    if (pred.rank() != 2 || target.shape() != pred.shape())
        throw DimensionError("angular_loss: expects matching [B,3] inputs, got " +
                             shape_str(pred.shape()) + " and " + shape_str(target.shape()));
    const std::size_t B = pred.extent(0), D = pred.extent(1);
    Tensor<S> out = Tensor<S>::zeros({1});
    std::vector<S> np(B), nt(B), cosv(B);
    S acc = 0;
    for (std::size_t r = 0; r < B; ++r) {
        const S* p = pred.data() + r * D;
        const S* t = target.data() + r * D;
        S pp = 0, tt = 0, pt = 0;
        for (std::size_t j = 0; j < D; ++j) {
            pp += p[j] * p[j];
            tt += t[j] * t[j];
            pt += p[j] * t[j];
        }
        np[r] = std::sqrt(pp);
        nt[r] = std::sqrt(tt);
        if (!(np[r] > S(1e-8)) || !(nt[r] > S(1e-8)))
            throw DegenerateInputError("angular_loss: near-zero vector at row " + std::to_string(r));
        cosv[r] = pt / (np[r] * nt[r]);
        acc += S(1) - cosv[r];
    }
    out.data()[0] = acc / static_cast<S>(B);
    if (grad_wanted(pred, target)) {
        detail::record(out, [pn = pred.node(), tn = target.node(), on = out.node(), B, D,
                             np = std::move(np), nt = std::move(nt), cosv = std::move(cosv)] {
            const S d = on->grad[0] / static_cast<S>(B);
            for (std::size_t r = 0; r < B; ++r) {
                const S* p = pn->value.data() + r * D;
                const S* t = tn->value.data() + r * D;
                const S inv_pt = S(1) / (np[r] * nt[r]);
                if (pn->requires_grad) {
                    S* g = pn->grad_buffer().data() + r * D;
                    const S c_pp = cosv[r] / (np[r] * np[r]);
                    for (std::size_t j = 0; j < D; ++j)
                        g[j] += d * (c_pp * p[j] - t[j] * inv_pt);
                }
                if (tn->requires_grad) {
                    S* g = tn->grad_buffer().data() + r * D;
                    const S c_tt = cosv[r] / (nt[r] * nt[r]);
                    for (std::size_t j = 0; j < D; ++j)
                        g[j] += d * (c_tt * t[j] - p[j] * inv_pt);
                }
            }
        });
    }
    return out;
}

// non-overlapping k x k average pooling on [B,H,W,C]
template <class S>
Tensor<S> avg_pool2d(const Tensor<S>& x, std::size_t k) {
    if (x.rank() != 4) throw DimensionError("avg_pool2d: input must be [B,H,W,C]");
    const std::size_t B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    if (k == 0 || H % k != 0 || W % k != 0)
        throw DimensionError("avg_pool2d: window " + std::to_string(k) + " does not tile " +
                             shape_str(x.shape()));
    const std::size_t Ho = H / k, Wo = W / k;
    const S inv = S(1) / static_cast<S>(k * k);
    Tensor<S> out = Tensor<S>::zeros({B, Ho, Wo, C});
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                S* po = out.data() + ((bi * Ho + oy) * Wo + ox) * C;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const S* px = x.data() + ((bi * H + oy * k + dy) * W + ox * k + dx) * C;
                        for (std::size_t c = 0; c < C; ++c) po[c] += px[c] * inv;
                    }
            }
    if (grad_wanted(x)) {
        detail::record(out, [xn = x.node(), on = out.node(), B, H, W, C, Ho, Wo, k, inv] {
            if (!xn->requires_grad) return;
            S* g = xn->grad_buffer().data();
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const S* go = on->grad.data() + ((bi * Ho + oy) * Wo + ox) * C;
                        for (std::size_t dy = 0; dy < k; ++dy)
                            for (std::size_t dx = 0; dx < k; ++dx) {
                                S* gx = g + ((bi * H + oy * k + dy) * W + ox * k + dx) * C;
                                for (std::size_t c = 0; c < C; ++c) gx[c] += go[c] * inv;
                            }
                    }
        });
    }
    return out;
}

} // namespace ops
} // namespace gazemoe
