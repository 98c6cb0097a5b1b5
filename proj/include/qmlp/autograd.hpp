#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "qmlp/common.hpp"
#include "qmlp/quant.hpp"
#include "qmlp/tensor.hpp"

namespace qmlp {

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
// tape is topologically sorted by construction and backward() is a single
// reverse sweep that visits each node once.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(const Tape<T>&, const Tensor<T>&, std::vector<Tensor<T>>&)>;

    struct Node {
        Tensor<T> value;
        std::vector<int> parents;
        BackwardFn backward; // empty for leaves
    };

    Var<T> leaf(Tensor<T> v) {
        nodes_.push_back(Node{std::move(v), {}, {}});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<T> record(Tensor<T> v, std::vector<int> parents, BackwardFn fn) {
        nodes_.push_back(Node{std::move(v), std::move(parents), std::move(fn)});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor<T>& value(Var<T> v) const { return value(v.id); }

    std::size_t size() const { return nodes_.size(); }

    // Gradients of a scalar loss with respect to every node, keyed by node
    // id. Nodes not on a path to the loss get zero gradients.
    std::vector<Tensor<T>> backward(Var<T> loss) const {
        if (!loss.valid() || loss.tape != this) {
            throw ContractError("backward: loss is not recorded on this tape");
        }
        const Tensor<T>& lv = value(loss);
        if (!lv.is_scalar()) {
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape));
        }
        std::vector<Tensor<T>> grads(nodes_.size());
        grads[static_cast<std::size_t>(loss.id)] = Tensor<T>::full(lv.shape, T(1));
        for (int i = loss.id; i >= 0; --i) {
            const Node& n = nodes_[static_cast<std::size_t>(i)];
            const Tensor<T>& g = grads[static_cast<std::size_t>(i)];
            if (g.data.empty() || !n.backward) continue;
            n.backward(*this, g, grads);
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (grads[i].data.empty()) grads[i] = Tensor<T>::zeros(nodes_[i].value.shape);
        }
        return grads;
    }

    // Lazily materialized accumulation buffer for a node's gradient.
    Tensor<T>& grad_buf(std::vector<Tensor<T>>& grads, int id) const {
        auto& g = grads[static_cast<std::size_t>(id)];
        if (g.data.empty()) g = Tensor<T>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
        return g;
    }

private:
    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    }
}

inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865476); }
inline double gauss_pdf(double x) { return 0.3989422804014327 * std::exp(-0.5 * x * x); }

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>&av = tp.value(a), &bv = tp.value(b);
    detail::check_same_shape(av, bv, "add");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    return tp.record(std::move(out), {a.id, b.id},
                     [pa = a.id, pb = b.id](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& ga = t.grad_buf(grads, pa);
                         auto& gb = t.grad_buf(grads, pb);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             ga.data[i] += g.data[i];
                             gb.data[i] += g.data[i];
                         }
                     });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>&av = tp.value(a), &bv = tp.value(b);
    detail::check_same_shape(av, bv, "sub");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    return tp.record(std::move(out), {a.id, b.id},
                     [pa = a.id, pb = b.id](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& ga = t.grad_buf(grads, pa);
                         auto& gb = t.grad_buf(grads, pb);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             ga.data[i] += g.data[i];
                             gb.data[i] -= g.data[i];
                         }
                     });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>&av = tp.value(a), &bv = tp.value(b);
    detail::check_same_shape(av, bv, "mul");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    return tp.record(std::move(out), {a.id, b.id},
                     [pa = a.id, pb = b.id](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>&av2 = t.value(pa), &bv2 = t.value(pb);
                         auto& ga = t.grad_buf(grads, pa);
                         auto& gb = t.grad_buf(grads, pb);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             ga.data[i] += g.data[i] * bv2.data[i];
                             gb.data[i] += g.data[i] * av2.data[i];
                         }
                     });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.value(a);
    for (T& v : out.data) v *= c;
    return tp.record(std::move(out), {a.id},
                     [pa = a.id, c](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& ga = t.grad_buf(grads, pa);
                         for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
                     });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    const Tensor<T>&av = tp.value(a), &bv = tp.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) + " and " +
                         shape_str(bv.shape));
    }
    const std::size_t m = av.shape[0], n = av.shape[1], p = bv.shape[1];
    Tensor<T> out({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            const T aik = av.data[i * n + k];
            const T* brow = &bv.data[k * p];
            T* orow = &out.data[i * p];
            for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    return tp.record(std::move(out), {a.id, b.id},
                     [pa = a.id, pb = b.id, m, n, p](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>&av2 = t.value(pa), &bv2 = t.value(pb);
                         auto& ga = t.grad_buf(grads, pa); // dA = dC * B^T
                         for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t k = 0; k < n; ++k) {
                                 T s{};
                                 for (std::size_t j = 0; j < p; ++j)
                                     s += g.data[i * p + j] * bv2.data[k * p + j];
                                 ga.data[i * n + k] += s;
                             }
                         auto& gb = t.grad_buf(grads, pb); // dB = A^T * dC
                         for (std::size_t k = 0; k < n; ++k)
                             for (std::size_t j = 0; j < p; ++j) {
                                 T s{};
                                 for (std::size_t i = 0; i < m; ++i)
                                     s += av2.data[i * n + k] * g.data[i * p + j];
                                 gb.data[k * p + j] += s;
                             }
                     });
}

// y[..., o] = sum_i x[..., i] * w[o, i] + b[o]; leading dims are flattened.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &wv = tp.value(w), &bv = tp.value(b);
    if (xv.rank() < 1 || wv.rank() != 2 || xv.shape.back() != wv.shape[1]) {
        throw ShapeError("linear: input " + shape_str(xv.shape) + " incompatible with weight " +
                         shape_str(wv.shape));
    }
    const std::size_t in = wv.shape[1], out_dim = wv.shape[0];
    if (bv.numel() != out_dim) {
        throw ShapeError("linear: bias " + shape_str(bv.shape) + " incompatible with weight " +
                         shape_str(wv.shape));
    }
    const std::size_t rows = xv.numel() / in;
    Shape out_shape = xv.shape;
    out_shape.back() = out_dim;
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = &xv.data[r * in];
        T* yr = &out.data[r * out_dim];
        for (std::size_t o = 0; o < out_dim; ++o) yr[o] = bv.data[o];
        for (std::size_t i = 0; i < in; ++i) {
            const T xi = xr[i];
            const T* wcol = &wv.data[i]; // stride out over rows of w
            for (std::size_t o = 0; o < out_dim; ++o) yr[o] += xi * wcol[o * in];
        }
    }
    return tp.record(
        std::move(out), {x.id, w.id, b.id},
        [px = x.id, pw = w.id, pb = b.id, rows, in, out_dim](const Tape<T>& t, const Tensor<T>& g,
                                                             auto& grads) {
            const Tensor<T>&xv2 = t.value(px), &wv2 = t.value(pw);
            auto& gx = t.grad_buf(grads, px);
            auto& gw = t.grad_buf(grads, pw);
            auto& gb = t.grad_buf(grads, pb);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = &g.data[r * out_dim];
                const T* xr = &xv2.data[r * in];
                T* gxr = &gx.data[r * in];
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const T go = gr[o];
                    gb.data[o] += go;
                    const T* wrow = &wv2.data[o * in];
                    T* gwrow = &gw.data[o * in];
                    for (std::size_t i = 0; i < in; ++i) {
                        gxr[i] += go * wrow[i];
                        gwrow[i] += go * xr[i];
                    }
                }
            }
        });
}

// Swap the last two axes of a tensor of rank >= 2.
template <typename T>
Var<T> swap_last2(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.rank() < 2) throw ShapeError("swap_last2: needs rank >= 2, got " + shape_str(xv.shape));
    const std::size_t c = xv.shape[xv.rank() - 1], r = xv.shape[xv.rank() - 2];
    const std::size_t outer = xv.numel() / (r * c);
    Shape out_shape = xv.shape;
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                out.data[(o * c + j) * r + i] = xv.data[(o * r + i) * c + j];
    return tp.record(std::move(out), {x.id},
                     [px = x.id, outer, r, c](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                     gx.data[(o * r + i) * c + j] += g.data[(o * c + j) * r + i];
                     });
}

template <typename T>
Var<T> relu(Var<T> x) {
    Tape<T>& tp = *x.tape;
    Tensor<T> out = tp.value(x);
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    return tp.record(std::move(out), {x.id},
                     [px = x.id](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>& xv = t.value(px);
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                             if (xv.data[i] > T(0)) gx.data[i] += g.data[i];
                     });
}

// Exact Gaussian-CDF form: y = x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> x) {
    Tape<T>& tp = *x.tape;
    Tensor<T> out = tp.value(x);
    for (T& v : out.data) v = static_cast<T>(static_cast<double>(v) * detail::gauss_cdf(static_cast<double>(v)));
    return tp.record(std::move(out), {x.id},
                     [px = x.id](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>& xv = t.value(px);
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             const double u = static_cast<double>(xv.data[i]);
                             gx.data[i] += g.data[i] *
                                           static_cast<T>(detail::gauss_cdf(u) + u * detail::gauss_pdf(u));
                         }
                     });
}

// Clipped linear activation with learnable upper bound alpha (scalar):
// 0 below zero, identity on [0, alpha), alpha above.
// d y/d x = 1 on [0, alpha); d y/d alpha = 1 where x >= alpha.
template <typename T>
Var<T> pact(Var<T> x, Var<T> alpha) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& av = tp.value(alpha);
    if (!av.is_scalar()) throw ShapeError("pact: alpha must be scalar, got " + shape_str(av.shape));
    const T a = av.data[0];
    if (!(a > T(0))) throw ContractError("pact: alpha must be positive");
    Tensor<T> out = tp.value(x);
    for (T& v : out.data) v = v < T(0) ? T(0) : (v < a ? v : a);
    return tp.record(std::move(out), {x.id, alpha.id},
                     [px = x.id, pa = alpha.id, a](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>& xv = t.value(px);
                         auto& gx = t.grad_buf(grads, px);
                         auto& ga = t.grad_buf(grads, pa);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             const T v = xv.data[i];
                             if (v >= T(0) && v < a) gx.data[i] += g.data[i];
                             if (v >= a) ga.data[0] += g.data[i];
                         }
                     });
}

// ---------------------------------------------------------------------------
// Normalization layers (all normalize / rescale over the last axis unless a
// channel axis is given explicitly)
// ---------------------------------------------------------------------------

// y[..., c] = alpha[c] * x[..., c] + beta[c]
template <typename T>
Var<T> affine(Var<T> x, Var<T> alpha, Var<T> beta) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &av = tp.value(alpha), &bv = tp.value(beta);
    const std::size_t c = xv.shape.back();
    if (av.numel() != c || bv.numel() != c) {
        throw ContractError("affine: parameter length " + std::to_string(av.numel()) + "/" +
                            std::to_string(bv.numel()) + " does not match channel count " +
                            std::to_string(c));
    }
    const std::size_t rows = xv.numel() / c;
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i)
            out.data[r * c + i] = av.data[i] * xv.data[r * c + i] + bv.data[i];
    return tp.record(std::move(out), {x.id, alpha.id, beta.id},
                     [px = x.id, pa = alpha.id, pb = beta.id, rows, c](const Tape<T>& t,
                                                                       const Tensor<T>& g, auto& grads) {
                         const Tensor<T>&xv2 = t.value(px), &av2 = t.value(pa);
                         auto& gx = t.grad_buf(grads, px);
                         auto& ga = t.grad_buf(grads, pa);
                         auto& gb = t.grad_buf(grads, pb);
                         for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t i = 0; i < c; ++i) {
                                 const T go = g.data[r * c + i];
                                 gx.data[r * c + i] += go * av2.data[i];
                                 ga.data[i] += go * xv2.data[r * c + i];
                                 gb.data[i] += go;
                             }
                     });
}

// y = (x - E[x]) / sqrt(Var[x] + eps) * gamma + beta, statistics per last-axis row.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &gv = tp.value(gamma), &bv = tp.value(beta);
    const std::size_t c = xv.shape.back();
    if (gv.numel() != c || bv.numel() != c) {
        throw ContractError("layer_norm: parameter length does not match channel count " +
                            std::to_string(c));
    }
    const std::size_t rows = xv.numel() / c;
    Tensor<T> out(xv.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = &xv.data[r * c];
        T mu{};
        for (std::size_t i = 0; i < c; ++i) mu += xr[i];
        mu /= static_cast<T>(c);
        T var{};
        for (std::size_t i = 0; i < c; ++i) {
            const T d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < c; ++i)
            out.data[r * c + i] = (xr[i] - mu) * inv * gv.data[i] + bv.data[i];
    }
    return tp.record(
        std::move(out), {x.id, gamma.id, beta.id},
        [px = x.id, pg = gamma.id, pb = beta.id, rows, c, eps](const Tape<T>& t, const Tensor<T>& g,
                                                               auto& grads) {
            const Tensor<T>&xv2 = t.value(px), &gv2 = t.value(pg);
            auto& gx = t.grad_buf(grads, px);
            auto& gg = t.grad_buf(grads, pg);
            auto& gb = t.grad_buf(grads, pb);
            std::vector<T> xhat(c), h(c);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = &xv2.data[r * c];
                const T* gr = &g.data[r * c];
                T mu{};
                for (std::size_t i = 0; i < c; ++i) mu += xr[i];
                mu /= static_cast<T>(c);
                T var{};
                for (std::size_t i = 0; i < c; ++i) {
                    const T d = xr[i] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(c);
                const T inv = T(1) / std::sqrt(var + eps);
                T mean_h{}, mean_hx{};
                for (std::size_t i = 0; i < c; ++i) {
                    xhat[i] = (xr[i] - mu) * inv;
                    h[i] = gr[i] * gv2.data[i];
                    mean_h += h[i];
                    mean_hx += h[i] * xhat[i];
                }
                mean_h /= static_cast<T>(c);
                mean_hx /= static_cast<T>(c);
                for (std::size_t i = 0; i < c; ++i) {
                    gx.data[r * c + i] += (h[i] - mean_h - xhat[i] * mean_hx) * inv;
                    gg.data[i] += gr[i] * xhat[i];
                    gb.data[i] += gr[i];
                }
            }
        });
}

namespace detail {

// Decompose flat index over (outer, channel, inner) for a given channel axis.
struct ChannelLayout {
    std::size_t channels, inner, outer, group; // group = reduction set size
};

template <typename T>
ChannelLayout channel_layout(const Tensor<T>& x, std::size_t axis) {
    ChannelLayout l{};
    l.channels = x.shape[axis];
    l.inner = 1;
    for (std::size_t d = axis + 1; d < x.rank(); ++d) l.inner *= x.shape[d];
    l.outer = 1;
    for (std::size_t d = 0; d < axis; ++d) l.outer *= x.shape[d];
    l.group = l.outer * l.inner;
    return l;
}

} // namespace detail

// Batch normalization with batch statistics (training mode). Statistics are
// computed per channel over every other axis; the batch axis must have at
// least two entries. Mean/variance used are returned through the out
// parameters so callers can maintain running estimates.
template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps, std::size_t channel_axis,
                        Tensor<T>* batch_mean_out = nullptr, Tensor<T>* batch_var_out = nullptr) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &gv = tp.value(gamma), &bv = tp.value(beta);
    if (channel_axis >= xv.rank()) throw ContractError("batch_norm: channel axis out of range");
    if (xv.shape[0] < 2) {
        throw DegenerateInputError("batch_norm: training mode requires batch size >= 2");
    }
    const auto lay = detail::channel_layout(xv, channel_axis);
    if (gv.numel() != lay.channels || bv.numel() != lay.channels) {
        throw ContractError("batch_norm: parameter length does not match channel count");
    }
    Tensor<T> mean({lay.channels}), var({lay.channels});
    for (std::size_t c = 0; c < lay.channels; ++c) {
        T mu{};
        for (std::size_t o = 0; o < lay.outer; ++o)
            for (std::size_t i = 0; i < lay.inner; ++i)
                mu += xv.data[(o * lay.channels + c) * lay.inner + i];
        mu /= static_cast<T>(lay.group);
        T v{};
        for (std::size_t o = 0; o < lay.outer; ++o)
            for (std::size_t i = 0; i < lay.inner; ++i) {
                const T d = xv.data[(o * lay.channels + c) * lay.inner + i] - mu;
                v += d * d;
            }
        v /= static_cast<T>(lay.group);
        mean.data[c] = mu;
        var.data[c] = v;
    }
    if (batch_mean_out) *batch_mean_out = mean;
    if (batch_var_out) *batch_var_out = var;
    Tensor<T> out(xv.shape);
    for (std::size_t c = 0; c < lay.channels; ++c) {
        const T inv = T(1) / std::sqrt(var.data[c] + eps);
        for (std::size_t o = 0; o < lay.outer; ++o)
            for (std::size_t i = 0; i < lay.inner; ++i) {
                const std::size_t k = (o * lay.channels + c) * lay.inner + i;
                out.data[k] = (xv.data[k] - mean.data[c]) * inv * gv.data[c] + bv.data[c];
            }
    }
    return tp.record(
        std::move(out), {x.id, gamma.id, beta.id},
        [px = x.id, pg = gamma.id, pb = beta.id, lay, eps, mean, var](const Tape<T>& t,
                                                                      const Tensor<T>& g, auto& grads) {
            const Tensor<T>&xv2 = t.value(px), &gv2 = t.value(pg);
            auto& gx = t.grad_buf(grads, px);
            auto& gg = t.grad_buf(grads, pg);
            auto& gb = t.grad_buf(grads, pb);
            const T n = static_cast<T>(lay.group);
            for (std::size_t c = 0; c < lay.channels; ++c) {
                const T inv = T(1) / std::sqrt(var.data[c] + eps);
                T sum_h{}, sum_hx{};
                for (std::size_t o = 0; o < lay.outer; ++o)
                    for (std::size_t i = 0; i < lay.inner; ++i) {
                        const std::size_t k = (o * lay.channels + c) * lay.inner + i;
                        const T xhat = (xv2.data[k] - mean.data[c]) * inv;
                        const T h = g.data[k] * gv2.data[c];
                        sum_h += h;
                        sum_hx += h * xhat;
                        gg.data[c] += g.data[k] * xhat;
                        gb.data[c] += g.data[k];
                    }
                const T mean_h = sum_h / n, mean_hx = sum_hx / n;
                for (std::size_t o = 0; o < lay.outer; ++o)
                    for (std::size_t i = 0; i < lay.inner; ++i) {
                        const std::size_t k = (o * lay.channels + c) * lay.inner + i;
                        const T xhat = (xv2.data[k] - mean.data[c]) * inv;
                        const T h = g.data[k] * gv2.data[c];
                        gx.data[k] += (h - mean_h - xhat * mean_hx) * inv;
                    }
            }
        });
}

// Batch normalization with fixed (running) statistics: a per-channel affine map.
template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& mean,
                       const Tensor<T>& var, T eps, std::size_t channel_axis) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &gv = tp.value(gamma), &bv = tp.value(beta);
    if (channel_axis >= xv.rank()) throw ContractError("batch_norm: channel axis out of range");
    const auto lay = detail::channel_layout(xv, channel_axis);
    if (gv.numel() != lay.channels || bv.numel() != lay.channels || mean.numel() != lay.channels ||
        var.numel() != lay.channels) {
        throw ContractError("batch_norm: parameter length does not match channel count");
    }
    Tensor<T> out(xv.shape);
    for (std::size_t c = 0; c < lay.channels; ++c) {
        const T inv = T(1) / std::sqrt(var.data[c] + eps);
        for (std::size_t o = 0; o < lay.outer; ++o)
            for (std::size_t i = 0; i < lay.inner; ++i) {
                const std::size_t k = (o * lay.channels + c) * lay.inner + i;
                out.data[k] = (xv.data[k] - mean.data[c]) * inv * gv.data[c] + bv.data[c];
            }
    }
    return tp.record(std::move(out), {x.id, gamma.id, beta.id},
                     [px = x.id, pg = gamma.id, pb = beta.id, lay, eps, mean,
                      var](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>&xv2 = t.value(px), &gv2 = t.value(pg);
                         auto& gx = t.grad_buf(grads, px);
                         auto& gg = t.grad_buf(grads, pg);
                         auto& gb = t.grad_buf(grads, pb);
                         for (std::size_t c = 0; c < lay.channels; ++c) {
                             const T inv = T(1) / std::sqrt(var.data[c] + eps);
                             for (std::size_t o = 0; o < lay.outer; ++o)
                                 for (std::size_t i = 0; i < lay.inner; ++i) {
                                     const std::size_t k = (o * lay.channels + c) * lay.inner + i;
                                     gx.data[k] += g.data[k] * gv2.data[c] * inv;
                                     gg.data[c] += g.data[k] * (xv2.data[k] - mean.data[c]) * inv;
                                     gb.data[c] += g.data[k];
                                 }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Convolutions and patch handling (NCHW layout)
// ---------------------------------------------------------------------------

enum class ConvMode { depthwise, pointwise };

// Cross-correlation with zero padding preserving H x W.
// depthwise: kernel [C,1,k,k] with odd k; pointwise: kernel [C_out,C,1,1].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, ConvMode mode) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &kv = tp.value(kernel);
    if (xv.rank() != 4) throw ShapeError("conv2d: input must be BxCxHxW, got " + shape_str(xv.shape));
    const std::size_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (mode == ConvMode::depthwise) {
        if (kv.rank() != 4 || kv.shape[0] != C || kv.shape[1] != 1 || kv.shape[2] != kv.shape[3]) {
            throw ShapeError("conv2d(depthwise): kernel must be Cx1xkxk, got " + shape_str(kv.shape));
        }
        const std::size_t k = kv.shape[2];
        if (k % 2 == 0) {
            throw ConfigError("conv2d(depthwise): even kernel size " + std::to_string(k) +
                              " is unsupported");
        }
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
        Tensor<T> out({B, C, H, W});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const T* xs = &xv.data[(b * C + c) * H * W];
                const T* ks = &kv.data[c * k * k];
                T* ys = &out.data[(b * C + c) * H * W];
                for (std::size_t i = 0; i < H; ++i)
                    for (std::size_t j = 0; j < W; ++j) {
                        T s{};
                        for (std::size_t u = 0; u < k; ++u) {
                            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + u) - r;
                            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t v = 0; v < k; ++v) {
                                const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + v) - r;
                                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                                s += xs[static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj)] *
                                     ks[u * k + v];
                            }
                        }
                        ys[i * W + j] = s;
                    }
            }
        return tp.record(
            std::move(out), {x.id, kernel.id},
            [px = x.id, pk = kernel.id, B, C, H, W, k, r](const Tape<T>& t, const Tensor<T>& g,
                                                          auto& grads) {
                const Tensor<T>&xv2 = t.value(px), &kv2 = t.value(pk);
                auto& gx = t.grad_buf(grads, px);
                auto& gk = t.grad_buf(grads, pk);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const T* xs = &xv2.data[(b * C + c) * H * W];
                        const T* ks = &kv2.data[c * k * k];
                        const T* gs = &g.data[(b * C + c) * H * W];
                        T* gxs = &gx.data[(b * C + c) * H * W];
                        T* gks = &gk.data[c * k * k];
                        for (std::size_t i = 0; i < H; ++i)
                            for (std::size_t j = 0; j < W; ++j) {
                                const T go = gs[i * W + j];
                                for (std::size_t u = 0; u < k; ++u) {
                                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + u) - r;
                                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t v = 0; v < k; ++v) {
                                        const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + v) - r;
                                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                                        const std::size_t src =
                                            static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj);
                                        gxs[src] += go * ks[u * k + v];
                                        gks[u * k + v] += go * xs[src];
                                    }
                                }
                            }
                    }
            });
    }
    // pointwise
    if (kv.rank() != 4 || kv.shape[1] != C || kv.shape[2] != 1 || kv.shape[3] != 1) {
        throw ShapeError("conv2d(pointwise): kernel must be C_outxCx1x1, got " + shape_str(kv.shape));
    }
    const std::size_t Co = kv.shape[0];
    Tensor<T> out({B, Co, H, W});
    const std::size_t hw = H * W;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Co; ++o) {
            T* ys = &out.data[(b * Co + o) * hw];
            for (std::size_t c = 0; c < C; ++c) {
                const T kv_oc = kv.data[o * C + c];
                const T* xs = &xv.data[(b * C + c) * hw];
                for (std::size_t p = 0; p < hw; ++p) ys[p] += kv_oc * xs[p];
            }
        }
    return tp.record(std::move(out), {x.id, kernel.id},
                     [px = x.id, pk = kernel.id, B, C, Co, hw](const Tape<T>& t, const Tensor<T>& g,
                                                               auto& grads) {
                         const Tensor<T>&xv2 = t.value(px), &kv2 = t.value(pk);
                         auto& gx = t.grad_buf(grads, px);
                         auto& gk = t.grad_buf(grads, pk);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t o = 0; o < Co; ++o) {
                                 const T* gs = &g.data[(b * Co + o) * hw];
                                 for (std::size_t c = 0; c < C; ++c) {
                                     const T kv_oc = kv2.data[o * C + c];
                                     const T* xs = &xv2.data[(b * C + c) * hw];
                                     T* gxs = &gx.data[(b * C + c) * hw];
                                     T acc{};
                                     for (std::size_t p = 0; p < hw; ++p) {
                                         gxs[p] += gs[p] * kv_oc;
                                         acc += gs[p] * xs[p];
                                     }
                                     gk.data[o * C + c] += acc;
                                 }
                             }
                     });
}

// y[b,c,:,:] = x[b,c,:,:] + bias[c]
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>&xv = tp.value(x), &bv = tp.value(bias);
    if (xv.rank() != 4 || bv.numel() != xv.shape[1]) {
        throw ShapeError("add_channel_bias: bias " + shape_str(bv.shape) + " vs input " +
                         shape_str(xv.shape));
    }
    const std::size_t B = xv.shape[0], C = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
    Tensor<T> out = xv;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < hw; ++p) out.data[(b * C + c) * hw + p] += bv.data[c];
    return tp.record(std::move(out), {x.id, bias.id},
                     [px = x.id, pb = bias.id, B, C, hw](const Tape<T>& t, const Tensor<T>& g,
                                                         auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         auto& gb = t.grad_buf(grads, pb);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t p = 0; p < hw; ++p) {
                                     gx.data[(b * C + c) * hw + p] += g.data[(b * C + c) * hw + p];
                                     gb.data[c] += g.data[(b * C + c) * hw + p];
                                 }
                     });
}

// Non-overlapping PxP patches, flattened channel-major:
// [B,C,H,W] -> [B,T,P*P*C] with T = (H/P)*(W/P).
template <typename T>
Var<T> extract_patches(Var<T> x, std::size_t patch) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.rank() != 4) throw ShapeError("extract_patches: input must be BxCxHxW");
    const std::size_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (patch == 0 || H % patch != 0 || W % patch != 0) {
        throw ContractError("extract_patches: patch " + std::to_string(patch) +
                            " does not divide image " + std::to_string(H) + "x" + std::to_string(W));
    }
    const std::size_t gh = H / patch, gw = W / patch, tcount = gh * gw, feat = patch * patch * C;
    Tensor<T> out({B, tcount, feat});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t gi = 0; gi < gh; ++gi)
            for (std::size_t gj = 0; gj < gw; ++gj)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t pi = 0; pi < patch; ++pi)
                        for (std::size_t pj = 0; pj < patch; ++pj) {
                            const std::size_t tix = gi * gw + gj;
                            const std::size_t f = (c * patch + pi) * patch + pj;
                            out.data[(b * tcount + tix) * feat + f] =
                                xv.data[((b * C + c) * H + gi * patch + pi) * W + gj * patch + pj];
                        }
    return tp.record(std::move(out), {x.id},
                     [px = x.id, B, C, H, W, patch, gh, gw, tcount, feat](const Tape<T>& t,
                                                                          const Tensor<T>& g,
                                                                          auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t gi = 0; gi < gh; ++gi)
                                 for (std::size_t gj = 0; gj < gw; ++gj)
                                     for (std::size_t c = 0; c < C; ++c)
                                         for (std::size_t pi = 0; pi < patch; ++pi)
                                             for (std::size_t pj = 0; pj < patch; ++pj) {
                                                 const std::size_t tix = gi * gw + gj;
                                                 const std::size_t f = (c * patch + pi) * patch + pj;
                                                 gx.data[((b * C + c) * H + gi * patch + pi) * W +
                                                         gj * patch + pj] +=
                                                     g.data[(b * tcount + tix) * feat + f];
                                             }
                     });
}

// [B,T,C] -> [B,C,h,w] with T = h*w (token t sits at (t/w, t%w)).
template <typename T>
Var<T> to_grid(Var<T> x, std::size_t h, std::size_t w) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.rank() != 3 || xv.shape[1] != h * w) {
        throw ShapeError("to_grid: input " + shape_str(xv.shape) + " does not match grid " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    const std::size_t B = xv.shape[0], tcount = h * w, C = xv.shape[2];
    Tensor<T> out({B, C, h, w});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t tix = 0; tix < tcount; ++tix)
            for (std::size_t c = 0; c < C; ++c)
                out.data[((b * C + c) * h + tix / w) * w + tix % w] =
                    xv.data[(b * tcount + tix) * C + c];
    return tp.record(std::move(out), {x.id},
                     [px = x.id, B, tcount, C, h, w](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t tix = 0; tix < tcount; ++tix)
                                 for (std::size_t c = 0; c < C; ++c)
                                     gx.data[(b * tcount + tix) * C + c] +=
                                         g.data[((b * C + c) * h + tix / w) * w + tix % w];
                     });
}

// [B,C,H,W] -> [B,H,W,C] and back; used to run last-axis norms over channels.
template <typename T>
Var<T> channels_last(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.rank() != 4) throw ShapeError("channels_last: input must be BxCxHxW");
    const std::size_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tensor<T> out({B, H, W, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    out.data[((b * H + i) * W + j) * C + c] = xv.data[((b * C + c) * H + i) * W + j];
    return tp.record(std::move(out), {x.id},
                     [px = x.id, B, C, H, W](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t i = 0; i < H; ++i)
                                     for (std::size_t j = 0; j < W; ++j)
                                         gx.data[((b * C + c) * H + i) * W + j] +=
                                             g.data[((b * H + i) * W + j) * C + c];
                     });
}

template <typename T>
Var<T> channels_first(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.rank() != 4) throw ShapeError("channels_first: input must be BxHxWxC");
    const std::size_t B = xv.shape[0], H = xv.shape[1], W = xv.shape[2], C = xv.shape[3];
    Tensor<T> out({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                for (std::size_t c = 0; c < C; ++c)
                    out.data[((b * C + c) * H + i) * W + j] = xv.data[((b * H + i) * W + j) * C + c];
    return tp.record(std::move(out), {x.id},
                     [px = x.id, B, C, H, W](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t i = 0; i < H; ++i)
                                 for (std::size_t j = 0; j < W; ++j)
                                     for (std::size_t c = 0; c < C; ++c)
                                         gx.data[((b * H + i) * W + j) * C + c] +=
                                             g.data[((b * C + c) * H + i) * W + j];
                     });
}

// ---------------------------------------------------------------------------
// Slicing / concatenation over the last axis (channel groups)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> slice_lastdim(Var<T> x, std::size_t start, std::size_t len) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    const std::size_t c = xv.shape.back();
    if (start + len > c) {
        throw ShapeError("slice_lastdim: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for " + shape_str(xv.shape));
    }
    const std::size_t rows = xv.numel() / c;
    Shape out_shape = xv.shape;
    out_shape.back() = len;
    Tensor<T> out(out_shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < len; ++i) out.data[r * len + i] = xv.data[r * c + start + i];
    return tp.record(std::move(out), {x.id},
                     [px = x.id, rows, c, start, len](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t i = 0; i < len; ++i)
                                 gx.data[r * c + start + i] += g.data[r * len + i];
                     });
}

template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_lastdim: no parts");
    Tape<T>& tp = *parts[0].tape;
    std::size_t total = 0;
    const Tensor<T>& first = tp.value(parts[0]);
    Shape lead = first.shape;
    lead.pop_back();
    for (const auto& p : parts) {
        const Tensor<T>& v = tp.value(p);
        Shape l = v.shape;
        l.pop_back();
        if (l != lead) throw ShapeError("concat_lastdim: leading shapes differ");
        total += v.shape.back();
    }
    const std::size_t rows = numel_of(lead);
    Shape out_shape = first.shape;
    out_shape.back() = total;
    Tensor<T> out(out_shape);
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        ids.push_back(p.id);
        widths.push_back(tp.value(p).shape.back());
    }
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor<T>& v = tp.value(parts[pi]);
        const std::size_t w = widths[pi];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < w; ++i) out.data[r * total + off + i] = v.data[r * w + i];
        off += w;
    }
    return tp.record(std::move(out), ids,
                     [ids, widths, rows, total](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         std::size_t off2 = 0;
                         for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                             auto& gp = t.grad_buf(grads, ids[pi]);
                             const std::size_t w = widths[pi];
                             for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t i = 0; i < w; ++i)
                                     gp.data[r * w + i] += g.data[r * total + off2 + i];
                             off2 += w;
                         }
                     });
}

// ---------------------------------------------------------------------------
// Reductions and loss
// ---------------------------------------------------------------------------

// [B,T,C] -> [B,C] mean over tokens, or [B,C,H,W] -> [B,C] mean over pixels.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    if (xv.rank() == 3) {
        const std::size_t B = xv.shape[0], tcount = xv.shape[1], C = xv.shape[2];
        Tensor<T> out({B, C});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t tix = 0; tix < tcount; ++tix)
                for (std::size_t c = 0; c < C; ++c)
                    out.data[b * C + c] += xv.data[(b * tcount + tix) * C + c];
        for (T& v : out.data) v /= static_cast<T>(tcount);
        return tp.record(std::move(out), {x.id},
                         [px = x.id, B, tcount, C](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                             auto& gx = t.grad_buf(grads, px);
                             const T inv = T(1) / static_cast<T>(tcount);
                             for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t tix = 0; tix < tcount; ++tix)
                                     for (std::size_t c = 0; c < C; ++c)
                                         gx.data[(b * tcount + tix) * C + c] +=
                                             g.data[b * C + c] * inv;
                         });
    }
    if (xv.rank() == 4) {
        const std::size_t B = xv.shape[0], C = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
        Tensor<T> out({B, C});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                T s{};
                for (std::size_t p = 0; p < hw; ++p) s += xv.data[(b * C + c) * hw + p];
                out.data[b * C + c] = s / static_cast<T>(hw);
            }
        return tp.record(std::move(out), {x.id},
                         [px = x.id, B, C, hw](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                             auto& gx = t.grad_buf(grads, px);
                             const T inv = T(1) / static_cast<T>(hw);
                             for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t c = 0; c < C; ++c)
                                     for (std::size_t p = 0; p < hw; ++p)
                                         gx.data[(b * C + c) * hw + p] += g.data[b * C + c] * inv;
                         });
    }
    throw ShapeError("global_avg_pool: expected rank 3 or 4, got " + shape_str(xv.shape));
}

template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    T s{};
    for (const T& v : xv.data) s += v; // fixed left-to-right order
    return tp.record(Tensor<T>::scalar(s), {x.id},
                     [px = x.id](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         auto& gx = t.grad_buf(grads, px);
                         for (T& v : gx.data) v += g.data[0];
                     });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const std::size_t n = tp.value(x).numel();
    return scale(sum_all(x), T(1) / static_cast<T>(n));
}

// Mean cross-entropy from logits [B,K] against integer labels.
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const std::vector<int>& labels) {
    Tape<T>& tp = *logits.tape;
    const Tensor<T>& lv = tp.value(logits);
    if (lv.rank() != 2) throw ShapeError("cross_entropy: logits must be BxK");
    const std::size_t B = lv.shape[0], K = lv.shape[1];
    if (labels.size() != B) throw ContractError("cross_entropy: label count does not match batch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= K)
            throw ContractError("cross_entropy: label out of range");
    T loss{};
    for (std::size_t b = 0; b < B; ++b) {
        const T* row = &lv.data[b * K];
        T mx = row[0];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        T lse{};
        for (std::size_t k = 0; k < K; ++k) lse += std::exp(row[k] - mx);
        lse = mx + std::log(lse);
        loss += lse - row[static_cast<std::size_t>(labels[b])];
    }
    loss /= static_cast<T>(B);
    if (!std::isfinite(static_cast<double>(loss))) {
        throw NumericError("cross_entropy: non-finite loss");
    }
    return tp.record(Tensor<T>::scalar(loss), {logits.id},
                     [pl = logits.id, labels, B, K](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>& lv2 = t.value(pl);
                         auto& gl = t.grad_buf(grads, pl);
                         const T gs = g.data[0] / static_cast<T>(B);
                         for (std::size_t b = 0; b < B; ++b) {
                             const T* row = &lv2.data[b * K];
                             T mx = row[0];
                             for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
                             T z{};
                             for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
                             for (std::size_t k = 0; k < K; ++k) {
                                 T p = std::exp(row[k] - mx) / z;
                                 if (static_cast<std::size_t>(labels[b]) == k) p -= T(1);
                                 gl.data[b * K + k] += gs * p;
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Simulated quantization (quantize-then-dequantize in real arithmetic) with a
// straight-through gradient: pass where the integer is representable without
// clamping, zero where the clamp saturates.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> fake_quant(Var<T> x, const QuantParams& qp) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.value(x);
    qp.check_applicable(xv.shape);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        const std::size_t c = qp.channel_of(xv.shape, i);
        out.data[i] = static_cast<T>(qp.fake_quant_value(static_cast<double>(xv.data[i]), c));
    }
    return tp.record(std::move(out), {x.id},
                     [px = x.id, qp](const Tape<T>& t, const Tensor<T>& g, auto& grads) {
                         const Tensor<T>& xv2 = t.value(px);
                         auto& gx = t.grad_buf(grads, px);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             const std::size_t c = qp.channel_of(xv2.shape, i);
                             if (!qp.saturates(static_cast<double>(xv2.data[i]), c))
                                 gx.data[i] += g.data[i];
                         }
                     });
}

} // namespace qmlp
