#pragma once

#include <functional>
#include <unordered_map>

#include "adamesh/tensor.hpp"

namespace adamesh {

/// Reverse-mode tape over Tensor<S>. One tape per forward pass; parameters
/// register as cached leaves so re-using a weight twice in one graph
/// accumulates its gradient once.
template <class S>
class Tape {
public:
    struct Var {
        int idx = -1;
        bool valid() const { return idx >= 0; }
    };

    const Tensor<S>& val(Var v) const { return nodes_[std::size_t(v.idx)].value; }
    Tensor<S>& grad(Var v) { return nodes_[std::size_t(v.idx)].grad; }

    /// Constant input: participates in values only, never receives gradient.
    Var constant(Tensor<S> t) { return push(std::move(t), false, {}); }

    /// Trainable/checked parameter leaf, cached by storage address.
    Var param(Tensor<S>& t) {
        auto it = leaf_cache_.find(&t);
        if (it != leaf_cache_.end()) return Var{it->second};
        Var v = push(t, true, {});
        leaf_cache_[&t] = v.idx;
        return v;
    }

    bool has_grad_for(const Tensor<S>& t) const { return leaf_cache_.count(&t) != 0; }

    /// Gradient accumulated at a parameter leaf after backward().
    const Tensor<S>& grad_of(const Tensor<S>& t) {
        auto it = leaf_cache_.find(&t);
        if (it == leaf_cache_.end()) throw NumericError("tape: tensor is not a registered leaf");
        return nodes_[std::size_t(it->second)].grad;
    }

    // -- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor<S> out = val(a);
        const auto& bv = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            accumulate(a, grad(o));
            accumulate(b, grad(o));
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor<S> out = val(a);
        const auto& bv = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            accumulate(a, grad(o));
            if (!needs(b)) return;
            Tensor<S> g = grad(o);
            for (auto& v : g.data) v = -v;
            accumulate(b, g);
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor<S> out = val(a);
        const auto& bv = val(b);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            const auto& go = grad(o);
            if (needs(a)) {
                Tensor<S> g = val(b);
                for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= go.data[i];
                accumulate(a, g);
            }
            if (needs(b)) {
                Tensor<S> g = val(a);
                for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= go.data[i];
                accumulate(b, g);
            }
        });
    }

    Var scale(Var a, S c) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v *= c;
        return push(std::move(out), needs(a), [this, a, c](Var o) {
            Tensor<S> g = grad(o);
            for (auto& v : g.data) v *= c;
            accumulate(a, g);
        });
    }

    /// tanh-form GELU; smooth everywhere, which the finite-difference
    /// checker needs.
    Var gelu(Var a) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v = S(gelu_fwd(double(v)));
        return push(std::move(out), needs(a), [this, a](Var o) {
            Tensor<S> g = grad(o);
            const auto& x = val(a);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                g.data[i] *= S(gelu_grad(double(x.data[i])));
            accumulate(a, g);
        });
    }

    /// Value copies through, gradient does not (the sg[.] operator).
    Var detach(Var a) { return constant(val(a)); }

    // -- shape / gather ----------------------------------------------------

    /// out.data[i] = in.data[map[i]]; backward scatter-adds.
    Var gather_flat(Var a, std::vector<std::size_t> map, std::vector<std::size_t> out_shape) {
        Tensor<S> out(out_shape);
        const auto& av = val(a);
        for (std::size_t i = 0; i < map.size(); ++i) out.data[i] = av.data[map[i]];
        return push(std::move(out), needs(a), [this, a, map = std::move(map)](Var o) {
            Tensor<S> g(val(a).shape);
            const auto& go = grad(o);
            for (std::size_t i = 0; i < map.size(); ++i) g.data[map[i]] += go.data[i];
            accumulate(a, g);
        });
    }

    /// Row gather from a [M x d] table (embedding lookup / codebook fetch).
    Var embed_rows(Var table, const std::vector<std::size_t>& idx) {
        const auto& tv = val(table);
        std::size_t d = tv.shape.at(1);
        std::vector<std::size_t> map(idx.size() * d);
        for (std::size_t t = 0; t < idx.size(); ++t) {
            if (idx[t] >= tv.shape[0]) throw DataError("embed_rows: index out of range");
            for (std::size_t j = 0; j < d; ++j) map[t * d + j] = idx[t] * d + j;
        }
        return gather_flat(table, std::move(map), {idx.size(), d});
    }

    /// Concatenate [T x d_i] blocks along columns.
    Var concat_cols(const std::vector<Var>& parts) {
        std::size_t rows = val(parts.at(0)).shape.at(0), cols = 0;
        for (Var p : parts) cols += val(p).shape.at(1);
        Tensor<S> out({rows, cols});
        bool ng = false;
        std::size_t off = 0;
        for (Var p : parts) {
            const auto& pv = val(p);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < pv.shape[1]; ++c) out(r, off + c) = pv(r, c);
            off += pv.shape[1];
            ng = ng || needs(p);
        }
        return push(std::move(out), ng, [this, parts](Var o) {
            const auto& go = grad(o);
            std::size_t rows = go.shape[0], off2 = 0;
            for (Var p : parts) {
                std::size_t d = val(p).shape[1];
                if (needs(p)) {
                    Tensor<S> g(val(p).shape);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < d; ++c) g(r, c) = go(r, off2 + c);
                    accumulate(p, g);
                }
                off2 += d;
            }
        });
    }

    /// Column slice of a [T x d] var.
    Var slice_cols(Var a, std::size_t start, std::size_t len) {
        const auto& av = val(a);
        std::size_t rows = av.shape.at(0), cols = av.shape.at(1);
        if (start + len > cols) throw NumericError("slice_cols: out of range");
        std::vector<std::size_t> map(rows * len);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c) map[r * len + c] = r * cols + start + c;
        return gather_flat(a, std::move(map), {rows, len});
    }

    /// Broadcast a length-d vector to [T x d] rows (backward sums rows).
    Var broadcast_row(Var v, std::size_t rows) {
        const auto& vv = val(v);
        std::size_t d = vv.numel();
        std::vector<std::size_t> map(rows * d);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) map[r * d + c] = c;
        return gather_flat(v, std::move(map), {rows, d});
    }

    /// Nearest-frame repeat upsampling along time: [T x d] -> [T*w x d].
    Var upsample_repeat(Var a, std::size_t w) {
        const auto& av = val(a);
        std::size_t rows = av.shape.at(0), d = av.shape.at(1);
        std::vector<std::size_t> map(rows * w * d);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < w; ++k)
                for (std::size_t c = 0; c < d; ++c) map[(r * w + k) * d + c] = r * d + c;
        return gather_flat(a, std::move(map), {rows * w, d});
    }

    /// Forward difference along time: out[t] = x[t+1] - x[t], length T-1.
    Var row_diff(Var a) {
        const auto& av = val(a);
        std::size_t rows = av.shape.at(0), d = av.shape.at(1);
        if (rows < 2) throw DataError("row_diff: need at least 2 rows");
        Tensor<S> out({rows - 1, d});
        for (std::size_t r = 0; r + 1 < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) out(r, c) = av(r + 1, c) - av(r, c);
        return push(std::move(out), needs(a), [this, a](Var o) {
            const auto& go = grad(o);
            Tensor<S> g(val(a).shape);
            std::size_t d2 = go.shape[1];
            for (std::size_t r = 0; r < go.shape[0]; ++r)
                for (std::size_t c = 0; c < d2; ++c) {
                    g(r + 1, c) += go(r, c);
                    g(r, c) -= go(r, c);
                }
            accumulate(a, g);
        });
    }

    // -- linear algebra ------------------------------------------------------

    /// C = op(A) . op(B), transposition flags select the operand layout.
    Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
        const auto& A = val(a);
        const auto& B = val(b);
        std::size_t p = ta ? A.shape.at(1) : A.shape.at(0);
        std::size_t q = ta ? A.shape.at(0) : A.shape.at(1);
        std::size_t qb = tb ? B.shape.at(1) : B.shape.at(0);
        std::size_t r = tb ? B.shape.at(0) : B.shape.at(1);
        if (q != qb) throw NumericError("matmul: inner dimension mismatch");
        Tensor<S> out({p, r});
        gemm(A, B, out, ta, tb, p, q, r);
        return push(std::move(out), needs(a) || needs(b), [this, a, b, ta, tb](Var o) {
            const auto& go = grad(o);
            const auto& A2 = val(a);
            const auto& B2 = val(b);
            if (needs(a)) {
                Tensor<S> gA(A2.shape);
                // dA = ta ? op(B).goT : go.op(B)T   (shape of A)
                if (!ta)
                    gemm_into(go, B2, gA, false, !tb);
                else
                    gemm_into(B2, go, gA, tb, true);
                accumulate(a, gA);
            }
            if (needs(b)) {
                Tensor<S> gB(B2.shape);
                if (!tb)
                    gemm_into(A2, go, gB, !ta, false);
                else
                    gemm_into(go, A2, gB, true, ta);
                accumulate(b, gB);
            }
        });
    }

    /// y = x . W^T + b for x [T x n], W [m x n], b [m].
    Var linear(Var x, Var W, Var b) {
        Var y = matmul(x, W, false, true);
        return add_bias_rows(y, b);
    }
    Var linear(Var x, Var W) { return matmul(x, W, false, true); }

    Var add_bias_rows(Var x, Var b) {
        const auto& xv = val(x);
        const auto& bv = val(b);
        if (xv.shape.at(1) != bv.numel()) throw NumericError("bias: dimension mismatch");
        Tensor<S> out = xv;
        for (std::size_t r = 0; r < out.shape[0]; ++r)
            for (std::size_t c = 0; c < out.shape[1]; ++c) out(r, c) += bv.data[c];
        return push(std::move(out), needs(x) || needs(b), [this, x, b](Var o) {
            const auto& go = grad(o);
            accumulate(x, go);
            if (!needs(b)) return;
            Tensor<S> g(val(b).shape);
            for (std::size_t r = 0; r < go.shape[0]; ++r)
                for (std::size_t c = 0; c < go.shape[1]; ++c) g.data[c] += go(r, c);
            accumulate(b, g);
        });
    }

    // -- convolution ---------------------------------------------------------

    enum class Pad { Zero, Wrap };

    /// 1-D cross-correlation over time. x [T x n], W [m x n x k] (k odd),
    /// b [m], output [T/stride x m]. T must be divisible by stride.
    Var conv1d(Var x, Var W, Var b, std::size_t stride = 1, Pad pad = Pad::Zero) {
        const auto& xv = val(x);
        const auto& wv = val(W);
        std::size_t T = xv.shape.at(0), n = xv.shape.at(1);
        std::size_t m = wv.shape.at(0), k = wv.shape.at(2);
        if (wv.shape.at(1) != n) throw NumericError("conv1d: channel mismatch");
        if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd");
        if (T % stride != 0) throw DataError("conv1d: length not divisible by stride");
        std::size_t To = T / stride;
        long hk = long(k) / 2;
        Tensor<S> out({To, m});
        for (std::size_t to = 0; to < To; ++to) {
            for (std::size_t c = 0; c < m; ++c) {
                S acc = val(b).data[c];
                for (std::size_t j = 0; j < k; ++j) {
                    long t = long(to * stride) + long(j) - hk;
                    if (pad == Pad::Wrap)
                        t = ((t % long(T)) + long(T)) % long(T);
                    else if (t < 0 || t >= long(T))
                        continue;
                    for (std::size_t ci = 0; ci < n; ++ci)
                        acc += wv(c, ci, j) * xv(std::size_t(t), ci);
                }
                out(to, c) = acc;
            }
        }
        bool ng = needs(x) || needs(W) || needs(b);
        return push(std::move(out), ng, [this, x, W, b, stride, pad, T, n, m, k, hk](Var o) {
            const auto& go = grad(o);
            const auto& xv2 = val(x);
            const auto& wv2 = val(W);
            std::size_t To = T / stride;
            Tensor<S> gx(xv2.shape), gw(wv2.shape), gb(val(b).shape);
            for (std::size_t to = 0; to < To; ++to) {
                for (std::size_t c = 0; c < m; ++c) {
                    S g = go(to, c);
                    gb.data[c] += g;
                    for (std::size_t j = 0; j < k; ++j) {
                        long t = long(to * stride) + long(j) - hk;
                        if (pad == Pad::Wrap)
                            t = ((t % long(T)) + long(T)) % long(T);
                        else if (t < 0 || t >= long(T))
                            continue;
                        for (std::size_t ci = 0; ci < n; ++ci) {
                            gw(c, ci, j) += g * xv2(std::size_t(t), ci);
                            gx(std::size_t(t), ci) += g * wv2(c, ci, j);
                        }
                    }
                }
            }
            accumulate(x, gx);
            accumulate(W, gw);
            accumulate(b, gb);
        });
    }

    /// Depthwise conv: x [T x d], W [d x k], b [d] -> [T x d].
    Var dwconv1d(Var x, Var W, Var b, Pad pad = Pad::Zero) {
        const auto& xv = val(x);
        const auto& wv = val(W);
        std::size_t T = xv.shape.at(0), d = xv.shape.at(1), k = wv.shape.at(1);
        if (wv.shape.at(0) != d) throw NumericError("dwconv1d: channel mismatch");
        if (k % 2 == 0) throw ConfigError("dwconv1d: kernel size must be odd");
        long hk = long(k) / 2;
        Tensor<S> out({T, d});
        for (std::size_t t0 = 0; t0 < T; ++t0)
            for (std::size_t c = 0; c < d; ++c) {
                S acc = val(b).data[c];
                for (std::size_t j = 0; j < k; ++j) {
                    long t = long(t0) + long(j) - hk;
                    if (pad == Pad::Wrap)
                        t = ((t % long(T)) + long(T)) % long(T);
                    else if (t < 0 || t >= long(T))
                        continue;
                    acc += wv(c, j) * xv(std::size_t(t), c);
                }
                out(t0, c) = acc;
            }
        bool ng = needs(x) || needs(W) || needs(b);
        return push(std::move(out), ng, [this, x, W, b, pad, T, d, k, hk](Var o) {
            const auto& go = grad(o);
            const auto& xv2 = val(x);
            const auto& wv2 = val(W);
            Tensor<S> gx(xv2.shape), gw(wv2.shape), gb(val(b).shape);
            for (std::size_t t0 = 0; t0 < T; ++t0)
                for (std::size_t c = 0; c < d; ++c) {
                    S g = go(t0, c);
                    gb.data[c] += g;
                    for (std::size_t j = 0; j < k; ++j) {
                        long t = long(t0) + long(j) - hk;
                        if (pad == Pad::Wrap)
                            t = ((t % long(T)) + long(T)) % long(T);
                        else if (t < 0 || t >= long(T))
                            continue;
                        gw(c, j) += g * xv2(std::size_t(t), c);
                        gx(std::size_t(t), c) += g * wv2(c, j);
                    }
                }
            accumulate(x, gx);
            accumulate(W, gw);
            accumulate(b, gb);
        });
    }

    // -- normalization / softmax ----------------------------------------------

    /// Per-row zero-mean unit-variance (population variance, eps=1e-5), then
    /// scale by gain and shift. gain/shift are [n] vars so conditional layer
    /// norm can feed learned projections of a condition vector here.
    Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5) {
        const auto& xv = val(x);
        std::size_t T = xv.shape.at(0), n = xv.shape.at(1);
        if (n == 0) throw ConfigError("layer_norm: zero width");
        Tensor<S> out({T, n});
        Tensor<S> xhat({T, n});
        std::vector<S> inv_std(T);
        const auto& gv = val(gain);
        const auto& sv = val(shift);
        for (std::size_t t = 0; t < T; ++t) {
            double mu = 0;
            for (std::size_t c = 0; c < n; ++c) mu += double(xv(t, c));
            mu /= double(n);
            double var = 0;
            for (std::size_t c = 0; c < n; ++c) {
                double d = double(xv(t, c)) - mu;
                var += d * d;
            }
            var /= double(n);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[t] = S(is);
            for (std::size_t c = 0; c < n; ++c) {
                xhat(t, c) = S((double(xv(t, c)) - mu) * is);
                out(t, c) = gv.data[c] * xhat(t, c) + sv.data[c];
            }
        }
        bool ng = needs(x) || needs(gain) || needs(shift);
        return push(std::move(out), ng,
                    [this, x, gain, shift, xhat = std::move(xhat), inv_std = std::move(inv_std), T,
                     n](Var o) {
                        const auto& go = grad(o);
                        const auto& gv2 = val(gain);
                        if (needs(gain) || needs(shift)) {
                            Tensor<S> gg(val(gain).shape), gs(val(shift).shape);
                            for (std::size_t t = 0; t < T; ++t)
                                for (std::size_t c = 0; c < n; ++c) {
                                    gg.data[c] += go(t, c) * xhat(t, c);
                                    gs.data[c] += go(t, c);
                                }
                            accumulate(gain, gg);
                            accumulate(shift, gs);
                        }
                        if (!needs(x)) return;
                        Tensor<S> gx(val(x).shape);
                        for (std::size_t t = 0; t < T; ++t) {
                            double sum_dy = 0, sum_dy_xhat = 0;
                            for (std::size_t c = 0; c < n; ++c) {
                                double dy = double(go(t, c)) * double(gv2.data[c]);
                                sum_dy += dy;
                                sum_dy_xhat += dy * double(xhat(t, c));
                            }
                            for (std::size_t c = 0; c < n; ++c) {
                                double dy = double(go(t, c)) * double(gv2.data[c]);
                                gx(t, c) = S(double(inv_std[t]) *
                                             (dy - sum_dy / double(n) -
                                              double(xhat(t, c)) * sum_dy_xhat / double(n)));
                            }
                        }
                        accumulate(x, gx);
                    });
    }

    /// Row softmax. Mask by adding a large negative constant beforehand.
    Var softmax_rows(Var a) {
        const auto& av = val(a);
        std::size_t T = av.shape.at(0), n = av.shape.at(1);
        Tensor<S> out({T, n});
        for (std::size_t t = 0; t < T; ++t) {
            double mx = -1e300;
            for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, double(av(t, c)));
            double sum = 0;
            for (std::size_t c = 0; c < n; ++c) {
                double e = std::exp(double(av(t, c)) - mx);
                out(t, c) = S(e);
                sum += e;
            }
            for (std::size_t c = 0; c < n; ++c) out(t, c) = S(double(out(t, c)) / sum);
        }
        return push(std::move(out), needs(a), [this, a, T, n](Var o) {
            const auto& y = val(o);
            const auto& go = grad(o);
            Tensor<S> g({T, n});
            for (std::size_t t = 0; t < T; ++t) {
                double dot = 0;
                for (std::size_t c = 0; c < n; ++c) dot += double(go(t, c)) * double(y(t, c));
                for (std::size_t c = 0; c < n; ++c)
                    g(t, c) = S(double(y(t, c)) * (double(go(t, c)) - dot));
            }
            accumulate(a, g);
        });
    }

    // -- reductions / losses ---------------------------------------------------

    Var sum_all(Var a) {
        double s = 0;
        for (S v : val(a).data) s += double(v);
        Tensor<S> out({1});
        out.data[0] = S(s);
        return push(std::move(out), needs(a), [this, a](Var o) {
            Tensor<S> g(val(a).shape, grad(o).data[0]);
            accumulate(a, g);
        });
    }

    Var mean_all(Var a) {
        std::size_t n = val(a).numel();
        return scale(sum_all(a), S(1.0 / double(n)));
    }

    /// Temporal mean pool: [T x d] -> [1 x d].
    Var mean_rows(Var a) {
        const auto& av = val(a);
        std::size_t T = av.shape.at(0), d = av.shape.at(1);
        Tensor<S> out({1, d});
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < d; ++c) out(0, c) += av(t, c);
        for (std::size_t c = 0; c < d; ++c) out(0, c) = S(double(out(0, c)) / double(T));
        return push(std::move(out), needs(a), [this, a, T, d](Var o) {
            const auto& go = grad(o);
            Tensor<S> g(val(a).shape);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t c = 0; c < d; ++c) g(t, c) = S(double(go(0, c)) / double(T));
            accumulate(a, g);
        });
    }

    /// Mean over all elements of (a-b)^2.
    Var mse(Var a, Var b) {
        Var d = sub(a, b);
        return mean_all(mul(d, d));
    }

    /// Mean over all elements of |a-b| (subgradient 0 at ties).
    Var l1(Var a, Var b) {
        check_same(a, b, "l1");
        const auto& av = val(a);
        const auto& bv = val(b);
        double s = 0;
        for (std::size_t i = 0; i < av.data.size(); ++i)
            s += std::abs(double(av.data[i]) - double(bv.data[i]));
        Tensor<S> out({1});
        out.data[0] = S(s / double(av.numel()));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Var o) {
            const auto& av2 = val(a);
            const auto& bv2 = val(b);
            S g0 = grad(o).data[0];
            double inv = 1.0 / double(av2.numel());
            Tensor<S> ga(av2.shape), gb(bv2.shape);
            for (std::size_t i = 0; i < av2.data.size(); ++i) {
                double d = double(av2.data[i]) - double(bv2.data[i]);
                S sgn = S(d > 0 ? 1 : (d < 0 ? -1 : 0));
                ga.data[i] = S(double(g0) * inv) * sgn;
                gb.data[i] = -ga.data[i];
            }
            accumulate(a, ga);
            accumulate(b, gb);
        });
    }

    /// Mean next-token cross-entropy of logits [T x M] against targets.
    Var cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
        const auto& lv = val(logits);
        std::size_t T = lv.shape.at(0), M = lv.shape.at(1);
        if (targets.size() != T) throw DataError("cross_entropy: target length mismatch");
        Tensor<S> probs({T, M});
        double loss = 0;
        for (std::size_t t = 0; t < T; ++t) {
            if (targets[t] >= M) throw DataError("cross_entropy: target index out of range");
            double mx = -1e300;
            for (std::size_t c = 0; c < M; ++c) mx = std::max(mx, double(lv(t, c)));
            double sum = 0;
            for (std::size_t c = 0; c < M; ++c) sum += std::exp(double(lv(t, c)) - mx);
            double logz = mx + std::log(sum);
            loss += logz - double(lv(t, targets[t]));
            for (std::size_t c = 0; c < M; ++c)
                probs(t, c) = S(std::exp(double(lv(t, c)) - logz));
        }
        Tensor<S> out({1});
        out.data[0] = S(loss / double(T));
        return push(std::move(out), needs(logits),
                    [this, logits, targets, probs = std::move(probs), T, M](Var o) {
                        S g0 = grad(o).data[0];
                        Tensor<S> g({T, M});
                        for (std::size_t t = 0; t < T; ++t)
                            for (std::size_t c = 0; c < M; ++c) {
                                double p = double(probs(t, c)) - (c == targets[t] ? 1.0 : 0.0);
                                g(t, c) = S(double(g0) * p / double(T));
                            }
                        accumulate(logits, g);
                    });
    }

    /// Straight-through estimator: value is `quantized`, gradient is copied
    /// unchanged to the pre-quantization input.
    Var straight_through(Var pre, const Tensor<S>& quantized) {
        if (!(val(pre).shape == quantized.shape))
            throw NumericError("straight_through: shape mismatch");
        Tensor<S> out = quantized;
        return push(std::move(out), needs(pre),
                    [this, pre](Var o) { accumulate(pre, grad(o)); });
    }

    // -- driver -----------------------------------------------------------------

    void backward(Var loss) {
        if (val(loss).numel() != 1) throw NumericError("backward: loss must be scalar");
        for (auto& n : nodes_) {
            n.grad = Tensor<S>(n.value.shape);
        }
        nodes_[std::size_t(loss.idx)].grad.data[0] = S(1);
        for (int i = loss.idx; i >= 0; --i) {
            auto& n = nodes_[std::size_t(i)];
            if (n.needs_grad && n.back) n.back(Var{i});
        }
    }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        std::function<void(Var)> back;
        bool needs_grad = false;
    };

    bool needs(Var v) const { return nodes_[std::size_t(v.idx)].needs_grad; }

    void accumulate(Var v, const Tensor<S>& g) {
        if (!needs(v)) return;
        auto& dst = nodes_[std::size_t(v.idx)].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
    }

    void check_same(Var a, Var b, const char* op) const {
        if (!(nodes_[std::size_t(a.idx)].value.shape == nodes_[std::size_t(b.idx)].value.shape))
            throw NumericError(std::string(op) + ": shape mismatch");
    }

    Var push(Tensor<S> value, bool needs_grad, std::function<void(Var)> back) {
        nodes_.push_back(Node{std::move(value), {}, std::move(back), needs_grad});
        return Var{int(nodes_.size()) - 1};
    }

    // C (+)= op(A) . op(B); plain accumulate variant used by backward.
    static void gemm(const Tensor<S>& A, const Tensor<S>& B, Tensor<S>& C, bool ta, bool tb,
                     std::size_t p, std::size_t q, std::size_t r) {
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t kk = 0; kk < q; ++kk) {
                S a = ta ? A(kk, i) : A(i, kk);
                if (a == S(0)) continue;
                for (std::size_t j = 0; j < r; ++j) C(i, j) += a * (tb ? B(j, kk) : B(kk, j));
            }
    }
    static void gemm_into(const Tensor<S>& A, const Tensor<S>& B, Tensor<S>& C, bool ta, bool tb) {
        std::size_t p = C.shape[0], r = C.shape[1];
        std::size_t q = ta ? A.shape[0] : A.shape[1];
        gemm(A, B, C, ta, tb, p, q, r);
    }

    static double gelu_fwd(double x) {
        const double c = 0.7978845608028654;  // sqrt(2/pi)
        double u = c * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    }
    static double gelu_grad(double x) {
        const double c = 0.7978845608028654;
        double u = c * (x + 0.044715 * x * x * x);
        double th = std::tanh(u);
        double sech2 = 1.0 - th * th;
        double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * sech2 * du;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_cache_;
};

}  // namespace adamesh
