#pragma once

#include <optional>
#include <string>

#include "adamesh/autodiff.hpp"
#include "adamesh/molora.hpp"

namespace adamesh {

template <class S>
struct NamedParam {
    std::string name;
    Tensor<S>* tensor;
};

template <class S>
using ParamList = std::vector<NamedParam<S>>;

// ---------------------------------------------------------------------------
// Linear: y = x.W^T + b, W [m x n]. Carries an optional MoLoRA set; linear
// layers are the k=1 degenerate case of the conv path.
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
    Tensor<S> W, b;
    bool has_bias = true;
    std::optional<MoLoRASet<S>> lora;

    Linear() = default;
    Linear(std::size_t m, std::size_t n, Rng& rng, double sigma = -1.0, bool with_bias = true)
        : W(randn<S>(rng, {m, n}, sigma < 0 ? std::sqrt(1.0 / double(n)) : sigma)),
          b(Tensor<S>({m})),
          has_bias(with_bias) {}

    static Linear zeros(std::size_t m, std::size_t n) {
        Linear l;
        l.W = Tensor<S>({m, n});
        l.b = Tensor<S>({m});
        return l;
    }

    std::size_t out_dim() const { return W.shape[0]; }
    std::size_t in_dim() const { return W.shape[1]; }

    typename Tape<S>::Var operator()(Tape<S>& tape, typename Tape<S>::Var x) const {
        auto w = effective_weight_2d(tape, W, lora);
        auto y = tape.matmul(x, w, false, true);
        return has_bias ? tape.add_bias_rows(y, tape.param(bias_mut())) : y;
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        out.push_back({prefix + ".W", &W});
        if (has_bias) out.push_back({prefix + ".b", &b});
        if (lora) lora->collect(out, prefix);
    }

private:
    // Bias is never adapted; params are registered mutable through the tape.
    Tensor<S>& bias_mut() const { return const_cast<Tensor<S>&>(b); }
};

// ---------------------------------------------------------------------------
// Conv1d: x [T x n] -> [T/stride x m], weight [m x n x k], same padding.
// ---------------------------------------------------------------------------

template <class S>
struct Conv1d {
    Tensor<S> W, b;
    std::size_t stride = 1;
    typename Tape<S>::Pad pad = Tape<S>::Pad::Zero;
    std::optional<MoLoRASet<S>> lora;

    Conv1d() = default;
    Conv1d(std::size_t m, std::size_t n, std::size_t k, Rng& rng, std::size_t stride_ = 1)
        : W(randn<S>(rng, {m, n, k}, std::sqrt(1.0 / double(n * k)))),
          b(Tensor<S>({m})),
          stride(stride_) {
        if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd");
    }

    std::size_t out_dim() const { return W.shape[0]; }

    typename Tape<S>::Var operator()(Tape<S>& tape, typename Tape<S>::Var x) const {
        auto w = effective_weight_3d(tape, W, lora);
        return tape.conv1d(x, w, tape.param(bias_mut()), stride, pad);
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        out.push_back({prefix + ".W", &W});
        out.push_back({prefix + ".b", &b});
        if (lora) lora->collect(out, prefix);
    }

private:
    Tensor<S>& bias_mut() const { return const_cast<Tensor<S>&>(b); }
};

// ---------------------------------------------------------------------------
// Layer norm with optional conditioning: effective gain/shift are the base
// vectors plus learned projections of a condition vector.
// ---------------------------------------------------------------------------

template <class S>
struct LayerNorm {
    Tensor<S> gain, shift;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t n) : gain(Tensor<S>({n}, S(1))), shift(Tensor<S>({n})) {}

    typename Tape<S>::Var operator()(Tape<S>& tape, typename Tape<S>::Var x) const {
        return tape.layer_norm(x, tape.param(gain_mut()), tape.param(shift_mut()));
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        out.push_back({prefix + ".gain", &gain});
        out.push_back({prefix + ".shift", &shift});
    }

private:
    Tensor<S>& gain_mut() const { return const_cast<Tensor<S>&>(gain); }
    Tensor<S>& shift_mut() const { return const_cast<Tensor<S>&>(shift); }
};

template <class S>
struct CondLayerNorm {
    LayerNorm<S> base;
    Linear<S> gain_proj, shift_proj;  // cond [1 x c] -> [1 x n], zero-init

    CondLayerNorm() = default;
    CondLayerNorm(std::size_t n, std::size_t c)
        : base(n), gain_proj(Linear<S>::zeros(n, c)), shift_proj(Linear<S>::zeros(n, c)) {}

    /// cond is a [1 x c] var; absent cond falls back to plain layer norm.
    typename Tape<S>::Var operator()(Tape<S>& tape, typename Tape<S>::Var x,
                                     std::optional<typename Tape<S>::Var> cond) const {
        auto g = tape.param(const_cast<Tensor<S>&>(base.gain));
        auto s = tape.param(const_cast<Tensor<S>&>(base.shift));
        if (cond) {
            auto dg = gain_proj(tape, *cond);  // [1 x n]
            auto ds = shift_proj(tape, *cond);
            std::vector<std::size_t> id(base.gain.numel());
            for (std::size_t i = 0; i < id.size(); ++i) id[i] = i;
            g = tape.add(g, tape.gather_flat(dg, id, {id.size()}));
            s = tape.add(s, tape.gather_flat(ds, id, {id.size()}));
        }
        return tape.layer_norm(x, g, s);
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        base.collect(out, prefix);
        gain_proj.collect(out, prefix + ".cond_gain");
        shift_proj.collect(out, prefix + ".cond_shift");
    }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention, composed per head from tape primitives.
// ---------------------------------------------------------------------------

template <class S>
struct SelfAttention {
    Linear<S> wq, wk, wv, wo;
    std::size_t heads = 1;

    SelfAttention() = default;
    SelfAttention(std::size_t d, std::size_t heads_, Rng& rng, bool zero_out_proj = false)
        : wq(d, d, rng),
          wk(d, d, rng, -1.0, /*with_bias=*/false),  // key bias is dead under softmax
          wv(d, d, rng),
          wo(zero_out_proj ? Linear<S>::zeros(d, d) : Linear<S>(d, d, rng)), heads(heads_) {
        if (d % heads_ != 0) throw ConfigError("attention: width not divisible by head count");
    }

    typename Tape<S>::Var operator()(Tape<S>& tape, typename Tape<S>::Var x, bool causal) const {
        std::size_t T = tape.val(x).shape.at(0);
        std::size_t d = wq.out_dim();
        std::size_t dk = d / heads;
        auto q = wq(tape, x);
        auto k = wk(tape, x);
        auto v = wv(tape, x);
        typename Tape<S>::Var mask;
        if (causal) {
            Tensor<S> m({T, T});
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t j = i + 1; j < T; ++j) m(i, j) = S(-1e30);
            mask = tape.constant(std::move(m));
        }
        std::vector<typename Tape<S>::Var> head_out;
        for (std::size_t h = 0; h < heads; ++h) {
            auto qh = tape.slice_cols(q, h * dk, dk);
            auto kh = tape.slice_cols(k, h * dk, dk);
            auto vh = tape.slice_cols(v, h * dk, dk);
            auto scores = tape.scale(tape.matmul(qh, kh, false, true), S(1.0 / std::sqrt(double(dk))));
            if (causal) scores = tape.add(scores, mask);
            auto attn = tape.softmax_rows(scores);
            head_out.push_back(tape.matmul(attn, vh));
        }
        auto cat = heads == 1 ? head_out[0] : tape.concat_cols(head_out);
        return wo(tape, cat);
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        wq.collect(out, prefix + ".wq");
        wk.collect(out, prefix + ".wk");
        wv.collect(out, prefix + ".wv");
        wo.collect(out, prefix + ".wo");
    }
};

// ---------------------------------------------------------------------------
// Conformer-style block: pre-norm residual self-attention, depthwise conv
// sublayer, feed-forward sublayer. The conv sublayer can be dropped, which
// turns this into a plain transformer block (PoseGPT needs strict causality
// and the same-padded conv would look ahead).
// ---------------------------------------------------------------------------

struct ConformerOptions {
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t conv_kernel = 5;
    std::size_t ffn_mult = 2;
    bool causal = false;
    bool use_conv = true;
    bool wrap_pad = false;          // circular padding (style encoder)
    bool zero_out_projections = false;  // makes the block the identity map
};

template <class S>
struct ConformerBlock {
    ConformerOptions opt;
    LayerNorm<S> ln_attn, ln_conv, ln_ffn;
    SelfAttention<S> attn;
    Tensor<S> dw_W, dw_b;    // depthwise conv [d x k], [d]
    Linear<S> conv_out;      // pointwise projection after the conv
    Linear<S> ff1, ff2;

    ConformerBlock() = default;
    ConformerBlock(const ConformerOptions& o, Rng& rng)
        : opt(o),
          ln_attn(o.width),
          ln_conv(o.width),
          ln_ffn(o.width),
          attn(o.width, o.heads, rng, o.zero_out_projections),
          dw_W(randn<S>(rng, {o.width, o.conv_kernel}, std::sqrt(1.0 / double(o.conv_kernel)))),
          dw_b(Tensor<S>({o.width})),
          conv_out(o.zero_out_projections ? Linear<S>::zeros(o.width, o.width)
                                          : Linear<S>(o.width, o.width, rng)),
          ff1(o.width * o.ffn_mult, o.width, rng),
          ff2(o.zero_out_projections ? Linear<S>::zeros(o.width, o.width * o.ffn_mult)
                                     : Linear<S>(o.width, o.width * o.ffn_mult, rng)) {}

    typename Tape<S>::Var operator()(Tape<S>& tape, typename Tape<S>::Var x) const {
        auto pad = opt.wrap_pad ? Tape<S>::Pad::Wrap : Tape<S>::Pad::Zero;
        auto y = tape.add(x, attn(tape, ln_attn(tape, x), opt.causal));
        if (opt.use_conv) {
            auto h = tape.dwconv1d(ln_conv(tape, y), tape.param(const_cast<Tensor<S>&>(dw_W)),
                                   tape.param(const_cast<Tensor<S>&>(dw_b)), pad);
            y = tape.add(y, conv_out(tape, tape.gelu(h)));
        }
        auto f = ff2(tape, tape.gelu(ff1(tape, ln_ffn(tape, y))));
        return tape.add(y, f);
    }

    void collect(ParamList<S>& out, const std::string& prefix) {
        ln_attn.collect(out, prefix + ".ln_attn");
        attn.collect(out, prefix + ".attn");
        if (opt.use_conv) {
            ln_conv.collect(out, prefix + ".ln_conv");
            out.push_back({prefix + ".dw.W", &dw_W});
            out.push_back({prefix + ".dw.b", &dw_b});
            conv_out.collect(out, prefix + ".conv_out");
        }
        ln_ffn.collect(out, prefix + ".ln_ffn");
        ff1.collect(out, prefix + ".ff1");
        ff2.collect(out, prefix + ".ff2");
    }
};

}  // namespace adamesh
