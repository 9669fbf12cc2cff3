#pragma once

#include <set>

#include "adamesh/layers.hpp"
#include "adamesh/optimizer.hpp"

namespace adamesh {

struct ExprConfig {
    std::size_t d = 64;          // model width
    std::size_t d_style = 16;
    std::size_t style_width = 32;
    std::size_t d_speech = 16;
    std::size_t d_expr = 53;
    std::size_t d_id = 100;
    std::size_t n_audio_blocks = 2;
    std::size_t n_style_blocks = 2;
    std::size_t n_dec_blocks = 3;
    std::size_t heads = 4;
};

template <class S>
struct ExprTrainItem {
    Tensor<S> speech;    // [T x d_speech]
    Tensor<S> expr;      // [T x 53]
    Tensor<S> identity;  // [100]
};

struct ExprTrainReport {
    std::vector<double> loss_curve;
    double initial_mse = 0.0;
    double final_mse = 0.0;
};

namespace detail {
template <class S>
void block_adaptables(ConformerBlock<S>& b, const std::string& prefix,
                      AdaptableList<S>& out) {
    out.push_back({prefix + ".attn.wq", &b.attn.wq.W, &b.attn.wq.lora});
    out.push_back({prefix + ".attn.wk", &b.attn.wk.W, &b.attn.wk.lora});
    out.push_back({prefix + ".attn.wv", &b.attn.wv.W, &b.attn.wv.lora});
    out.push_back({prefix + ".attn.wo", &b.attn.wo.W, &b.attn.wo.lora});
    if (b.opt.use_conv)
        out.push_back({prefix + ".conv_out", &b.conv_out.W, &b.conv_out.lora});
    out.push_back({prefix + ".ff1", &b.ff1.W, &b.ff1.lora});
    out.push_back({prefix + ".ff2", &b.ff2.W, &b.ff2.lora});
}
}  // namespace detail

/// Adaptation targets: everything except the audio encoder (frozen per the
/// adaptation contract) and the 53-wide output heads, whose row count no
/// practical rank divides.
inline bool default_adapt_filter(const std::string& name) {
    return name.rfind("audio_encoder", 0) != 0 && name.find(".head") == std::string::npos;
}

template <class S>
struct ExprAdapter {
    ExprConfig cfg;

    Linear<S> audio_in;
    std::vector<ConformerBlock<S>> audio_blocks;

    std::vector<Conv1d<S>> id_convs;      // 3 convs over beta as a [100 x 1] sequence
    std::vector<CondLayerNorm<S>> id_cln; // conditioned on beta itself

    Linear<S> style_in;
    std::vector<ConformerBlock<S>> style_blocks;  // wrap padding, no positions
    Linear<S> style_out;

    Linear<S> dec_in;  // d + d + d_style -> d
    std::vector<ConformerBlock<S>> dec_blocks;
    std::vector<Linear<S>> dec_heads;  // one 53-dim head per block, summed

    ExprAdapter() = default;
    ExprAdapter(const ExprConfig& c, Rng& rng) : cfg(c) {
        audio_in = Linear<S>(c.d, c.d_speech, rng);
        ConformerOptions ao;
        ao.width = c.d;
        ao.heads = c.heads;
        for (std::size_t i = 0; i < c.n_audio_blocks; ++i) audio_blocks.emplace_back(ao, rng);

        id_convs.emplace_back(c.d, 1, 5, rng);
        id_convs.emplace_back(c.d, c.d, 5, rng);
        id_convs.emplace_back(c.d, c.d, 5, rng);
        for (int i = 0; i < 3; ++i) id_cln.emplace_back(c.d, c.d_id);

        style_in = Linear<S>(c.style_width, c.d_expr, rng);
        ConformerOptions so;
        so.width = c.style_width;
        so.heads = c.heads;
        so.wrap_pad = true;  // duplication invariance for the global style
        for (std::size_t i = 0; i < c.n_style_blocks; ++i) style_blocks.emplace_back(so, rng);
        style_out = Linear<S>(c.d_style, c.style_width, rng);

        dec_in = Linear<S>(c.d, c.d + c.d + c.d_style, rng);
        ConformerOptions dopt;
        dopt.width = c.d;
        dopt.heads = c.heads;
        for (std::size_t i = 0; i < c.n_dec_blocks; ++i) {
            dec_blocks.emplace_back(dopt, rng);
            dec_heads.push_back(Linear<S>(c.d_expr, c.d, rng, 0.02));
        }
    }

    /// Contextual speech features [T x d]; this path is never adapted.
    typename Tape<S>::Var encode_audio(Tape<S>& tape, const Tensor<S>& speech) const {
        auto h = tape.gelu(audio_in(tape, tape.constant(speech)));
        for (const auto& b : audio_blocks) h = b(tape, h);
        return h;
    }

    /// Identity embedding [1 x d]: beta runs through the convs as a length-100
    /// scalar sequence while also driving the conditional norms.
    typename Tape<S>::Var encode_identity(Tape<S>& tape, const Tensor<S>& beta) const {
        if (beta.numel() != cfg.d_id) throw DataError("expr: identity must have 100 dims");
        Tensor<S> col({cfg.d_id, 1});
        Tensor<S> row({1, cfg.d_id});
        for (std::size_t i = 0; i < cfg.d_id; ++i) col(i, 0) = row(0, i) = beta.data[i];
        auto cond = tape.constant(row);
        auto h = tape.constant(col);
        for (std::size_t i = 0; i < id_convs.size(); ++i) {
            h = id_convs[i](tape, h);
            if (i + 1 < id_convs.size()) h = tape.gelu(h);
            h = id_cln[i](tape, h, cond);
        }
        return tape.mean_rows(h);
    }

    /// Global style vector [1 x d_style]: conformer stack then temporal mean.
    typename Tape<S>::Var encode_style(Tape<S>& tape, const Tensor<S>& expr) const {
        if (expr.shape.at(0) < 1) throw DataError("expr: style source must have >= 1 frame");
        auto h = tape.gelu(style_in(tape, tape.constant(expr)));
        for (const auto& b : style_blocks) h = b(tape, h);
        return style_out(tape, tape.mean_rows(h));
    }

    /// Residual-stacked decoder: blocks cascade on the hidden state but each
    /// block's 53-dim head contribution is summed into the output.
    typename Tape<S>::Var decode_expr(Tape<S>& tape, typename Tape<S>::Var audio_f,
                                      typename Tape<S>::Var id_f,
                                      typename Tape<S>::Var style) const {
        std::size_t T = tape.val(audio_f).shape.at(0);
        auto x = tape.concat_cols(
            {audio_f, tape.broadcast_row(id_f, T), tape.broadcast_row(style, T)});
        auto h = tape.gelu(dec_in(tape, x));
        typename Tape<S>::Var out;
        bool first = true;
        for (std::size_t i = 0; i < dec_blocks.size(); ++i) {
            h = dec_blocks[i](tape, h);
            auto c = dec_heads[i](tape, h);
            out = first ? c : tape.add(out, c);
            first = false;
        }
        return out;
    }

    typename Tape<S>::Var forward(Tape<S>& tape, const Tensor<S>& speech,
                                  const Tensor<S>& identity,
                                  const Tensor<S>& style_src) const {
        auto audio_f = encode_audio(tape, speech);
        auto id_f = encode_identity(tape, identity);
        auto style = encode_style(tape, style_src);
        return decode_expr(tape, audio_f, id_f, style);
    }

    /// Inference values; style source may come from a different clip.
    Tensor<S> infer(const Tensor<S>& speech, const Tensor<S>& identity,
                    const Tensor<S>& style_src) const {
        Tape<S> tape;
        return tape.val(forward(tape, speech, identity, style_src));
    }

    void collect(ParamList<S>& out) {
        audio_in.collect(out, "audio_encoder.in");
        for (std::size_t i = 0; i < audio_blocks.size(); ++i)
            audio_blocks[i].collect(out, "audio_encoder.block" + std::to_string(i));
        for (std::size_t i = 0; i < id_convs.size(); ++i) {
            id_convs[i].collect(out, "id_encoder.conv" + std::to_string(i));
            id_cln[i].collect(out, "id_encoder.cln" + std::to_string(i));
        }
        style_in.collect(out, "style_encoder.in");
        for (std::size_t i = 0; i < style_blocks.size(); ++i)
            style_blocks[i].collect(out, "style_encoder.block" + std::to_string(i));
        style_out.collect(out, "style_encoder.out");
        dec_in.collect(out, "decoder.in");
        for (std::size_t i = 0; i < dec_blocks.size(); ++i) {
            dec_blocks[i].collect(out, "decoder.block" + std::to_string(i));
            dec_heads[i].collect(out, "decoder.head" + std::to_string(i));
        }
    }

    AdaptableList<S> adaptables() {
        AdaptableList<S> out;
        out.push_back({"audio_encoder.in", &audio_in.W, &audio_in.lora});
        for (std::size_t i = 0; i < audio_blocks.size(); ++i)
            detail::block_adaptables(audio_blocks[i], "audio_encoder.block" + std::to_string(i),
                                     out);
        for (std::size_t i = 0; i < id_convs.size(); ++i)
            out.push_back({"id_encoder.conv" + std::to_string(i), &id_convs[i].W,
                           &id_convs[i].lora});
        out.push_back({"style_encoder.in", &style_in.W, &style_in.lora});
        for (std::size_t i = 0; i < style_blocks.size(); ++i)
            detail::block_adaptables(style_blocks[i], "style_encoder.block" + std::to_string(i),
                                     out);
        out.push_back({"style_encoder.out", &style_out.W, &style_out.lora});
        out.push_back({"decoder.in", &dec_in.W, &dec_in.lora});
        for (std::size_t i = 0; i < dec_blocks.size(); ++i) {
            detail::block_adaptables(dec_blocks[i], "decoder.block" + std::to_string(i), out);
            out.push_back({"decoder.head" + std::to_string(i), &dec_heads[i].W,
                           &dec_heads[i].lora});
        }
        return out;
    }
};

template <class S>
double corpus_mse(const ExprAdapter<S>& model, const std::vector<ExprTrainItem<S>>& corpus) {
    double total = 0;
    std::size_t count = 0;
    for (const auto& item : corpus) {
        auto pred = model.infer(item.speech, item.identity, item.expr);
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            double e = double(pred.data[i]) - double(item.expr.data[i]);
            total += e * e;
        }
        count += pred.numel();
    }
    return total / double(count);
}

/// MSE pretraining; the style input is the sample's own expression sequence.
template <class S>
ExprTrainReport pretrain_expr(ExprAdapter<S>& model,
                              const std::vector<ExprTrainItem<S>>& corpus,
                              std::size_t steps, std::uint64_t seed, double lr = 1e-3,
                              bool track_mse = true) {
    if (corpus.empty()) throw DataError("pretrain_expr: empty corpus");
    ExprTrainReport report;
    if (track_mse) report.initial_mse = corpus_mse(model, corpus);
    ParamList<S> params;
    model.collect(params);
    Adam<S> opt(lr);
    Rng rng(seed);
    for (std::size_t step = 0; step < steps; ++step) {
        const auto& item = corpus[step % corpus.size()];
        Tape<S> tape;
        auto pred = model.forward(tape, item.speech, item.identity, item.expr);
        auto loss = tape.mse(pred, tape.constant(item.expr));
        double lv = double(tape.val(loss).data[0]);
        if (!std::isfinite(lv))
            throw NumericError("pretrain_expr: non-finite loss at step " + std::to_string(step));
        report.loss_curve.push_back(lv);
        tape.backward(loss);
        opt.step(params, tape);
    }
    if (track_mse) report.final_mse = corpus_mse(model, corpus);
    return report;
}

/// 30-step adaptation on a single reference clip: MoLoRA factors only, base
/// weights untouched. The factors stay attached; call merge_molora on
/// adaptables() to bake them in.
template <class S>
ExprTrainReport adapt_expr(ExprAdapter<S>& model, const ExprTrainItem<S>& reference,
                           const MoLoRAConfig& cfg, std::size_t steps, std::uint64_t seed,
                           double lr = 0.01) {
    if (reference.expr.shape.at(0) == 0) throw DataError("adapt_expr: empty reference");
    auto layers = model.adaptables();
    Rng rng(seed);
    MoLoRAConfig local = cfg;
    auto user = cfg.target_filter;
    local.target_filter = [user](const std::string& n) {
        return default_adapt_filter(n) && (!user || user(n));
    };
    attach_molora(layers, local, rng);

    ParamList<S> params;
    model.collect(params);
    auto names = molora_param_names(params);
    std::set<std::string> trainable(names.begin(), names.end());

    ExprTrainReport report;
    if (trainable.empty()) return report;  // ranks=[] adapts nothing
    Adam<S> opt(lr);
    for (std::size_t step = 0; step < steps; ++step) {
        Tape<S> tape;
        auto pred = model.forward(tape, reference.speech, reference.identity, reference.expr);
        auto loss = tape.mse(pred, tape.constant(reference.expr));
        double lv = double(tape.val(loss).data[0]);
        if (!std::isfinite(lv))
            throw NumericError("adapt_expr: non-finite loss at step " + std::to_string(step));
        report.loss_curve.push_back(lv);
        tape.backward(loss);
        opt.step(params, tape, &trainable);
    }
    return report;
}

}  // namespace adamesh
