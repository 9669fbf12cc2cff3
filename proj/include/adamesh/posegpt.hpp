#pragma once

#include <set>

#include "adamesh/layers.hpp"
#include "adamesh/optimizer.hpp"
#include "adamesh/vqpose.hpp"

namespace adamesh {

struct PoseGptConfig {
    std::size_t M = 64;        // code vocabulary (SOS token is index M)
    std::size_t d = 64;        // model width
    std::size_t d_speech = 16; // input speech feature width
    std::size_t d_style = 8;   // learned style embedding width
    std::size_t n_styles = 2;
    std::size_t n_layers = 2;
    std::size_t heads = 4;
    std::size_t w = 4;         // speech-to-code downsample factor
    std::size_t max_len = 512; // positional table size
};

/// One training item: speech frames [T x d_speech], the code sequence from the
/// VQ encoder (length T/w), and the sample's style id.
template <class S>
struct PoseSample {
    Tensor<S> speech;
    std::vector<std::size_t> codes;
    std::size_t style_id = 0;
};

/// Window mean pooling [T x d] -> [T/w x d]; T must be a multiple of w.
template <class S>
Tensor<S> pool_windows(const Tensor<S>& x, std::size_t w) {
    std::size_t T = x.shape.at(0), d = x.shape.at(1);
    if (w == 0 || T % w != 0) throw DataError("pool_windows: length not a multiple of the window");
    Tensor<S> out({T / w, d});
    for (std::size_t t = 0; t < T / w; ++t)
        for (std::size_t c = 0; c < d; ++c) {
            double sum = 0;
            for (std::size_t j = 0; j < w; ++j) sum += double(x(t * w + j, c));
            out(t, c) = S(sum / double(w));
        }
    return out;
}

struct GptTrainReport {
    std::vector<double> loss_curve;
    double final_tf_loss = 0.0;
};

template <class S>
struct PoseGpt {
    PoseGptConfig cfg;
    Tensor<S> token_embed;  // [M+1 x d], row M is the start token
    Tensor<S> pos_embed;    // [max_len x d]
    Tensor<S> style_table;  // [n_styles x d_style]
    Linear<S> speech_proj;  // d_speech -> d
    Linear<S> cond_proj;    // d + d_style -> d
    std::vector<ConformerBlock<S>> blocks;
    LayerNorm<S> ln_out;
    Linear<S> head;         // d -> M

    PoseGpt() = default;
    PoseGpt(const PoseGptConfig& c, Rng& rng)
        : cfg(c),
          token_embed(randn<S>(rng, {c.M + 1, c.d}, 0.02)),
          pos_embed(randn<S>(rng, {c.max_len, c.d}, 0.02)),
          style_table(randn<S>(rng, {c.n_styles, c.d_style}, 0.02)),
          speech_proj(c.d, c.d_speech, rng),
          cond_proj(c.d, c.d + c.d_style, rng),
          ln_out(c.d),
          head(c.M, c.d, rng) {
        ConformerOptions o;
        o.width = c.d;
        o.heads = c.heads;
        o.causal = true;
        o.use_conv = false;  // same-padded conv would look ahead
        for (std::size_t i = 0; i < c.n_layers; ++i) blocks.emplace_back(o, rng);
    }

    /// Pooled speech projection concatenated with the broadcast style
    /// embedding, projected to model width. [T' x d]
    typename Tape<S>::Var condition(Tape<S>& tape, const Tensor<S>& speech,
                                    std::size_t style_id) const {
        if (style_id >= cfg.n_styles) throw DataError("posegpt: style id out of range");
        auto pooled = tape.constant(pool_windows(speech, cfg.w));
        std::size_t Tq = tape.val(pooled).shape[0];
        auto sp = speech_proj(tape, pooled);
        auto style = tape.embed_rows(tape.param(const_cast<Tensor<S>&>(style_table)),
                                     {style_id});
        auto st = tape.broadcast_row(style, Tq);
        return cond_proj(tape, tape.concat_cols({sp, st}));
    }

    /// Next-code logits [T' x M]. Position t sees the start token, codes
    /// prefix[0..t-1], and conditioning rows <= t.
    typename Tape<S>::Var forward_logits(Tape<S>& tape,
                                         const std::vector<std::size_t>& prefix,
                                         typename Tape<S>::Var cond) const {
        std::size_t Tq = tape.val(cond).shape.at(0);
        if (prefix.size() >= Tq) throw DataError("posegpt: prefix longer than conditioning");
        if (Tq > cfg.max_len) throw DataError("posegpt: sequence exceeds the positional table");
        std::vector<std::size_t> tokens(Tq);
        tokens[0] = cfg.M;  // start token
        for (std::size_t t = 0; t < prefix.size(); ++t) {
            if (prefix[t] >= cfg.M) throw DataError("posegpt: code index out of range");
            tokens[t + 1] = prefix[t];
        }
        // positions past the prefix carry the start token; causality makes
        // them irrelevant to earlier logits
        for (std::size_t t = prefix.size() + 1; t < Tq; ++t) tokens[t] = cfg.M;

        std::vector<std::size_t> pos(Tq);
        for (std::size_t t = 0; t < Tq; ++t) pos[t] = t;
        auto x = tape.embed_rows(tape.param(const_cast<Tensor<S>&>(token_embed)), tokens);
        x = tape.add(x, tape.embed_rows(tape.param(const_cast<Tensor<S>&>(pos_embed)), pos));
        x = tape.add(x, cond);
        for (const auto& b : blocks) x = b(tape, x);
        return head(tape, ln_out(tape, x));
    }

    /// Mean next-token cross-entropy with the full ground truth as prefix.
    typename Tape<S>::Var tf_loss(Tape<S>& tape, const PoseSample<S>& sample) const {
        return tf_loss_with_prefix(tape, sample, sample.codes);
    }

    typename Tape<S>::Var tf_loss_with_prefix(Tape<S>& tape, const PoseSample<S>& sample,
                                              const std::vector<std::size_t>& prefix) const {
        if (sample.codes.empty()) throw DataError("posegpt: empty code sequence");
        auto cond = condition(tape, sample.speech, sample.style_id);
        if (tape.val(cond).shape[0] != sample.codes.size())
            throw DataError("posegpt: speech/code length mismatch");
        std::vector<std::size_t> p(prefix.begin(), prefix.end() - 1);
        auto logits = forward_logits(tape, p, cond);
        return tape.cross_entropy(logits, sample.codes);
    }

    /// Argmax decoding, ties to the lowest index; logits recomputed per step.
    std::vector<std::size_t> greedy_decode(const Tensor<S>& speech, std::size_t style_id) const {
        Tape<S> probe;
        std::size_t Tq = probe.val(condition(probe, speech, style_id)).shape[0];
        std::vector<std::size_t> out;
        for (std::size_t t = 0; t < Tq; ++t) {
            Tape<S> tape;
            auto cond = condition(tape, speech, style_id);
            auto logits = tape.val(forward_logits(tape, out, cond));
            std::size_t best = 0;
            for (std::size_t m = 1; m < cfg.M; ++m)
                if (double(logits(t, m)) > double(logits(t, best))) best = m;
            out.push_back(best);
        }
        return out;
    }

    void collect(ParamList<S>& out, const std::string& prefix = "gpt") {
        out.push_back({prefix + ".token_embed", &token_embed});
        out.push_back({prefix + ".pos_embed", &pos_embed});
        out.push_back({prefix + ".style_table", &style_table});
        speech_proj.collect(out, prefix + ".speech_proj");
        cond_proj.collect(out, prefix + ".cond_proj");
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(out, prefix + ".block" + std::to_string(i));
        ln_out.collect(out, prefix + ".ln_out");
        head.collect(out, prefix + ".head");
    }
};

/// Teacher forcing for the first tf_fraction of steps, then scheduled
/// sampling: each prefix token is replaced by the model's greedy prediction
/// with probability rising linearly to 1 over the remaining steps.
template <class S>
GptTrainReport train_posegpt(PoseGpt<S>& model, const std::vector<PoseSample<S>>& corpus,
                             std::size_t steps, double tf_fraction, std::uint64_t seed,
                             double lr = 1e-3) {
    if (corpus.empty()) throw DataError("train_posegpt: empty corpus");
    if (tf_fraction < 0.0 || tf_fraction > 1.0)
        throw ConfigError("train_posegpt: tf_fraction must be in [0,1]");
    GptTrainReport report;
    ParamList<S> params;
    model.collect(params);
    Adam<S> opt(lr);
    Rng rng(seed);
    std::size_t tf_steps = std::size_t(tf_fraction * double(steps));
    for (std::size_t step = 0; step < steps; ++step) {
        const auto& sample = corpus[step % corpus.size()];
        std::vector<std::size_t> prefix = sample.codes;
        if (step >= tf_steps && tf_steps < steps) {
            double p = double(step - tf_steps + 1) / double(steps - tf_steps);
            Tape<S> probe;
            auto cond = model.condition(probe, sample.speech, sample.style_id);
            std::vector<std::size_t> p0(sample.codes.begin(), sample.codes.end() - 1);
            auto logits = probe.val(model.forward_logits(probe, p0, cond));
            for (std::size_t t = 0; t < prefix.size(); ++t) {
                if (rng.uniform() >= p) continue;
                std::size_t best = 0;
                for (std::size_t m = 1; m < model.cfg.M; ++m)
                    if (double(logits(t, m)) > double(logits(t, best))) best = m;
                prefix[t] = best;
            }
        }
        Tape<S> tape;
        auto loss = model.tf_loss_with_prefix(tape, sample, prefix);
        double lv = double(tape.val(loss).data[0]);
        if (!std::isfinite(lv))
            throw NumericError("train_posegpt: non-finite loss at step " + std::to_string(step));
        report.loss_curve.push_back(lv);
        tape.backward(loss);
        opt.step(params, tape);
    }
    double total = 0;
    for (const auto& sample : corpus) {
        Tape<S> tape;
        total += double(tape.val(model.tf_loss(tape, sample)).data[0]);
    }
    report.final_tf_loss = total / double(corpus.size());
    return report;
}

}  // namespace adamesh
