#pragma once

#include "adamesh/layers.hpp"
#include "adamesh/optimizer.hpp"

namespace adamesh {

struct VqConfig {
    std::size_t M = 64;      // codebook entries
    std::size_t d_z = 16;    // latent width
    std::size_t w = 4;       // temporal downsample factor (power of two)
    std::size_t hidden = 32;
    double gamma = 0.25;     // commitment weight
    double alpha1 = 1.0;     // velocity loss weight
    double alpha2 = 1.0;     // acceleration loss weight

    std::size_t n_down() const {
        std::size_t n = 0, v = w;
        while (v > 1) {
            if (v % 2 != 0) throw ConfigError("vq: downsample factor must be a power of two");
            v /= 2;
            ++n;
        }
        return n;
    }
};

/// Edge-replication padding so T becomes a multiple of w.
template <class S>
Tensor<S> pad_pose(const Tensor<S>& pose, std::size_t w) {
    std::size_t T = pose.shape.at(0), d = pose.shape.at(1);
    if (T < w) throw DataError("pose sequence shorter than the downsample window");
    std::size_t rem = T % w;
    if (rem == 0) return pose;
    std::size_t Tp = T + (w - rem);
    Tensor<S> out({Tp, d});
    for (std::size_t t = 0; t < Tp; ++t)
        for (std::size_t c = 0; c < d; ++c) out(t, c) = pose(std::min(t, T - 1), c);
    return out;
}

/// Nearest codebook entry per frame, squared L2, ties to the lowest index.
template <class S>
std::vector<std::size_t> quantize_indices(const Tensor<S>& z, const Tensor<S>& codebook) {
    if (codebook.shape.at(0) == 0) throw DataError("quantize: empty codebook");
    if (z.shape.at(1) != codebook.shape.at(1)) throw DataError("quantize: latent width mismatch");
    std::size_t T = z.shape[0], M = codebook.shape[0], d = z.shape[1];
    std::vector<std::size_t> idx(T);
    for (std::size_t t = 0; t < T; ++t) {
        double best = 1e300;
        std::size_t bi = 0;
        for (std::size_t m = 0; m < M; ++m) {
            double dist = 0;
            for (std::size_t c = 0; c < d; ++c) {
                double diff = double(z(t, c)) - double(codebook(m, c));
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                bi = m;
            }
        }
        idx[t] = bi;
    }
    return idx;
}

template <class S>
Tensor<S> gather_codes(const Tensor<S>& codebook, const std::vector<std::size_t>& idx) {
    std::size_t d = codebook.shape.at(1);
    Tensor<S> out({idx.size(), d});
    for (std::size_t t = 0; t < idx.size(); ++t)
        for (std::size_t c = 0; c < d; ++c) out(t, c) = codebook(idx[t], c);
    return out;
}

/// Eq.-style reconstruction loss: L1 + a1*L1(velocity) + a2*L1(acceleration),
/// forward differences, means over the valid frames of each order.
template <class S>
typename Tape<S>::Var recon_loss(Tape<S>& tape, typename Tape<S>::Var pred,
                                 typename Tape<S>::Var gt, double a1, double a2) {
    if (!(tape.val(pred).shape == tape.val(gt).shape))
        throw DataError("recon_loss: length mismatch");
    auto loss = tape.l1(pred, gt);
    if (a1 != 0.0) {
        auto dv = tape.l1(tape.row_diff(pred), tape.row_diff(gt));
        loss = tape.add(loss, tape.scale(dv, S(a1)));
    }
    if (a2 != 0.0) {
        auto da = tape.l1(tape.row_diff(tape.row_diff(pred)), tape.row_diff(tape.row_diff(gt)));
        loss = tape.add(loss, tape.scale(da, S(a2)));
    }
    return loss;
}

/// Codebook and commitment terms of the VQ objective: per-frame squared L2
/// averaged over frames, with stop-gradients placed so the first term moves
/// only the codebook and the second only the encoder.
template <class S>
std::pair<typename Tape<S>::Var, typename Tape<S>::Var> vq_terms(
    Tape<S>& tape, typename Tape<S>::Var z, Tensor<S>& codebook,
    const std::vector<std::size_t>& idx, double gamma) {
    std::size_t Tq = idx.size();
    auto cb_rows = tape.embed_rows(tape.param(codebook), idx);
    auto cb_diff = tape.sub(tape.detach(z), cb_rows);
    auto cb_term = tape.scale(tape.sum_all(tape.mul(cb_diff, cb_diff)), S(1.0 / double(Tq)));

    auto cm_diff = tape.sub(z, tape.constant(gather_codes(codebook, idx)));
    auto cm_term =
        tape.scale(tape.sum_all(tape.mul(cm_diff, cm_diff)), S(gamma / double(Tq)));
    return {cb_term, cm_term};
}

struct VqTrainReport {
    std::vector<double> loss_curve;
    std::vector<std::size_t> usage;  // per codebook entry, over a final corpus pass
    double initial_recon_l1 = 0.0;
    double final_recon_l1 = 0.0;
};

template <class S>
struct VqVae {
    VqConfig cfg;
    Conv1d<S> enc_in;
    std::vector<Conv1d<S>> enc_down;
    Conv1d<S> enc_out;
    Tensor<S> codebook;
    std::vector<Conv1d<S>> dec_convs;  // exactly three, upsamples interleaved

    VqVae() = default;
    VqVae(const VqConfig& c, Rng& rng) : cfg(c) {
        if (c.M < 2) throw ConfigError("vq: codebook needs at least 2 entries");
        enc_in = Conv1d<S>(c.hidden, 3, 5, rng);
        for (std::size_t i = 0; i < c.n_down(); ++i)
            enc_down.push_back(Conv1d<S>(c.hidden, c.hidden, 3, rng, /*stride=*/2));
        enc_out = Conv1d<S>(c.d_z, c.hidden, 3, rng);
        codebook = randn<S>(rng, {c.M, c.d_z}, 0.3);
        dec_convs.push_back(Conv1d<S>(c.hidden, c.d_z, 5, rng));
        dec_convs.push_back(Conv1d<S>(c.hidden, c.hidden, 5, rng));
        dec_convs.push_back(Conv1d<S>(3, c.hidden, 5, rng));
    }

    /// Strided conv stack; input must already be padded to a multiple of w.
    typename Tape<S>::Var encode(Tape<S>& tape, typename Tape<S>::Var pose) const {
        auto h = tape.gelu(enc_in(tape, pose));
        for (const auto& conv : enc_down) h = tape.gelu(conv(tape, h));
        return enc_out(tape, h);
    }

    /// Upsample-by-w (nearest repeat) interleaved with the three convs.
    typename Tape<S>::Var decode(Tape<S>& tape, typename Tape<S>::Var q) const {
        std::size_t ups = cfg.n_down();
        auto h = q;
        for (std::size_t i = 0; i < dec_convs.size(); ++i) {
            if (i < ups) h = tape.upsample_repeat(h, 2);
            h = dec_convs[i](tape, h);
            if (i + 1 < dec_convs.size()) h = tape.gelu(h);
        }
        return h;
    }

    Tensor<S> encode_values(const Tensor<S>& pose) const {
        Tape<S> tape;
        return tape.val(encode(tape, tape.constant(pad_pose(pose, cfg.w))));
    }

    Tensor<S> decode_values(const Tensor<S>& q) const {
        Tape<S> tape;
        return tape.val(decode(tape, tape.constant(q)));
    }

    /// Full VQ objective with straight-through decoding. The codebook term
    /// moves only codebook entries (sg on the encoder side), the commitment
    /// term only the encoder; per-frame squared L2, averaged over frames.
    typename Tape<S>::Var vq_loss(Tape<S>& tape, const Tensor<S>& pose_raw,
                                  std::vector<std::size_t>* indices_out = nullptr) {
        Tensor<S> pose = pad_pose(pose_raw, cfg.w);
        auto gt = tape.constant(pose);
        auto z = encode(tape, gt);
        auto idx = quantize_indices(tape.val(z), codebook);
        if (indices_out) *indices_out = idx;
        Tensor<S> q = gather_codes(codebook, idx);
        auto pred = decode(tape, tape.straight_through(z, q));
        auto loss = recon_loss(tape, pred, gt, cfg.alpha1, cfg.alpha2);
        auto [cb_term, cm_term] = vq_terms(tape, z, codebook, idx, cfg.gamma);
        return tape.add(loss, tape.add(cb_term, cm_term));
    }

    /// Reconstruction through the quantizer (inference path).
    Tensor<S> reconstruct(const Tensor<S>& pose) const {
        auto z = encode_values(pose);
        auto q = gather_codes(codebook, quantize_indices(z, codebook));
        return decode_values(q);
    }

    std::vector<std::size_t> encode_codes(const Tensor<S>& pose) const {
        return quantize_indices(encode_values(pose), codebook);
    }

    void collect(ParamList<S>& out, const std::string& prefix = "vq") {
        enc_in.collect(out, prefix + ".enc.in");
        for (std::size_t i = 0; i < enc_down.size(); ++i)
            enc_down[i].collect(out, prefix + ".enc.down" + std::to_string(i));
        enc_out.collect(out, prefix + ".enc.out");
        out.push_back({prefix + ".codebook", &codebook});
        for (std::size_t i = 0; i < dec_convs.size(); ++i)
            dec_convs[i].collect(out, prefix + ".dec.conv" + std::to_string(i));
    }
};

template <class S>
double mean_abs_recon_error(const VqVae<S>& model, const std::vector<Tensor<S>>& corpus) {
    double total = 0;
    std::size_t count = 0;
    for (const auto& pose : corpus) {
        auto padded = pad_pose(pose, model.cfg.w);
        auto rec = model.reconstruct(pose);
        for (std::size_t i = 0; i < padded.data.size(); ++i)
            total += std::abs(double(rec.data[i]) - double(padded.data[i]));
        count += padded.numel();
    }
    return total / double(count);
}

/// Deterministic single-threaded trainer: cycles the corpus one sequence per
/// step. Aborts with the step index on a non-finite loss.
template <class S>
VqTrainReport train_vqvae(VqVae<S>& model, const std::vector<Tensor<S>>& corpus,
                          std::size_t steps, std::uint64_t seed, double lr = 2e-3) {
    if (corpus.empty()) throw DataError("train_vqvae: empty corpus");
    VqTrainReport report;
    report.initial_recon_l1 = mean_abs_recon_error(model, corpus);
    ParamList<S> params;
    model.collect(params);
    Adam<S> opt(lr);
    Rng rng(seed);
    for (std::size_t step = 0; step < steps; ++step) {
        const auto& pose = corpus[step % corpus.size()];
        Tape<S> tape;
        auto loss = model.vq_loss(tape, pose);
        double lv = double(tape.val(loss).data[0]);
        if (!std::isfinite(lv))
            throw NumericError("train_vqvae: non-finite loss at step " + std::to_string(step));
        report.loss_curve.push_back(lv);
        tape.backward(loss);
        opt.step(params, tape);
    }
    report.usage.assign(model.cfg.M, 0);
    for (const auto& pose : corpus)
        for (auto i : model.encode_codes(pose)) report.usage[i]++;
    report.final_recon_l1 = mean_abs_recon_error(model, corpus);
    return report;
}

}  // namespace adamesh
