#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

#include "adamesh/checkpoint.hpp"
#include "adamesh/config.hpp"
#include "adamesh/expradapter.hpp"
#include "adamesh/gradcheck.hpp"
#include "adamesh/metrics.hpp"
#include "adamesh/posegpt.hpp"
#include "adamesh/styleretrieval.hpp"
#include "adamesh/synthcorpus.hpp"

namespace fs = std::filesystem;
using namespace adamesh;

namespace {

ExprConfig expr_cfg_from(const RunConfig& c) {
    ExprConfig e;
    e.d = c.d;
    e.d_style = c.d_style;
    e.style_width = c.style_width;
    e.heads = c.heads;
    return e;
}

VqConfig vq_cfg_from(const RunConfig& c) {
    VqConfig v;
    v.M = c.vq_m;
    v.d_z = c.vq_dz;
    v.w = c.vq_w;
    v.gamma = c.vq_gamma;
    v.alpha1 = c.vq_alpha1;
    v.alpha2 = c.vq_alpha2;
    return v;
}

PoseGptConfig gpt_cfg_from(const RunConfig& c, std::size_t n_styles) {
    PoseGptConfig g;
    g.M = c.vq_m;
    g.d = c.d;
    g.d_speech = kSpeechDim;
    g.d_style = 8;
    g.n_styles = n_styles;
    g.n_layers = c.gpt_layers;
    g.heads = c.heads;
    g.w = c.vq_w;
    return g;
}

std::size_t style_count(const Corpus<float>& corpus) {
    std::size_t n = 0;
    for (const auto& s : corpus.train) n = std::max(n, s.style_id + 1);
    for (const auto& s : corpus.holdout) n = std::max(n, s.style_id + 1);
    return n;
}

std::vector<ExprTrainItem<float>> expr_items(const std::vector<Sample<float>>& samples) {
    std::vector<ExprTrainItem<float>> items;
    for (const auto& s : samples)
        items.push_back({s.speech.features, s.expr, s.identity});
    return items;
}

/// Repeat the last frame until T is a multiple of w (speech-side analog of
/// the pose padding).
Tensor<float> pad_rows(const Tensor<float>& x, std::size_t w) {
    std::size_t T = x.shape.at(0), d = x.shape.at(1);
    if (T % w == 0) return x;
    std::size_t Tp = T + (w - T % w);
    Tensor<float> out({Tp, d});
    for (std::size_t t = 0; t < Tp; ++t)
        for (std::size_t c = 0; c < d; ++c) out(t, c) = x(std::min(t, T - 1), c);
    return out;
}

template <class Model>
void save_model(const std::string& path, Model& model, const RunConfig& cfg) {
    ParamList<float> params;
    model.collect(params);
    save_checkpoint(path, make_checkpoint(params, config_to_json(cfg)));
}

template <class Model>
void load_model(const std::string& path, Model& model) {
    auto ckpt = load_checkpoint(path);
    ParamList<float> params;
    model.collect(params);
    restore_checkpoint(ckpt, params);
}

void save_expr_model(const std::string& path, ExprAdapter<float>& model,
                     const RunConfig& cfg) {
    ParamList<float> params;
    model.collect(params);
    save_checkpoint(path, make_checkpoint(params, config_to_json(cfg)));
}

int cmd_gen_corpus(const RunConfig& cfg, const std::string& out) {
    auto corpus = make_corpus({calm_spec(), excited_spec()}, cfg.n_per_style, cfg.frames,
                              cfg.seed);
    save_corpus(out, corpus);
    std::cout << "corpus: " << corpus.train.size() << " train / " << corpus.holdout.size()
              << " holdout samples\n";
    return 0;
}

int cmd_pretrain_expr(const RunConfig& cfg, const std::string& corpus_dir,
                      const std::string& out) {
    auto corpus = load_corpus<float>(corpus_dir);
    auto items = expr_items(corpus.train);
    Rng rng(cfg.seed);
    ExprAdapter<float> model(expr_cfg_from(cfg), rng);
    auto report = pretrain_expr(model, items, cfg.steps, cfg.seed, cfg.lr,
                                /*track_mse=*/false);
    save_expr_model(out, model, cfg);
    std::cout << "pretrain-expr: " << cfg.steps << " steps, final loss "
              << (report.loss_curve.empty() ? 0.0 : report.loss_curve.back()) << "\n";
    return 0;
}

int cmd_adapt_expr(const RunConfig& cfg, const std::string& ckpt_path,
                   const std::string& ref_dir, const std::string& out) {
    Rng rng(cfg.seed);
    ExprAdapter<float> model(expr_cfg_from(cfg), rng);
    load_model(ckpt_path, model);
    auto ref = load_sample<float>(ref_dir);
    ExprTrainItem<float> item{ref.speech.features, ref.expr, ref.identity};
    MoLoRAConfig mcfg;
    mcfg.ranks = cfg.ranks;
    auto report = adapt_expr(model, item, mcfg, cfg.adapt_steps, cfg.seed, cfg.adapt_lr);
    auto layers = model.adaptables();
    merge_molora(layers);
    save_expr_model(out, model, cfg);
    std::cout << "adapt-expr: " << report.loss_curve.size() << " steps, final loss "
              << (report.loss_curve.empty() ? 0.0 : report.loss_curve.back()) << "\n";
    return 0;
}

int cmd_infer_expr(const RunConfig& cfg, const std::string& ckpt_path,
                   const std::string& speech_path, const std::string& identity_path,
                   const std::string& style_path, const std::string& out) {
    Rng rng(cfg.seed);
    ExprAdapter<float> model(expr_cfg_from(cfg), rng);
    load_model(ckpt_path, model);
    auto speech = load_mtns<float>(speech_path);
    auto identity = load_mtns<float>(identity_path);
    auto style = load_mtns<float>(style_path);
    save_mtns(out, model.infer(speech, identity, style));
    std::cout << "infer-expr: wrote " << out << "\n";
    return 0;
}

int cmd_train_vq(const RunConfig& cfg, const std::string& corpus_dir, const std::string& out) {
    auto corpus = load_corpus<float>(corpus_dir);
    std::vector<Tensor<float>> poses;
    for (const auto& s : corpus.train) poses.push_back(s.pose);
    Rng rng(cfg.seed);
    VqVae<float> model(vq_cfg_from(cfg), rng);
    auto report = train_vqvae(model, poses, cfg.steps, cfg.seed, cfg.lr);
    save_model(out, model, cfg);
    std::size_t used = 0;
    for (auto u : report.usage)
        if (u > 0) ++used;
    std::cout << "train-vq: recon L1 " << report.initial_recon_l1 << " -> "
              << report.final_recon_l1 << ", " << used << " codebook entries used\n";
    return 0;
}

int cmd_train_posegpt(const RunConfig& cfg, const std::string& corpus_dir,
                      const std::string& vq_path, const std::string& out) {
    auto corpus = load_corpus<float>(corpus_dir);
    Rng vq_rng(cfg.seed);
    VqVae<float> vq(vq_cfg_from(cfg), vq_rng);
    load_model(vq_path, vq);

    std::vector<PoseSample<float>> samples;
    for (const auto& s : corpus.train) {
        PoseSample<float> ps;
        ps.codes = vq.encode_codes(s.pose);
        ps.speech = pad_rows(s.speech.features, cfg.vq_w);
        ps.style_id = s.style_id;
        samples.push_back(std::move(ps));
    }
    Rng rng(cfg.seed);
    PoseGpt<float> model(gpt_cfg_from(cfg, style_count(corpus)), rng);
    auto report = train_posegpt(model, samples, cfg.steps, 0.7, cfg.seed, cfg.lr);
    save_model(out, model, cfg);
    std::cout << "train-posegpt: final teacher-forced loss " << report.final_tf_loss << "\n";
    return 0;
}

int cmd_build_styledb(const RunConfig& cfg, const std::string& corpus_dir,
                      const std::string& vq_path, const std::string& out) {
    auto corpus = load_corpus<float>(corpus_dir);
    Rng vq_rng(cfg.seed);
    VqVae<float> vq(vq_cfg_from(cfg), vq_rng);
    load_model(vq_path, vq);
    std::vector<StyleCorpusItem<float>> items;
    for (const auto& s : corpus.train) items.push_back({s.pose, s.speech.labels, s.style_id});
    save_style_db(out, build_db(vq, items));
    std::cout << "build-styledb: " << items.size() << " entries\n";
    return 0;
}

int cmd_retrieve(const RunConfig& cfg, const std::string& db_path, const std::string& vq_path,
                 const std::string& ref_dir) {
    Rng vq_rng(cfg.seed);
    VqVae<float> vq(vq_cfg_from(cfg), vq_rng);
    load_model(vq_path, vq);
    auto db = load_style_db(db_path);
    auto ref = load_sample<float>(ref_dir);
    bool short_ref = false;
    auto id = adapt_pose_style(vq, db, ref.pose, ref.speech.labels, 250, &short_ref);
    if (short_ref) std::cerr << "warning: reference shorter than 250 frames\n";
    std::cout << id << "\n";
    return 0;
}

int cmd_infer_pose(const RunConfig& cfg, const std::string& vq_path,
                   const std::string& gpt_path, const std::string& db_path,
                   const std::string& ref_dir, const std::string& speech_path,
                   const std::string& out, std::size_t n_styles) {
    Rng vq_rng(cfg.seed);
    VqVae<float> vq(vq_cfg_from(cfg), vq_rng);
    load_model(vq_path, vq);
    Rng gpt_rng(cfg.seed);
    PoseGpt<float> gpt(gpt_cfg_from(cfg, n_styles), gpt_rng);
    load_model(gpt_path, gpt);
    auto db = load_style_db(db_path);
    auto ref = load_sample<float>(ref_dir);
    bool short_ref = false;
    auto style_id = adapt_pose_style(vq, db, ref.pose, ref.speech.labels, 250, &short_ref);
    if (short_ref) std::cerr << "warning: reference shorter than 250 frames\n";
    auto speech = pad_rows(load_mtns<float>(speech_path), cfg.vq_w);
    auto codes = gpt.greedy_decode(speech, style_id);
    auto pose = vq.decode_values(gather_codes(vq.codebook, codes));
    save_mtns(out, pose);
    std::cout << "infer-pose: style " << style_id << ", wrote " << out << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& corpus_dir, const std::string& expr_path,
             const std::string& vq_path, const std::string& gpt_path,
             const std::string& db_path, const std::string& out) {
    auto corpus = load_corpus<float>(corpus_dir);
    if (corpus.holdout.empty()) throw DataError("eval: corpus has no holdout split");

    Rng e_rng(cfg.seed);
    ExprAdapter<float> expr_model(expr_cfg_from(cfg), e_rng);
    load_model(expr_path, expr_model);
    Rng vq_rng(cfg.seed);
    VqVae<float> vq(vq_cfg_from(cfg), vq_rng);
    load_model(vq_path, vq);
    Rng g_rng(cfg.seed);
    PoseGpt<float> gpt(gpt_cfg_from(cfg, style_count(corpus)), g_rng);
    load_model(gpt_path, gpt);
    auto db = load_style_db(db_path);

    auto map = PseudoVertexMap::make();
    double lve_sum = 0, eve_sum = 0;
    std::vector<Tensor<float>> pred_exprs, gen_poses;
    std::vector<float> gen_frames, ref_frames;
    std::vector<std::size_t> gen_labels, ref_labels;

    for (const auto& s : corpus.holdout) {
        auto pred = expr_model.infer(s.speech.features, s.identity, s.expr);
        lve_sum += lve(pred, s.expr, map);
        eve_sum += eve(pred, s.expr, map);
        pred_exprs.push_back(pred);

        auto style_id = adapt_pose_style(vq, db, s.pose, s.speech.labels, 250, nullptr);
        auto speech = pad_rows(s.speech.features, cfg.vq_w);
        auto codes = gpt.greedy_decode(speech, style_id);
        auto pose = vq.decode_values(gather_codes(vq.codebook, codes));
        gen_poses.push_back(pose);

        for (std::size_t t = 0; t < pose.shape[0]; ++t) {
            for (std::size_t c = 0; c < 3; ++c) gen_frames.push_back(pose(t, c));
            gen_labels.push_back(s.speech.labels[std::min(t, s.speech.labels.size() - 1)]);
        }
        for (std::size_t t = 0; t < s.pose.shape[0]; ++t) {
            for (std::size_t c = 0; c < 3; ++c) ref_frames.push_back(s.pose(t, c));
            ref_labels.push_back(s.speech.labels[t]);
        }
    }

    Tensor<float> gen({gen_labels.size(), 3}), ref({ref_labels.size(), 3});
    gen.data = gen_frames;
    ref.data = ref_frames;

    nlohmann::json report;
    std::size_t n = corpus.holdout.size();
    report["lve"] = lve_sum / double(n);
    report["eve"] = eve_sum / double(n);
    report["div_expr"] = n >= 2 ? diversity(pred_exprs) : 0.0;
    report["div_pose"] = n >= 2 ? diversity(gen_poses) : 0.0;
    report["lsd"] = lsd(gen_poses);
    report["fid"] = fid(gaussian_stats(gen, 1e-6), gaussian_stats(ref, 1e-6));
    report["fsd"] = fsd(gen, gen_labels, ref, ref_labels);
    report["n_samples"] = n;
    report["seed"] = cfg.seed;
    std::string text = report.dump(2) + "\n";
    if (out.empty()) {
        std::cout << text;
    } else {
        std::ofstream os(out);
        if (!os) throw DataError("eval: cannot open " + out + " for writing");
        os << text;
        std::cout << "eval: wrote " << out << "\n";
    }
    return 0;
}

int cmd_grad_check(std::size_t seeds) {
    double worst = 0;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        Rng rng(seed);
        ConformerOptions opt;
        opt.width = 6;
        opt.heads = 2;
        opt.conv_kernel = 3;
        ConformerBlock<double> block(opt, rng);
        Conv1d<double> conv(4, 6, 3, rng);
        auto x = randn<double>(rng, {5, 6}, 0.5);
        ParamList<double> params;
        block.collect(params, "block");
        conv.collect(params, "conv");
        auto report = grad_check(
            [&](Tape<double>& t) {
                auto h = block(t, t.constant(x));
                h = conv(t, h);
                return t.mean_all(t.mul(h, h));
            },
            params);
        worst = std::max(worst, report.max_rel_err);
        std::cout << "seed " << seed << ": max rel err " << report.max_rel_err << "\n";
        if (!report.pass)
            throw NumericError("gradient check failed at seed " + std::to_string(seed) +
                               " (worst tensor " + report.worst()->name + ")");
    }
    std::cout << "grad-check: " << seeds << " seeds passed, worst " << worst << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech-driven facial animation style adaptation pipeline"};
    app.require_subcommand(1);

    std::string config_path, corpus_dir, out, ckpt, vq_path, gpt_path, db_path, ref_dir;
    std::string speech_path, identity_path, style_path, expr_path;
    std::size_t seeds = 20, n_styles = 2;

    auto add_config = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run configuration")->required();
    };

    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic two-style corpus");
    add_config(gen);
    gen->add_option("--out", out, "corpus directory")->required();

    auto* pre = app.add_subcommand("pretrain-expr", "pretrain the expression adapter");
    add_config(pre);
    pre->add_option("--corpus", corpus_dir)->required();
    pre->add_option("--out", out)->required();

    auto* adapt = app.add_subcommand("adapt-expr", "30-step low-rank style adaptation");
    add_config(adapt);
    adapt->add_option("--ckpt", ckpt)->required();
    adapt->add_option("--ref", ref_dir, "reference sample directory")->required();
    adapt->add_option("--out", out)->required();

    auto* iexpr = app.add_subcommand("infer-expr", "run the expression adapter");
    add_config(iexpr);
    iexpr->add_option("--ckpt", ckpt)->required();
    iexpr->add_option("--speech", speech_path)->required();
    iexpr->add_option("--identity", identity_path)->required();
    iexpr->add_option("--style", style_path, "style source expression tensor")->required();
    iexpr->add_option("--out", out)->required();

    auto* tvq = app.add_subcommand("train-vq", "train the pose quantizer");
    add_config(tvq);
    tvq->add_option("--corpus", corpus_dir)->required();
    tvq->add_option("--out", out)->required();

    auto* tgpt = app.add_subcommand("train-posegpt", "train the pose code predictor");
    add_config(tgpt);
    tgpt->add_option("--corpus", corpus_dir)->required();
    tgpt->add_option("--vq", vq_path)->required();
    tgpt->add_option("--out", out)->required();

    auto* bdb = app.add_subcommand("build-styledb", "build the pose style database");
    add_config(bdb);
    bdb->add_option("--corpus", corpus_dir)->required();
    bdb->add_option("--vq", vq_path)->required();
    bdb->add_option("--out", out)->required();

    auto* ret = app.add_subcommand("retrieve", "retrieve the nearest pose style id");
    add_config(ret);
    ret->add_option("--db", db_path)->required();
    ret->add_option("--vq", vq_path)->required();
    ret->add_option("--ref", ref_dir)->required();

    auto* ipose = app.add_subcommand("infer-pose", "generate head poses for driving speech");
    add_config(ipose);
    ipose->add_option("--vq", vq_path)->required();
    ipose->add_option("--gpt", gpt_path)->required();
    ipose->add_option("--db", db_path)->required();
    ipose->add_option("--ref", ref_dir)->required();
    ipose->add_option("--speech", speech_path)->required();
    ipose->add_option("--out", out)->required();
    ipose->add_option("--styles", n_styles, "style inventory size of the trained model");

    auto* ev = app.add_subcommand("eval", "evaluate on the holdout split");
    add_config(ev);
    ev->add_option("--corpus", corpus_dir)->required();
    ev->add_option("--expr", expr_path)->required();
    ev->add_option("--vq", vq_path)->required();
    ev->add_option("--gpt", gpt_path)->required();
    ev->add_option("--db", db_path)->required();
    ev->add_option("--out", out, "report path (stdout when omitted)");

    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
    gc->add_option("--seeds", seeds, "number of random seeds");

    CLI11_PARSE(app, argc, argv);

    try {
        (void)worker_threads();  // validate ADAMESH_THREADS early
        RunConfig cfg;
        if (!config_path.empty()) cfg = parse_config(config_path);
        if (gen->parsed()) return cmd_gen_corpus(cfg, out);
        if (pre->parsed()) return cmd_pretrain_expr(cfg, corpus_dir, out);
        if (adapt->parsed()) return cmd_adapt_expr(cfg, ckpt, ref_dir, out);
        if (iexpr->parsed())
            return cmd_infer_expr(cfg, ckpt, speech_path, identity_path, style_path, out);
        if (tvq->parsed()) return cmd_train_vq(cfg, corpus_dir, out);
        if (tgpt->parsed()) return cmd_train_posegpt(cfg, corpus_dir, vq_path, out);
        if (bdb->parsed()) return cmd_build_styledb(cfg, corpus_dir, vq_path, out);
        if (ret->parsed()) return cmd_retrieve(cfg, db_path, vq_path, ref_dir);
        if (ipose->parsed())
            return cmd_infer_pose(cfg, vq_path, gpt_path, db_path, ref_dir, speech_path, out,
                                  n_styles);
        if (ev->parsed())
            return cmd_eval(cfg, corpus_dir, expr_path, vq_path, gpt_path, db_path, out);
        if (gc->parsed()) return cmd_grad_check(seeds);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
