#include <catch2/catch_amalgamated.hpp>

#include "adamesh/gradcheck.hpp"
#include "adamesh/posegpt.hpp"

using namespace adamesh;
using Catch::Approx;

namespace {

PoseGptConfig tiny_cfg() {
    PoseGptConfig c;
    c.M = 8;
    c.d = 16;
    c.d_speech = 4;
    c.d_style = 4;
    c.n_styles = 2;
    c.n_layers = 2;
    c.heads = 2;
    c.w = 4;
    c.max_len = 8;
    return c;
}

/// Deterministic toy corpus: each sample gets a distinct repeating code motif
/// and a speech tensor correlated with its codes.
template <class S>
std::vector<PoseSample<S>> toy_corpus(const PoseGptConfig& cfg, std::size_t n,
                                      std::size_t Tq, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<PoseSample<S>> corpus;
    for (std::size_t s = 0; s < n; ++s) {
        PoseSample<S> sample;
        sample.style_id = s % cfg.n_styles;
        sample.codes.resize(Tq);
        for (std::size_t t = 0; t < Tq; ++t) sample.codes[t] = (s * 3 + t * (s + 1)) % cfg.M;
        sample.speech = Tensor<S>({Tq * cfg.w, cfg.d_speech});
        for (std::size_t t = 0; t < Tq * cfg.w; ++t)
            for (std::size_t c = 0; c < cfg.d_speech; ++c)
                sample.speech(t, c) =
                    S(0.3 * double(sample.codes[t / cfg.w]) / double(cfg.M) +
                      0.05 * rng.normal());
        corpus.push_back(std::move(sample));
    }
    return corpus;
}

}  // namespace

TEST_CASE("pool_windows") {
    SECTION("hand mean: [1,2,3,4] with w=4 -> 2.5") {
        Tensor<double> x({4, 1});
        x.data = {1, 2, 3, 4};
        auto p = pool_windows(x, 4);
        REQUIRE(p.shape == std::vector<std::size_t>{1, 1});
        REQUIRE(p.data[0] == Approx(2.5));
    }
    SECTION("length not a multiple of w") {
        Tensor<double> x({5, 1});
        REQUIRE_THROWS_AS(pool_windows(x, 4), DataError);
    }
}

TEST_CASE("condition") {
    Rng rng(3);
    auto cfg = tiny_cfg();
    PoseGpt<double> model(cfg, rng);

    SECTION("zero-init final projection gives zero conditioning") {
        model.cond_proj = Linear<double>::zeros(cfg.d, cfg.d + cfg.d_style);
        Tensor<double> speech({8, cfg.d_speech});
        Tape<double> t;
        auto cond = t.val(model.condition(t, speech, 0));
        for (double v : cond.data) REQUIRE(v == 0.0);
    }
    SECTION("style ids change conditioning only through the style columns") {
        Tensor<double> speech = randn<double>(rng, {8, cfg.d_speech});
        auto cond_for = [&](std::size_t id) {
            Tape<double> t;
            return t.val(model.condition(t, speech, id)).data;
        };
        REQUIRE(cond_for(0) != cond_for(1));
        // zeroing the style columns of the final projection removes the
        // dependence entirely
        for (std::size_t r = 0; r < cfg.d; ++r)
            for (std::size_t c = cfg.d; c < cfg.d + cfg.d_style; ++c)
                model.cond_proj.W(r, c) = 0.0;
        REQUIRE(cond_for(0) == cond_for(1));
    }
    SECTION("style id out of range") {
        Tensor<double> speech({8, cfg.d_speech});
        Tape<double> t;
        REQUIRE_THROWS_AS(model.condition(t, speech, 2), DataError);
    }
}

TEST_CASE("forward_logits") {
    Rng rng(5);
    auto cfg = tiny_cfg();
    PoseGpt<double> model(cfg, rng);
    Tensor<double> speech = randn<double>(rng, {24, cfg.d_speech});

    SECTION("causality: changing future codes leaves earlier logits unchanged") {
        std::vector<std::size_t> a = {1, 2, 3, 4, 5};
        std::vector<std::size_t> b = {1, 2, 3, 7, 0};  // differs from position 3
        auto logits_for = [&](const std::vector<std::size_t>& p) {
            Tape<double> t;
            auto cond = model.condition(t, speech, 0);
            return t.val(model.forward_logits(t, p, cond));
        };
        auto la = logits_for(a);
        auto lb = logits_for(b);
        // logits at positions 0..3 depend only on codes 0..2, equal in a and b
        for (std::size_t t = 0; t <= 3; ++t)
            for (std::size_t m = 0; m < cfg.M; ++m) REQUIRE(la(t, m) == lb(t, m));
        bool diff = false;
        for (std::size_t m = 0; m < cfg.M; ++m) diff |= la(4, m) != lb(4, m);
        REQUIRE(diff);
    }
    SECTION("prefix longer than conditioning") {
        Tape<double> t;
        auto cond = model.condition(t, speech, 0);
        std::vector<std::size_t> p(6, 0);
        REQUIRE_THROWS_AS(model.forward_logits(t, p, cond), DataError);
    }
    SECTION("code index out of range") {
        Tape<double> t;
        auto cond = model.condition(t, speech, 0);
        std::vector<std::size_t> p = {cfg.M};
        REQUIRE_THROWS_AS(model.forward_logits(t, p, cond), DataError);
    }
    SECTION("untrained logits are finite and softmax rows sum to 1") {
        Tape<double> t;
        auto cond = model.condition(t, speech, 0);
        auto logits = model.forward_logits(t, {1, 2}, cond);
        REQUIRE(t.val(logits).all_finite());
        auto probs = t.val(t.softmax_rows(logits));
        for (std::size_t r = 0; r < probs.shape[0]; ++r) {
            double sum = 0;
            for (std::size_t m = 0; m < cfg.M; ++m) sum += probs(r, m);
            REQUIRE(sum == Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("tf_loss") {
    SECTION("uniform logits give ln(M); M=64 -> 4.1589") {
        Rng rng(7);
        PoseGptConfig cfg = tiny_cfg();
        cfg.M = 64;
        PoseGpt<double> model(cfg, rng);
        model.head = Linear<double>::zeros(cfg.M, cfg.d);  // all logits 0
        PoseSample<double> sample;
        sample.speech = Tensor<double>({16, cfg.d_speech});
        sample.codes = {3, 11, 40, 63};
        Tape<double> t;
        double loss = t.val(model.tf_loss(t, sample)).data[0];
        REQUIRE(loss == Approx(std::log(64.0)).margin(1e-6));
        REQUIRE(loss == Approx(4.1589).margin(1e-3));
    }
    SECTION("M=2, logits (1,0), target 0 -> 0.3133") {
        Tape<double> t;
        Tensor<double> logits({1, 2});
        logits.data = {1, 0};
        double loss = t.val(t.cross_entropy(t.constant(logits), {0})).data[0];
        REQUIRE(loss == Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).margin(1e-12));
        REQUIRE(loss == Approx(0.3133).margin(1e-4));
    }
    SECTION("large-margin correct logits drive the loss to 0") {
        Tape<double> t;
        Tensor<double> logits({1, 3});
        logits.data = {50, 0, 0};
        REQUIRE(t.val(t.cross_entropy(t.constant(logits), {0})).data[0] < 1e-12);
    }
    SECTION("target index >= M") {
        Tape<double> t;
        Tensor<double> logits({1, 3});
        REQUIRE_THROWS_AS(t.cross_entropy(t.constant(logits), {3}), DataError);
    }
}

TEST_CASE("train_posegpt") {
    auto cfg = tiny_cfg();
    auto corpus = toy_corpus<double>(cfg, 4, 6, 99);

    SECTION("tf_fraction=1.0 matches a hand-rolled teacher-forcing loop") {
        Rng r1(13);
        PoseGpt<double> trained(cfg, r1);
        Rng r2(13);
        PoseGpt<double> manual(cfg, r2);
        train_posegpt(trained, corpus, 20, 1.0, 5, 1e-3);

        ParamList<double> params;
        manual.collect(params);
        Adam<double> opt(1e-3);
        for (std::size_t step = 0; step < 20; ++step) {
            Tape<double> tape;
            auto loss = manual.tf_loss(tape, corpus[step % corpus.size()]);
            tape.backward(loss);
            opt.step(params, tape);
        }
        ParamList<double> p1, p2;
        trained.collect(p1);
        manual.collect(p2);
        for (std::size_t i = 0; i < p1.size(); ++i)
            REQUIRE(p1[i].tensor->data == p2[i].tensor->data);
    }
    SECTION("same seed gives identical checkpoints through scheduled sampling") {
        auto run = [&]() {
            Rng rng(21);
            PoseGpt<double> model(cfg, rng);
            train_posegpt(model, corpus, 30, 0.5, 7, 1e-3);
            ParamList<double> params;
            model.collect(params);
            std::vector<double> flat;
            for (auto& p : params)
                flat.insert(flat.end(), p.tensor->data.begin(), p.tensor->data.end());
            return flat;
        };
        REQUIRE(run() == run());
    }
    SECTION("invalid tf_fraction") {
        Rng rng(1);
        PoseGpt<double> model(cfg, rng);
        REQUIRE_THROWS_AS(train_posegpt(model, corpus, 10, 1.5, 1), ConfigError);
    }
}

TEST_CASE("overfit and greedy decode") {
    auto cfg = tiny_cfg();
    auto corpus = toy_corpus<double>(cfg, 4, 6, 99);
    Rng rng(31);
    PoseGpt<double> model(cfg, rng);
    auto report = train_posegpt(model, corpus, 1200, 0.7, 11, 3e-3);
    INFO("final tf loss " << report.final_tf_loss);
    REQUIRE(report.final_tf_loss < 0.1);

    SECTION("greedy decode reproduces >=95% of training tokens") {
        std::size_t hits = 0, total = 0;
        for (const auto& sample : corpus) {
            auto decoded = model.greedy_decode(sample.speech, sample.style_id);
            REQUIRE(decoded.size() == sample.codes.size());
            for (std::size_t t = 0; t < decoded.size(); ++t) {
                hits += decoded[t] == sample.codes[t];
                ++total;
            }
        }
        REQUIRE(double(hits) >= 0.95 * double(total));
    }
    SECTION("greedy decode is deterministic") {
        auto a = model.greedy_decode(corpus[0].speech, corpus[0].style_id);
        auto b = model.greedy_decode(corpus[0].speech, corpus[0].style_id);
        REQUIRE(a == b);
    }
    SECTION("distinct styles with the same speech give different codes") {
        // samples 0 and 2 share style 0 but have different motifs; the model
        // must rely on the style input to separate 0 (style 0) from 1 (style 1)
        auto s0 = model.greedy_decode(corpus[0].speech, 0);
        auto s1 = model.greedy_decode(corpus[0].speech, 1);
        REQUIRE(s0 != s1);
    }
}

TEST_CASE("gradient check on all transformer parameters") {
    auto cfg = tiny_cfg();
    cfg.n_layers = 1;
    cfg.max_len = 4;
    Rng rng(41);
    PoseGpt<double> model(cfg, rng);
    PoseSample<double> sample;
    sample.speech = randn<double>(rng, {16, cfg.d_speech}, 0.3);
    sample.codes = {1, 5, 2, 7};
    sample.style_id = 1;
    ParamList<double> params;
    model.collect(params);
    auto report = grad_check(
        [&](Tape<double>& t) { return model.tf_loss(t, sample); }, params, 1e-6);
    INFO("worst " << report.worst()->name << " err " << report.worst()->max_rel_err);
    REQUIRE(report.max_rel_err < 1e-6);
}
