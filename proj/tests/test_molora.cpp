#include <catch2/catch_amalgamated.hpp>

#include "adamesh/gradcheck.hpp"
#include "adamesh/layers.hpp"
#include "adamesh/optimizer.hpp"

using namespace adamesh;
using Catch::Approx;

namespace {

/// Tiny conv+linear stack standing in for an adaptable decoder.
template <class S>
struct ToyModel {
    Conv1d<S> conv;
    Linear<S> proj;
    Linear<S> audio;  // excluded by the default filter in attach tests

    ToyModel(Rng& rng, std::size_t d = 8) : conv(d, d, 3, rng), proj(d, d, rng), audio(d, d, rng) {}

    typename Tape<S>::Var forward(Tape<S>& t, const Tensor<S>& x) {
        auto h = audio(t, t.constant(x));
        h = t.gelu(conv(t, h));
        return proj(t, h);
    }

    ParamList<S> params() {
        ParamList<S> out;
        conv.collect(out, "conv");
        proj.collect(out, "proj");
        audio.collect(out, "audio_encoder.proj");
        return out;
    }

    AdaptableList<S> adaptables() {
        return {{"conv", &conv.W, &conv.lora},
                {"proj", &proj.W, &proj.lora},
                {"audio_encoder.proj", &audio.W, &audio.lora}};
    }
};

MoLoRAConfig cfg_with(std::vector<std::size_t> ranks) {
    MoLoRAConfig cfg;
    cfg.ranks = std::move(ranks);
    cfg.target_filter = [](const std::string& n) {
        return n.rfind("audio_encoder", 0) != 0;
    };
    return cfg;
}

}  // namespace

TEST_CASE("attach") {
    Rng rng(42);
    ToyModel<double> model(rng);
    auto x = randn<double>(rng, {6, 8});

    auto forward_vals = [&]() {
        Tape<double> t;
        return t.val(model.forward(t, x)).data;
    };
    auto base = forward_vals();

    SECTION("attach-time forward identity (exact)") {
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({2, 4}), rng);
        REQUIRE(forward_vals() == base);
    }
    SECTION("ranks [4,8] give one factor pair per rank per adapted layer") {
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({4, 8}), rng);
        REQUIRE(model.conv.lora->factors.size() == 2);
        REQUIRE(model.proj.lora->factors.size() == 2);
    }
    SECTION("audio encoder excluded by the default filter") {
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({2}), rng);
        REQUIRE_FALSE(model.audio.lora.has_value());
        REQUIRE(model.conv.lora.has_value());
    }
    SECTION("rank not dividing m names the layer") {
        auto layers = model.adaptables();
        try {
            attach_molora(layers, cfg_with({3}), rng);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            REQUIRE(std::string(e.what()).find("conv") != std::string::npos);
        }
    }
    SECTION("factor shapes match the spec formula") {
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({4}), rng);
        // conv weight 8x8x3, r=4: B is (m/r*k) x (r*k), A is (r*k) x (n*r)
        const auto& f = model.conv.lora->factors[0];
        REQUIRE(f.B.shape == std::vector<std::size_t>{6, 12});
        REQUIRE(f.A.shape == std::vector<std::size_t>{12, 32});
    }
}

TEST_CASE("delta_weight") {
    SECTION("all-B-zero gives zero delta") {
        Rng rng(1);
        MoLoRAConfig cfg;
        cfg.ranks = {2, 4};
        auto set = make_molora_set<double>(8, 8, 3, cfg, rng, "l");
        auto d = delta_weight(set);
        for (double v : d.data) REQUIRE(v == 0.0);
    }
    SECTION("hand outer product, r=1 linear 2x2") {
        MoLoRASet<double> set;
        set.m = 2;
        set.n = 2;
        set.k = 1;
        LoraFactor<double> f;
        f.rank = 1;
        f.scale = 1.0;
        f.B = Tensor<double>({2, 1});
        f.B.data = {1, 2};
        f.A = Tensor<double>({1, 2});
        f.A.data = {3, 4};
        set.factors.push_back(f);
        auto d = delta_weight(set);
        REQUIRE(d.data == std::vector<double>{3, 4, 6, 8});
    }
    SECTION("two ranks sum to the individually computed deltas") {
        Rng rng(9);
        MoLoRAConfig cfg;
        cfg.ranks = {2, 4};
        auto set = make_molora_set<double>(8, 4, 3, cfg, rng, "l");
        for (auto& f : set.factors) f.B = randn<double>(rng, f.B.shape, 0.1);

        MoLoRASet<double> only0 = set, only1 = set;
        only0.factors = {set.factors[0]};
        only1.factors = {set.factors[1]};
        auto d = delta_weight(set);
        auto d0 = delta_weight(only0);
        auto d1 = delta_weight(only1);
        for (std::size_t i = 0; i < d.data.size(); ++i)
            REQUIRE(d.data[i] == Approx(d0.data[i] + d1.data[i]).margin(1e-15));
    }
}

TEST_CASE("merge") {
    Rng rng(77);
    ToyModel<double> model(rng);
    auto x = randn<double>(rng, {6, 8});

    SECTION("merge after zero steps is bitwise the base weights") {
        auto W0 = model.conv.W.data;
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({2}), rng);
        merge_molora(layers);
        REQUIRE(model.conv.W.data == W0);
        REQUIRE_FALSE(model.conv.lora.has_value());
    }

    SECTION("merged forward matches adapted forward; unmerge recovers base") {
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({2, 4}), rng);
        auto params = model.params();
        auto names = molora_param_names(params);
        std::set<std::string> trainable(names.begin(), names.end());
        REQUIRE_FALSE(trainable.empty());

        auto base_snapshot_conv = model.conv.W.data;
        auto base_snapshot_proj = model.proj.W.data;

        Adam<double> opt(0.01);
        Tensor<double> target = randn<double>(rng, {6, 8});
        for (int s = 0; s < 30; ++s) {
            Tape<double> t;
            auto loss = t.mse(model.forward(t, x), t.constant(target));
            t.backward(loss);
            opt.step(params, t, &trainable);
        }
        // gradients flow only to factors
        REQUIRE(model.conv.W.data == base_snapshot_conv);
        REQUIRE(model.proj.W.data == base_snapshot_proj);

        Tape<double> t1;
        auto adapted = t1.val(model.forward(t1, x)).data;

        auto d_conv = delta_weight(*model.conv.lora);
        auto d_proj = delta_weight(*model.proj.lora);
        merge_molora(layers);

        Tape<double> t2;
        auto merged = t2.val(model.forward(t2, x)).data;
        for (std::size_t i = 0; i < merged.size(); ++i) {
            double rel = std::abs(merged[i] - adapted[i]) / std::max(std::abs(adapted[i]), 1.0);
            REQUIRE(rel < 1e-5);
        }

        // algebraic inverse: subtracting the same delta recovers W0
        for (std::size_t i = 0; i < model.conv.W.data.size(); ++i)
            model.conv.W.data[i] -= d_conv.data[i];
        for (std::size_t i = 0; i < model.proj.W.data.size(); ++i)
            model.proj.W.data[i] -= d_proj.data[i];
        for (std::size_t i = 0; i < model.conv.W.data.size(); ++i)
            REQUIRE(model.conv.W.data[i] == Approx(base_snapshot_conv[i]).margin(1e-6));
        for (std::size_t i = 0; i < model.proj.W.data.size(); ++i)
            REQUIRE(model.proj.W.data[i] == Approx(base_snapshot_proj[i]).margin(1e-6));
    }

    SECTION("double merge is a state error") {
        auto layers = model.adaptables();
        attach_molora(layers, cfg_with({2}), rng);
        merge_molora(layers);
        REQUIRE_THROWS_AS(merge_molora(layers), DataError);
    }
}

TEST_CASE("count_trainable") {
    Rng rng(5);
    SECTION("linear 8x8, ranks=[1] -> 16") {
        MoLoRAConfig cfg;
        cfg.ranks = {1};
        auto set = make_molora_set<double>(8, 8, 1, cfg, rng, "l");
        REQUIRE(count_trainable(set) == 16);
    }
    SECTION("empty ranks -> 0") {
        MoLoRAConfig cfg;
        auto set = make_molora_set<double>(8, 8, 1, cfg, rng, "l");
        REQUIRE(count_trainable(set) == 0);
    }
    SECTION("additivity over ranks") {
        auto count_for = [&](std::vector<std::size_t> ranks) {
            MoLoRAConfig cfg;
            cfg.ranks = std::move(ranks);
            Rng r2(5);
            return count_trainable(make_molora_set<double>(16, 8, 3, cfg, r2, "l"));
        };
        REQUIRE(count_for({4, 8}) == count_for({4}) + count_for({8}));
    }
    SECTION("formula spot check against the closed form") {
        // conv 16x8x3, r=4: (16/4*3)*(4*3) + (4*3)*(8*4) = 144 + 384
        MoLoRAConfig cfg;
        cfg.ranks = {4};
        auto set = make_molora_set<double>(16, 8, 3, cfg, rng, "l");
        REQUIRE(count_trainable(set) == 144 + 384);
    }
}

TEST_CASE("gradient check on factor matrices") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Conv1d<double> conv(4, 4, 3, rng);
        Linear<double> lin(4, 4, rng);
        AdaptableList<double> layers{{"conv", &conv.W, &conv.lora}, {"lin", &lin.W, &lin.lora}};
        MoLoRAConfig cfg;
        cfg.ranks = {2, 4};
        attach_molora(layers, cfg, rng);
        // B is zero at attach time which zeroes A's gradient structurally;
        // randomize both factors for the check.
        for (auto* l : {&conv.lora, &lin.lora})
            for (auto& f : (*l)->factors) {
                f.B = randn<double>(rng, f.B.shape, 0.1);
                f.A = randn<double>(rng, f.A.shape, 0.1);
            }
        auto x = randn<double>(rng, {5, 4});
        ParamList<double> all;
        conv.collect(all, "conv");
        lin.collect(all, "lin");
        ParamList<double> factors;
        for (auto& p : all)
            if (p.name.find(".molora.") != std::string::npos) factors.push_back(p);
        REQUIRE(factors.size() == 8);

        auto report = grad_check(
            [&](Tape<double>& t) {
                auto h = t.gelu(conv(t, t.constant(x)));
                h = lin(t, h);
                return t.mean_all(t.mul(h, h));
            },
            factors);
        INFO("seed " << seed << " err " << report.max_rel_err);
        REQUIRE(report.max_rel_err < 1e-6);
    }
}
