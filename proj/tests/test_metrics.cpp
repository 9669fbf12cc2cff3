#include <catch2/catch_amalgamated.hpp>

#include "adamesh/metrics.hpp"

using namespace adamesh;
using Catch::Approx;

namespace {

GaussianStats stats_1d(double mu, double sigma) {
    GaussianStats g;
    g.mu = {mu};
    g.sigma = Tensor<double>({1, 1});
    g.sigma(0, 0) = sigma * sigma;
    return g;
}

/// Map with one lip vertex and one emotion vertex whose rows are unit picks.
PseudoVertexMap pick_map() {
    PseudoVertexMap m;
    m.weights = Tensor<float>({6, 53});
    m.weights(0, 0) = 1.0f;  // lip vertex axes read dims 0,1,2
    m.weights(1, 1) = 1.0f;
    m.weights(2, 2) = 1.0f;
    m.weights(3, 20) = 1.0f;  // emotion vertex axes read dims 20,21,22
    m.weights(4, 21) = 1.0f;
    m.weights(5, 22) = 1.0f;
    m.lip_vertices = {0};
    m.emotion_vertices = {1};
    return m;
}

}  // namespace

TEST_CASE("pseudo vertex map") {
    auto m = PseudoVertexMap::make();
    SECTION("seed-pinned: two builds are identical") {
        auto m2 = PseudoVertexMap::make();
        REQUIRE(m.weights.data == m2.weights.data);
    }
    SECTION("lip vertices ignore emotion dims and vice versa") {
        for (std::size_t v : m.lip_vertices)
            for (std::size_t axis = 0; axis < 3; ++axis)
                for (std::size_t d = 20; d < 40; ++d)
                    REQUIRE(m.weights(v * 3 + axis, d) == 0.0f);
        for (std::size_t v : m.emotion_vertices)
            for (std::size_t axis = 0; axis < 3; ++axis) {
                for (std::size_t d = 0; d < 12; ++d)
                    REQUIRE(m.weights(v * 3 + axis, d) == 0.0f);
                for (std::size_t d = 50; d < 53; ++d)
                    REQUIRE(m.weights(v * 3 + axis, d) == 0.0f);
            }
    }
}

TEST_CASE("lve") {
    auto map = pick_map();
    Tensor<double> gt({4, 53});
    Rng rng(3);
    for (auto& v : gt.data) v = 0.2 * rng.normal();

    SECTION("pred == gt gives 0") { REQUIRE(lve(gt, gt, map) == 0.0); }
    SECTION("constant vertex-space offset d gives ||d||") {
        Tensor<double> pred = gt;
        // offset (0.3, -0.4, 0) in the lip vertex's pseudo-vertex space
        for (std::size_t t = 0; t < 4; ++t) {
            pred(t, 0) += 0.3;
            pred(t, 1) += -0.4;
        }
        REQUIRE(lve(pred, gt, map) == Approx(0.5).margin(1e-12));
    }
    SECTION("doubling the error doubles LVE") {
        Tensor<double> p1 = gt, p2 = gt;
        for (std::size_t t = 0; t < 4; ++t) {
            p1(t, 2) += 0.1;
            p2(t, 2) += 0.2;
        }
        REQUIRE(lve(p2, gt, map) == Approx(2.0 * lve(p1, gt, map)).margin(1e-12));
    }
    SECTION("max over lip vertices") {
        PseudoVertexMap two = pick_map();
        two.weights = Tensor<float>({6, 53});
        two.weights(0, 0) = 1.0f;  // vertex 0 reads dim 0
        two.weights(3, 1) = 1.0f;  // vertex 1 reads dim 1
        two.lip_vertices = {0, 1};
        two.emotion_vertices = {};
        Tensor<double> a({1, 53}), b({1, 53});
        a(0, 0) = 0.1;  // vertex 0 error 0.1
        a(0, 1) = 0.7;  // vertex 1 error 0.7
        REQUIRE(lve(a, b, two) == Approx(0.7).margin(1e-12));
    }
    SECTION("length mismatch") {
        Tensor<double> other({3, 53});
        REQUIRE_THROWS_AS(lve(other, gt, map), DataError);
    }
}

TEST_CASE("eve") {
    auto map = pick_map();
    Tensor<double> gt({3, 53});

    SECTION("pred == gt gives 0") { REQUIRE(eve(gt, gt, map) == 0.0); }
    SECTION("errors on dims outside the emotion rows are invisible") {
        Tensor<double> pred = gt;
        for (std::size_t t = 0; t < 3; ++t) pred(t, 5) += 10.0;
        REQUIRE(eve(pred, gt, map) == 0.0);
    }
    SECTION("hand mean over two emotion vertices") {
        PseudoVertexMap two = pick_map();
        two.weights = Tensor<float>({6, 53});
        two.weights(0, 20) = 1.0f;  // vertex 0 reads dim 20
        two.weights(3, 21) = 1.0f;  // vertex 1 reads dim 21
        two.lip_vertices = {};
        two.emotion_vertices = {0, 1};
        Tensor<double> a({1, 53}), b({1, 53});
        a(0, 20) = 0.2;
        a(0, 21) = 0.6;
        REQUIRE(eve(a, b, two) == Approx(0.4).margin(1e-12));
    }
}

TEST_CASE("diversity") {
    SECTION("identical sequences give 0") {
        Tensor<double> s({5, 2});
        Rng rng(9);
        for (auto& v : s.data) v = rng.normal();
        REQUIRE(diversity<double>({s, s, s}) == 0.0);
    }
    SECTION("two 1-D constants valued 0 and 3 give 3") {
        Tensor<double> a({4, 1}), b({4, 1});
        for (auto& v : b.data) v = 3.0;
        REQUIRE(diversity<double>({a, b}) == Approx(3.0).margin(1e-12));
    }
    SECTION("shared constant shift leaves diversity unchanged") {
        Rng rng(11);
        std::vector<Tensor<double>> set;
        for (int i = 0; i < 4; ++i) set.push_back(randn<double>(rng, {6, 3}));
        double base = diversity(set);
        for (auto& s : set)
            for (auto& v : s.data) v += 2.5;
        REQUIRE(diversity(set) == Approx(base).margin(1e-9));
    }
    SECTION("fewer than 2 sequences") {
        Tensor<double> s({4, 1});
        REQUIRE_THROWS_AS(diversity<double>({s}), DataError);
    }
}

TEST_CASE("lsd") {
    SECTION("constant pose gives 0") {
        Tensor<double> pose({10, 3});
        for (std::size_t t = 0; t < 10; ++t) {
            pose(t, 0) = 0.3;
            pose(t, 1) = -0.2;
            pose(t, 2) = 0.1;
        }
        REQUIRE(lsd<double>({pose}) == Approx(0.0).margin(1e-12));
    }
    SECTION("pure yaw on an x-axis landmark matches the cos projection oracle") {
        // with only yaw active, every canonical landmark (x,y,z) projects to
        // (x cos b + z sin b, y); verify against a direct recomputation
        std::size_t T = 50;
        Tensor<double> pose({T, 3});
        for (std::size_t t = 0; t < T; ++t)
            pose(t, 1) = 0.6 * std::sin(0.4 * double(t));
        auto landmarks = detail::canonical_landmarks();
        double expect = 0;
        for (const auto& lm : landmarks) {
            double sx = 0, sxx = 0;
            for (std::size_t t = 0; t < T; ++t) {
                double b = pose(t, 1);
                double x = lm[0] * std::cos(b) + lm[2] * std::sin(b);
                sx += x;
                sxx += x * x;
            }
            double vx = sxx / double(T) - (sx / double(T)) * (sx / double(T));
            expect += std::sqrt(std::max(0.0, vx));  // y is constant under yaw
        }
        expect /= double(landmarks.size());
        REQUIRE(lsd<double>({pose}) == Approx(expect).margin(1e-9));
    }
    SECTION("doubling the oscillation amplitude increases LSD") {
        auto make = [](double amp) {
            Tensor<double> pose({40, 3});
            for (std::size_t t = 0; t < 40; ++t) pose(t, 1) = amp * std::sin(0.5 * double(t));
            return pose;
        };
        REQUIRE(lsd<double>({make(0.4)}) > lsd<double>({make(0.2)}));
    }
}

TEST_CASE("fid") {
    SECTION("identical stats give 0 within 1e-6") {
        Rng rng(13);
        auto frames = randn<double>(rng, {40, 3});
        auto g = gaussian_stats(frames);
        REQUIRE(fid(g, g) == Approx(0.0).margin(1e-6));
    }
    SECTION("1-D closed form: mu (0,1), sigma (1,1) -> 1") {
        REQUIRE(fid(stats_1d(0, 1), stats_1d(1, 1)) == Approx(1.0).margin(1e-9));
    }
    SECTION("1-D closed form: mu (0,0), sigma (1,2) -> 1") {
        REQUIRE(fid(stats_1d(0, 1), stats_1d(0, 2)) == Approx(1.0).margin(1e-9));
    }
    SECTION("matches the 1-D closed form on random instances") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            double m1 = rng.normal(), m2 = rng.normal();
            double s1 = 0.2 + rng.uniform(), s2 = 0.2 + rng.uniform();
            double expect = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
            REQUIRE(fid(stats_1d(m1, s1), stats_1d(m2, s2)) == Approx(expect).margin(1e-9));
        }
    }
    SECTION("symmetry within 1e-9") {
        Rng rng(19);
        auto a = gaussian_stats(randn<double>(rng, {30, 4}));
        auto b = gaussian_stats(randn<double>(rng, {25, 4}, 1.7));
        REQUIRE(fid(a, b) == Approx(fid(b, a)).margin(1e-9));
    }
    SECTION("non-negative on random stats") {
        Rng rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            auto a = gaussian_stats(randn<double>(rng, {10, 3}));
            auto b = gaussian_stats(randn<double>(rng, {10, 3}));
            REQUIRE(fid(a, b) >= 0.0);
        }
    }
    SECTION("dimension mismatch") {
        GaussianStats a = stats_1d(0, 1);
        GaussianStats b;
        b.mu = {0, 0};
        b.sigma = Tensor<double>({2, 2});
        REQUIRE_THROWS_AS(fid(a, b), DataError);
    }
}

TEST_CASE("fsd") {
    Rng rng(29);

    SECTION("single shared cluster equals plain FID of those frames") {
        auto gen = randn<double>(rng, {20, 2});
        auto ref = randn<double>(rng, {22, 2}, 1.3);
        std::vector<std::size_t> gl(20, 7), rl(22, 7);
        auto ga = gaussian_stats(gen, 1e-6);
        auto gb = gaussian_stats(ref, 1e-6);
        REQUIRE(fsd(gen, gl, ref, rl) == fid(ga, gb));
    }
    SECTION("generated == reference per cluster gives ~0") {
        auto frames = randn<double>(rng, {30, 2});
        std::vector<std::size_t> labels(30);
        for (std::size_t t = 0; t < 30; ++t) labels[t] = t % 3;
        REQUIRE(fsd(frames, labels, frames, labels) == Approx(0.0).margin(1e-6));
    }
    SECTION("two clusters: mean of the per-cluster closed forms") {
        // cluster 0: gen values {0,2} (mu 1, sigma 1), ref {4,6} (mu 5, sigma 1)
        // cluster 1: gen {0,0} (mu 0, sigma 0), ref {1,1} (mu 1, sigma 0)
        Tensor<double> gen({4, 1}), ref({4, 1});
        gen.data = {0, 2, 0, 0};
        ref.data = {4, 6, 1, 1};
        std::vector<std::size_t> labels = {0, 0, 1, 1};
        // population sigma of {0,2} is 1; diag load cancels between the sides
        double expect = (16.0 + 0.0 + 1.0) / 2.0;
        REQUIRE(fsd(gen, labels, ref, labels) == Approx(expect).margin(1e-6));
    }
    SECTION("clusters with fewer than 2 frames are skipped") {
        Tensor<double> gen({3, 1}), ref({3, 1});
        gen.data = {0, 2, 9};
        ref.data = {4, 6, 9};
        std::vector<std::size_t> labels = {0, 0, 1};
        REQUIRE(fsd(gen, labels, ref, labels) == Approx(16.0).margin(1e-6));
    }
    SECTION("no shared cluster is a metric error") {
        Tensor<double> gen({2, 1}), ref({2, 1});
        std::vector<std::size_t> gl = {0, 0}, rl = {1, 1};
        REQUIRE_THROWS_AS(fsd(gen, gl, ref, rl), DataError);
    }
}
