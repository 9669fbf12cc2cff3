#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "adamesh/styleretrieval.hpp"

namespace adamesh {

inline constexpr std::size_t kSemDim = 12;
inline constexpr std::size_t kProsDim = 4;
inline constexpr std::size_t kSpeechDim = kSemDim + kProsDim;
inline constexpr std::size_t kExprDim = 53;   // 50 expression coefficients + 3 jaw dims
inline constexpr std::size_t kIdentityDim = 100;
inline constexpr std::size_t kEmotionLo = 20; // emotion-tagged expression dims [20, 40)
inline constexpr std::size_t kEmotionHi = 40;

struct SpeechFrames {
    Tensor<float> features;           // [T x kSpeechDim], semantic then prosody
    std::vector<std::size_t> labels;  // per frame, in [0, 512)
};

struct StyleSpec {
    std::size_t style_id = 0;
    std::array<double, 3> pose_amp{};   // radians per axis
    std::array<double, 3> pose_freq{};  // Hz per axis
    double pulse_gain = 0.0;            // yaw excursion on trigger labels
    std::set<std::size_t> trigger_labels;
    double pose_noise = 0.01;           // rad
    double viseme_gain = 0.0;
    std::array<double, kEmotionHi - kEmotionLo> emotion_offset{};
    double emotion_gain = 0.0;
    double expr_noise = 0.01;

    void validate() const {
        constexpr double half_pi = 1.5707963267948966;
        for (std::size_t a = 0; a < 3; ++a) {
            double reach = std::abs(pose_amp[a]) + (a == 1 ? std::abs(pulse_gain) : 0.0);
            if (reach > half_pi)
                throw ConfigError("style spec: pose amplitude exceeds pi/2 on axis " +
                                  std::to_string(a));
            if (std::abs(pose_freq[a]) >= 12.5)
                throw ConfigError("style spec: pose frequency at or above Nyquist (12.5 Hz)");
        }
    }
};

template <class S>
struct Sample {
    SpeechFrames speech;
    Tensor<S> pose;      // [T x 3]
    Tensor<S> expr;      // [T x 53]
    Tensor<S> identity;  // [100]
    std::size_t style_id = 0;
};

template <class S>
struct Corpus {
    std::vector<Sample<S>> train, holdout;
};

namespace detail {
/// Fixed per-cluster semantic embedding, independent of the corpus seed so
/// features stay comparable across corpora.
inline std::array<float, kSemDim> cluster_embedding(std::size_t label) {
    Rng rng(0x5eedUL * 1315423911UL + label);
    std::array<float, kSemDim> e;
    for (auto& v : e) v = float(0.5 * rng.normal());
    return e;
}

/// Fixed per-cluster viseme vector over the lip-tagged expression dims.
inline std::array<float, kExprDim> viseme_row(std::size_t label) {
    Rng rng(0x715eedUL * 2654435761UL + label);
    std::array<float, kExprDim> e{};
    for (std::size_t d = 0; d < 12; ++d) e[d] = float(0.3 * rng.normal());
    for (std::size_t d = 50; d < 53; ++d) e[d] = float(0.3 * rng.normal());
    return e;
}

inline bool prosody_pulse_label(std::size_t label) { return label % 8 == 0; }
}  // namespace detail

/// Labels recur from a fixed subset of the 512-cluster inventory so distinct
/// samples share clusters; style matrices of disjoint label sets would be
/// incomparable under the full-matrix L1 distance.
inline constexpr std::size_t kActiveClusters = 16;

/// Piecewise-constant cluster labels with dwell 4..12 frames; semantic
/// features are a fixed per-cluster embedding plus noise, the prosody channel
/// pulses on designated labels.
inline SpeechFrames gen_speech(std::size_t T, std::uint64_t seed, double noise = 0.05) {
    if (T < 1) throw DataError("gen_speech: T must be >= 1");
    Rng rng(seed);
    SpeechFrames out;
    out.labels.resize(T);
    out.features = Tensor<float>({T, kSpeechDim});
    std::size_t t = 0;
    std::size_t prev = kStyleClusters;  // sentinel: first segment unconstrained
    while (t < T) {
        std::size_t dwell = 4 + rng.uniform_int(9);  // [4, 12]
        // Adjacent segments get distinct labels so dwell runs stay observable.
        std::size_t label = rng.uniform_int(kActiveClusters);
        while (label == prev) label = rng.uniform_int(kActiveClusters);
        prev = label;
        auto embed = detail::cluster_embedding(label);
        for (std::size_t j = 0; j < dwell && t < T; ++j, ++t) {
            out.labels[t] = label;
            for (std::size_t c = 0; c < kSemDim; ++c)
                out.features(t, c) = embed[c] + float(noise * rng.normal());
            double pulse = detail::prosody_pulse_label(label) ? 1.0 : 0.0;
            for (std::size_t c = 0; c < kProsDim; ++c)
                out.features(t, kSemDim + c) =
                    float(pulse * (c + 1) * 0.25 + noise * rng.normal());
        }
    }
    return out;
}

/// Per-axis sinusoid plus yaw excursions when the frame label is in the
/// trigger set; 25 fps time base.
template <class S = float>
Tensor<S> gen_pose(const SpeechFrames& speech, const StyleSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::size_t T = speech.labels.size();
    Tensor<S> pose({T, 3});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t a = 0; a < 3; ++a) {
            double v = spec.pose_amp[a] *
                       std::sin(2.0 * 3.141592653589793 * spec.pose_freq[a] * double(t) / 25.0 +
                                double(a) * 0.7);
            if (a == 1 && spec.trigger_labels.count(speech.labels[t]))
                v += spec.pulse_gain;
            pose(t, a) = S(v + spec.pose_noise * rng.normal());
        }
    }
    return pose;
}

/// Lip dims replay the per-cluster viseme table scaled by the viseme gain;
/// emotion offsets land on dims [20, 40); identity is a fixed per-style
/// vector plus noise.
template <class S = float>
std::pair<Tensor<S>, Tensor<S>> gen_expr(const SpeechFrames& speech, const StyleSpec& spec,
                                         std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::size_t T = speech.labels.size();
    Tensor<S> expr({T, kExprDim});
    for (std::size_t t = 0; t < T; ++t) {
        auto viseme = detail::viseme_row(speech.labels[t]);
        for (std::size_t d = 0; d < kExprDim; ++d) {
            double v = spec.viseme_gain * double(viseme[d]);
            if (d >= kEmotionLo && d < kEmotionHi)
                v += spec.emotion_gain * spec.emotion_offset[d - kEmotionLo];
            expr(t, d) = S(v + spec.expr_noise * rng.normal());
        }
    }
    Tensor<S> identity({kIdentityDim});
    Rng id_rng(0x1dUL * 40503UL + spec.style_id);
    for (std::size_t d = 0; d < kIdentityDim; ++d)
        identity.data[d] = S(id_rng.normal() + spec.expr_noise * rng.normal());
    return {std::move(expr), std::move(identity)};
}

template <class S = float>
Sample<S> gen_sample(const StyleSpec& spec, std::size_t T, std::uint64_t seed) {
    Sample<S> sample;
    Rng rng(seed);
    sample.speech = gen_speech(T, rng.fork(1).state());
    sample.pose = gen_pose<S>(sample.speech, spec, rng.fork(2).state());
    auto [expr, identity] = gen_expr<S>(sample.speech, spec, rng.fork(3).state());
    sample.expr = std::move(expr);
    sample.identity = std::move(identity);
    sample.style_id = spec.style_id;
    return sample;
}

inline std::size_t worker_threads() {
    const char* env = std::getenv("ADAMESH_THREADS");
    if (!env) return 1;
    long n = std::strtol(env, nullptr, 10);
    if (n < 1) throw ConfigError("ADAMESH_THREADS must be a positive integer");
    return std::size_t(n);
}

/// Deterministic corpus: per-sample seeds derive from (seed, style, index),
/// so the thread count never changes the output. Last n/5 samples of each
/// style form the holdout split.
template <class S = float>
Corpus<S> make_corpus(const std::vector<StyleSpec>& specs, std::size_t n_per_style,
                      std::size_t T, std::uint64_t seed) {
    if (specs.empty()) throw ConfigError("make_corpus: need at least one style spec");
    for (const auto& spec : specs) spec.validate();
    std::size_t total = specs.size() * n_per_style;
    std::vector<Sample<S>> all(total);

    std::size_t threads = std::min(worker_threads(), std::max<std::size_t>(total, 1));
    auto work = [&](std::size_t tid) {
        for (std::size_t i = tid; i < total; i += threads) {
            std::size_t style = i / n_per_style, idx = i % n_per_style;
            Rng base(seed);
            std::uint64_t sample_seed = base.fork(style * 1000003 + idx).state();
            all[i] = gen_sample<S>(specs[style], T, sample_seed);
        }
    };
    if (threads <= 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t tid = 0; tid < threads; ++tid) pool.emplace_back(work, tid);
        for (auto& th : pool) th.join();
    }

    Corpus<S> corpus;
    std::size_t n_holdout = n_per_style / 5;
    for (std::size_t style = 0; style < specs.size(); ++style)
        for (std::size_t idx = 0; idx < n_per_style; ++idx) {
            auto& sample = all[style * n_per_style + idx];
            (idx + n_holdout >= n_per_style ? corpus.holdout : corpus.train)
                .push_back(std::move(sample));
        }
    return corpus;
}

// Canonical fixtures: a low-energy and a high-energy style.
inline StyleSpec calm_spec() {
    StyleSpec s;
    s.style_id = 0;
    s.pose_amp = {0.04, 0.05, 0.03};
    s.pose_freq = {0.4, 0.3, 0.5};
    s.pulse_gain = 0.0;
    s.viseme_gain = 1.0;
    for (std::size_t d = 0; d < s.emotion_offset.size(); ++d)
        s.emotion_offset[d] = -0.2 + 0.01 * double(d);
    s.emotion_gain = 1.0;
    return s;
}

inline StyleSpec excited_spec() {
    StyleSpec s;
    s.style_id = 1;
    s.pose_amp = {0.20, 0.25, 0.15};
    s.pose_freq = {1.5, 2.0, 1.2};
    s.pulse_gain = 0.4;
    // Every other cluster triggers an excursion: the style signature has to
    // be label-conditioned for per-cluster mean latents to carry it.
    for (std::size_t l = 0; l < kStyleClusters; l += 2) s.trigger_labels.insert(l);
    s.viseme_gain = 1.0;
    for (std::size_t d = 0; d < s.emotion_offset.size(); ++d)
        s.emotion_offset[d] = 0.5 - 0.02 * double(d);
    s.emotion_gain = 1.0;
    return s;
}

// ---------------------------------------------------------------------------
// Corpus directory layout:
//   <root>/<split>/<sample-id>/{speech,labels,pose,expr,identity}.mtns + meta.json
// Labels travel as f64 tensors; MTNS is the exchange format so externally
// produced features drop in unchanged.
// ---------------------------------------------------------------------------

template <class S>
void save_sample(const std::filesystem::path& dir, const Sample<S>& sample) {
    std::filesystem::create_directories(dir);
    save_mtns((dir / "speech.mtns").string(), sample.speech.features);
    Tensor<double> labels({sample.speech.labels.size()});
    for (std::size_t i = 0; i < labels.numel(); ++i)
        labels.data[i] = double(sample.speech.labels[i]);
    save_mtns((dir / "labels.mtns").string(), labels);
    save_mtns((dir / "pose.mtns").string(), sample.pose);
    save_mtns((dir / "expr.mtns").string(), sample.expr);
    save_mtns((dir / "identity.mtns").string(), sample.identity);
    std::ofstream meta(dir / "meta.json");
    meta << "{\"style_id\": " << sample.style_id << "}\n";
}

template <class S>
Sample<S> load_sample(const std::filesystem::path& dir) {
    Sample<S> sample;
    sample.speech.features = load_mtns<float>((dir / "speech.mtns").string());
    auto labels = load_mtns<double>((dir / "labels.mtns").string());
    sample.speech.labels.resize(labels.numel());
    for (std::size_t i = 0; i < labels.numel(); ++i) {
        if (labels.data[i] < 0 || labels.data[i] >= double(kStyleClusters))
            throw DataError("corpus: label out of range in " + dir.string());
        sample.speech.labels[i] = std::size_t(labels.data[i]);
    }
    sample.pose = load_mtns<S>((dir / "pose.mtns").string());
    sample.expr = load_mtns<S>((dir / "expr.mtns").string());
    sample.identity = load_mtns<S>((dir / "identity.mtns").string());
    std::ifstream meta(dir / "meta.json");
    if (!meta) throw DataError("corpus: missing meta.json in " + dir.string());
    std::string text((std::istreambuf_iterator<char>(meta)), {});
    auto pos = text.find("\"style_id\"");
    if (pos == std::string::npos) throw DataError("corpus: meta.json lacks style_id");
    sample.style_id = std::size_t(std::strtoul(text.c_str() + text.find(':', pos) + 1,
                                               nullptr, 10));
    return sample;
}

template <class S>
void save_corpus(const std::filesystem::path& root, const Corpus<S>& corpus) {
    auto save_split = [&](const char* split, const std::vector<Sample<S>>& samples) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "%04zu", i);
            save_sample(root / split / name, samples[i]);
        }
    };
    save_split("train", corpus.train);
    save_split("holdout", corpus.holdout);
}

template <class S>
Corpus<S> load_corpus(const std::filesystem::path& root) {
    Corpus<S> corpus;
    auto load_split = [&](const char* split, std::vector<Sample<S>>& out) {
        auto dir = root / split;
        if (!std::filesystem::exists(dir)) return;
        std::vector<std::filesystem::path> dirs;
        for (const auto& entry : std::filesystem::directory_iterator(dir))
            if (entry.is_directory()) dirs.push_back(entry.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) out.push_back(load_sample<S>(d));
    };
    load_split("train", corpus.train);
    load_split("holdout", corpus.holdout);
    if (corpus.train.empty() && corpus.holdout.empty())
        throw DataError("corpus: no samples under " + root.string());
    return corpus;
}

}  // namespace adamesh
