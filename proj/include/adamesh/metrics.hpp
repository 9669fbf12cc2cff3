#pragma once

#include <array>
#include <map>

#include "adamesh/tensor.hpp"

namespace adamesh {

// ---------------------------------------------------------------------------
// Pseudo-vertex map: a fixed seeded linear map from the 53 expression dims to
// L x 3 points. Lip-tagged vertices read only the lip dims (0..11 plus the 3
// jaw dims), emotion-tagged vertices only dims 20..39, so errors confined to
// unrelated dims cannot leak into the scores.
// ---------------------------------------------------------------------------

struct PseudoVertexMap {
    Tensor<float> weights;  // [L*3 x 53]
    std::vector<std::size_t> lip_vertices, emotion_vertices;

    std::size_t vertex_count() const { return weights.shape[0] / 3; }

    static PseudoVertexMap make() {
        constexpr std::size_t L = 12;
        PseudoVertexMap m;
        m.weights = Tensor<float>({L * 3, 53});
        Rng rng(0xfaceUL);
        auto fill = [&](std::size_t v, const std::vector<std::size_t>& dims) {
            for (std::size_t axis = 0; axis < 3; ++axis)
                for (std::size_t d : dims)
                    m.weights(v * 3 + axis, d) = float(0.4 * rng.normal());
        };
        std::vector<std::size_t> lip_dims, emotion_dims;
        for (std::size_t d = 0; d < 12; ++d) lip_dims.push_back(d);
        for (std::size_t d = 50; d < 53; ++d) lip_dims.push_back(d);
        for (std::size_t d = 20; d < 40; ++d) emotion_dims.push_back(d);
        for (std::size_t v = 0; v < 6; ++v) {
            fill(v, lip_dims);
            m.lip_vertices.push_back(v);
        }
        for (std::size_t v = 6; v < L; ++v) {
            fill(v, emotion_dims);
            m.emotion_vertices.push_back(v);
        }
        return m;
    }

    /// Vertices of one expression frame: [L x 3].
    template <class S>
    Tensor<double> apply(const Tensor<S>& expr, std::size_t frame) const {
        std::size_t L = vertex_count();
        Tensor<double> out({L, 3});
        for (std::size_t v = 0; v < L; ++v)
            for (std::size_t axis = 0; axis < 3; ++axis) {
                double sum = 0;
                for (std::size_t d = 0; d < 53; ++d)
                    sum += double(weights(v * 3 + axis, d)) * double(expr(frame, d));
                out(v, axis) = sum;
            }
        return out;
    }
};

namespace detail {
template <class S>
void check_same_length(const Tensor<S>& pred, const Tensor<S>& gt) {
    if (!(pred.shape == gt.shape)) throw DataError("metric: sequence shape mismatch");
    if (pred.shape.at(1) != 53) throw DataError("metric: expression width must be 53");
}

template <class S>
double vertex_error(const PseudoVertexMap& map, const Tensor<S>& pred, const Tensor<S>& gt,
                    std::size_t frame, std::size_t vertex) {
    double e = 0;
    for (std::size_t axis = 0; axis < 3; ++axis) {
        double sum = 0;
        for (std::size_t d = 0; d < 53; ++d)
            sum += double(map.weights(vertex * 3 + axis, d)) *
                   (double(pred(frame, d)) - double(gt(frame, d)));
        e += sum * sum;
    }
    return std::sqrt(e);
}
}  // namespace detail

/// Per frame the max L2 error over lip vertices, averaged over frames.
template <class S>
double lve(const Tensor<S>& pred, const Tensor<S>& gt, const PseudoVertexMap& map) {
    detail::check_same_length(pred, gt);
    std::size_t T = pred.shape[0];
    if (T == 0) return 0.0;
    double total = 0;
    for (std::size_t t = 0; t < T; ++t) {
        double worst = 0;
        for (std::size_t v : map.lip_vertices)
            worst = std::max(worst, detail::vertex_error(map, pred, gt, t, v));
        total += worst;
    }
    return total / double(T);
}

/// Mean L2 error over emotion vertices, averaged over frames.
template <class S>
double eve(const Tensor<S>& pred, const Tensor<S>& gt, const PseudoVertexMap& map) {
    detail::check_same_length(pred, gt);
    std::size_t T = pred.shape[0];
    if (T == 0) return 0.0;
    double total = 0;
    for (std::size_t t = 0; t < T; ++t) {
        double mean = 0;
        for (std::size_t v : map.emotion_vertices)
            mean += detail::vertex_error(map, pred, gt, t, v);
        total += mean / double(map.emotion_vertices.size());
    }
    return total / double(T);
}

/// Mean pairwise L2 distance between per-sequence temporal means.
template <class S>
double diversity(const std::vector<Tensor<S>>& sequences) {
    if (sequences.size() < 2) throw DataError("diversity: need at least 2 sequences");
    std::size_t d = sequences[0].shape.at(1);
    std::vector<std::vector<double>> means;
    for (const auto& seq : sequences) {
        if (seq.shape.at(1) != d) throw DataError("diversity: feature width mismatch");
        std::size_t T = seq.shape.at(0);
        if (T == 0) throw DataError("diversity: empty sequence");
        std::vector<double> m(d, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < d; ++c) m[c] += double(seq(t, c)) / double(T);
        means.push_back(std::move(m));
    }
    double total = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < means.size(); ++i)
        for (std::size_t j = i + 1; j < means.size(); ++j) {
            double dist = 0;
            for (std::size_t c = 0; c < d; ++c)
                dist += (means[i][c] - means[j][c]) * (means[i][c] - means[j][c]);
            total += std::sqrt(dist);
            ++pairs;
        }
    return total / double(pairs);
}

namespace detail {
/// Canonical head landmarks, seed-pinned.
inline std::vector<std::array<double, 3>> canonical_landmarks() {
    Rng rng(0xbeefUL);
    std::vector<std::array<double, 3>> pts(8);
    for (auto& p : pts)
        for (auto& c : p) c = rng.normal();
    return pts;
}

/// Intrinsic XYZ Euler rotation of a point by (pitch, yaw, roll).
inline std::array<double, 3> rotate_xyz(const std::array<double, 3>& p, double a, double b,
                                        double c) {
    double ca = std::cos(a), sa = std::sin(a);
    double cb = std::cos(b), sb = std::sin(b);
    double cc = std::cos(c), sc = std::sin(c);
    // Rz applied first, then Ry, then Rx (R = Rx * Ry * Rz)
    std::array<double, 3> q{cc * p[0] - sc * p[1], sc * p[0] + cc * p[1], p[2]};
    std::array<double, 3> r{cb * q[0] + sb * q[2], q[1], -sb * q[0] + cb * q[2]};
    return {r[0], ca * r[1] - sa * r[2], sa * r[1] + ca * r[2]};
}
}  // namespace detail

/// Landmark standard deviation: rotate the canonical points by every frame's
/// Euler angles, orthographic-project to (x, y), take the per-landmark
/// temporal spread sqrt(var_x + var_y), and average over landmarks and
/// sequences.
template <class S>
double lsd(const std::vector<Tensor<S>>& poses) {
    if (poses.empty()) throw DataError("lsd: empty pose set");
    auto landmarks = detail::canonical_landmarks();
    double total = 0;
    for (const auto& pose : poses) {
        if (pose.shape.at(1) != 3) throw DataError("lsd: poses must be T x 3");
        std::size_t T = pose.shape.at(0);
        if (T == 0) throw DataError("lsd: empty pose sequence");
        double seq_total = 0;
        for (const auto& lm : landmarks) {
            std::vector<double> xs(T), ys(T);
            double mx = 0, my = 0;
            for (std::size_t t = 0; t < T; ++t) {
                auto r = detail::rotate_xyz(lm, double(pose(t, 0)), double(pose(t, 1)),
                                            double(pose(t, 2)));
                xs[t] = r[0];
                ys[t] = r[1];
                mx += r[0] / double(T);
                my += r[1] / double(T);
            }
            // two-pass variance so constant sequences come out exactly zero
            double vx = 0, vy = 0;
            for (std::size_t t = 0; t < T; ++t) {
                vx += (xs[t] - mx) * (xs[t] - mx) / double(T);
                vy += (ys[t] - my) * (ys[t] - my) / double(T);
            }
            seq_total += std::sqrt(vx + vy);
        }
        total += seq_total / double(landmarks.size());
    }
    return total / double(poses.size());
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian statistics. The matrix square root uses a
// cyclic Jacobi symmetric eigensolver with eigenvalues clamped at 0.
// ---------------------------------------------------------------------------

struct GaussianStats {
    std::vector<double> mu;
    Tensor<double> sigma;  // [d x d], symmetric

    std::size_t dim() const { return mu.size(); }
};

/// Population statistics of frames [N x d], with optional diagonal loading.
template <class S>
GaussianStats gaussian_stats(const Tensor<S>& frames, double diag_load = 0.0) {
    std::size_t N = frames.shape.at(0), d = frames.shape.at(1);
    if (N == 0) throw DataError("gaussian_stats: no frames");
    GaussianStats g;
    g.mu.assign(d, 0.0);
    g.sigma = Tensor<double>({d, d});
    for (std::size_t t = 0; t < N; ++t)
        for (std::size_t c = 0; c < d; ++c) g.mu[c] += double(frames(t, c)) / double(N);
    for (std::size_t t = 0; t < N; ++t)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                g.sigma(i, j) += (double(frames(t, i)) - g.mu[i]) *
                                 (double(frames(t, j)) - g.mu[j]) / double(N);
    for (std::size_t i = 0; i < d; ++i) g.sigma(i, i) += diag_load;
    return g;
}

namespace detail {
/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues; V holds eigenvectors in columns.
inline std::vector<double> jacobi_eig(Tensor<double> a, Tensor<double>& V) {
    std::size_t d = a.shape.at(0);
    V = Tensor<double>({d, d});
    for (std::size_t i = 0; i < d; ++i) V(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    double vkp = V(k, p), vkq = V(k, q);
                    V(k, p) = c * vkp - s * vkq;
                    V(k, q) = s * vkp + c * vkq;
                }
            }
    }
    std::vector<double> eig(d);
    for (std::size_t i = 0; i < d; ++i) eig[i] = a(i, i);
    return eig;
}

/// Symmetric PSD square root with eigenvalue clamping at 0.
inline Tensor<double> symsqrt(const Tensor<double>& a) {
    std::size_t d = a.shape.at(0);
    Tensor<double> V;
    auto eig = jacobi_eig(a, V);
    Tensor<double> out({d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double sum = 0;
            for (std::size_t k = 0; k < d; ++k)
                sum += V(i, k) * std::sqrt(std::max(0.0, eig[k])) * V(j, k);
            out(i, j) = sum;
        }
    return out;
}

inline Tensor<double> matmul_sq(const Tensor<double>& a, const Tensor<double>& b) {
    std::size_t d = a.shape.at(0);
    Tensor<double> out({d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            double aik = a(i, k);
            for (std::size_t j = 0; j < d; ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}
}  // namespace detail

inline double fid(const GaussianStats& a, const GaussianStats& b) {
    if (a.dim() != b.dim()) throw DataError("fid: dimension mismatch");
    std::size_t d = a.dim();
    double mean_term = 0;
    for (std::size_t i = 0; i < d; ++i)
        mean_term += (a.mu[i] - b.mu[i]) * (a.mu[i] - b.mu[i]);

    auto sa = detail::symsqrt(a.sigma);
    auto inner = detail::matmul_sq(detail::matmul_sq(sa, b.sigma), sa);
    // symmetrize against accumulated round-off before the second sqrt
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            double m = 0.5 * (inner(i, j) + inner(j, i));
            inner(i, j) = inner(j, i) = m;
        }
    auto cross = detail::symsqrt(inner);
    double trace_term = 0;
    for (std::size_t i = 0; i < d; ++i)
        trace_term += a.sigma(i, i) + b.sigma(i, i) - 2.0 * cross(i, i);
    return std::max(0.0, mean_term + trace_term);
}

/// Per-frame feature FID between two labeled sets: unweighted mean of the
/// per-cluster FIDs over clusters with >= 2 frames on both sides.
template <class S>
double fsd(const Tensor<S>& generated, const std::vector<std::size_t>& gen_labels,
           const Tensor<S>& reference, const std::vector<std::size_t>& ref_labels,
           double diag_load = 1e-6) {
    if (generated.shape.at(0) != gen_labels.size() ||
        reference.shape.at(0) != ref_labels.size())
        throw DataError("fsd: label count does not match frames");
    std::size_t d = generated.shape.at(1);
    if (reference.shape.at(1) != d) throw DataError("fsd: feature width mismatch");

    auto group = [&](const Tensor<S>& frames, const std::vector<std::size_t>& labels) {
        std::map<std::size_t, std::vector<std::size_t>> rows;
        for (std::size_t t = 0; t < labels.size(); ++t) rows[labels[t]].push_back(t);
        return rows;
    };
    auto take = [&](const Tensor<S>& frames, const std::vector<std::size_t>& rows) {
        Tensor<S> out({rows.size(), d});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) out(i, c) = frames(rows[i], c);
        return out;
    };

    auto gen_rows = group(generated, gen_labels);
    auto ref_rows = group(reference, ref_labels);
    double total = 0;
    std::size_t clusters = 0;
    for (const auto& [label, rows] : gen_rows) {
        auto it = ref_rows.find(label);
        if (rows.size() < 2 || it == ref_rows.end() || it->second.size() < 2) continue;
        auto ga = gaussian_stats(take(generated, rows), diag_load);
        auto gb = gaussian_stats(take(reference, it->second), diag_load);
        total += fid(ga, gb);
        ++clusters;
    }
    if (clusters == 0) throw DataError("fsd: no shared cluster with at least 2 frames");
    return total / double(clusters);
}

}  // namespace adamesh
