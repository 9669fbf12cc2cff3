#pragma once

#include <array>
#include <fstream>
#include <map>

#include "adamesh/vqpose.hpp"

namespace adamesh {

inline constexpr std::size_t kStyleClusters = 512;

/// Per-cluster mean of latent frames: row j is the mean of the frames whose
/// speech cluster label is j, zero if the cluster never occurs.
struct StyleMatrix {
    Tensor<float> S;  // [512 x d_z]
    std::array<bool, kStyleClusters> occupancy{};

    explicit StyleMatrix(std::size_t d_z = 0) : S({kStyleClusters, d_z}) {}
    std::size_t d_z() const { return S.shape[1]; }
};

struct StyleDbEntry {
    StyleMatrix matrix;
    std::size_t style_id = 0;
};

struct StyleDB {
    std::vector<StyleDbEntry> entries;
    std::size_t d_z = 0;
};

/// Majority vote within each window of w labels, ties to the smallest label.
inline std::vector<std::size_t> downsample_labels(const std::vector<std::size_t>& labels,
                                                  std::size_t w) {
    if (w == 0 || labels.size() % w != 0)
        throw DataError("downsample_labels: length not a multiple of the window");
    std::vector<std::size_t> out(labels.size() / w);
    for (std::size_t t = 0; t < out.size(); ++t) {
        std::map<std::size_t, std::size_t> counts;
        for (std::size_t j = 0; j < w; ++j) counts[labels[t * w + j]]++;
        std::size_t best = labels[t * w], best_count = 0;
        for (const auto& [label, count] : counts)
            if (count > best_count) {  // map order makes ties pick the smallest
                best = label;
                best_count = count;
            }
        out[t] = best;
    }
    return out;
}

template <class S>
StyleMatrix compute_style_matrix(const Tensor<S>& z, const std::vector<std::size_t>& labels) {
    if (z.shape.at(0) != labels.size())
        throw DataError("style matrix: label count does not match latent frames");
    std::size_t d = z.shape.at(1);
    StyleMatrix m(d);
    std::array<std::size_t, kStyleClusters> counts{};
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (labels[t] >= kStyleClusters) throw DataError("style matrix: label out of range");
        counts[labels[t]]++;
        for (std::size_t c = 0; c < d; ++c) m.S(labels[t], c) += float(z(t, c));
    }
    for (std::size_t j = 0; j < kStyleClusters; ++j) {
        if (counts[j] == 0) continue;
        m.occupancy[j] = true;
        for (std::size_t c = 0; c < d; ++c) m.S(j, c) /= float(counts[j]);
    }
    return m;
}

/// Elementwise L1 over the full zero-filled matrix; occupancy is stored but
/// deliberately not used in the distance.
inline double style_distance(const StyleMatrix& a, const StyleMatrix& b) {
    if (a.d_z() != b.d_z()) throw DataError("style distance: latent width mismatch");
    double d = 0;
    for (std::size_t i = 0; i < a.S.data.size(); ++i)
        d += std::abs(double(a.S.data[i]) - double(b.S.data[i]));
    return d;
}

/// Exhaustive L1 scan; ties go to the lowest entry index.
inline std::size_t retrieve(const StyleMatrix& query, const StyleDB& db,
                            double* distance_out = nullptr) {
    if (db.entries.empty()) throw DataError("retrieve: empty style database");
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < db.entries.size(); ++i) {
        double d = style_distance(query, db.entries[i].matrix);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    if (distance_out) *distance_out = best_d;
    return db.entries[best].style_id;
}

/// Style matrix of one (pose, labels) pair through a trained VQ encoder.
/// Labels are per pose frame and downsampled alongside the encoder.
template <class S>
StyleMatrix sample_style_matrix(const VqVae<S>& vq, const Tensor<S>& pose,
                                const std::vector<std::size_t>& labels) {
    auto padded_labels = labels;
    std::size_t T = pose.shape.at(0);
    if (labels.size() != T) throw DataError("style matrix: label count does not match pose");
    std::size_t rem = T % vq.cfg.w;
    if (rem != 0)
        padded_labels.insert(padded_labels.end(), vq.cfg.w - rem, labels.back());
    auto z = vq.encode_values(pose);
    return compute_style_matrix(z, downsample_labels(padded_labels, vq.cfg.w));
}

template <class S>
struct StyleCorpusItem {
    Tensor<S> pose;
    std::vector<std::size_t> labels;  // per pose frame, in [0, 512)
    std::size_t style_id = 0;
};

template <class S>
StyleDB build_db(const VqVae<S>& vq, const std::vector<StyleCorpusItem<S>>& corpus) {
    StyleDB db;
    db.d_z = vq.cfg.d_z;
    for (const auto& item : corpus)
        db.entries.push_back({sample_style_matrix(vq, item.pose, item.labels), item.style_id});
    return db;
}

/// Retrieval-based adaptation: encode the reference, retrieve the nearest
/// training style, return its id. No parameters are updated. References
/// shorter than min_frames succeed with a warning flag.
template <class S>
std::size_t adapt_pose_style(const VqVae<S>& vq, const StyleDB& db, const Tensor<S>& pose,
                             const std::vector<std::size_t>& labels,
                             std::size_t min_frames = 250, bool* short_reference = nullptr) {
    if (short_reference) *short_reference = pose.shape.at(0) < min_frames;
    return retrieve(sample_style_matrix(vq, pose, labels), db);
}

// ---------------------------------------------------------------------------
// ASDB serialization: magic, u32 entry count, u32 d_z, then per entry a u32
// style id, 512 occupancy bits, and the 512 x d_z f32 matrix, little endian.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void put_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    std::uint64_t u = 0;
    std::memcpy(&u, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = (u >> (8 * i)) & 0xff;
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw DataError("style db: truncated file");
    std::uint64_t u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= std::uint64_t(buf[i]) << (8 * i);
    T v;
    std::memcpy(&v, &u, sizeof(T));
    return v;
}
}  // namespace detail

inline void write_style_db(std::ostream& os, const StyleDB& db) {
    os.write("ASDB", 4);
    detail::put_le<std::uint32_t>(os, std::uint32_t(db.entries.size()));
    detail::put_le<std::uint32_t>(os, std::uint32_t(db.d_z));
    for (const auto& e : db.entries) {
        detail::put_le<std::uint32_t>(os, std::uint32_t(e.style_id));
        unsigned char bits[kStyleClusters / 8] = {};
        for (std::size_t j = 0; j < kStyleClusters; ++j)
            if (e.matrix.occupancy[j]) bits[j / 8] |= (1u << (j % 8));
        os.write(reinterpret_cast<const char*>(bits), sizeof(bits));
        for (float v : e.matrix.S.data) detail::put_le<float>(os, v);
    }
}

inline StyleDB read_style_db(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "ASDB") throw DataError("style db: bad magic");
    StyleDB db;
    std::uint32_t n = detail::get_le<std::uint32_t>(is);
    db.d_z = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        StyleDbEntry e{StyleMatrix(db.d_z), detail::get_le<std::uint32_t>(is)};
        unsigned char bits[kStyleClusters / 8];
        is.read(reinterpret_cast<char*>(bits), sizeof(bits));
        if (!is) throw DataError("style db: truncated file");
        for (std::size_t j = 0; j < kStyleClusters; ++j)
            e.matrix.occupancy[j] = (bits[j / 8] >> (j % 8)) & 1;
        for (auto& v : e.matrix.S.data) v = detail::get_le<float>(is);
        db.entries.push_back(std::move(e));
    }
    return db;
}

inline void save_style_db(const std::string& path, const StyleDB& db) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("style db: cannot open " + path + " for writing");
    write_style_db(os, db);
    if (!os) throw DataError("style db: write failed for " + path);
}

inline StyleDB load_style_db(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("style db: cannot open " + path);
    return read_style_db(is);
}

}  // namespace adamesh
