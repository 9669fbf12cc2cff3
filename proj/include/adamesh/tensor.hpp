#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace adamesh {

// Error taxonomy. Exit codes: config=2, data=3, numeric=4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major tensor. Default scalar is float; gradient checking
/// instantiates everything with double.
template <class S>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> sh, S fill = S(0))
        : shape(std::move(sh)), data(numel_of(shape), fill) {}

    static std::size_t numel_of(const std::vector<std::size_t>& sh) {
        std::size_t n = 1;
        for (auto d : sh) n *= d;
        return n;
    }
    std::size_t numel() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t ndim() const { return shape.size(); }

    S& operator()(std::size_t i) { return data[i]; }
    S operator()(std::size_t i) const { return data[i]; }
    S& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    S operator()(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    S& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    S operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <class S2>
    Tensor<S2> cast() const {
        Tensor<S2> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<S2>(data[i]);
        return out;
    }
};

/// Deterministic RNG. Box-Muller on top of mt19937_64 so the stream is
/// pinned independently of libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    /// Uniform in [0,1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    /// Uniform integer in [0, n).
    std::size_t uniform_int(std::size_t n) { return std::size_t(next_u64() % n); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t state() const { return state_; }

    /// Derive an independent stream (used for per-sample corpus seeds).
    Rng fork(std::uint64_t salt) const {
        Rng r(state_ ^ (salt * 0xd6e8feb86659fd93ull + 0x2545f4914f6cdd1dull));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

template <class S>
Tensor<S> randn(Rng& rng, std::vector<std::size_t> shape, double sigma = 1.0) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<S>(rng.normal() * sigma);
    return t;
}

// ---------------------------------------------------------------------------
// MTNS tensor file format:
//   magic "MTNS", u16 version=1, u8 dtype (0=f32, 1=f64), u8 ndim,
//   ndim x u32 dims, payload little-endian row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
}
inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), std::streamsize(n));
    if (std::size_t(is.gcount()) != n) throw DataError("MTNS: truncated stream");
}

template <class S>
constexpr std::uint8_t mtns_dtype() {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
    return std::is_same_v<S, float> ? 0 : 1;
}

}  // namespace detail

template <class S>
void write_mtns(std::ostream& os, const Tensor<S>& t) {
    os.write("MTNS", 4);
    std::uint16_t version = 1;
    detail::write_bytes(os, &version, 2);
    std::uint8_t dtype = detail::mtns_dtype<S>();
    detail::write_bytes(os, &dtype, 1);
    std::uint8_t ndim = std::uint8_t(t.shape.size());
    detail::write_bytes(os, &ndim, 1);
    for (auto d : t.shape) {
        std::uint32_t d32 = std::uint32_t(d);
        detail::write_bytes(os, &d32, 4);
    }
    detail::write_bytes(os, t.data.data(), t.data.size() * sizeof(S));
}

template <class S>
Tensor<S> read_mtns(std::istream& is) {
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::memcmp(magic, "MTNS", 4) != 0) throw DataError("MTNS: bad magic");
    std::uint16_t version = 0;
    detail::read_bytes(is, &version, 2);
    if (version != 1) throw DataError("MTNS: unsupported version");
    std::uint8_t dtype = 0, ndim = 0;
    detail::read_bytes(is, &dtype, 1);
    detail::read_bytes(is, &ndim, 1);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) {
        std::uint32_t d32 = 0;
        detail::read_bytes(is, &d32, 4);
        d = d32;
    }
    Tensor<S> t(shape);
    if (dtype == detail::mtns_dtype<S>()) {
        detail::read_bytes(is, t.data.data(), t.data.size() * sizeof(S));
    } else if (dtype == 0) {
        std::vector<float> tmp(t.numel());
        detail::read_bytes(is, tmp.data(), tmp.size() * 4);
        for (std::size_t i = 0; i < tmp.size(); ++i) t.data[i] = S(tmp[i]);
    } else if (dtype == 1) {
        std::vector<double> tmp(t.numel());
        detail::read_bytes(is, tmp.data(), tmp.size() * 8);
        for (std::size_t i = 0; i < tmp.size(); ++i) t.data[i] = S(tmp[i]);
    } else {
        throw DataError("MTNS: unknown dtype");
    }
    return t;
}

template <class S>
void save_mtns(const std::string& path, const Tensor<S>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    write_mtns(os, t);
    if (!os) throw DataError("write failed: " + path);
}

template <class S>
Tensor<S> load_mtns(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    return read_mtns<S>(is);
}

}  // namespace adamesh
