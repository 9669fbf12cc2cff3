#pragma once

#include <array>
#include <sstream>

#include "adamesh/layers.hpp"

namespace adamesh {

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {
inline std::uint32_t crc32(const unsigned char* data, std::size_t n,
                           std::uint32_t crc = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xffffffffu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

inline std::uint32_t crc32(const std::string& s) {
    return crc32(reinterpret_cast<const unsigned char*>(s.data()), s.size());
}
}  // namespace detail

/// Named-tensor container with a config snapshot. The snapshot travels as a
/// reserved f64 tensor of character codes so the format stays single-typed.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
    std::string config_json;

    Tensor<float>* find(const std::string& name) {
        for (auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor<float>* find(const std::string& name) const {
        return const_cast<Checkpoint*>(this)->find(name);
    }
};

inline constexpr const char* kConfigTensorName = "__config__";

template <class S>
Checkpoint make_checkpoint(const ParamList<S>& params, const std::string& config_json = "") {
    Checkpoint ckpt;
    ckpt.config_json = config_json;
    for (const auto& p : params) ckpt.tensors.push_back({p.name, p.tensor->template cast<float>()});
    return ckpt;
}

/// Restore values into an existing model's parameter list; every parameter
/// must be present with a matching shape.
template <class S>
void restore_checkpoint(const Checkpoint& ckpt, const ParamList<S>& params) {
    for (const auto& p : params) {
        const Tensor<float>* t = ckpt.find(p.name);
        if (!t) throw DataError("checkpoint: missing tensor " + p.name);
        if (!(t->shape == p.tensor->shape))
            throw DataError("checkpoint: shape mismatch for " + p.name);
        *p.tensor = t->template cast<S>();
    }
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    std::ostringstream payload;
    payload.write("ADMK", 4);
    std::uint16_t version = kCheckpointVersion;
    payload.write(reinterpret_cast<const char*>(&version), 2);
    std::uint32_t count =
        std::uint32_t(ckpt.tensors.size()) + (ckpt.config_json.empty() ? 0 : 1);
    payload.write(reinterpret_cast<const char*>(&count), 4);

    auto put_tensor = [&](const std::string& name, const Tensor<float>& t) {
        std::uint32_t len = std::uint32_t(name.size());
        payload.write(reinterpret_cast<const char*>(&len), 4);
        payload.write(name.data(), len);
        write_mtns(payload, t);
    };
    if (!ckpt.config_json.empty()) {
        Tensor<float> cfg({ckpt.config_json.size()});
        for (std::size_t i = 0; i < cfg.numel(); ++i)
            cfg.data[i] = float((unsigned char)ckpt.config_json[i]);
        put_tensor(kConfigTensorName, cfg);
    }
    for (const auto& [name, t] : ckpt.tensors) put_tensor(name, t);

    std::string bytes = payload.str();
    std::uint32_t crc = detail::crc32(bytes);
    os.write(bytes.data(), std::streamsize(bytes.size()));
    os.write(reinterpret_cast<const char*>(&crc), 4);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    std::string bytes((std::istreambuf_iterator<char>(is)), {});
    if (bytes.size() < 14) throw DataError("checkpoint: truncated file");
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    std::string payload = bytes.substr(0, bytes.size() - 4);
    if (detail::crc32(payload) != stored) throw DataError("checkpoint: CRC mismatch");

    std::istringstream in(payload);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, "ADMK", 4) != 0) throw DataError("checkpoint: bad magic");
    std::uint16_t version;
    in.read(reinterpret_cast<char*>(&version), 2);
    if (version != kCheckpointVersion)
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    std::uint32_t count;
    in.read(reinterpret_cast<char*>(&count), 4);

    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len;
        in.read(reinterpret_cast<char*>(&len), 4);
        if (!in) throw DataError("checkpoint: truncated tensor table");
        std::string name(len, '\0');
        in.read(name.data(), len);
        auto t = read_mtns<float>(in);
        if (name == kConfigTensorName) {
            ckpt.config_json.resize(t.numel());
            for (std::size_t j = 0; j < t.numel(); ++j)
                ckpt.config_json[j] = char((unsigned char)t.data[j]);
        } else {
            ckpt.tensors.push_back({std::move(name), std::move(t)});
        }
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
    write_checkpoint(os, ckpt);
    if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path);
    return read_checkpoint(is);
}

}  // namespace adamesh
