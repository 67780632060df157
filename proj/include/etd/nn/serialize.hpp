#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "etd/nn/models.hpp"

namespace etd::nn {

// Weight files: magic "ETDW", version u8, arch kind u8, then per tensor:
// name length u16 + UTF-8 name, rank u8, dims u32 each, row-major f32, all
// little-endian. A leading "meta.arch" tensor carries the integer arch dims.

inline constexpr uint8_t kWeightsVersion = 1;

namespace detail {

inline void put_u16(std::ostream& os, uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    os.write(b, 2);
}
inline void put_u32(std::ostream& os, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}
inline uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | b[1] << 8);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

inline void write_tensor(std::ostream& os, const std::string& name,
                         const std::vector<uint32_t>& dims, const float* data,
                         size_t n) {
    put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(dims.size()));
    for (uint32_t d : dims) put_u32(os, d);
    os.write(reinterpret_cast<const char*>(data),
             static_cast<std::streamsize>(n * sizeof(float)));
}

struct RawTensor {
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

inline std::map<std::string, RawTensor> read_tensors(std::istream& is,
                                                     ArchKind expected_kind,
                                                     const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "ETDW", 4) != 0)
        throw NnError("bad magic in weights file: " + path);
    const int version = is.get();
    if (version != kWeightsVersion)
        throw NnError("unsupported weights version " + std::to_string(version));
    const int kind = is.get();
    if (kind != static_cast<int>(expected_kind))
        throw NnError("weights file holds arch kind " + std::to_string(kind) +
                      ", expected " + std::to_string(static_cast<int>(expected_kind)));
    std::map<std::string, RawTensor> out;
    while (true) {
        const uint16_t name_len = get_u16(is);
        if (is.eof() || !is) break;
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int rank = is.get();
        RawTensor t;
        size_t total = 1;
        for (int i = 0; i < rank; ++i) {
            t.dims.push_back(get_u32(is));
            total *= t.dims.back();
        }
        t.data.resize(total);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(total * sizeof(float)));
        if (!is) throw NnError("truncated weights file: " + path);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

template <class Params>
void fill_from_tensors(Params& p, const std::map<std::string, RawTensor>& tensors,
                       const std::string& path) {
    auto refs = collect_refs<float>(p);
    for (auto& r : refs) {
        const auto it = tensors.find(r.name);
        if (it == tensors.end())
            throw NnError("missing tensor '" + r.name + "' in " + path);
        if (it->second.data.size() != r.n)
            throw NnError("shape mismatch for tensor '" + r.name + "' in " + path);
        std::copy(it->second.data.begin(), it->second.data.end(), r.data);
    }
}

}  // namespace detail

inline void save_params(const std::string& path, LightParams<float>& p) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw NnError("cannot write weights file: " + path);
    f.write("ETDW", 4);
    f.put(static_cast<char>(kWeightsVersion));
    f.put(static_cast<char>(ArchKind::Light));
    const float meta[4] = {static_cast<float>(p.arch.n_mels),
                           static_cast<float>(p.arch.conv1_channels),
                           static_cast<float>(p.arch.conv2_channels),
                           static_cast<float>(p.arch.gru_hidden)};
    detail::write_tensor(f, "meta.arch", {4}, meta, 4);
    for (auto& r : collect_refs<float>(p))
        detail::write_tensor(f, r.name, r.dims, r.data, r.n);
}

inline void save_params(const std::string& path, HeavyParams<float>& p) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw NnError("cannot write weights file: " + path);
    f.write("ETDW", 4);
    f.put(static_cast<char>(kWeightsVersion));
    f.put(static_cast<char>(ArchKind::Heavy));
    const float meta[3] = {static_cast<float>(p.arch.n_mels),
                           static_cast<float>(p.arch.context_frames),
                           static_cast<float>(p.arch.hidden)};
    detail::write_tensor(f, "meta.arch", {3}, meta, 3);
    for (auto& r : collect_refs<float>(p))
        detail::write_tensor(f, r.name, r.dims, r.data, r.n);
}

inline ArchKind peek_arch_kind(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw NnError("cannot read weights file: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "ETDW", 4) != 0)
        throw NnError("bad magic in weights file: " + path);
    f.get();  // version
    const int kind = f.get();
    if (kind != 0 && kind != 1)
        throw NnError("unknown arch kind in weights file: " + path);
    return static_cast<ArchKind>(kind);
}

inline LightParams<float> load_light_params(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw NnError("cannot read weights file: " + path);
    const auto tensors = detail::read_tensors(f, ArchKind::Light, path);
    const auto meta = tensors.find("meta.arch");
    if (meta == tensors.end() || meta->second.data.size() != 4)
        throw NnError("missing meta.arch tensor in " + path);
    LightArch a;
    a.n_mels = static_cast<int>(meta->second.data[0]);
    a.conv1_channels = static_cast<int>(meta->second.data[1]);
    a.conv2_channels = static_cast<int>(meta->second.data[2]);
    a.gru_hidden = static_cast<int>(meta->second.data[3]);
    auto p = LightParams<float>::make(a, 0);
    detail::fill_from_tensors(p, tensors, path);
    return p;
}

inline HeavyParams<float> load_heavy_params(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw NnError("cannot read weights file: " + path);
    const auto tensors = detail::read_tensors(f, ArchKind::Heavy, path);
    const auto meta = tensors.find("meta.arch");
    if (meta == tensors.end() || meta->second.data.size() != 3)
        throw NnError("missing meta.arch tensor in " + path);
    HeavyArch a;
    a.n_mels = static_cast<int>(meta->second.data[0]);
    a.context_frames = static_cast<int>(meta->second.data[1]);
    a.hidden = static_cast<int>(meta->second.data[2]);
    auto p = HeavyParams<float>::make(a, 0);
    detail::fill_from_tensors(p, tensors, path);
    return p;
}

}  // namespace etd::nn
