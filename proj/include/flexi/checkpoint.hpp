#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "flexi/hash.hpp"
#include "flexi/tensor.hpp"

namespace flexi {

// Layout (all integers little-endian):
//   "FLXL"  u32 version  u64 header_bytes  header  payload
// The header is text, one record per line:
//   precision f32|f64
//   meta <key> <value...>
//   tensor <name> <rank> <dim>...
//   payload_bytes <n>
//   sha256 <hex of payload>
// The payload is every tensor's data, in header order.
inline constexpr char kCheckpointMagic[4] = {'F', 'L', 'X', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <Real T>
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor<T>>> tensors;
    std::map<std::string, std::string> meta;

    const Tensor<T>& get(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw FormatError("checkpoint: no tensor named '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
    const std::string& meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw FormatError("checkpoint: missing metadata '" + key + "'");
        return it->second;
    }
};

namespace detail {
inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_uint(const std::string& s, std::size_t at, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}
inline bool valid_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (c == ' ' || c == '\n' || c == '\t' || c == '\r') return false;
    return true;
}
}  // namespace detail

template <Real T>
std::string encode_checkpoint(const Checkpoint<T>& ck) {
    std::string payload;
    std::ostringstream header;
    header << "precision " << precision_name(precision_of<T>) << "\n";
    for (const auto& [k, v] : ck.meta) {
        if (!detail::valid_token(k) || v.find('\n') != std::string::npos)
            throw ValueError("checkpoint: invalid metadata key '" + k + "'");
        header << "meta " << k << " " << v << "\n";
    }
    std::vector<std::string> seen;
    for (const auto& [name, t] : ck.tensors) {
        if (!detail::valid_token(name)) throw ValueError("checkpoint: invalid tensor name '" + name + "'");
        if (std::find(seen.begin(), seen.end(), name) != seen.end())
            throw ValueError("checkpoint: duplicate tensor name '" + name + "'");
        seen.push_back(name);
        header << "tensor " << name << " " << t.rank();
        for (auto d : t.shape()) header << " " << d;
        header << "\n";
        const auto bytes = t.numel() * sizeof(T);
        const auto at = payload.size();
        payload.resize(at + bytes);
        if (bytes) std::memcpy(payload.data() + at, t.data().data(), bytes);
    }
    header << "payload_bytes " << payload.size() << "\n";
    header << "sha256 " << sha256_hex(payload) << "\n";
    const auto h = header.str();
    std::string out(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, h.size());
    out += h;
    out += payload;
    return out;
}

template <Real T>
Checkpoint<T> decode_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
    auto fail = [&](const std::string& why) -> void { throw FormatError(where + ": " + why); };
    if (bytes.size() < 16) fail("truncated file (" + std::to_string(bytes.size()) + " bytes)");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) fail("bad magic, not a FLXL checkpoint");
    const auto version = detail::get_uint(bytes, 4, 4);
    if (version != kCheckpointVersion)
        fail("unsupported format version " + std::to_string(version) + " (expected " +
             std::to_string(kCheckpointVersion) + ")");
    const auto hlen = detail::get_uint(bytes, 8, 8);
    if (hlen > bytes.size() - 16) fail("truncated header");
    std::istringstream header(bytes.substr(16, hlen));
    const std::string payload = bytes.substr(16 + hlen);

    Checkpoint<T> ck;
    std::vector<std::pair<std::string, Shape>> entries;
    std::string line, precision, digest;
    std::uint64_t declared = 0;
    bool have_size = false;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "precision") {
            ls >> precision;
        } else if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            ck.meta[key] = value;
        } else if (kind == "tensor") {
            std::string name;
            std::size_t rank = 0;
            if (!(ls >> name >> rank)) fail("malformed tensor record '" + line + "'");
            Shape shape(rank);
            for (auto& d : shape)
                if (!(ls >> d)) fail("malformed shape for '" + name + "'");
            entries.emplace_back(name, shape);
        } else if (kind == "payload_bytes") {
            ls >> declared;
            have_size = true;
        } else if (kind == "sha256") {
            ls >> digest;
        } else if (!kind.empty()) {
            fail("unknown header record '" + kind + "'");
        }
    }
    if (precision.empty() || !have_size || digest.empty()) fail("incomplete header");
    if (precision != precision_name(precision_of<T>))
        fail("stored precision " + precision + " but " + std::string(precision_name(precision_of<T>)) + " requested");
    if (payload.size() != declared)
        fail("payload is " + std::to_string(payload.size()) + " bytes, header declares " + std::to_string(declared) +
             " (partial file?)");
    if (sha256_hex(payload) != digest) fail("payload hash mismatch (corrupt file)");
    std::size_t at = 0;
    for (auto& [name, shape] : entries) {
        const auto n = numel_of(shape);
        if (at + n * sizeof(T) > payload.size()) fail("payload too short for '" + name + "'");
        std::vector<T> data(n);
        if (n) std::memcpy(data.data(), payload.data() + at, n * sizeof(T));
        at += n * sizeof(T);
        ck.tensors.emplace_back(name, Tensor<T>::from(shape, std::move(data)));
    }
    if (at != payload.size()) fail("trailing payload bytes");
    return ck;
}

template <Real T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
    const auto bytes = encode_checkpoint(ck);
    const auto tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot rename " + tmp + " to " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Precision recorded in a checkpoint file, without decoding it.
inline Precision checkpoint_precision(const std::string& path) {
    const auto bytes = read_file(path);
    const auto at = bytes.find("precision ");
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0 || at == std::string::npos)
        throw FormatError(path + ": not a FLXL checkpoint");
    return parse_precision(bytes.substr(at + 10, 3));
}

template <Real T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    return decode_checkpoint<T>(read_file(path), path);
}

}  // namespace flexi
