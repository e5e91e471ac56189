#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "zeroloc/errors.hpp"
#include "zeroloc/tensor.hpp"

namespace zeroloc {

static_assert(std::endian::native == std::endian::little,
              "archive format stores raw little-endian f32 blobs");

// Weight archive, format version 1:
//   bytes 0..7    magic "ZEROLOC1"
//   bytes 8..15   u64 LE header length H
//   bytes 16..    H bytes of JSON (UTF-8, keys sorted)
//   then          raw f32 LE tensor blobs, in name-sorted order
// The JSON header maps "__metadata__" to a string->string object (must carry
// "format_version") and every tensor name to {dtype, shape, data_offset,
// data_length}; offsets are relative to the first byte after the header.
struct Archive {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw_input("archive is missing tensor '", name, "'");
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    const std::string& meta(const std::string& key) const {
        auto it = metadata.find(key);
        if (it == metadata.end()) throw_input("archive is missing metadata key '", key, "'");
        return it->second;
    }
};

namespace detail {
inline constexpr char kArchiveMagic[8] = {'Z', 'E', 'R', 'O', 'L', 'O', 'C', '1'};
inline constexpr const char* kFormatVersion = "1";

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}
}  // namespace detail

inline void save_archive(const std::string& path, const Archive& a) {
    nlohmann::json header;
    nlohmann::json meta_json = nlohmann::json::object();
    for (const auto& [k, v] : a.metadata) meta_json[k] = v;
    meta_json["format_version"] = detail::kFormatVersion;
    header["__metadata__"] = meta_json;

    std::uint64_t offset = 0;
    for (const auto& [name, t] : a.tensors) {
        if (name == "__metadata__") throw_input("'__metadata__' is reserved and cannot name a tensor");
        require_finite(t, name.c_str());
        const std::uint64_t bytes = static_cast<std::uint64_t>(t.numel()) * 4;
        header[name] = {{"dtype", "f32"},
                        {"shape", t.shape},
                        {"data_offset", offset},
                        {"data_length", bytes}};
        offset += bytes;
    }

    const std::string header_text = header.dump();
    std::string prefix(detail::kArchiveMagic, 8);
    detail::put_u64_le(prefix, header_text.size());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw_io("cannot open '", path, "' for writing");
    f.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
    f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : a.tensors) {
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * 4));
    }
    f.flush();
    if (!f) throw_io("failed writing archive '", path, "'");
}

inline Archive load_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open '", path, "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw_io("failed reading archive '", path, "'");

    if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kArchiveMagic, 8) != 0) {
        throw_input("'", path, "' is not a weight archive (bad magic)");
    }
    const std::uint64_t header_len = detail::get_u64_le(bytes.data() + 8);
    if (16 + header_len > bytes.size()) {
        throw_input("'", path, "': header length ", header_len, " exceeds file size");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw_input("'", path, "': malformed archive header: ", e.what());
    }
    if (!header.is_object()) throw_input("'", path, "': archive header is not a json object");

    Archive a;
    const std::size_t blob_start = 16 + static_cast<std::size_t>(header_len);
    const std::size_t blob_bytes = bytes.size() - blob_start;
    try {
        if (!header.contains("__metadata__")) throw_input("'", path, "': archive has no __metadata__");
        for (const auto& [k, v] : header.at("__metadata__").items()) {
            a.metadata[k] = v.get<std::string>();
        }
        if (a.metadata.count("format_version") == 0 ||
            a.metadata.at("format_version") != detail::kFormatVersion) {
            throw_input("'", path, "': unsupported archive format_version");
        }
        for (const auto& [name, entry] : header.items()) {
            if (name == "__metadata__") continue;
            if (entry.at("dtype").get<std::string>() != "f32") {
                throw_input("'", path, "': tensor '", name, "' has unsupported dtype");
            }
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            const auto off = entry.at("data_offset").get<std::uint64_t>();
            const auto len = entry.at("data_length").get<std::uint64_t>();
            const std::size_t numel = Tensor::numel_of(shape);
            if (len != static_cast<std::uint64_t>(numel) * 4) {
                throw_input("'", path, "': tensor '", name, "' declares ", len, " bytes at offset ",
                            blob_start + off, " but shape ", Tensor::shape_str(shape), " needs ",
                            numel * 4);
            }
            if (off + len > blob_bytes) {
                throw_input("'", path, "': tensor '", name, "' at byte offset ", blob_start + off,
                            " extends past end of file (", bytes.size(), " bytes)");
            }
            Tensor t = Tensor::zeros(shape);
            std::memcpy(t.data.data(), bytes.data() + blob_start + off, static_cast<std::size_t>(len));
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                if (!std::isfinite(t.data[i])) {
                    throw_input("'", path, "': tensor '", name, "' has a non-finite value at byte offset ",
                                blob_start + off + i * 4);
                }
            }
            a.tensors.emplace(name, std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw_input("'", path, "': malformed archive header: ", e.what());
    }
    return a;
}

}  // namespace zeroloc
