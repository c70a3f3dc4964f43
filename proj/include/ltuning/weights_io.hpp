#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltuning/crc32.hpp"
#include "ltuning/errors.hpp"
#include "ltuning/optim.hpp"
#include "ltuning/tensor.hpp"

namespace ltuning {

// LTW1 container layout:
//   magic "LTW1" | u32 LE header length | JSON header | raw LE f32 payload
// The header lists {name, shape, dtype, byte_offset} per tensor, carries a
// CRC32 of the payload, and any caller-supplied metadata (backbone config,
// adapter method and dims).
struct LtwTensor {
    std::string name;
    shape_t shape;
    std::vector<float> data;
};

struct LtwFile {
    nlohmann::json meta;
    std::vector<LtwTensor> tensors;

    const LtwTensor& find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return t;
        }
        throw WeightFormatError("weight file is missing tensor '" + name + "'");
    }
};

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_f32le(std::string& out, const float* vals, std::size_t n) {
    static_assert(sizeof(float) == 4);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &vals[i], 4);
        put_u32le(out, bits);
    }
}

}  // namespace detail

inline std::string serialize_ltw(const LtwFile& file) {
    std::string payload;
    nlohmann::json tensor_list = nlohmann::json::array();
    for (const auto& t : file.tensors) {
        nlohmann::json entry;
        entry["name"] = t.name;
        entry["shape"] = t.shape;
        entry["dtype"] = "f32";
        entry["byte_offset"] = payload.size();
        tensor_list.push_back(std::move(entry));
        detail::append_f32le(payload, t.data.data(), t.data.size());
    }
    nlohmann::json header = file.meta;
    header["tensors"] = std::move(tensor_list);
    header["payload_bytes"] = payload.size();
    header["payload_crc32"] = crc32(payload.data(), payload.size());
    const std::string header_str = header.dump();

    std::string out;
    out.reserve(4 + 4 + header_str.size() + payload.size());
    out += "LTW1";
    detail::put_u32le(out, static_cast<std::uint32_t>(header_str.size()));
    out += header_str;
    out += payload;
    return out;
}

inline void save_ltw(const std::string& path, const LtwFile& file) {
    const std::string bytes = serialize_ltw(file);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write: " + path);
}

inline LtwFile parse_ltw(const std::string& bytes, const std::string& origin) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8) {
        throw TruncatedFileError(origin + ": file shorter than the fixed preamble");
    }
    if (std::memcmp(p, "LTW1", 4) != 0) {
        if (std::memcmp(p, "LTW", 3) == 0) {
            throw VersionMismatchError(origin + ": unsupported weight format version '" +
                                       std::string(bytes.substr(0, 4)) + "'");
        }
        throw BadMagicError(origin + ": bad magic bytes, not an LTW weight file");
    }
    const std::uint32_t header_len = detail::get_u32le(p + 4);
    if (bytes.size() < 8 + static_cast<std::size_t>(header_len)) {
        throw TruncatedFileError(origin + ": header extends past end of file");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw WeightFormatError(origin + ": malformed JSON header: " + e.what());
    }

    const std::size_t payload_off = 8 + header_len;
    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (bytes.size() - payload_off != payload_bytes) {
        throw TruncatedFileError(origin + ": payload is " + std::to_string(bytes.size() - payload_off) +
                                 " bytes, header declares " + std::to_string(payload_bytes));
    }
    const std::uint32_t expected_crc = header.at("payload_crc32").get<std::uint32_t>();
    const std::uint32_t actual_crc = crc32(bytes.data() + payload_off, payload_bytes);
    if (expected_crc != actual_crc) {
        throw ChecksumError(origin + ": payload checksum mismatch");
    }

    LtwFile file;
    for (const auto& entry : header.at("tensors")) {
        LtwTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<shape_t>();
        if (entry.at("dtype").get<std::string>() != "f32") {
            throw WeightFormatError(origin + ": unsupported dtype for tensor '" + t.name + "'");
        }
        const std::size_t off = entry.at("byte_offset").get<std::size_t>();
        const std::size_t count = static_cast<std::size_t>(shape_numel(t.shape));
        if (off + count * 4 > payload_bytes) {
            throw TruncatedFileError(origin + ": tensor '" + t.name + "' extends past payload end");
        }
        t.data.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t bits = detail::get_u32le(p + payload_off + off + i * 4);
            std::memcpy(&t.data[i], &bits, 4);
        }
        file.tensors.push_back(std::move(t));
    }
    header.erase("tensors");
    header.erase("payload_bytes");
    header.erase("payload_crc32");
    file.meta = std::move(header);
    return file;
}

inline LtwFile load_ltw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open weight file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_ltw(bytes, path);
}

// Serialization of a named parameter list to the f32 payload ordering used
// both by save and by checksums, so "checksum before == checksum after" is
// exactly the on-disk identity.
template <class T>
std::string params_payload(const std::vector<NamedParam<T>>& params) {
    std::string payload;
    for (const auto& p : params) {
        std::vector<float> vals(p.tensor->data.size());
        for (std::size_t i = 0; i < vals.size(); ++i) {
            vals[i] = static_cast<float>(p.tensor->data[i]);
        }
        detail::append_f32le(payload, vals.data(), vals.size());
    }
    return payload;
}

template <class T>
std::uint32_t params_checksum(const std::vector<NamedParam<T>>& params) {
    const std::string payload = params_payload(params);
    return crc32(payload.data(), payload.size());
}

}  // namespace ltuning
