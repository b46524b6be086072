#pragma once

// Versioned binary container shared by checkpoints and pruned models:
//
//   magic (8 bytes) | u32 version | u64 header length | JSON header
//   | u32 tensor count | { u32 name length | name | u64 count | f32[count] }*
//
// Integers and floats are written in host byte order.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ppp/error.hpp"

namespace ppp {

using json = nlohmann::json;

struct NamedTensor {
    std::string name;
    std::vector<float> data;
};

struct Container {
    std::string magic;      // exactly 8 characters
    std::uint32_t version = 1;
    json header;
    std::vector<NamedTensor> tensors;

    const NamedTensor& tensor(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw IngestionError("container is missing tensor '" + name + "'");
    }
};

namespace detail {

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string context) : bytes_(bytes), ctx_(std::move(context)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void floats(std::vector<float>& out, std::size_t n) {
        need(n * sizeof(float));
        out.resize(n);
        if (n) std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw IngestionError(ctx_ + ": truncated file");
    }
    const std::string& bytes_;
    std::string ctx_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize(const Container& c) {
    expects(c.magic.size() == 8, "container magic must be 8 bytes");
    std::string out = c.magic;
    detail::put<std::uint32_t>(out, c.version);
    const std::string header = c.header.dump();
    detail::put<std::uint64_t>(out, header.size());
    out += header;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        detail::put<std::uint64_t>(out, t.data.size());
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    return out;
}

inline Container deserialize(const std::string& bytes, const std::string& magic,
                             std::uint32_t max_version, const std::string& context) {
    detail::Reader r(bytes, context);
    Container c;
    c.magic = r.str(8);
    if (c.magic != magic)
        throw IngestionError(context + ": not a " + magic.substr(0, magic.find('\0')) + " file");
    c.version = r.get<std::uint32_t>();
    if (c.version > max_version)
        throw IngestionError(context + ": format version " + std::to_string(c.version) +
                             " is newer than supported version " + std::to_string(max_version));
    const auto header_len = r.get<std::uint64_t>();
    try {
        c.header = json::parse(r.str(header_len));
    } catch (const json::exception& e) {
        throw IngestionError(context + ": corrupt header: " + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    c.tensors.resize(count);
    for (auto& t : c.tensors) {
        t.name = r.str(r.get<std::uint32_t>());
        r.floats(t.data, r.get<std::uint64_t>());
    }
    if (!r.done()) throw IngestionError(context + ": trailing bytes after last tensor");
    return c;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionError("write failed for '" + path + "'");
}

inline json read_json_file(const std::string& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw IngestionError("'" + path + "': " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    write_file(path, j.dump(2) + "\n");
}

/// FNV-1a 64-bit, hex encoded.
inline std::string digest(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream ss;
    ss << std::hex << std::setw(16) << std::setfill('0') << h;
    return ss.str();
}

} // namespace ppp
