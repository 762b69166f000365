#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "echogen/error.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

// Named-tensor container: little-endian binary, magic "LDFT", format version,
// entry count, then per entry a name, rank, extents, and the f32 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

class ByteWriter {
   public:
    explicit ByteWriter(const std::filesystem::path& path) : path_(path), f_(std::fopen(path.string().c_str(), "wb")) {
        if (!f_) throw IoError("cannot open " + path.string() + " for writing");
    }
    ~ByteWriter() {
        if (f_) std::fclose(f_);
    }
    ByteWriter(const ByteWriter&) = delete;
    ByteWriter& operator=(const ByteWriter&) = delete;

    void bytes(const void* p, std::size_t n) {
        if (std::fwrite(p, 1, n, f_) != n) throw IoError("short write to " + path_.string());
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) {
        std::uint8_t b[2] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8)};
        bytes(b, 2);
    }
    void u32(std::uint32_t v) {
        std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                             static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
        bytes(b, 4);
    }
    void f32(float v) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        u32(u);
    }
    void f32_array(const float* p, std::size_t n) {
        // one element at a time keeps the output byte order explicit; the
        // buffered FILE* makes this fast enough for desk-scale weights
        for (std::size_t i = 0; i < n; i++) f32(p[i]);
    }
    void close() {
        if (f_ && std::fclose(f_) != 0) {
            f_ = nullptr;
            throw IoError("failed to flush " + path_.string());
        }
        f_ = nullptr;
    }

   private:
    std::filesystem::path path_;
    std::FILE* f_;
};

class ByteReader {
   public:
    explicit ByteReader(const std::filesystem::path& path) : path_(path), f_(std::fopen(path.string().c_str(), "rb")) {
        if (!f_) throw IoError("cannot open " + path.string() + " for reading");
    }
    ~ByteReader() {
        if (f_) std::fclose(f_);
    }
    ByteReader(const ByteReader&) = delete;
    ByteReader& operator=(const ByteReader&) = delete;

    void bytes(void* p, std::size_t n) {
        if (std::fread(p, 1, n, f_) != n) throw IoError("unexpected end of file in " + path_.string());
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint16_t u16() {
        std::uint8_t b[2];
        bytes(b, 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        std::uint8_t b[4];
        bytes(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    float f32() {
        const std::uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    bool at_eof() {
        const int c = std::fgetc(f_);
        if (c == EOF) return true;
        std::ungetc(c, f_);
        return false;
    }
    const std::filesystem::path& path() const { return path_; }

   private:
    std::filesystem::path path_;
    std::FILE* f_;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensorList& entries) {
    std::set<std::string> seen;
    for (const auto& [name, t] : entries) {
        if (name.empty() || name.size() > 0xFFFF) throw ValueError("checkpoint entry name length invalid: " + name);
        if (!seen.insert(name).second) throw ValueError("duplicate checkpoint entry name: " + name);
        if (!t.defined()) throw ValueError("checkpoint entry " + name + " is an empty tensor");
        if (t.rank() > 255) throw ValueError("checkpoint entry " + name + " rank exceeds format limit");
        for (i64 d : t.shape())
            if (d > 0xFFFFFFFFll) throw ValueError("checkpoint entry " + name + " extent exceeds format limit");
    }
    detail::ByteWriter w(path);
    w.bytes("LDFT", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (i64 d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.f32_array(t.data(), static_cast<std::size_t>(t.numel()));
    }
    w.close();
}

inline NamedTensorList load_checkpoint(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "LDFT", 4) != 0) throw IoError("bad magic in " + path.string() + "; not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    const std::uint32_t count = r.u32();
    NamedTensorList entries;
    entries.reserve(count);
    std::set<std::string> seen;
    for (std::uint32_t e = 0; e < count; e++) {
        const std::uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        if (!seen.insert(name).second) throw IoError("duplicate entry name " + name + " in " + path.string());
        const std::uint8_t rank = r.u8();
        Shape shape(rank);
        i64 numel = 1;
        for (std::uint8_t d = 0; d < rank; d++) {
            shape[d] = static_cast<i64>(r.u32());
            if (shape[d] <= 0) throw IoError("invalid extent in " + path.string() + " entry " + name);
            numel *= shape[d];
        }
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (i64 i = 0; i < numel; i++) data[static_cast<std::size_t>(i)] = r.f32();
        for (float v : data)
            if (!std::isfinite(v)) throw IoError("non-finite value in " + path.string() + " entry " + name);
        entries.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    if (!r.at_eof()) throw IoError("trailing bytes after last entry in " + path.string());
    return entries;
}

inline const Tensor* find_entry(const NamedTensorList& entries, const std::string& name) {
    for (const auto& [n, t] : entries)
        if (n == name) return &t;
    return nullptr;
}

}  // namespace echogen
