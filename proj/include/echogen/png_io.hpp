#pragma once

// 8-bit grayscale PNG encode/decode on top of zlib, plus the float<->byte
// image mapping used across the pipeline (value = pixel / 127.5 - 1).
//
// The encoder is deterministic: identical pixels always produce identical
// bytes (filter type 0 on every scanline, one zlib stream at a fixed level,
// a single IDAT chunk). The decoder accepts any standard non-interlaced
// 8-bit grayscale PNG: all five scanline filters, IDAT split across chunks,
// ancillary chunks skipped, per-chunk CRCs verified.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "error.hpp"
#include "tensor.hpp"

namespace echogen {

struct ImageU8 {
    i64 width = 0;
    i64 height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, width * height entries

    std::uint8_t at(i64 x, i64 y) const {
        return pixels[static_cast<std::size_t>(y * width + x)];
    }
};

namespace detail {

inline void png_put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t png_get_u32be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) |
           (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) |
           static_cast<std::uint32_t>(p[3]);
}

inline void png_put_chunk(std::vector<std::uint8_t>& out, const char* tag,
                          const std::uint8_t* payload, std::size_t n) {
    png_put_u32be(out, static_cast<std::uint32_t>(n));
    const std::size_t tagged_start = out.size();
    out.insert(out.end(), tag, tag + 4);
    if (n > 0) out.insert(out.end(), payload, payload + n);
    const std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, out.data() + tagged_start, static_cast<uInt>(4 + n)));
    png_put_u32be(out, crc);
}

inline const std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

inline std::uint8_t png_paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = p > a ? p - a : a - p;
    const int pb = p > b ? p - b : b - p;
    const int pc = p > c ? p - c : c - p;
    if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
    if (pb <= pc) return static_cast<std::uint8_t>(b);
    return static_cast<std::uint8_t>(c);
}

}  // namespace detail

// Serialize an image to PNG bytes. Deterministic: equal pixels -> equal bytes.
inline std::vector<std::uint8_t> encode_png_gray8(const ImageU8& img) {
    if (img.width < 1 || img.height < 1) {
        throw ValueError("png encode: image extents must be positive, got " +
                         std::to_string(img.width) + "x" + std::to_string(img.height));
    }
    if (img.pixels.size() != static_cast<std::size_t>(img.width * img.height)) {
        throw ShapeError("png encode: pixel buffer holds " + std::to_string(img.pixels.size()) +
                         " bytes, extents need " + std::to_string(img.width * img.height));
    }

    // Raw scanline stream: each row prefixed by filter type 0 (None).
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>((img.width + 1) * img.height));
    for (i64 y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const std::uint8_t* row = img.pixels.data() + y * img.width;
        raw.insert(raw.end(), row, row + img.width);
    }

    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    const int rc = compress2(comp.data(), &comp_len, raw.data(),
                             static_cast<uLong>(raw.size()), 6);
    if (rc != Z_OK) throw StateError("png encode: deflate failed with code " + std::to_string(rc));
    comp.resize(comp_len);

    std::vector<std::uint8_t> out;
    out.insert(out.end(), detail::kPngSignature, detail::kPngSignature + 8);
    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(img.width >> 24);
    ihdr[1] = static_cast<std::uint8_t>(img.width >> 16);
    ihdr[2] = static_cast<std::uint8_t>(img.width >> 8);
    ihdr[3] = static_cast<std::uint8_t>(img.width);
    ihdr[4] = static_cast<std::uint8_t>(img.height >> 24);
    ihdr[5] = static_cast<std::uint8_t>(img.height >> 16);
    ihdr[6] = static_cast<std::uint8_t>(img.height >> 8);
    ihdr[7] = static_cast<std::uint8_t>(img.height);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 0;   // color type: grayscale
    ihdr[10] = 0;  // compression: deflate
    ihdr[11] = 0;  // filter method 0
    ihdr[12] = 0;  // not interlaced
    detail::png_put_chunk(out, "IHDR", ihdr, sizeof(ihdr));
    detail::png_put_chunk(out, "IDAT", comp.data(), comp.size());
    detail::png_put_chunk(out, "IEND", nullptr, 0);
    return out;
}

// Parse PNG bytes. Accepts only non-interlaced 8-bit grayscale; verifies CRCs.
inline ImageU8 decode_png_gray8(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), detail::kPngSignature, 8) != 0) {
        throw DataError("png decode: missing PNG signature");
    }

    std::size_t pos = 8;
    bool saw_ihdr = false;
    bool saw_iend = false;
    i64 width = 0;
    i64 height = 0;
    std::vector<std::uint8_t> idat;

    while (pos < bytes.size()) {
        if (bytes.size() - pos < 12) throw DataError("png decode: truncated chunk header");
        const std::uint32_t len = detail::png_get_u32be(bytes.data() + pos);
        if (bytes.size() - pos - 12 < len) throw DataError("png decode: truncated chunk payload");
        const std::uint8_t* tag = bytes.data() + pos + 4;
        const std::uint8_t* payload = bytes.data() + pos + 8;
        const std::uint32_t stored_crc = detail::png_get_u32be(payload + len);
        const std::uint32_t actual_crc = static_cast<std::uint32_t>(
            ::crc32(0L, tag, static_cast<uInt>(4 + len)));
        const std::string tag_name(reinterpret_cast<const char*>(tag), 4);
        if (stored_crc != actual_crc) {
            throw DataError("png decode: crc mismatch in " + tag_name + " chunk");
        }

        if (!saw_ihdr) {
            if (tag_name != "IHDR" || len != 13) {
                throw DataError("png decode: first chunk must be IHDR");
            }
            width = detail::png_get_u32be(payload);
            height = detail::png_get_u32be(payload + 4);
            const std::uint8_t bit_depth = payload[8];
            const std::uint8_t color_type = payload[9];
            const std::uint8_t interlace = payload[12];
            if (width < 1 || height < 1 || width > (1 << 20) || height > (1 << 20)) {
                throw DataError("png decode: bad image extents");
            }
            if (bit_depth != 8 || color_type != 0) {
                throw DataError("png decode: only 8-bit grayscale is supported (got bit depth " +
                                std::to_string(bit_depth) + ", color type " +
                                std::to_string(color_type) + ")");
            }
            if (payload[10] != 0 || payload[11] != 0) {
                throw DataError("png decode: unknown compression or filter method");
            }
            if (interlace != 0) throw DataError("png decode: interlaced PNG is not supported");
            saw_ihdr = true;
        } else if (tag_name == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (tag_name == "IEND") {
            saw_iend = true;
            break;
        }
        // Any other chunk (tEXt, pHYs, ...) is ancillary here: skip it.
        pos += 12 + len;
    }
    if (!saw_ihdr) throw DataError("png decode: no IHDR chunk");
    if (!saw_iend) throw DataError("png decode: missing IEND chunk");
    if (idat.empty()) throw DataError("png decode: no IDAT data");

    const std::size_t stride = static_cast<std::size_t>(width) + 1;
    const std::size_t expect = stride * static_cast<std::size_t>(height);
    std::vector<std::uint8_t> raw(expect);
    uLongf raw_len = static_cast<uLongf>(expect);
    const int rc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
    if (rc != Z_OK || raw_len != expect) {
        throw DataError("png decode: scanline stream is corrupt or has the wrong length");
    }

    ImageU8 img;
    img.width = width;
    img.height = height;
    img.pixels.resize(static_cast<std::size_t>(width * height));
    for (i64 y = 0; y < height; ++y) {
        const std::uint8_t ftype = raw[static_cast<std::size_t>(y) * stride];
        const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * stride + 1;
        std::uint8_t* dst = img.pixels.data() + y * width;
        const std::uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * width : nullptr;
        for (i64 x = 0; x < width; ++x) {
            const int a = x > 0 ? dst[x - 1] : 0;
            const int b = up != nullptr ? up[x] : 0;
            const int c = (up != nullptr && x > 0) ? up[x - 1] : 0;
            int v = src[x];
            switch (ftype) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::png_paeth(a, b, c); break;
                default:
                    throw DataError("png decode: bad scanline filter type " +
                                    std::to_string(ftype));
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

inline void write_png_gray8(const std::string& path, const ImageU8& img) {
    const std::vector<std::uint8_t> bytes = encode_png_gray8(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

inline ImageU8 read_png_gray8(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (!f.good() && !f.eof()) throw IoError("read failed: " + path);
    try {
        return decode_png_gray8(bytes);
    } catch (const Error& e) {
        throw DataError(path + ": " + e.what());
    }
}

// Map bytes to the model's value range: value = pixel / 127.5 - 1. Shape (1, h, w).
inline Tensor tensor_from_image(const ImageU8& img) {
    std::vector<float> v(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        v[i] = static_cast<float>(img.pixels[i]) / 127.5f - 1.0f;
    }
    return Tensor::from_data({1, img.height, img.width}, std::move(v));
}

// Inverse mapping: pixel = round((value + 1) * 127.5), clamped to [0, 255].
inline ImageU8 image_from_floats(const float* v, i64 height, i64 width) {
    ImageU8 img;
    img.height = height;
    img.width = width;
    img.pixels.resize(static_cast<std::size_t>(width * height));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const long q = std::lround((static_cast<double>(v[i]) + 1.0) * 127.5);
        img.pixels[i] = static_cast<std::uint8_t>(q < 0 ? 0 : (q > 255 ? 255 : q));
    }
    return img;
}

// Tensor variant of the inverse mapping. Accepts any shape whose trailing two
// extents are (height, width) with all leading extents equal to 1.
inline ImageU8 image_from_tensor(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() < 2) throw ShapeError("image framing needs at least 2 extents");
    for (std::size_t i = 0; i + 2 < s.size(); ++i) {
        if (s[i] != 1) {
            throw ShapeError("image framing: leading extents must be 1, got extent " +
                             std::to_string(s[i]));
        }
    }
    return image_from_floats(t.data(), s[s.size() - 2], s[s.size() - 1]);
}

}  // namespace echogen
