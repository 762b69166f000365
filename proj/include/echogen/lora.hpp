#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "echogen/lora_types.hpp"
#include "echogen/unet.hpp"

namespace echogen {

inline constexpr std::uint32_t kAdapterFileVersion = 1;

namespace detail {

inline void check_rank(i64 rank, i64 d, i64 k, const std::string& path) {
    if (rank < 1) throw ValueError("adapter rank must be at least 1");
    if (rank >= std::min(d, k))
        throw ValueError("adapter rank " + std::to_string(rank) + " not below min(d,k)=" +
                         std::to_string(std::min(d, k)) + " at " + path);
}

}  // namespace detail

// Create one rank-r factor pair per adapter-eligible matrix and instrument
// the model with them; base parameters freeze. A draws from a zero-mean
// Gaussian (std 0.01), B starts at zero, so the instrumented forward pass
// initially equals the base model exactly.
inline std::unique_ptr<LoraAdapterSet> lora_attach(UNet& model, i64 rank, std::uint64_t init_seed) {
    auto targets = model.adapter_targets();
    if (targets.empty()) throw StateError("model has no cross-attention blocks to adapt");
    for (const auto& t : targets) detail::check_rank(rank, t.d, t.k, t.path);
    auto set = std::make_unique<LoraAdapterSet>();
    set->rank = rank;
    set->init_seed = init_seed;
    set->base_digest = model.digest();
    RngStream rng(init_seed, "lora-init");
    for (const auto& t : targets) {
        LoraLayer layer;
        layer.path = t.path;
        layer.d = t.d;
        layer.k = t.k;
        layer.r = rank;
        layer.scale = 1.0f;
        auto sub = rng.substream(t.path);
        layer.A = Tensor::randn({t.d, rank}, sub, 0.01f, true);
        layer.B = Tensor::zeros({rank, t.k}, true);
        set->layers.push_back(std::move(layer));
    }
    model.set_adapters(set.get());
    return set;
}

inline std::vector<Tensor> adapter_params(const LoraAdapterSet& set) {
    std::vector<Tensor> out;
    out.reserve(set.layers.size() * 2);
    for (const auto& l : set.layers) {
        out.push_back(l.A);
        out.push_back(l.B);
    }
    return out;
}

inline void verify_adapter_provenance(const UNet& model, const LoraAdapterSet& set) {
    if (set.base_digest != model.digest())
        throw StateError("adapter set was created for a different base model (digest mismatch)");
}

// Bake every layer's scale*A*B into the base weights; the model stops using
// the adapter hooks and behaves as a plain network.
inline void lora_merge(UNet& model, const LoraAdapterSet& set) {
    verify_adapter_provenance(model, set);
    model.set_adapters(nullptr);
    for (const auto& l : set.layers) {
        const std::string weight_name = l.path;
        const Tensor* w = model.param(weight_name);
        if (!w) throw StateError("model has no weight at adapter path " + weight_name);
        if (w->dim(0) != l.d || w->dim(1) != l.k)
            throw ShapeError("adapter extents do not match base weight at " + weight_name);
        Tensor wt = *w;
        float* pw = wt.mutable_data();
        detail::ECMap A(l.A.data(), l.d, l.r), B(l.B.data(), l.r, l.k);
        detail::EMat delta = A * B;
        for (i64 i = 0; i < l.d * l.k; i++) pw[i] += l.scale * delta.data()[i];
    }
}

// Inverse of merge on an already-merged model.
inline void lora_unmerge(UNet& model, const LoraAdapterSet& set) {
    for (const auto& l : set.layers) {
        const Tensor* w = model.param(l.path);
        if (!w) throw StateError("model has no weight at adapter path " + l.path);
        Tensor wt = *w;
        float* pw = wt.mutable_data();
        detail::ECMap A(l.A.data(), l.d, l.r), B(l.B.data(), l.r, l.k);
        detail::EMat delta = A * B;
        for (i64 i = 0; i < l.d * l.k; i++) pw[i] -= l.scale * delta.data()[i];
    }
}

struct ParameterAccounting {
    i64 trainable = 0;
    i64 frozen = 0;
    double fraction = 0.0;
};

// Closed form sum r*(d+k) over layers, against a frozen total.
inline ParameterAccounting accounting_from_dims(const std::vector<std::pair<i64, i64>>& dims, i64 rank,
                                                i64 frozen_total) {
    if (frozen_total <= 0) throw ValueError("accounting: frozen total must be positive");
    ParameterAccounting acc;
    for (const auto& [d, k] : dims) {
        detail::check_rank(rank, d, k, "(" + std::to_string(d) + "x" + std::to_string(k) + ")");
        acc.trainable += rank * (d + k);
    }
    acc.frozen = frozen_total;
    acc.fraction = static_cast<double>(acc.trainable) / static_cast<double>(acc.frozen);
    return acc;
}

inline ParameterAccounting parameter_accounting(const UNet& model, const LoraAdapterSet& set) {
    std::vector<std::pair<i64, i64>> dims;
    i64 enumerated = 0;
    for (const auto& l : set.layers) {
        dims.emplace_back(l.d, l.k);
        enumerated += l.A.numel() + l.B.numel();
    }
    ParameterAccounting acc = accounting_from_dims(dims, set.rank, model.param_count());
    if (acc.trainable != enumerated)
        throw StateError("adapter accounting mismatch: closed form " + std::to_string(acc.trainable) +
                         " vs enumerated " + std::to_string(enumerated));
    return acc;
}

// ---------------------------------------------------------------------------
// Adapter file: magic "USLR", version, rank, base digest, layer count, per
// layer (path, d, k, A, B), trailing CRC32 of all preceding bytes.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& buf, std::uint16_t v) {
    buf.push_back(static_cast<std::uint8_t>(v));
    buf.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; i++) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& buf, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(buf, u);
}

class BufReader {
   public:
    BufReader(const std::uint8_t* p, std::size_t n, std::string origin) : p_(p), n_(n), origin_(std::move(origin)) {}
    void need(std::size_t n) const {
        if (pos_ + n > n_) throw IoError("truncated adapter file " + origin_);
    }
    std::uint16_t u16() {
        need(2);
        const std::uint16_t v = static_cast<std::uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; i++) v |= static_cast<std::uint32_t>(p_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() {
        const std::uint32_t u = u32();
        float f;
        std::memcpy(&f, &u, 4);
        return f;
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, p_ + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }

   private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
    std::string origin_;
};

}  // namespace detail

inline void save_adapters(const std::filesystem::path& path, const LoraAdapterSet& set) {
    if (set.layers.empty()) throw ValueError("refusing to save an empty adapter set");
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), {'U', 'S', 'L', 'R'});
    detail::put_u32(buf, kAdapterFileVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(set.rank));
    buf.insert(buf.end(), set.base_digest.begin(), set.base_digest.end());
    detail::put_u32(buf, static_cast<std::uint32_t>(set.layers.size()));
    for (const auto& l : set.layers) {
        if (l.path.empty() || l.path.size() > 0xFFFF) throw ValueError("adapter path length invalid: " + l.path);
        detail::put_u16(buf, static_cast<std::uint16_t>(l.path.size()));
        buf.insert(buf.end(), l.path.begin(), l.path.end());
        detail::put_u32(buf, static_cast<std::uint32_t>(l.d));
        detail::put_u32(buf, static_cast<std::uint32_t>(l.k));
        for (i64 i = 0; i < l.A.numel(); i++) detail::put_f32(buf, l.A.data()[i]);
        for (i64 i = 0; i < l.B.numel(); i++) detail::put_f32(buf, l.B.data()[i]);
    }
    const auto crc = static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), buf.data(), static_cast<uInt>(buf.size())));
    detail::put_u32(buf, crc);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("short write to " + path.string());
}

inline LoraAdapterSet load_adapters(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for reading");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 52) throw IoError("truncated adapter file " + path.string());
    const std::size_t body = buf.size() - 4;
    const auto crc = static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), buf.data(), static_cast<uInt>(body)));
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; i++) stored |= static_cast<std::uint32_t>(buf[body + static_cast<std::size_t>(i)]) << (8 * i);
    if (crc != stored) throw IoError("checksum mismatch in adapter file " + path.string());
    detail::BufReader r(buf.data(), body, path.string());
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "USLR", 4) != 0) throw IoError("bad magic in " + path.string() + "; not an adapter file");
    const std::uint32_t version = r.u32();
    if (version != kAdapterFileVersion)
        throw IoError("unsupported adapter file version " + std::to_string(version) + " in " + path.string());
    LoraAdapterSet set;
    set.rank = static_cast<i64>(r.u32());
    r.bytes(set.base_digest.data(), 32);
    const std::uint32_t count = r.u32();
    if (count == 0) throw IoError("adapter file " + path.string() + " has no layers");
    std::set<std::string> seen;
    for (std::uint32_t li = 0; li < count; li++) {
        LoraLayer l;
        const std::uint16_t plen = r.u16();
        l.path.resize(plen);
        r.bytes(l.path.data(), plen);
        if (!seen.insert(l.path).second) throw IoError("duplicate adapter path " + l.path + " in " + path.string());
        l.d = static_cast<i64>(r.u32());
        l.k = static_cast<i64>(r.u32());
        l.r = set.rank;
        l.scale = 1.0f;
        detail::check_rank(l.r, l.d, l.k, l.path);
        std::vector<float> a(static_cast<std::size_t>(l.d * l.r)), b(static_cast<std::size_t>(l.r * l.k));
        for (auto& v : a) v = r.f32();
        for (auto& v : b) v = r.f32();
        l.A = Tensor::from_data({l.d, l.r}, std::move(a), true);
        l.B = Tensor::from_data({l.r, l.k}, std::move(b), true);
        set.layers.push_back(std::move(l));
    }
    if (r.pos() != body) throw IoError("trailing bytes in adapter file " + path.string());
    return set;
}

}  // namespace echogen
