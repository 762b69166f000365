#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "echogen/checkpoint.hpp"
#include "echogen/lora_types.hpp"
#include "echogen/ops.hpp"
#include "echogen/rng.hpp"
#include "echogen/sha256.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

struct UNetConfig {
    i64 side = 64;
    i64 in_channels = 1;
    i64 base_width = 64;
    std::vector<i64> channel_mult = {1, 2, 2};
    i64 blocks_per_level = 1;
    i64 d_text = 64;
    i64 d_attn = 64;
    i64 heads = 4;
    i64 time_dim = 128;

    i64 levels() const { return static_cast<i64>(channel_mult.size()); }
    i64 width_at(i64 level) const { return base_width * channel_mult[static_cast<std::size_t>(level)]; }

    void validate() const {
        if (side < 4) throw ValueError("unet config: side too small");
        if (in_channels < 1 || base_width < 1 || blocks_per_level < 1 || d_text < 1 || d_attn < 1 || heads < 1 ||
            time_dim < 2)
            throw ValueError("unet config: all widths must be positive");
        if (channel_mult.empty()) throw ValueError("unet config: need at least one resolution level");
        for (i64 m : channel_mult)
            if (m < 1) throw ValueError("unet config: channel multipliers must be positive");
        const i64 downs = levels() - 1;
        if (side % (i64{1} << downs) != 0)
            throw ValueError("unet config: side " + std::to_string(side) + " not divisible by 2^" +
                             std::to_string(downs));
        if (d_attn % heads != 0) throw ValueError("unet config: d_attn must be divisible by head count");
    }
};

// Adapter-eligible matrix descriptor: W (d x k) at a unique path.
struct AdapterTarget {
    std::string path;
    i64 d = 0, k = 0;
};

namespace detail {

inline i64 norm_groups_for(i64 channels) {
    for (i64 g = 8; g > 1; g--)
        if (channels % g == 0) return g;
    return 1;
}

}  // namespace detail

// Denoising network: a small UNet over pixel images conditioned on a
// sinusoidal timestep embedding and, through cross-attention at every
// resolution, on a text-conditioning sequence.
class UNet {
   public:
    UNet(UNetConfig cfg, RngStream rng) : cfg_(cfg), rng_(rng.substream("unet")) {
        cfg_.validate();
        build();
    }
    UNet(const UNet&) = delete;
    UNet& operator=(const UNet&) = delete;

    const UNetConfig& config() const { return cfg_; }

    // Ordered parameter registry (name -> tensor); order is structural and
    // identical across runs.
    const NamedTensorList& params() const { return params_; }

    std::vector<Tensor> param_tensors() const {
        std::vector<Tensor> out;
        out.reserve(params_.size());
        for (const auto& [n, t] : params_) out.push_back(t);
        return out;
    }

    i64 param_count() const {
        i64 n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    // The four projection matrices of every cross-attention block, in
    // structural order; nothing else accepts adapters.
    std::vector<AdapterTarget> adapter_targets() const {
        std::vector<AdapterTarget> out;
        for (const auto* b : xblocks_) {
            out.push_back({b->path + ".wq", b->wq.dim(0), b->wq.dim(1)});
            out.push_back({b->path + ".wk", b->wk.dim(0), b->wk.dim(1)});
            out.push_back({b->path + ".wv", b->wv.dim(0), b->wv.dim(1)});
            out.push_back({b->path + ".wo", b->wo.dim(0), b->wo.dim(1)});
        }
        return out;
    }

    i64 cross_attention_count() const { return static_cast<i64>(xblocks_.size()); }

    const Tensor* param(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &params_[it->second].second;
    }

    // Attach or clear a set of adapters; the set must outlive the model's use
    // of it. Base parameters are frozen while adapters are attached.
    void set_adapters(const LoraAdapterSet* set) {
        adapters_ = set;
        hook_cache_.clear();
        if (set)
            for (const auto& l : set->layers) hook_cache_[l.path] = &l;
        set_trainable(set == nullptr);
    }

    const LoraAdapterSet* adapters() const { return adapters_; }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : params_) {
            (void)name;
            t.set_requires_grad(trainable);
        }
    }

    // SHA-256 over every parameter buffer (with names and shapes), the
    // frozen-base identity used by adapter provenance checks.
    std::array<std::uint8_t, 32> digest() const {
        Sha256 h;
        for (const auto& [name, t] : params_) {
            h.update(name.data(), name.size());
            const auto& shape = t.shape();
            for (i64 d : shape) {
                const std::uint32_t v = static_cast<std::uint32_t>(d);
                h.update(&v, sizeof v);
            }
            h.update(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float));
        }
        return h.finish();
    }

    // Per-parameter digests, for frozen-base verification.
    std::map<std::string, std::string> param_digests() const {
        std::map<std::string, std::string> out;
        for (const auto& [name, t] : params_) out[name] = t.digest_hex();
        return out;
    }

    void load_state(const NamedTensorList& entries) {
        for (auto& [name, t] : params_) {
            const Tensor* src = find_entry(entries, name);
            if (!src) throw IoError("checkpoint is missing parameter " + name);
            if (src->shape() != t.shape())
                throw IoError("checkpoint parameter " + name + " has shape " + shape_str(src->shape()) +
                              ", expected " + shape_str(t.shape()));
            std::copy(src->data(), src->data() + src->numel(), t.mutable_data());
        }
    }

    // eps-prediction forward pass. z: (N, C, side, side); t: one timestep per
    // sample (>= 0; the schedule owner enforces the upper bound); cond:
    // (N, m, d_text); mask: (N, m) with 1 at real token positions.
    Tensor forward(const Tensor& z, const std::vector<int>& t, const Tensor& cond, const Tensor& mask) const {
        if (z.rank() != 4 || z.dim(1) != cfg_.in_channels || z.dim(2) != cfg_.side || z.dim(3) != cfg_.side)
            throw ShapeError("unet: input shape " + shape_str(z.shape()) + " does not match configuration");
        const i64 N = z.dim(0);
        if (static_cast<i64>(t.size()) != N) throw ShapeError("unet: timestep count does not match batch");
        for (int ti : t)
            if (ti < 0) throw ValueError("unet: negative timestep");
        if (cond.rank() != 3 || cond.dim(0) != N || cond.dim(2) != cfg_.d_text)
            throw ShapeError("unet: conditioning shape " + shape_str(cond.shape()) + " invalid");
        const i64 m = cond.dim(1);
        if (mask.rank() != 2 || mask.dim(0) != N || mask.dim(1) != m)
            throw ShapeError("unet: mask shape " + shape_str(mask.shape()) + " invalid");

        Tensor temb = time_embedding(t);
        Tensor h = conv2d(z, cv("stem.conv.w"), cv("stem.conv.b"), 1, 1);
        std::vector<Tensor> skips;
        const i64 L = cfg_.levels();
        for (i64 lv = 0; lv < L; lv++) {
            const std::string base = "down." + std::to_string(lv);
            for (i64 b = 0; b < cfg_.blocks_per_level; b++) h = res_forward(base + ".res" + std::to_string(b), h, temb);
            h = xattn_forward(base + ".xattn", h, cond, mask);
            skips.push_back(h);
            if (lv + 1 < L) h = conv2d(h, cv(base + ".down.w"), cv(base + ".down.b"), 2, 1);
        }
        h = res_forward("mid.res0", h, temb);
        h = xattn_forward("mid.xattn", h, cond, mask);
        h = res_forward("mid.res1", h, temb);
        for (i64 lv = L - 1; lv >= 0; lv--) {
            const std::string base = "up." + std::to_string(lv);
            if (lv + 1 < L) h = conv2d(upsample_nearest2(h), cv(base + ".up.w"), cv(base + ".up.b"), 1, 1);
            h = concat_channels(h, skips[static_cast<std::size_t>(lv)]);
            for (i64 b = 0; b < cfg_.blocks_per_level; b++) h = res_forward(base + ".res" + std::to_string(b), h, temb);
            h = xattn_forward(base + ".xattn", h, cond, mask);
        }
        // No normalization here: the residual stream carries the input's global
        // (constant) mode to this point, and the prediction must stay linearly
        // sensitive to it or long reverse chains lose their mean correction.
        return conv2d(h, cv("head.conv.w"), cv("head.conv.b"), 1, 1);
    }

    // Standalone cross-attention evaluation used by block-level tests:
    // x (N, n, d_model) attends over cond (N, m, d_text).
    Tensor cross_attention(const std::string& block_path, const Tensor& x, const Tensor& cond,
                           const Tensor& mask) const {
        const XBlock* blk = nullptr;
        for (const auto* b : xblocks_)
            if (b->path == block_path) blk = b;
        if (!blk) throw ValueError("no cross-attention block at path " + block_path);
        return attend(*blk, x, cond, mask);
    }

   private:
    struct XBlock {
        std::string path;
        i64 d_model = 0;
        Tensor norm_gamma, norm_beta;
        Tensor wq, wk, wv, wo;
    };

    Tensor cv(const std::string& name) const {
        const Tensor* t = param(name);
        if (!t) throw StateError("unknown parameter " + name);
        return *t;
    }

    const LoraLayer* hook(const std::string& matrix_path) const {
        auto it = hook_cache_.find(matrix_path);
        return it == hook_cache_.end() ? nullptr : it->second;
    }

    Tensor time_embedding(const std::vector<int>& t) const {
        const i64 N = static_cast<i64>(t.size());
        const i64 half = cfg_.time_dim / 2;
        std::vector<float> sinusoid(static_cast<std::size_t>(N * cfg_.time_dim));
        for (i64 n = 0; n < N; n++)
            for (i64 i = 0; i < half; i++) {
                const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
                sinusoid[static_cast<std::size_t>(n * cfg_.time_dim + i)] =
                    static_cast<float>(std::sin(t[static_cast<std::size_t>(n)] * freq));
                sinusoid[static_cast<std::size_t>(n * cfg_.time_dim + half + i)] =
                    static_cast<float>(std::cos(t[static_cast<std::size_t>(n)] * freq));
            }
        Tensor s = Tensor::from_data({N, cfg_.time_dim}, std::move(sinusoid));
        Tensor h = silu(add(matmul(s, cv("time.fc1.w")), cv("time.fc1.b")));
        return add(matmul(h, cv("time.fc2.w")), cv("time.fc2.b"));
    }

    Tensor res_forward(const std::string& p, const Tensor& x, const Tensor& temb) const {
        const i64 cin = x.dim(1);
        const i64 cout = cv(p + ".conv1.w").dim(0);
        Tensor h = silu(group_norm(x, cv(p + ".norm1.gamma"), cv(p + ".norm1.beta"), detail::norm_groups_for(cin)));
        h = conv2d(h, cv(p + ".conv1.w"), cv(p + ".conv1.b"), 1, 1);
        Tensor tp = add(matmul(temb, cv(p + ".time.w")), cv(p + ".time.b"));
        h = add(h, reshape(tp, {x.dim(0), cout, 1, 1}));
        h = silu(group_norm(h, cv(p + ".norm2.gamma"), cv(p + ".norm2.beta"), detail::norm_groups_for(cout)));
        h = conv2d(h, cv(p + ".conv2.w"), cv(p + ".conv2.b"), 1, 1);
        Tensor skip = cin == cout ? x : conv2d(x, cv(p + ".skip.w"), cv(p + ".skip.b"), 1, 0);
        return add(skip, h);
    }

    Tensor attend(const XBlock& blk, const Tensor& xseq, const Tensor& cond, const Tensor& mask) const {
        const i64 N = xseq.dim(0), n = xseq.dim(1), m = cond.dim(1);
        const i64 H = cfg_.heads, dh = cfg_.d_attn / H;
        for (i64 b = 0; b < N; b++) {
            bool any = false;
            for (i64 j = 0; j < m; j++) any = any || mask.data()[b * m + j] != 0.0f;
            if (!any) throw ValueError("cross-attention mask has no attendable position");
        }
        Tensor q = lora_linear(xseq, blk.wq, hook(blk.path + ".wq"));
        Tensor k = lora_linear(cond, blk.wk, hook(blk.path + ".wk"));
        Tensor v = lora_linear(cond, blk.wv, hook(blk.path + ".wv"));
        auto split = [&](const Tensor& t, i64 len) {
            return reshape(transpose(reshape(t, {N, len, H, dh}), {0, 2, 1, 3}), {N * H, len, dh});
        };
        Tensor Q = split(q, n), K = split(k, m), V = split(v, m);
        Tensor scores = scale(bmm(Q, transpose(K, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(dh)));
        std::vector<float> bias(static_cast<std::size_t>(N * H * m), 0.0f);
        for (i64 b = 0; b < N; b++)
            for (i64 hh = 0; hh < H; hh++)
                for (i64 j = 0; j < m; j++)
                    if (mask.data()[b * m + j] == 0.0f)
                        bias[static_cast<std::size_t>((b * H + hh) * m + j)] = -1e9f;
        scores = add(scores, Tensor::from_data({N * H, 1, m}, std::move(bias)));
        Tensor attn = softmax_lastdim(scores);
        Tensor o = bmm(attn, V);
        o = reshape(transpose(reshape(o, {N, H, n, dh}), {0, 2, 1, 3}), {N, n, cfg_.d_attn});
        return lora_linear(o, blk.wo, hook(blk.path + ".wo"));
    }

    Tensor xattn_forward(const std::string& path, const Tensor& x, const Tensor& cond, const Tensor& mask) const {
        const XBlock* blk = nullptr;
        for (const auto* b : xblocks_)
            if (b->path == path) blk = b;
        if (!blk) throw StateError("missing cross-attention block " + path);
        const i64 N = x.dim(0), C = x.dim(1), Hs = x.dim(2), Ws = x.dim(3);
        Tensor h = group_norm(x, blk->norm_gamma, blk->norm_beta, detail::norm_groups_for(C));
        Tensor seq = transpose(reshape(h, {N, C, Hs * Ws}), {0, 2, 1});
        Tensor o = attend(*blk, seq, cond, mask);
        Tensor img = reshape(transpose(o, {0, 2, 1}), {N, C, Hs, Ws});
        return add(x, img);
    }

    // -- construction ------------------------------------------------------

    Tensor add_param(const std::string& name, Shape shape, float stddev) {
        Tensor t;
        if (stddev == 0.0f) {
            t = Tensor::zeros(std::move(shape), true);
        } else {
            auto sub = rng_.substream(name);
            t = Tensor::randn(std::move(shape), sub, stddev, true);
        }
        by_name_[name] = params_.size();
        params_.emplace_back(name, t);
        return t;
    }

    Tensor add_ones(const std::string& name, Shape shape) {
        Tensor t = Tensor::full(std::move(shape), 1.0f);
        t.set_requires_grad(true);
        by_name_[name] = params_.size();
        params_.emplace_back(name, t);
        return t;
    }

    void add_conv(const std::string& p, i64 cout, i64 cin, i64 kside, bool zero_init = false) {
        const float std_w = zero_init ? 0.0f : std::sqrt(2.0f / static_cast<float>(cin * kside * kside));
        add_param(p + ".w", {cout, cin, kside, kside}, std_w);
        add_param(p + ".b", {cout}, 0.0f);
    }

    void add_linear(const std::string& p, i64 in, i64 out) {
        add_param(p + ".w", {in, out}, std::sqrt(1.0f / static_cast<float>(in)));
        add_param(p + ".b", {1, out}, 0.0f);
    }

    void add_norm(const std::string& p, i64 c) {
        add_ones(p + ".gamma", {c});
        add_param(p + ".beta", {c}, 0.0f);
    }

    void add_res(const std::string& p, i64 cin, i64 cout) {
        add_norm(p + ".norm1", cin);
        add_conv(p + ".conv1", cout, cin, 3);
        add_param(p + ".time.w", {cfg_.time_dim, cout}, std::sqrt(1.0f / static_cast<float>(cfg_.time_dim)));
        add_param(p + ".time.b", {1, cout}, 0.0f);
        add_norm(p + ".norm2", cout);
        add_conv(p + ".conv2", cout, cout, 3);
        if (cin != cout) add_conv(p + ".skip", cout, cin, 1);
    }

    void add_xattn(const std::string& p, i64 c) {
        xblock_store_.push_back({});
        XBlock& blk = xblock_store_.back();
        blk.path = p;
        blk.d_model = c;
        add_norm(p + ".norm", c);
        blk.norm_gamma = cv(p + ".norm.gamma");
        blk.norm_beta = cv(p + ".norm.beta");
        const float sq = std::sqrt(1.0f / static_cast<float>(c));
        const float st = std::sqrt(1.0f / static_cast<float>(cfg_.d_text));
        const float so = std::sqrt(1.0f / static_cast<float>(cfg_.d_attn));
        blk.wq = add_param(p + ".wq", {c, cfg_.d_attn}, sq);
        blk.wk = add_param(p + ".wk", {cfg_.d_text, cfg_.d_attn}, st);
        blk.wv = add_param(p + ".wv", {cfg_.d_text, cfg_.d_attn}, st);
        blk.wo = add_param(p + ".wo", {cfg_.d_attn, c}, so);
    }

    void build() {
        const i64 L = cfg_.levels();
        xblock_store_.reserve(static_cast<std::size_t>(2 * L + 1));
        add_linear("time.fc1", cfg_.time_dim, cfg_.time_dim);
        add_linear("time.fc2", cfg_.time_dim, cfg_.time_dim);
        add_conv("stem.conv", cfg_.width_at(0), cfg_.in_channels, 3);
        for (i64 lv = 0; lv < L; lv++) {
            // the stride-2 conv that ends each level also projects to the next
            // level's width, so every residual block here maps W(lv) -> W(lv)
            const std::string base = "down." + std::to_string(lv);
            for (i64 b = 0; b < cfg_.blocks_per_level; b++)
                add_res(base + ".res" + std::to_string(b), cfg_.width_at(lv), cfg_.width_at(lv));
            add_xattn(base + ".xattn", cfg_.width_at(lv));
            if (lv + 1 < L) add_conv(base + ".down", cfg_.width_at(lv + 1), cfg_.width_at(lv), 3);
        }
        const i64 cm = cfg_.width_at(L - 1);
        add_res("mid.res0", cm, cm);
        add_xattn("mid.xattn", cm);
        add_res("mid.res1", cm, cm);
        for (i64 lv = L - 1; lv >= 0; lv--) {
            const std::string base = "up." + std::to_string(lv);
            const i64 c = cfg_.width_at(lv);
            if (lv + 1 < L) add_conv(base + ".up", c, cfg_.width_at(lv + 1), 3);
            for (i64 b = 0; b < cfg_.blocks_per_level; b++)
                add_res(base + ".res" + std::to_string(b), b == 0 ? 2 * c : c, c);
            add_xattn(base + ".xattn", c);
        }
        add_conv("head.conv", cfg_.in_channels, cfg_.width_at(0), 3, /*zero_init=*/true);
        for (auto& blk : xblock_store_) xblocks_.push_back(&blk);
    }

    UNetConfig cfg_;
    RngStream rng_;
    NamedTensorList params_;
    std::map<std::string, std::size_t> by_name_;
    std::vector<XBlock> xblock_store_;
    std::vector<XBlock*> xblocks_;
    const LoraAdapterSet* adapters_ = nullptr;
    std::map<std::string, const LoraLayer*> hook_cache_;
};

}  // namespace echogen
