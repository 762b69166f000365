#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "echogen/checkpoint.hpp"
#include "echogen/error.hpp"
#include "echogen/manifest.hpp"
#include "echogen/ops.hpp"
#include "echogen/optimizer.hpp"
#include "echogen/prompt.hpp"
#include "echogen/rng.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

// Three-way image classifier configuration. The preset picks one of three
// residual CNN trunks of increasing capacity; training hyperparameters ride
// along so a single value describes a full training run.
struct ClassifierConfig {
    std::string preset = "s";  // "s" | "m" | "l"
    i64 side = 64;
    i64 in_channels = 1;
    i64 epochs = 100;
    i64 batch_size = 32;
    float lr = 1e-3f;

    // Channel widths per stage; one stride-2 downsample sits between stages.
    std::vector<i64> widths() const {
        if (preset == "s") return {16, 32};
        if (preset == "m") return {16, 32, 64};
        if (preset == "l") return {24, 48, 96};
        throw ValueError("classifier config: unknown preset \"" + preset + "\"");
    }

    i64 blocks_per_stage() const { return preset == "l" ? 2 : 1; }

    void validate() const {
        const auto w = widths();  // throws on unknown preset
        const i64 downs = static_cast<i64>(w.size()) - 1;
        if (side < 8) throw ValueError("classifier config: side must be at least 8");
        if (side % (i64{1} << downs) != 0)
            throw ValueError("classifier config: side " + std::to_string(side) + " not divisible by 2^" +
                             std::to_string(downs));
        if (in_channels < 1) throw ValueError("classifier config: in_channels must be positive");
        if (epochs < 0) throw ValueError("classifier config: epochs must be non-negative");
        if (batch_size < 1) throw ValueError("classifier config: batch_size must be positive");
        if (!(lr > 0.0f) || !std::isfinite(lr)) throw ValueError("classifier config: lr must be positive");
    }
};

// Residual CNN with a three-way linear head. Parameters live in an ordered
// named registry so checkpoints, digests, and freezing work exactly as they
// do for the denoiser.
class Classifier {
   public:
    Classifier(ClassifierConfig cfg, RngStream rng) : cfg_(std::move(cfg)), rng_(rng.substream("classifier")) {
        cfg_.validate();
        build();
    }
    Classifier(const Classifier&) = delete;
    Classifier& operator=(const Classifier&) = delete;
    Classifier(Classifier&&) = default;
    Classifier& operator=(Classifier&&) = default;

    static constexpr i64 kNumClasses = 3;

    const ClassifierConfig& config() const { return cfg_; }

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

    const Tensor* param(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &params_[it->second].second;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : params_) {
            (void)name;
            t.set_requires_grad(trainable);
        }
    }

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

    // Forward pass plus a handle on the final convolutional feature map (the
    // activation the pooled head reads), for attention mapping.
    struct Capture {
        Tensor logits;       // (N, 3)
        Tensor feature_map;  // (N, C_last, s', s')
    };

    Capture forward_capture(const Tensor& x) const {
        check_input(x);
        Tensor h = conv2d(x, cv("stem.w"), cv("stem.b"), 1, 1);
        const auto w = cfg_.widths();
        const i64 L = static_cast<i64>(w.size());
        for (i64 lv = 0; lv < L; lv++) {
            for (i64 b = 0; b < cfg_.blocks_per_stage(); b++)
                h = res_forward("stage" + std::to_string(lv) + ".block" + std::to_string(b), h);
            if (lv + 1 < L) {
                const std::string p = "stage" + std::to_string(lv) + ".down";
                h = conv2d(h, cv(p + ".w"), cv(p + ".b"), 2, 1);
            }
        }
        Tensor fmap = silu(group_norm(h, cv("head.norm.gamma"), cv("head.norm.beta"), norm_groups(w.back())));
        Tensor pooled = spatial_mean(fmap);
        Tensor logits = add(matmul(pooled, cv("head.fc.w")), cv("head.fc.b"));
        return {logits, fmap};
    }

    Tensor forward(const Tensor& x) const { return forward_capture(x).logits; }

    // Penultimate representation: the pooled feature vector feeding the
    // linear head. (N, C_last).
    Tensor features(const Tensor& x) const {
        Capture c = forward_capture(x);
        return spatial_mean(c.feature_map);
    }

    // Hard predictions for a batch.
    std::vector<std::int32_t> predict(const Tensor& x) const {
        NoGradGuard g;
        return argmax_rows(forward(x));
    }

   private:
    static i64 norm_groups(i64 channels) {
        for (i64 g = 8; g > 1; g--)
            if (channels % g == 0) return g;
        return 1;
    }

    void check_input(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.side || x.dim(3) != cfg_.side)
            throw ShapeError("classifier: input shape " + shape_str(x.shape()) + " does not match configuration");
    }

    const Tensor& cv(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw StateError("classifier: missing parameter " + name);
        return params_[it->second].second;
    }

    Tensor res_forward(const std::string& p, const Tensor& x) const {
        const i64 cin = x.dim(1);
        const i64 cout = cv(p + ".conv1.w").dim(0);
        Tensor h = silu(group_norm(x, cv(p + ".norm1.gamma"), cv(p + ".norm1.beta"), norm_groups(cin)));
        h = conv2d(h, cv(p + ".conv1.w"), cv(p + ".conv1.b"), 1, 1);
        h = silu(group_norm(h, cv(p + ".norm2.gamma"), cv(p + ".norm2.beta"), norm_groups(cout)));
        h = conv2d(h, cv(p + ".conv2.w"), cv(p + ".conv2.b"), 1, 1);
        Tensor skip = cin == cout ? x : conv2d(x, cv(p + ".skip.w"), cv(p + ".skip.b"), 1, 0);
        return add(skip, h);
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

    void add_conv(const std::string& p, i64 cout, i64 cin, i64 kside) {
        add_param(p + ".w", {cout, cin, kside, kside}, std::sqrt(2.0f / static_cast<float>(cin * kside * kside)));
        add_param(p + ".b", {cout}, 0.0f);
    }

    void add_norm(const std::string& p, i64 c) {
        add_ones(p + ".gamma", {c});
        add_param(p + ".beta", {c}, 0.0f);
    }

    void add_res(const std::string& p, i64 cin, i64 cout) {
        add_norm(p + ".norm1", cin);
        add_conv(p + ".conv1", cout, cin, 3);
        add_norm(p + ".norm2", cout);
        add_conv(p + ".conv2", cout, cout, 3);
        if (cin != cout) add_conv(p + ".skip", cout, cin, 1);
    }

    void build() {
        const auto w = cfg_.widths();
        const i64 L = static_cast<i64>(w.size());
        add_conv("stem", w[0], cfg_.in_channels, 3);
        for (i64 lv = 0; lv < L; lv++) {
            for (i64 b = 0; b < cfg_.blocks_per_stage(); b++)
                add_res("stage" + std::to_string(lv) + ".block" + std::to_string(b), w[static_cast<std::size_t>(lv)],
                        w[static_cast<std::size_t>(lv)]);
            if (lv + 1 < L)
                add_conv("stage" + std::to_string(lv) + ".down", w[static_cast<std::size_t>(lv + 1)],
                         w[static_cast<std::size_t>(lv)], 3);
        }
        add_norm("head.norm", w.back());
        add_param("head.fc.w", {w.back(), kNumClasses}, std::sqrt(1.0f / static_cast<float>(w.back())));
        add_param("head.fc.b", {1, kNumClasses}, 0.0f);
    }

    ClassifierConfig cfg_;
    RngStream rng_;
    NamedTensorList params_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

// Per-epoch training record plus the identity of the retained checkpoint.
struct TrainCurves {
    std::vector<float> train_loss;    // mean cross-entropy per epoch
    std::vector<float> val_accuracy;  // measured after each epoch
    i64 best_epoch = 0;               // 0 = initial weights; epochs count from 1
    float best_val_accuracy = 0.0f;
};

namespace detail {

inline Tensor gather_rows(const Tensor& x, const std::vector<i64>& idx) {
    const i64 row = x.numel() / x.dim(0);
    std::vector<float> out(static_cast<std::size_t>(static_cast<i64>(idx.size()) * row));
    for (std::size_t i = 0; i < idx.size(); i++)
        std::copy(x.data() + idx[i] * row, x.data() + (idx[i] + 1) * row,
                  out.begin() + static_cast<std::ptrdiff_t>(i) * row);
    Shape shape = x.shape();
    shape[0] = static_cast<i64>(idx.size());
    return Tensor::from_data(std::move(shape), std::move(out));
}

inline float classifier_accuracy(const Classifier& model, const Tensor& x, const std::vector<std::int32_t>& y,
                                 i64 chunk) {
    NoGradGuard g;
    const i64 N = x.dim(0);
    i64 hits = 0;
    for (i64 off = 0; off < N; off += chunk) {
        std::vector<i64> idx;
        for (i64 i = off; i < std::min(N, off + chunk); i++) idx.push_back(i);
        const auto pred = argmax_rows(model.forward(gather_rows(x, idx)));
        for (std::size_t i = 0; i < idx.size(); i++)
            if (pred[i] == y[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]) hits++;
    }
    return static_cast<float>(static_cast<double>(hits) / static_cast<double>(N));
}

inline std::vector<std::vector<float>> snapshot_params(const Classifier& model) {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : model.params()) {
        (void)name;
        out.emplace_back(t.data(), t.data() + t.numel());
    }
    return out;
}

inline void restore_params(Classifier& model, const std::vector<std::vector<float>>& snap) {
    auto ts = model.param_tensors();
    for (std::size_t i = 0; i < ts.size(); i++) std::copy(snap[i].begin(), snap[i].end(), ts[i].mutable_data());
}

}  // namespace detail

// Supervised training with per-epoch validation; the weights left in the
// model afterwards are those of the epoch with the best validation accuracy
// (earliest epoch wins ties, and the untrained weights count as epoch 0).
inline TrainCurves train_classifier(Classifier& model, const Tensor& train_x, const std::vector<ClassLabel>& train_y,
                                    const Tensor& val_x, const std::vector<ClassLabel>& val_y, std::uint64_t seed) {
    const ClassifierConfig& cfg = model.config();
    const i64 N = train_x.dim(0);
    if (N != static_cast<i64>(train_y.size()) || val_x.dim(0) != static_cast<i64>(val_y.size()))
        throw ShapeError("train_classifier: label count does not match image count");
    if (N == 0) throw ValueError("train_classifier: empty training set");
    if (val_y.empty()) throw ValueError("train_classifier: empty validation set");
    std::set<ClassLabel> seen(train_y.begin(), train_y.end());
    if (seen.size() < 2) throw ValueError("train_classifier: training data contains a single class");

    std::vector<std::int32_t> ty(train_y.size()), vy(val_y.size());
    for (std::size_t i = 0; i < train_y.size(); i++) ty[i] = static_cast<std::int32_t>(train_y[i]);
    for (std::size_t i = 0; i < val_y.size(); i++) vy[i] = static_cast<std::int32_t>(val_y[i]);

    TrainCurves curves;
    curves.best_epoch = 0;
    curves.best_val_accuracy = detail::classifier_accuracy(model, val_x, vy, cfg.batch_size);
    auto best = detail::snapshot_params(model);

    model.set_trainable(true);
    AdamW opt(AdamWConfig{cfg.lr, 0.9f, 0.999f, 1e-8f, 0.0f});
    opt.add_params(model.param_tensors());
    RngStream order = RngStream(seed, "classifier-train").substream("order");

    std::vector<i64> perm(static_cast<std::size_t>(N));
    for (i64 i = 0; i < N; i++) perm[static_cast<std::size_t>(i)] = i;

    for (i64 epoch = 1; epoch <= cfg.epochs; epoch++) {
        for (i64 i = N - 1; i > 0; i--)
            std::swap(perm[static_cast<std::size_t>(i)],
                      perm[static_cast<std::size_t>(order.next_below(static_cast<std::uint64_t>(i) + 1))]);
        double loss_sum = 0.0;
        for (i64 off = 0; off < N; off += cfg.batch_size) {
            std::vector<i64> idx(perm.begin() + off, perm.begin() + std::min(N, off + cfg.batch_size));
            std::vector<std::int32_t> labels;
            labels.reserve(idx.size());
            for (i64 j : idx) labels.push_back(ty[static_cast<std::size_t>(j)]);
            Tensor batch = detail::gather_rows(train_x, idx);
            Tensor loss = cross_entropy_logits(model.forward(batch), labels);
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += static_cast<double>(loss.data()[0]) * static_cast<double>(idx.size());
        }
        curves.train_loss.push_back(static_cast<float>(loss_sum / static_cast<double>(N)));
        const float acc = detail::classifier_accuracy(model, val_x, vy, cfg.batch_size);
        curves.val_accuracy.push_back(acc);
        if (acc > curves.best_val_accuracy) {
            curves.best_val_accuracy = acc;
            curves.best_epoch = epoch;
            best = detail::snapshot_params(model);
        }
    }
    detail::restore_params(model, best);
    return curves;
}

// A trained classifier bundled with its training record.
struct TrainedClassifier {
    Classifier model;
    TrainCurves curves;
};

// Manifest-level entry point: loads the train and val splits at the
// configured side, builds a fresh model from the seed, and trains it.
inline TrainedClassifier train_classifier(const ClassifierConfig& cfg, const DatasetManifest& manifest,
                                          std::uint64_t seed) {
    cfg.validate();
    LoadedSplit train = load_split(manifest, Split::train, cfg.side);
    LoadedSplit val = load_split(manifest, Split::val, cfg.side);
    Classifier model(cfg, RngStream(seed, "classifier-init"));
    TrainCurves curves = train_classifier(model, train.images, train.labels, val.images, val.labels, seed);
    return {std::move(model), std::move(curves)};
}

}  // namespace echogen
