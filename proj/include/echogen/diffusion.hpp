#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "echogen/lora_types.hpp"
#include "echogen/ops.hpp"
#include "echogen/optimizer.hpp"
#include "echogen/rng.hpp"
#include "echogen/schedule.hpp"
#include "echogen/unet.hpp"

namespace echogen {

// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps, for one shared t in [0, T).
inline Tensor forward_noise(const NoiseSchedule& sched, const Tensor& z0, int t, const Tensor& eps) {
    sched.check_t(t);
    if (z0.shape() != eps.shape()) throw ShapeError("noise shape does not match the clean batch");
    const double abar = sched.alpha_bar[static_cast<std::size_t>(t)];
    const float a = static_cast<float>(std::sqrt(abar));
    const float b = static_cast<float>(std::sqrt(1.0 - abar));
    return add(scale(z0, a), scale(eps, b));
}

// Same closed form with an independent timestep per batch element.
inline Tensor forward_noise_batch(const NoiseSchedule& sched, const Tensor& z0, const std::vector<int>& ts,
                                  const Tensor& eps) {
    if (z0.rank() != 4) throw ShapeError("clean batch must be rank 4");
    if (static_cast<i64>(ts.size()) != z0.dim(0)) throw ShapeError("one timestep per batch element required");
    if (z0.shape() != eps.shape()) throw ShapeError("noise shape does not match the clean batch");
    const i64 n = z0.dim(0), per = z0.numel() / z0.dim(0);
    std::vector<float> ca(static_cast<std::size_t>(z0.numel())), cb(ca.size());
    for (i64 i = 0; i < n; i++) {
        const int t = ts[static_cast<std::size_t>(i)];
        sched.check_t(t);
        const double abar = sched.alpha_bar[static_cast<std::size_t>(t)];
        const float a = static_cast<float>(std::sqrt(abar));
        const float b = static_cast<float>(std::sqrt(1.0 - abar));
        std::fill_n(ca.begin() + i * per, per, a);
        std::fill_n(cb.begin() + i * per, per, b);
    }
    Tensor wa = Tensor::from_data(z0.shape(), std::move(ca));
    Tensor wb = Tensor::from_data(z0.shape(), std::move(cb));
    return add(mul(z0, wa), mul(eps, wb));
}

// Mean squared noise-prediction error over every element of the batch.
inline Tensor diffusion_loss(const Tensor& predicted, const Tensor& actual) {
    if (predicted.shape() != actual.shape()) throw ShapeError("prediction and target shapes differ");
    return mean_square(sub(predicted, actual));
}

struct TrainConfig {
    int epochs = 1;
    i64 batch_size = 8;
    float lr = 1e-4f;
    float weight_decay = 0.0f;
    std::uint64_t seed = 0;
    // Called after each epoch with (epoch index, mean loss over its batches).
    std::function<void(int, double)> on_epoch;
};

struct TrainStats {
    std::vector<double> epoch_loss;
    i64 steps = 0;
};

// Conditioned denoiser training. `cond`/`mask` are the encoded prompts for
// each image (row-aligned with `images`). When an adapter set is attached the
// optimizer sees only its factors plus any extra trainable tensors supplied;
// the base stays bitwise frozen.
inline TrainStats train_denoiser(UNet& model, const NoiseSchedule& sched, const Tensor& images, const Tensor& cond,
                                 const Tensor& mask, const TrainConfig& cfg, LoraAdapterSet* adapters = nullptr,
                                 const std::vector<Tensor>& extra_trainable = {}) {
    if (images.rank() != 4) throw ShapeError("training images must be rank 4");
    if (images.dim(0) < 1) throw ValueError("training set must be nonempty");
    if (cond.rank() != 3 || cond.dim(0) != images.dim(0)) throw ShapeError("conditioning rows must align with images");
    if (mask.rank() != 2 || mask.dim(0) != images.dim(0) || mask.dim(1) != cond.dim(1))
        throw ShapeError("mask rows must align with conditioning");
    if (cfg.epochs < 0) throw ValueError("epoch count must be non-negative");
    if (cfg.batch_size < 1) throw ValueError("batch size must be positive");

    std::vector<Tensor> trainable;
    if (adapters) {
        model.set_trainable(false);
        for (auto& l : adapters->layers) {
            l.A.set_requires_grad(true);
            l.B.set_requires_grad(true);
            trainable.push_back(l.A);
            trainable.push_back(l.B);
        }
    } else {
        model.set_trainable(true);
        trainable = model.param_tensors();
    }
    for (const auto& t : extra_trainable) trainable.push_back(t);
    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;
    AdamW opt(oc);
    opt.add_params(trainable);

    TrainStats stats;
    if (cfg.epochs == 0) return stats;

    const i64 n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const i64 per = c * h * w;
    const i64 cper = cond.dim(1) * cond.dim(2);
    const i64 mper = mask.dim(1);
    RngStream order_rng(cfg.seed, "train/order");
    RngStream t_rng(cfg.seed, "train/timestep");
    RngStream eps_rng(cfg.seed, "train/noise");

    std::vector<i64> index(static_cast<std::size_t>(n));
    std::iota(index.begin(), index.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        // Fisher-Yates with the dedicated order stream.
        for (i64 i = n - 1; i > 0; i--) {
            const i64 j = static_cast<i64>(order_rng.next_below(static_cast<std::uint64_t>(i + 1)));
            std::swap(index[static_cast<std::size_t>(i)], index[static_cast<std::size_t>(j)]);
        }
        double loss_sum = 0.0;
        i64 batches = 0;
        for (i64 start = 0; start < n; start += cfg.batch_size) {
            const i64 bs = std::min(cfg.batch_size, n - start);
            std::vector<float> xb(static_cast<std::size_t>(bs * per));
            std::vector<float> cb(static_cast<std::size_t>(bs * cper));
            std::vector<float> mb(static_cast<std::size_t>(bs * mper));
            std::vector<int> ts(static_cast<std::size_t>(bs));
            for (i64 bi = 0; bi < bs; bi++) {
                const i64 src = index[static_cast<std::size_t>(start + bi)];
                std::copy_n(images.data() + src * per, per, xb.begin() + bi * per);
                std::copy_n(cond.data() + src * cper, cper, cb.begin() + bi * cper);
                std::copy_n(mask.data() + src * mper, mper, mb.begin() + bi * mper);
                ts[static_cast<std::size_t>(bi)] = static_cast<int>(t_rng.next_below(static_cast<std::uint64_t>(sched.T)));
            }
            Tensor x0 = Tensor::from_data({bs, c, h, w}, std::move(xb));
            Tensor cc = Tensor::from_data({bs, cond.dim(1), cond.dim(2)}, std::move(cb));
            Tensor mm = Tensor::from_data({bs, mper}, std::move(mb));
            Tensor eps = Tensor::randn({bs, c, h, w}, eps_rng);
            Tensor zt = forward_noise_batch(sched, x0, ts, eps);
            Tensor pred = model.forward(zt, ts, cc, mm);
            Tensor loss = diffusion_loss(pred, eps);
            const double lv = static_cast<double>(loss.data()[0]);
            if (!std::isfinite(lv)) throw StateError("training loss became non-finite; stopping");
            opt.zero_grad();
            loss.backward();
            opt.step();
            loss_sum += lv;
            batches++;
            stats.steps++;
        }
        const double mean_loss = loss_sum / static_cast<double>(batches);
        stats.epoch_loss.push_back(mean_loss);
        if (cfg.on_epoch) cfg.on_epoch(epoch, mean_loss);
    }
    return stats;
}

struct SampleConfig {
    i64 count = 1;
    int stride = 1;
    std::uint64_t seed = 0;
    std::string stream_label = "sample";
    // First image's substream index; lets a chunked run reproduce one big batch.
    i64 index_offset = 0;
};

// Ancestral reverse process: z_{t-1} = (z_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t)
// + sqrt(beta_t) xi, walking t from T-1 down to 0 (strided walks still end at 0);
// the step at t=0 adds no noise. Each image draws from its own counter-based
// substream, so a batched run and a one-at-a-time run produce identical pixels.
// Output is clamped to [-1, 1] only after the final step.
inline Tensor sample_images(const UNet& model, const NoiseSchedule& sched, const Tensor& cond, const Tensor& mask,
                            const SampleConfig& cfg) {
    if (cfg.count < 1) throw ValueError("sample count must be positive");
    if (cfg.stride < 1) throw ValueError("stride must be positive");
    if (cond.rank() != 3) throw ShapeError("conditioning must be rank 3");
    if (cond.dim(0) != cfg.count && cond.dim(0) != 1)
        throw ShapeError("conditioning rows must cover the batch (or be a single shared row)");
    NoGradGuard ng;
    const auto& mc = model.config();
    const i64 n = cfg.count, c = mc.in_channels, h = mc.side, w = mc.side;
    const i64 per = c * h * w;

    // Broadcast a single prompt row over the batch when asked for.
    Tensor cc = cond, mm = mask;
    if (cond.dim(0) == 1 && n > 1) {
        const i64 cper = cond.dim(1) * cond.dim(2), mper = mask.dim(1);
        std::vector<float> cb(static_cast<std::size_t>(n * cper));
        std::vector<float> mb(static_cast<std::size_t>(n * mper));
        for (i64 i = 0; i < n; i++) {
            std::copy_n(cond.data(), cper, cb.begin() + i * cper);
            std::copy_n(mask.data(), mper, mb.begin() + i * mper);
        }
        cc = Tensor::from_data({n, cond.dim(1), cond.dim(2)}, std::move(cb));
        mm = Tensor::from_data({n, mper}, std::move(mb));
    }

    std::vector<RngStream> streams;
    streams.reserve(static_cast<std::size_t>(n));
    RngStream root(cfg.seed, cfg.stream_label);
    for (i64 i = 0; i < n; i++) streams.push_back(root.substream("image/" + std::to_string(cfg.index_offset + i)));

    std::vector<float> z(static_cast<std::size_t>(n * per));
    for (i64 i = 0; i < n; i++)
        for (i64 j = 0; j < per; j++)
            z[static_cast<std::size_t>(i * per + j)] = streams[static_cast<std::size_t>(i)].next_gaussian();

    std::vector<int> visited;
    for (int t = sched.T - 1; t >= 0; t -= cfg.stride) visited.push_back(t);
    if (visited.back() != 0) visited.push_back(0);

    for (std::size_t si = 0; si < visited.size(); si++) {
        const int t = visited[si];
        const bool last = (si + 1 == visited.size());
        Tensor zt = Tensor::from_data({n, c, h, w}, z);
        Tensor eps_hat = model.forward(zt, std::vector<int>(static_cast<std::size_t>(n), t), cc, mm);
        const double beta = sched.beta[static_cast<std::size_t>(t)];
        const double alpha = sched.alpha[static_cast<std::size_t>(t)];
        const double abar = sched.alpha_bar[static_cast<std::size_t>(t)];
        const float k_eps = static_cast<float>(beta / std::sqrt(1.0 - abar));
        const float k_div = static_cast<float>(1.0 / std::sqrt(alpha));
        const float k_noise = static_cast<float>(std::sqrt(beta));
        const float* pe = eps_hat.data();
        for (i64 i = 0; i < n; i++) {
            for (i64 j = 0; j < per; j++) {
                const auto idx = static_cast<std::size_t>(i * per + j);
                float v = (z[idx] - k_eps * pe[idx]) * k_div;
                if (!last) v += k_noise * streams[static_cast<std::size_t>(i)].next_gaussian();
                z[idx] = v;
            }
        }
    }
    for (auto& v : z) v = std::clamp(v, -1.0f, 1.0f);
    return Tensor::from_data({n, c, h, w}, std::move(z));
}

}  // namespace echogen
