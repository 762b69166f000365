#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "echogen/tensor.hpp"

namespace echogen {

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

// Adam with decoupled weight decay. Parameters are registered once; each step
// validates every gradient before mutating any weight, so a non-finite
// gradient leaves the whole parameter set untouched.
class AdamW {
   public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg_.lr > 0.0f) || !std::isfinite(cfg_.lr)) throw ValueError("adamw: lr must be positive");
        if (cfg_.beta1 < 0.0f || cfg_.beta1 >= 1.0f || cfg_.beta2 < 0.0f || cfg_.beta2 >= 1.0f)
            throw ValueError("adamw: betas must lie in [0,1)");
        if (!(cfg_.eps > 0.0f)) throw ValueError("adamw: eps must be positive");
        if (cfg_.weight_decay < 0.0f) throw ValueError("adamw: weight_decay must be non-negative");
    }

    void add_param(Tensor p) {
        if (!p.defined()) throw ValueError("adamw: undefined parameter");
        if (!p.requires_grad()) throw StateError("adamw: parameter does not require gradients");
        slots_.push_back(Slot{p, std::vector<float>(static_cast<std::size_t>(p.numel()), 0.0f),
                              std::vector<float>(static_cast<std::size_t>(p.numel()), 0.0f)});
    }

    void add_params(const std::vector<Tensor>& ps) {
        for (const auto& p : ps) add_param(p);
    }

    std::size_t param_count() const { return slots_.size(); }
    std::int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }
    void set_lr(float lr) {
        if (!(lr > 0.0f) || !std::isfinite(lr)) throw ValueError("adamw: lr must be positive");
        cfg_.lr = lr;
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    void step() {
        if (slots_.empty()) throw StateError("adamw: no parameters registered");
        for (std::size_t si = 0; si < slots_.size(); si++) {
            const auto& g = slots_[si].param.grad();
            for (float v : g)
                if (!std::isfinite(v))
                    throw ValueError("adamw: non-finite gradient in parameter " + std::to_string(si) +
                                     "; step aborted before any update");
        }
        step_++;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
        for (auto& s : slots_) {
            const auto& g = s.param.grad();
            float* w = s.param.mutable_data();
            const i64 n = s.param.numel();
            for (i64 i = 0; i < n; i++) {
                auto iu = static_cast<std::size_t>(i);
                s.m[iu] = cfg_.beta1 * s.m[iu] + (1.0f - cfg_.beta1) * g[iu];
                s.v[iu] = cfg_.beta2 * s.v[iu] + (1.0f - cfg_.beta2) * g[iu] * g[iu];
                const double mhat = s.m[iu] / bc1;
                const double vhat = s.v[iu] / bc2;
                const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i];
                w[i] = static_cast<float>(w[i] - cfg_.lr * upd);
            }
        }
    }

   private:
    struct Slot {
        Tensor param;
        std::vector<float> m, v;
    };
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::int64_t step_ = 0;
};

}  // namespace echogen
