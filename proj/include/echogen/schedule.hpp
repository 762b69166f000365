#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "echogen/checkpoint.hpp"
#include "echogen/error.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

// Linear-ramp variance schedule for the forward corruption process.
// beta[t] for t in [0, T); alpha = 1 - beta; alpha_bar = running product.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar;

    static NoiseSchedule linear(int T, double beta1 = 1e-4, double betaT = 0.02) {
        if (T < 2) throw ValueError("schedule: need at least 2 timesteps, got " + std::to_string(T));
        if (!(beta1 > 0.0) || !(betaT < 1.0) || betaT < beta1)
            throw ValueError("schedule: need 0 < beta1 <= betaT < 1");
        NoiseSchedule s;
        s.T = T;
        s.beta.resize(static_cast<std::size_t>(T));
        s.alpha.resize(static_cast<std::size_t>(T));
        s.alpha_bar.resize(static_cast<std::size_t>(T));
        double prod = 1.0;
        for (int t = 0; t < T; t++) {
            s.beta[static_cast<std::size_t>(t)] = beta1 + (betaT - beta1) * t / (T - 1);
            s.alpha[static_cast<std::size_t>(t)] = 1.0 - s.beta[static_cast<std::size_t>(t)];
            prod *= s.alpha[static_cast<std::size_t>(t)];
            s.alpha_bar[static_cast<std::size_t>(t)] = prod;
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (T < 2 || beta.size() != static_cast<std::size_t>(T) || alpha.size() != static_cast<std::size_t>(T) ||
            alpha_bar.size() != static_cast<std::size_t>(T))
            throw ValueError("schedule: inconsistent lengths");
        double prod = 1.0;
        for (int t = 0; t < T; t++) {
            const auto tu = static_cast<std::size_t>(t);
            if (!(beta[tu] > 0.0) || !(beta[tu] < 1.0)) throw ValueError("schedule: beta out of (0,1)");
            if (t > 0 && beta[tu] < beta[static_cast<std::size_t>(t - 1)])
                throw ValueError("schedule: beta must be nondecreasing");
            if (std::abs(alpha[tu] - (1.0 - beta[tu])) > 1e-12) throw ValueError("schedule: alpha != 1 - beta");
            prod *= alpha[tu];
            if (std::abs(alpha_bar[tu] - prod) > 1e-6) throw ValueError("schedule: alpha_bar drifts from the product");
            if (t > 0 && !(alpha_bar[tu] < alpha_bar[static_cast<std::size_t>(t - 1)]))
                throw ValueError("schedule: alpha_bar must strictly decrease");
        }
    }

    // Serialized inside the checkpoint container under reserved names.
    static constexpr const char* kBetaEntry = "__schedule.beta";

    void append_entries(NamedTensorList& out) const {
        std::vector<float> b(beta.begin(), beta.end());
        out.emplace_back(kBetaEntry, Tensor::from_data({T}, std::move(b)));
    }

    static NoiseSchedule from_entries(const NamedTensorList& entries) {
        const Tensor* b = find_entry(entries, kBetaEntry);
        if (!b) throw IoError("checkpoint has no stored noise schedule");
        NoiseSchedule s;
        s.T = static_cast<int>(b->numel());
        s.beta.assign(b->data(), b->data() + b->numel());
        s.alpha.resize(s.beta.size());
        s.alpha_bar.resize(s.beta.size());
        double prod = 1.0;
        for (std::size_t t = 0; t < s.beta.size(); t++) {
            s.alpha[t] = 1.0 - s.beta[t];
            prod *= s.alpha[t];
            s.alpha_bar[t] = prod;
        }
        s.validate();
        return s;
    }

    void check_t(int t) const {
        if (t < 0 || t >= T)
            throw ValueError("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + ")");
    }
};

}  // namespace echogen
