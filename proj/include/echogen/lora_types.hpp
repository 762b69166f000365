#pragma once

#include <array>
#include <string>
#include <vector>

#include "echogen/ops.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

// One rank-r factor pair overlaying a frozen projection W0 of shape (d x k):
// effective weight = W0 + scale * A * B with A (d x r), B (r x k).
struct LoraLayer {
    std::string path;  // matrix path, e.g. "down.0.xattn.wq"
    i64 d = 0, k = 0, r = 0;
    float scale = 1.0f;
    Tensor A, B;
};

struct LoraAdapterSet {
    std::vector<LoraLayer> layers;  // ordered as enumerated from the model
    i64 rank = 0;
    std::array<std::uint8_t, 32> base_digest{};
    std::uint64_t init_seed = 0;

    const LoraLayer* find(const std::string& path) const {
        for (const auto& l : layers)
            if (l.path == path) return &l;
        return nullptr;
    }
};

// x:(..., d) through the frozen weight plus the low-rank bypass. The bypass
// is evaluated as (x*A)*B, never materializing the d x k update.
inline Tensor lora_linear(const Tensor& x, const Tensor& w0, const LoraLayer* layer) {
    Tensor out = matmul(x, w0);
    if (layer) {
        if (layer->A.dim(0) != w0.dim(0) || layer->B.dim(1) != w0.dim(1))
            throw ShapeError("adapter extents do not match base weight at " + layer->path);
        Tensor delta = matmul(matmul(x, layer->A), layer->B);
        out = add(out, layer->scale == 1.0f ? delta : scale(delta, layer->scale));
    }
    return out;
}

}  // namespace echogen
