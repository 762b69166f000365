#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "echogen/classifier.hpp"
#include "echogen/error.hpp"
#include "echogen/ops.hpp"
#include "echogen/prompt.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

namespace detail {

// Bilinear resize of a single-channel map (no corner alignment).
inline std::vector<float> bilinear_resize(const std::vector<float>& src, i64 sh, i64 sw, i64 dh, i64 dw) {
    std::vector<float> dst(static_cast<std::size_t>(dh * dw));
    for (i64 oy = 0; oy < dh; oy++) {
        const double fy = (static_cast<double>(oy) + 0.5) * static_cast<double>(sh) / static_cast<double>(dh) - 0.5;
        const i64 y0 = std::clamp<i64>(static_cast<i64>(std::floor(fy)), 0, sh - 1);
        const i64 y1 = std::min<i64>(y0 + 1, sh - 1);
        const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
        for (i64 ox = 0; ox < dw; ox++) {
            const double fx =
                (static_cast<double>(ox) + 0.5) * static_cast<double>(sw) / static_cast<double>(dw) - 0.5;
            const i64 x0 = std::clamp<i64>(static_cast<i64>(std::floor(fx)), 0, sw - 1);
            const i64 x1 = std::min<i64>(x0 + 1, sw - 1);
            const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
            const double top = (1.0 - wx) * src[static_cast<std::size_t>(y0 * sw + x0)] +
                               wx * src[static_cast<std::size_t>(y0 * sw + x1)];
            const double bot = (1.0 - wx) * src[static_cast<std::size_t>(y1 * sw + x0)] +
                               wx * src[static_cast<std::size_t>(y1 * sw + x1)];
            dst[static_cast<std::size_t>(oy * dw + ox)] = static_cast<float>((1.0 - wy) * top + wy * bot);
        }
    }
    return dst;
}

}  // namespace detail

// Saliency map for one image and one target class: gradients of the target
// logit are pooled per channel into weights, combined with the final
// convolutional activations, clipped at zero, upsampled to the input side,
// and scaled so the peak is 1 (a vanished map stays all-zero).
inline Tensor grad_cam(const Classifier& model, const Tensor& image, ClassLabel target) {
    if (image.rank() != 4 || image.dim(0) != 1)
        throw ShapeError("attention map: expected a single (1, c, side, side) image, got " +
                         shape_str(image.shape()));

    Tensor x = image.clone();
    x.set_requires_grad(true);
    const Classifier::Capture cap = model.forward_capture(x);

    std::vector<float> pick(3, 0.0f);
    pick[static_cast<std::size_t>(target)] = 1.0f;
    Tensor score = sum_all(mul(cap.logits, Tensor::from_data({1, 3}, std::move(pick))));
    score.backward();

    const i64 C = cap.feature_map.dim(1), h = cap.feature_map.dim(2), w = cap.feature_map.dim(3);
    const auto& grad = cap.feature_map.grad();
    const float* act = cap.feature_map.data();
    const i64 hw = h * w;

    std::vector<float> cam(static_cast<std::size_t>(hw), 0.0f);
    for (i64 c = 0; c < C; c++) {
        double weight = 0.0;
        for (i64 i = 0; i < hw; i++) weight += grad[static_cast<std::size_t>(c * hw + i)];
        weight /= static_cast<double>(hw);
        for (i64 i = 0; i < hw; i++)
            cam[static_cast<std::size_t>(i)] += static_cast<float>(weight) * act[c * hw + i];
    }
    for (auto& v : cam) v = std::max(v, 0.0f);

    const i64 side = model.config().side;
    std::vector<float> up = detail::bilinear_resize(cam, h, w, side, side);
    float mx = 0.0f;
    for (float v : up) mx = std::max(mx, v);
    if (mx > 0.0f)
        for (auto& v : up) v = std::min(v / mx, 1.0f);

    // Backward above accumulates into any trainable parameters; leave the
    // model as it was found.
    for (auto t : model.param_tensors())
        if (t.requires_grad() && t.has_grad()) t.zero_grad();

    return Tensor::from_data({side, side}, std::move(up));
}

}  // namespace echogen
