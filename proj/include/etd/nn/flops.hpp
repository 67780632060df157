#pragma once

#include <cstdint>

#include "etd/nn/models.hpp"

namespace etd::nn {

// Counting conventions used throughout the compute reports:
//   multiply-accumulate = 2 FLOPs, bias add = 1 FLOP per output element,
//   gate nonlinearity = 1 FLOP per element.

inline uint64_t flops_linear(uint64_t d_in, uint64_t d_out) {
    return 2 * d_in * d_out + d_out;
}

/// Gate matmuls + biases + elementwise combine for one cell step.
inline uint64_t flops_gru_cell(uint64_t d_in, uint64_t d_h) {
    return 3 * (2 * d_in * d_h + 2 * d_h * d_h + d_h) + 7 * d_h;
}

inline uint64_t flops_conv2d(uint64_t out_positions, uint64_t kh, uint64_t kw,
                             uint64_t c_in, uint64_t c_out) {
    return out_positions * (2 * kh * kw * c_in * c_out + c_out);
}

/// Cost of classifying one 100 ms decision step.
inline uint64_t light_step_flops(const LightArch& a = {}) {
    const uint64_t conv1 = flops_conv2d(
        static_cast<uint64_t>(LightArch::kFramesPerStep) * a.n_mels, 3, 3, 1,
        a.conv1_channels);
    const uint64_t conv2 =
        flops_conv2d(static_cast<uint64_t>(a.conv2_out_h()) * a.conv2_out_w(), 3, 3,
                     a.conv1_channels, a.conv2_channels);
    const uint64_t gru = flops_gru_cell(a.gru_input_dim(), a.gru_hidden);
    const uint64_t head = flops_linear(a.gru_hidden, 1) + 1;  // + logistic
    return conv1 + conv2 + gru + head;
}

inline uint64_t light_flops(const LightArch& a, uint64_t n_steps) {
    return n_steps * light_step_flops(a);
}

/// Cost of one server-side classification. The window is always padded or
/// cropped to context_frames, so the count is shape-independent.
inline uint64_t heavy_invocation_flops(const HeavyArch& a = {}) {
    const uint64_t frames = static_cast<uint64_t>(a.context_frames);
    const uint64_t l1 = 2 * frames * flops_gru_cell(a.n_mels, a.hidden);
    const uint64_t l2 = 2 * frames * flops_gru_cell(2ull * a.hidden, a.hidden);
    const uint64_t pool =
        frames * static_cast<uint64_t>(a.pooled_dim()) + a.pooled_dim();
    const uint64_t head = flops_linear(a.pooled_dim(), 2) + 5;  // + softmax
    return l1 + l2 + pool + head;
}

/// For the light model the shape is the number of decision steps; for the
/// heavy model the per-invocation cost is fixed by the context window.
inline uint64_t count_flops(ArchKind kind, uint64_t input_shape) {
    if (kind == ArchKind::Light) return light_flops(LightArch{}, input_shape);
    (void)input_shape;
    return heavy_invocation_flops(HeavyArch{});
}

}  // namespace etd::nn
