#pragma once

#include <cstdint>

#include "dtdy/rng.hpp"
#include "dtdy/tensor.hpp"

namespace dtdy {

/// Rank of the dynamic residual: round(sqrt(2*c_in + 2*c_out)), at least 1.
std::int64_t latent_dim(std::int64_t c_in, std::int64_t c_out);

/// Generator bottleneck width: round((c_in + f_nom) * r), at least 1.
std::int64_t phi_hidden_dim(std::int64_t c_in, std::int64_t f_nom, double r);

/// Decomposed temporal dynamic convolution: per output time bin the kernel is
/// W(t) = W0 + P * Phi(t) * Q^T, with Phi produced from per-time-bin pooled
/// statistics of the input. Q acts as a k x k convolution into the latent
/// space, P as a 1 x 1 convolution out of it.
struct DtdyConvParams {
    Tensor w0;     // [C_out, C_in, k, k]
    Tensor q;      // [L, C_in, k, k]
    Tensor p;      // [C_out, L, 1, 1]
    Tensor fc1_w;  // [H, C_in + F_nom]
    Tensor fc1_b;  // [H]
    Tensor fc2_w;  // [L*L, H], zero at init so the layer starts static
    Tensor fc2_b;  // [L*L], zero at init
    Conv2dGeom geom;
    std::int64_t c_in = 0, c_out = 0, k = 3;
    std::int64_t f_nom = 0;  // frequency size the generator was built for
    std::int64_t latent = 0, hidden = 0;
    double r = 0.125;
};

DtdyConvParams make_dtdy_conv(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t f_nom,
                              double r, const Conv2dGeom& geom, Rng& rng);

/// Per-time-bin descriptor: concat(mean over channels [F], mean over freq [C]).
/// x: [B, C, F, T] -> [B, T, C+F].
Tensor time_descriptor(const Tensor& x);

/// [B, T, L, L]; two affine layers with a ReLU bottleneck, linear output.
/// Rejects inputs whose frequency size differs from f_nom.
Tensor phi_generator(const Tensor& x, const DtdyConvParams& p);

/// Factored path with an explicit Phi (tests force Phi = 0 or identity).
/// phi: [B, T, L, L] on input time bins; sampled at t' * stride_t.
Tensor dtdy_apply(const Tensor& x, const DtdyConvParams& p, const Tensor& phi);

Tensor dtdy_forward(const Tensor& x, const DtdyConvParams& p);

/// Reference path: assembles the full C_out x C_in x k x k kernel per output
/// time bin and convolves directly. Plain loops, no shared code with the
/// factored path; for equivalence tests on small shapes.
Tensor dtdy_explicit_oracle(const Tensor& x, const DtdyConvParams& p);
Tensor dtdy_explicit_with_phi(const Tensor& x, const DtdyConvParams& p, const Tensor& phi);

/// Temporal dynamic convolution baseline: per-time-bin kernel is a softmax
/// attention weighted sum of K basis kernels. Computed as the attention
/// weighted sum of the per-basis convolution outputs (exact by linearity).
struct TdyConvParams {
    Tensor basis;   // [K, C_out, C_in, k, k]
    Tensor biases;  // [K, C_out]
    Tensor att1_w;  // [H_a, C_in + F_nom]
    Tensor att1_b;  // [H_a]
    Tensor att2_w;  // [K, H_a], zero at init (uniform initial attention)
    Tensor att2_b;  // [K]
    Conv2dGeom geom;
    std::int64_t c_in = 0, c_out = 0, k = 3;
    std::int64_t f_nom = 0;
    std::int64_t basis_count = 6, hidden = 0;
};

TdyConvParams make_tdy_conv(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t f_nom,
                            std::int64_t basis_count, const Conv2dGeom& geom, Rng& rng,
                            double attention_r = 0.125);

/// [B, T, K], rows sum to 1.
Tensor tdy_attention(const Tensor& x, const TdyConvParams& p);

Tensor tdy_apply(const Tensor& x, const TdyConvParams& p, const Tensor& attention);

Tensor tdy_forward(const Tensor& x, const TdyConvParams& p);

std::int64_t count_layer_params(const DtdyConvParams& p);
std::int64_t count_layer_params(const TdyConvParams& p);

/// Output-grid sampling of per-input-time-bin data: index t' * stride_t,
/// clamped to the last input bin.
std::vector<std::int64_t> output_time_indices(std::int64_t t_in, std::int64_t t_out, std::int64_t stride_t);

}  // namespace dtdy
