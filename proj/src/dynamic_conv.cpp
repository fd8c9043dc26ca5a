#include "dtdy/dynamic_conv.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dtdy {

std::int64_t latent_dim(std::int64_t c_in, std::int64_t c_out) {
    if (c_in < 1 || c_out < 1) throw std::invalid_argument("latent_dim: channel counts must be >= 1");
    const auto l = std::llround(std::sqrt(2.0 * static_cast<double>(c_in) + 2.0 * static_cast<double>(c_out)));
    return std::max<std::int64_t>(1, l);
}

std::int64_t phi_hidden_dim(std::int64_t c_in, std::int64_t f_nom, double r) {
    const auto h = std::llround(static_cast<double>(c_in + f_nom) * r);
    return std::max<std::int64_t>(1, h);
}

DtdyConvParams make_dtdy_conv(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t f_nom,
                              double r, const Conv2dGeom& geom, Rng& rng) {
    DtdyConvParams p;
    p.c_in = c_in;
    p.c_out = c_out;
    p.k = k;
    p.f_nom = f_nom;
    p.r = r;
    p.geom = geom;
    p.latent = latent_dim(c_in, c_out);
    p.hidden = phi_hidden_dim(c_in, f_nom, r);
    const auto L = p.latent, H = p.hidden;
    p.w0 = fan_in_uniform({c_out, c_in, k, k}, c_in * k * k, rng);
    p.q = fan_in_uniform({L, c_in, k, k}, c_in * k * k, rng);
    p.p = fan_in_uniform({c_out, L, 1, 1}, L, rng);
    p.fc1_w = fan_in_uniform({H, c_in + f_nom}, c_in + f_nom, rng);
    p.fc1_b = Tensor({H}, 0.0, true);
    p.fc2_w = Tensor({L * L, H}, 0.0, true);  // dynamic residual starts at zero
    p.fc2_b = Tensor({L * L}, 0.0, true);
    return p;
}

Tensor time_descriptor(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("time_descriptor: input must be [B,C,F,T]");
    Tensor mean_c = reduce_mean(x, {1});              // [B,F,T]
    Tensor mean_f = reduce_mean(x, {2});              // [B,C,T]
    Tensor a = permute(mean_c, {0, 2, 1});            // [B,T,F]
    Tensor b = permute(mean_f, {0, 2, 1});            // [B,T,C]
    return concat({a, b}, 2);                         // [B,T,F+C]
}

Tensor phi_generator(const Tensor& x, const DtdyConvParams& p) {
    if (x.rank() != 4) throw std::invalid_argument("phi_generator: input must be [B,C,F,T]");
    if (x.dim(2) != p.f_nom)
        throw std::invalid_argument("phi_generator: input frequency size " + std::to_string(x.dim(2)) +
                                    " does not match generator F_nom " + std::to_string(p.f_nom));
    if (x.dim(1) != p.c_in)
        throw std::invalid_argument("phi_generator: input channels " + std::to_string(x.dim(1)) +
                                    " do not match layer C_in " + std::to_string(p.c_in));
    const auto B = x.dim(0), T = x.dim(3);
    Tensor d = time_descriptor(x);                    // [B,T,F+C]
    Tensor h = relu(affine(d, p.fc1_w, p.fc1_b));     // [B,T,H]
    Tensor phi = affine(h, p.fc2_w, p.fc2_b);         // [B,T,L*L]
    return reshape(phi, {B, T, p.latent, p.latent});
}

std::vector<std::int64_t> output_time_indices(std::int64_t t_in, std::int64_t t_out, std::int64_t stride_t) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(t_out));
    for (std::int64_t t = 0; t < t_out; ++t)
        idx[static_cast<std::size_t>(t)] = std::min(t * stride_t, t_in - 1);
    return idx;
}

Tensor dtdy_apply(const Tensor& x, const DtdyConvParams& p, const Tensor& phi) {
    Tensor y0 = conv2d(x, p.w0, p.geom);              // [B,C_out,F',T']
    Tensor z = conv2d(x, p.q, p.geom);                // [B,L,F',T']
    const auto B = z.dim(0), L = z.dim(1), Fo = z.dim(2), To = z.dim(3);
    if (phi.rank() != 4 || phi.dim(0) != B || phi.dim(2) != L || phi.dim(3) != L)
        throw std::invalid_argument("dtdy_apply: phi shape " + shape_str(phi.shape()) + " incompatible with latent " +
                                    std::to_string(L));
    Tensor phi_s = index_select(phi, 1, output_time_indices(x.dim(3), To, p.geom.stride_t));  // [B,T',L,L]
    Tensor zt = permute(z, {0, 3, 1, 2});             // [B,T',L,F']
    Tensor u = matmul_batched(phi_s, zt);             // [B,T',L,F']
    Tensor u2 = permute(u, {0, 2, 3, 1});             // [B,L,F',T']
    Tensor yd = conv2d(u2, p.p, Conv2dGeom{1, 1, 0, 0});
    return add(y0, yd);
}

Tensor dtdy_forward(const Tensor& x, const DtdyConvParams& p) { return dtdy_apply(x, p, phi_generator(x, p)); }

Tensor dtdy_explicit_with_phi(const Tensor& x, const DtdyConvParams& p, const Tensor& phi) {
    const auto B = x.dim(0), C = x.dim(1), F = x.dim(2), T = x.dim(3);
    const auto O = p.c_out, L = p.latent, k = p.k;
    const auto& g = p.geom;
    const std::int64_t Fo = (F + 2 * g.pad_f - k) / g.stride_f + 1;
    const std::int64_t To = (T + 2 * g.pad_t - k) / g.stride_t + 1;
    const double* px = x.data().data();
    const double* pw0 = p.w0.data().data();
    const double* pq = p.q.data().data();
    const double* pp = p.p.data().data();
    const double* pphi = phi.data().data();
    std::vector<double> out(static_cast<std::size_t>(B * O * Fo * To), 0.0);
    std::vector<double> w(static_cast<std::size_t>(O * C * k * k));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t to = 0; to < To; ++to) {
            const std::int64_t tin = std::min(to * g.stride_t, T - 1);
            // W(t') = W0 + P Phi(t') Q^T
            for (std::int64_t co = 0; co < O; ++co)
                for (std::int64_t ci = 0; ci < C; ++ci)
                    for (std::int64_t i = 0; i < k; ++i)
                        for (std::int64_t j = 0; j < k; ++j) {
                            double acc = pw0[((co * C + ci) * k + i) * k + j];
                            for (std::int64_t l = 0; l < L; ++l) {
                                double inner = 0.0;
                                for (std::int64_t l2 = 0; l2 < L; ++l2)
                                    inner += pphi[((b * T + tin) * L + l) * L + l2] *
                                             pq[((l2 * C + ci) * k + i) * k + j];
                                acc += pp[co * L + l] * inner;
                            }
                            w[static_cast<std::size_t>(((co * C + ci) * k + i) * k + j)] = acc;
                        }
            for (std::int64_t co = 0; co < O; ++co)
                for (std::int64_t fo = 0; fo < Fo; ++fo) {
                    double acc = 0.0;
                    for (std::int64_t ci = 0; ci < C; ++ci)
                        for (std::int64_t i = 0; i < k; ++i)
                            for (std::int64_t j = 0; j < k; ++j) {
                                const std::int64_t f = fo * g.stride_f - g.pad_f + i;
                                const std::int64_t t = to * g.stride_t - g.pad_t + j;
                                if (f < 0 || f >= F || t < 0 || t >= T) continue;
                                acc += w[static_cast<std::size_t>(((co * C + ci) * k + i) * k + j)] *
                                       px[((b * C + ci) * F + f) * T + t];
                            }
                    out[static_cast<std::size_t>(((b * O + co) * Fo + fo) * To + to)] = acc;
                }
        }
    }
    return Tensor({B, O, Fo, To}, std::move(out));
}

Tensor dtdy_explicit_oracle(const Tensor& x, const DtdyConvParams& p) {
    Tensor phi = phi_generator(x, p);
    return dtdy_explicit_with_phi(x, p, phi.detached());
}

TdyConvParams make_tdy_conv(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t f_nom,
                            std::int64_t basis_count, const Conv2dGeom& geom, Rng& rng, double attention_r) {
    TdyConvParams p;
    p.c_in = c_in;
    p.c_out = c_out;
    p.k = k;
    p.f_nom = f_nom;
    p.basis_count = basis_count;
    p.geom = geom;
    p.hidden = phi_hidden_dim(c_in, f_nom, attention_r);
    p.basis = fan_in_uniform({basis_count, c_out, c_in, k, k}, c_in * k * k, rng);
    p.biases = Tensor({basis_count, c_out}, 0.0, true);
    p.att1_w = fan_in_uniform({p.hidden, c_in + f_nom}, c_in + f_nom, rng);
    p.att1_b = Tensor({p.hidden}, 0.0, true);
    p.att2_w = Tensor({basis_count, p.hidden}, 0.0, true);  // uniform attention at init
    p.att2_b = Tensor({basis_count}, 0.0, true);
    return p;
}

Tensor tdy_attention(const Tensor& x, const TdyConvParams& p) {
    if (x.dim(2) != p.f_nom)
        throw std::invalid_argument("tdy_attention: input frequency size " + std::to_string(x.dim(2)) +
                                    " does not match generator F_nom " + std::to_string(p.f_nom));
    Tensor d = time_descriptor(x);
    Tensor h = relu(affine(d, p.att1_w, p.att1_b));
    Tensor logits = affine(h, p.att2_w, p.att2_b);    // [B,T,K]
    return softmax(logits, 2);
}

Tensor tdy_apply(const Tensor& x, const TdyConvParams& p, const Tensor& attention) {
    const auto B = x.dim(0), T = x.dim(3);
    const auto K = p.basis_count;
    if (attention.rank() != 3 || attention.dim(0) != B || attention.dim(2) != K)
        throw std::invalid_argument("tdy_apply: attention shape " + shape_str(attention.shape()) +
                                    " incompatible with basis count " + std::to_string(K));
    Tensor y;
    Tensor att_s;  // [B,T',K], filled after the first conv fixes T'
    for (std::int64_t k = 0; k < K; ++k) {
        Tensor bk = reshape(slice(p.basis, 0, k, 1), {p.c_out, p.c_in, p.k, p.k});
        Tensor ck = conv2d(x, bk, p.geom);            // [B,C_out,F',T']
        Tensor bias_k = reshape(slice(p.biases, 0, k, 1), {1, p.c_out, 1, 1});
        ck = add_bcast(ck, bias_k);
        if (k == 0) att_s = index_select(attention, 1, output_time_indices(T, ck.dim(3), p.geom.stride_t));
        Tensor gate = reshape(slice(att_s, 2, k, 1), {B, 1, 1, ck.dim(3)});
        Tensor term = mul_bcast(ck, gate);
        y = (k == 0) ? term : add(y, term);
    }
    return y;
}

Tensor tdy_forward(const Tensor& x, const TdyConvParams& p) { return tdy_apply(x, p, tdy_attention(x, p)); }

std::int64_t count_layer_params(const DtdyConvParams& p) {
    return p.w0.numel() + p.q.numel() + p.p.numel() + p.fc1_w.numel() + p.fc1_b.numel() + p.fc2_w.numel() +
           p.fc2_b.numel();
}

std::int64_t count_layer_params(const TdyConvParams& p) {
    return p.basis.numel() + p.biases.numel() + p.att1_w.numel() + p.att1_b.numel() + p.att2_w.numel() +
           p.att2_b.numel();
}

}  // namespace dtdy
