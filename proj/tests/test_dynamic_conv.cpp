#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dtdy/dynamic_conv.hpp"
#include "dtdy/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dtdy;
using testutil::bit_identical;
using testutil::max_abs_diff;
using testutil::randn;

namespace {

DtdyConvParams make_random_dtdy(std::int64_t c_in, std::int64_t c_out, std::int64_t f_nom, Conv2dGeom geom,
                                std::uint64_t seed, bool random_fc2 = true) {
    Rng rng(seed);
    auto p = make_dtdy_conv(c_in, c_out, 3, f_nom, 0.125, geom, rng);
    if (random_fc2) {
        for (auto& v : p.fc2_w.data()) v = rng.uniform(-0.5, 0.5);
        for (auto& v : p.fc2_b.data()) v = rng.uniform(-0.5, 0.5);
    }
    return p;
}

}  // namespace

TEST_CASE("latent_dim follows round(sqrt(2*c_in + 2*c_out))") {
    CHECK(latent_dim(64, 64) == 16);
    CHECK(latent_dim(32, 64) == 14);
    CHECK(latent_dim(128, 128) == 23);
    CHECK(latent_dim(1, 1) == 2);
    CHECK_THROWS_AS(latent_dim(0, 4), std::invalid_argument);
}

TEST_CASE("phi_generator: zero fc2 gives the zero map") {
    Rng rng(31);
    auto p = make_dtdy_conv(4, 6, 3, 8, 0.125, {1, 1, 1, 1}, rng);
    Tensor x = randn({2, 4, 8, 5}, 32);
    Tensor phi = phi_generator(x, p);
    CHECK(phi.shape() == Shape{2, 5, p.latent, p.latent});
    for (double v : phi.data()) CHECK(v == 0.0);
}

TEST_CASE("phi_generator: shape contract for B=2, T=7") {
    auto p = make_random_dtdy(3, 5, 6, {1, 1, 1, 1}, 33);
    Tensor x = randn({2, 3, 6, 7}, 34);
    Tensor phi = phi_generator(x, p);
    CHECK(phi.shape() == Shape{2, 7, p.latent, p.latent});
}

TEST_CASE("phi_generator matches a hand-rolled per-time-bin oracle") {
    auto p = make_random_dtdy(3, 4, 5, {1, 1, 1, 1}, 35);
    Tensor x = randn({2, 3, 5, 4}, 36);
    Tensor phi = phi_generator(x, p);
    const std::int64_t C = 3, F = 5, L = p.latent, H = p.hidden;
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t t = 0; t < 4; ++t) {
            // descriptor: concat(mean over channels [F], mean over freq [C])
            std::vector<double> d;
            for (std::int64_t f = 0; f < F; ++f) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < C; ++c) acc += x.at({b, c, f, t});
                d.push_back(acc / C);
            }
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::int64_t f = 0; f < F; ++f) acc += x.at({b, c, f, t});
                d.push_back(acc / F);
            }
            std::vector<double> h(static_cast<std::size_t>(H));
            for (std::int64_t i = 0; i < H; ++i) {
                double acc = p.fc1_b.at({i});
                for (std::size_t j = 0; j < d.size(); ++j)
                    acc += p.fc1_w.at({i, static_cast<std::int64_t>(j)}) * d[j];
                h[static_cast<std::size_t>(i)] = std::max(0.0, acc);
            }
            for (std::int64_t o = 0; o < L * L; ++o) {
                double acc = p.fc2_b.at({o});
                for (std::int64_t i = 0; i < H; ++i) acc += p.fc2_w.at({o, i}) * h[static_cast<std::size_t>(i)];
                CHECK(phi.at({b, t, o / L, o % L}) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
}

TEST_CASE("phi_generator rejects a frequency size other than F_nom") {
    auto p = make_random_dtdy(3, 4, 8, {1, 1, 1, 1}, 37);
    Tensor x = randn({1, 3, 6, 4}, 38);
    CHECK_THROWS_WITH_AS(phi_generator(x, p), doctest::Contains("F_nom"), std::invalid_argument);
}

TEST_CASE("dtdy_forward with zero fc2 is bit-identical to the static convolution") {
    for (std::int64_t s : {1, 2})
        for (std::int64_t pad : {0, 1}) {
            auto p = make_random_dtdy(3, 5, 7, {s, s, pad, pad}, 40 + static_cast<std::uint64_t>(s * 2 + pad),
                                      /*random_fc2=*/false);
            Tensor x = randn({2, 3, 7, 9}, 44);
            Tensor y = dtdy_forward(x, p);
            Tensor y0 = conv2d(x, p.w0, p.geom);
            CHECK(bit_identical(y, y0));
        }
}

TEST_CASE("dtdy with identity Phi equals convolution with the assembled kernel W0 + P Q^T") {
    auto p = make_random_dtdy(3, 5, 6, {1, 1, 1, 1}, 45);
    Tensor x = randn({2, 3, 6, 8}, 46);
    const auto L = p.latent;
    std::vector<double> id(static_cast<std::size_t>(2 * 8 * L * L), 0.0);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t t = 0; t < 8; ++t)
            for (std::int64_t l = 0; l < L; ++l)
                id[static_cast<std::size_t>(((b * 8 + t) * L + l) * L + l)] = 1.0;
    Tensor phi({2, 8, L, L}, std::move(id));
    Tensor y = dtdy_apply(x, p, phi);

    // kernel[o,c,i,j] = w0[o,c,i,j] + sum_l p[o,l] * q[l,c,i,j]
    Tensor k({5, 3, 3, 3}, 0.0);
    for (std::int64_t o = 0; o < 5; ++o)
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 3; ++i)
                for (std::int64_t j = 0; j < 3; ++j) {
                    double acc = p.w0.at({o, c, i, j});
                    for (std::int64_t l = 0; l < L; ++l) acc += p.p.at({o, l, 0, 0}) * p.q.at({l, c, i, j});
                    k.data()[static_cast<std::size_t>(((o * 3 + c) * 3 + i) * 3 + j)] = acc;
                }
    CHECK(max_abs_diff(y, oracles::conv2d_naive(x, k, 1, 1, 1, 1)) < 1e-10);
}

TEST_CASE("factored and explicit paths agree over strides, paddings and 20 seeds") {
    for (std::int64_t s : {1, 2})
        for (std::int64_t pad : {0, 1})
            for (std::uint64_t seed = 0; seed < 20; ++seed) {
                auto p = make_random_dtdy(3, 4, 6, {s, s, pad, pad}, 100 + seed);
                Tensor x = randn({2, 3, 6, 9}, 300 + seed);
                Tensor fast = dtdy_forward(x, p);
                Tensor ref = dtdy_explicit_oracle(x, p);
                CHECK(max_abs_diff(fast, ref) < 1e-10);
            }
}

TEST_CASE("dtdy_explicit_oracle: zero Phi and single-time-bin reductions") {
    auto p = make_random_dtdy(2, 3, 5, {1, 1, 0, 0}, 47, /*random_fc2=*/false);
    Tensor x = randn({1, 2, 5, 6}, 48);
    CHECK(max_abs_diff(dtdy_explicit_oracle(x, p), conv2d(x, p.w0, p.geom)) < 1e-12);

    // T = k, stride 1, pad 0: one output bin, kernel W(0)
    auto p2 = make_random_dtdy(2, 3, 5, {1, 1, 0, 0}, 49);
    Tensor x2 = randn({1, 2, 5, 3}, 50);
    Tensor y = dtdy_explicit_oracle(x2, p2);
    CHECK(y.dim(3) == 1);
    CHECK(max_abs_diff(y, dtdy_forward(x2, p2)) < 1e-10);
}

TEST_CASE("tdy_forward: K=1 reduces to convolution with the single basis") {
    Rng rng(51);
    auto p = make_tdy_conv(3, 4, 3, 6, 1, {1, 1, 1, 1}, rng);
    for (auto& v : p.biases.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = randn({2, 3, 6, 7}, 52);
    Tensor y = tdy_forward(x, p);
    Tensor basis0 = reshape(slice(p.basis, 0, 0, 1), {4, 3, 3, 3});
    Tensor expect = add_bcast(conv2d(x, basis0, p.geom), reshape(slice(p.biases, 0, 0, 1), {1, 4, 1, 1}));
    CHECK(max_abs_diff(y, expect) < 1e-12);
}

TEST_CASE("tdy_apply with one-hot attention selects that basis") {
    Rng rng(53);
    auto p = make_tdy_conv(2, 3, 3, 5, 4, {1, 1, 1, 1}, rng);
    for (auto& v : p.biases.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = randn({1, 2, 5, 6}, 54);
    const std::int64_t j = 2;
    Tensor att({1, 6, 4}, 0.0);
    for (std::int64_t t = 0; t < 6; ++t) att.data()[static_cast<std::size_t>(t * 4 + j)] = 1.0;
    Tensor y = tdy_apply(x, p, att);
    Tensor bj = reshape(slice(p.basis, 0, j, 1), {3, 2, 3, 3});
    Tensor expect = add_bcast(conv2d(x, bj, p.geom), reshape(slice(p.biases, 0, j, 1), {1, 3, 1, 1}));
    CHECK(max_abs_diff(y, expect) < 1e-12);
}

TEST_CASE("tdy_forward matches the explicit weighted-kernel oracle, K=3") {
    for (std::int64_t s : {1, 2})
        for (std::int64_t pad : {0, 1}) {
            Rng rng(55 + static_cast<std::uint64_t>(s * 2 + pad));
            auto p = make_tdy_conv(3, 4, 3, 6, 3, {s, s, pad, pad}, rng);
            for (auto& v : p.att2_w.data()) v = rng.uniform(-0.8, 0.8);
            for (auto& v : p.biases.data()) v = rng.uniform(-0.5, 0.5);
            Tensor x = randn({2, 3, 6, 9}, 60);
            Tensor att = tdy_attention(x, p);
            CHECK(max_abs_diff(tdy_apply(x, p, att), oracles::tdy_explicit(x, p, att)) < 1e-10);
        }
}

TEST_CASE("tdy attention rows are a softmax: non-negative, sum to 1") {
    Rng rng(61);
    auto p = make_tdy_conv(3, 4, 3, 6, 5, {1, 1, 1, 1}, rng);
    for (auto& v : p.att2_w.data()) v = rng.uniform(-1.0, 1.0);
    Tensor x = randn({2, 3, 6, 7}, 62);
    Tensor att = tdy_attention(x, p);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t t = 0; t < 7; ++t) {
            double sum = 0.0;
            for (std::int64_t k = 0; k < 5; ++k) {
                CHECK(att.at({b, t, k}) >= 0.0);
                sum += att.at({b, t, k});
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
}

TEST_CASE("count_layer_params: stated decomposition") {
    Rng rng(63);
    // C_in=C_out=16, F_nom=32, k=3, r=1/8: L=8, H=6
    auto p = make_dtdy_conv(16, 16, 3, 32, 0.125, {1, 1, 1, 1}, rng);
    CHECK(p.latent == 8);
    CHECK(p.hidden == 6);
    // 2304 (w0) + 8*16*9 (q) + 16*8 (p) + 48*6+6 (fc1) + 6*64+64 (fc2)
    const std::int64_t expected = 2304 + 8 * 16 * 9 + 16 * 8 + (48 * 6 + 6) + (6 * 64 + 64);
    CHECK(expected == 4326);
    CHECK(count_layer_params(p) == expected);
    CHECK(p.w0.numel() == 2304);  // vanilla 16->16 3x3 kernel alone

    auto t = make_tdy_conv(16, 16, 3, 32, 6, {1, 1, 1, 1}, rng);
    CHECK(count_layer_params(p) < count_layer_params(t));
}

TEST_CASE("gradient check: dtdy_forward w.r.t. input and every parameter") {
    auto p = make_random_dtdy(2, 3, 5, {2, 2, 1, 1}, 64);
    Tensor x = randn({1, 2, 5, 6}, 65, true);
    for (Tensor t : {p.w0, p.q, p.p, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b}) t.node()->requires_grad = true;
    auto f = [&] { return reduce_mean(dtdy_forward(x, p), {0, 1, 2, 3}); };
    CHECK(grad_check(f, {x, p.w0, p.q, p.p, p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b}) < 1e-4);
}

TEST_CASE("gradient check: tdy_forward w.r.t. input and every parameter") {
    Rng rng(66);
    auto p = make_tdy_conv(2, 3, 3, 5, 3, {1, 1, 1, 1}, rng);
    for (auto& v : p.att2_w.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = randn({1, 2, 5, 6}, 67, true);
    auto f = [&] { return reduce_mean(tdy_forward(x, p), {0, 1, 2, 3}); };
    CHECK(grad_check(f, {x, p.basis, p.biases, p.att1_w, p.att1_b, p.att2_w, p.att2_b}) < 1e-4);
}

TEST_CASE("time locality: with zero fc2, far-away time bins cannot affect an output column") {
    auto p = make_random_dtdy(2, 3, 5, {1, 1, 1, 1}, 68, /*random_fc2=*/false);
    Tensor x = randn({1, 2, 5, 12}, 69);
    Tensor y1 = dtdy_forward(x, p);
    Tensor x2(x.shape(), x.data());
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t f = 0; f < 5; ++f) x2.data()[static_cast<std::size_t>(((0 * 2 + c) * 5 + f) * 12 + 11)] += 3.0;
    Tensor y2 = dtdy_forward(x2, p);
    // pad 1, k 3: output bin t' sees input bins [t'-1, t'+1]; bin 11 reaches t' >= 10 only
    for (std::int64_t o = 0; o < 3; ++o)
        for (std::int64_t f = 0; f < 5; ++f)
            for (std::int64_t t = 0; t < 10; ++t) CHECK(y1.at({0, o, f, t}) == y2.at({0, o, f, t}));
    CHECK(y1.at({0, 0, 2, 11}) != y2.at({0, 0, 2, 11}));
}

TEST_CASE("fc2 zero-init: a freshly built layer starts as its static kernel") {
    Rng rng(70);
    auto p = make_dtdy_conv(4, 4, 3, 8, 0.125, {1, 1, 1, 1}, rng);
    for (double v : p.fc2_w.data()) CHECK(v == 0.0);
    for (double v : p.fc2_b.data()) CHECK(v == 0.0);
}
