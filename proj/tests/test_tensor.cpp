#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dtdy/errors.hpp"
#include "dtdy/tensor.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dtdy;
using testutil::bit_identical;
using testutil::max_abs_diff;
using testutil::randn;

TEST_CASE("conv2d scalar kernel scales the input") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k({1, 1, 1, 1}, {2});
    Tensor y = conv2d(x, k, {1, 1, 0, 0});
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.data() == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("conv2d identity kernel with pad 1 reproduces the input") {
    Tensor x = randn({2, 3, 4, 4}, 11);
    Tensor k({3, 3, 3, 3}, 0.0);
    for (std::int64_t c = 0; c < 3; ++c) k.data()[static_cast<std::size_t>(((c * 3 + c) * 3 + 1) * 3 + 1)] = 1.0;
    Tensor y = conv2d(x, k, {1, 1, 1, 1});
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
    Tensor x = randn({1, 2, 5, 5}, 3);
    Tensor k = randn({3, 2, 3, 3}, 4);
    Tensor y = conv2d(x, k, {1, 1, 0, 0});
    CHECK(max_abs_diff(y, oracles::conv2d_naive(x, k, 1, 1, 0, 0)) < 1e-12);
}

TEST_CASE("conv2d matches the oracle for all stride and padding combinations") {
    for (std::int64_t s : {1, 2})
        for (std::int64_t p : {0, 1})
            for (std::uint64_t seed = 0; seed < 5; ++seed) {
                Tensor x = randn({2, 3, 6, 7}, 100 + seed);
                Tensor k = randn({4, 3, 3, 3}, 200 + seed);
                Tensor y = conv2d(x, k, {s, s, p, p});
                CHECK(max_abs_diff(y, oracles::conv2d_naive(x, k, s, s, p, p)) < 1e-12);
            }
}

TEST_CASE("conv2d rejects channel mismatch with a dimension-naming error") {
    Tensor x({1, 2, 4, 4}, 0.0);
    Tensor k({1, 3, 3, 3}, 0.0);
    CHECK_THROWS_WITH_AS(conv2d(x, k, {1, 1, 0, 0}),
                         doctest::Contains("input has 2 channels but kernel expects 3"), std::invalid_argument);
}

TEST_CASE("matmul_batched identity and hand example") {
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = randn({3, 3}, 5);
    CHECK(max_abs_diff(matmul_batched(eye, b), b) == 0.0);

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor c({2, 1}, {5, 6});
    Tensor y = matmul_batched(a, c);
    CHECK(y.data() == std::vector<double>{17, 39});
}

TEST_CASE("matmul_batched matches per-slice naive oracle") {
    Tensor a = randn({4, 2, 3}, 6);
    Tensor b = randn({4, 3, 5}, 7);
    Tensor y = matmul_batched(a, b);
    for (std::int64_t i = 0; i < 4; ++i) {
        Tensor as = reshape(slice(a, 0, i, 1), {2, 3});
        Tensor bs = reshape(slice(b, 0, i, 1), {3, 5});
        Tensor ys = reshape(slice(y, 0, i, 1), {2, 5});
        CHECK(max_abs_diff(ys, oracles::matmul_naive_2d(as, bs)) < 1e-12);
    }
}

TEST_CASE("matmul_batched names both shapes on inner mismatch") {
    Tensor a({2, 3}, 0.0), b({4, 5}, 0.0);
    CHECK_THROWS_WITH_AS(matmul_batched(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("affine identity, hand example and oracle") {
    Tensor x = randn({4, 3}, 8);
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor zero({3}, 0.0);
    CHECK(max_abs_diff(affine(x, eye, zero), x) == 0.0);

    Tensor x2({2}, {1, 1});
    Tensor w({1, 2}, {2, 3});
    Tensor b({1}, {1});
    CHECK(affine(x2, w, b).data() == std::vector<double>{6});

    Tensor xr = randn({2, 3, 4}, 9);
    Tensor wr = randn({5, 4}, 10);
    Tensor br = randn({5}, 11);
    Tensor y = affine(xr, wr, br);
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 3; ++j)
            for (std::int64_t m = 0; m < 5; ++m) {
                double acc = br.at({m});
                for (std::int64_t n = 0; n < 4; ++n) acc += xr.at({i, j, n}) * wr.at({m, n});
                CHECK(y.at({i, j, m}) == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("batch_norm2d train mode: constant input normalizes to zero") {
    Tensor x({2, 3, 2, 2}, 7.5);
    Tensor gamma({3}, 1.0), beta({3}, 0.0);
    Tensor rm({3}, 0.0), rv({3}, 1.0);
    Tensor y = batch_norm2d(x, gamma, beta, rm, rv, true);
    for (double v : y.data()) CHECK(v == 0.0);
    CHECK(rm.data()[0] == doctest::Approx(0.75));   // 0.9*0 + 0.1*7.5
    CHECK(rv.data()[0] == doctest::Approx(0.9));    // 0.9*1 + 0.1*0
}

TEST_CASE("batch_norm2d train mode output has zero mean and unit variance per channel") {
    Tensor x = randn({3, 2, 4, 5}, 12);
    Tensor gamma({2}, 1.0), beta({2}, 0.0);
    Tensor rm({2}, 0.0), rv({2}, 1.0);
    Tensor y = batch_norm2d(x, gamma, beta, rm, rv, true);
    const auto N = 3 * 4 * 5;
    for (std::int64_t c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::int64_t b = 0; b < 3; ++b)
            for (std::int64_t f = 0; f < 4; ++f)
                for (std::int64_t t = 0; t < 5; ++t) mean += y.at({b, c, f, t});
        mean /= N;
        for (std::int64_t b = 0; b < 3; ++b)
            for (std::int64_t f = 0; f < 4; ++f)
                for (std::int64_t t = 0; t < 5; ++t) var += (y.at({b, c, f, t}) - mean) * (y.at({b, c, f, t}) - mean);
        var /= N;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);  // eps shifts variance slightly below 1
    }
}

TEST_CASE("batch_norm2d matches the explicit formula oracle") {
    Tensor x = randn({2, 2, 3, 3}, 13);
    Tensor gamma({2}, {1.5, 0.5}), beta({2}, {0.25, -1.0});
    Tensor rm({2}, 0.0), rv({2}, 1.0);
    Tensor y = batch_norm2d(x, gamma, beta, rm, rv, true);
    const auto N = 2 * 3 * 3;
    for (std::int64_t c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t f = 0; f < 3; ++f)
                for (std::int64_t t = 0; t < 3; ++t) mean += x.at({b, c, f, t});
        mean /= N;
        double var = 0.0;
        for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t f = 0; f < 3; ++f)
                for (std::int64_t t = 0; t < 3; ++t) var += (x.at({b, c, f, t}) - mean) * (x.at({b, c, f, t}) - mean);
        var /= N;
        for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t f = 0; f < 3; ++f)
                for (std::int64_t t = 0; t < 3; ++t) {
                    const double expect =
                        gamma.at({c}) * (x.at({b, c, f, t}) - mean) / std::sqrt(var + 1e-5) + beta.at({c});
                    CHECK(y.at({b, c, f, t}) == doctest::Approx(expect).epsilon(1e-10));
                }
    }
}

TEST_CASE("batch_norm2d rejects train mode on a single-element channel") {
    Tensor x({1, 2, 1, 1}, 0.0);
    Tensor gamma({2}, 1.0), beta({2}, 0.0), rm({2}, 0.0), rv({2}, 1.0);
    CHECK_THROWS_AS(batch_norm2d(x, gamma, beta, rm, rv, true), std::invalid_argument);
}

TEST_CASE("reduce_mean examples and errors") {
    Tensor x({2, 2}, {1, 3, 5, 7});
    CHECK(reduce_mean(x, {1}).data() == std::vector<double>{2, 6});

    Tensor c({2, 3, 2}, 4.25);
    Tensor full = reduce_mean(c, {0, 1, 2});
    CHECK(full.numel() == 1);
    CHECK(full.item() == doctest::Approx(4.25));

    Tensor r = randn({3, 4, 2}, 14);
    Tensor m = reduce_mean(r, {0, 2});
    for (std::int64_t j = 0; j < 4; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < 3; ++i)
            for (std::int64_t k = 0; k < 2; ++k) acc += r.at({i, j, k});
        CHECK(m.at({j}) == doctest::Approx(acc / 6.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(reduce_mean(r, {1, 1}), std::invalid_argument);
}

TEST_CASE("backward: analytic gradient of sum of squares") {
    Tensor x({3}, {1, 2, 3}, true);
    Tape tape;
    Tensor loss = reduce_sum(mul(x, x), {0});
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward: detached loss leaves gradients zero") {
    Tensor x({3}, {1, 2, 3}, true);
    Tape tape;
    Tensor y = reduce_sum(mul(x, x), {0});  // on tape but unused by the loss
    Tensor loss = Tensor::scalar(5.0);
    tape.backward(loss);
    (void)y;
    CHECK(x.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward: non-scalar loss is rejected") {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: repeated calls accumulate additively") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor loss = reduce_sum(mul(x, x), {0});
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{4, 8});
}

TEST_CASE("backward: shared subexpression sums gradient contributions") {
    Tensor x({2}, {0.5, -1.25}, true);
    auto f = [&] {
        Tensor s = mul(x, x);          // used twice
        return reduce_sum(add(s, s), {0});
    };
    CHECK(grad_check(f, {x}) < 1e-8);
    Tape tape;
    Tensor loss = f();
    x.zero_grad();
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0 * 0.5).epsilon(1e-12));
}

TEST_CASE("backward through conv2d, relu and mean matches finite differences") {
    Tensor x = randn({1, 2, 4, 5}, 15, true);
    Tensor k = randn({3, 2, 3, 3}, 16, true, 0.5);
    auto f = [&] { return reduce_mean(relu(conv2d(x, k, {1, 1, 1, 1})), {0, 1, 2, 3}); };
    CHECK(grad_check(f, {x, k}) < 1e-6);
}

TEST_CASE("grad_check trivia: linear and cubic") {
    Tensor x({3}, {0.3, -0.7, 1.1}, true);
    CHECK(grad_check([&] { return reduce_sum(x, {0}); }, {x}) < 1e-9);

    Tensor x2({2}, {1, 2}, true);
    auto cubic = [&] { return reduce_sum(mul(mul(x2, x2), x2), {0}); };
    {
        Tape tape;
        Tensor loss = cubic();
        x2.zero_grad();
        tape.backward(loss);
        CHECK(x2.grad()[0] == doctest::Approx(3.0));
        CHECK(x2.grad()[1] == doctest::Approx(12.0));
    }
    CHECK(grad_check(cubic, {x2}) < 1e-6);
}

TEST_CASE("grad_check rejects non-finite functions") {
    Tensor x({1}, {1.0}, true);
    CHECK_THROWS_AS(grad_check([&] { return Tensor::scalar(std::numeric_limits<double>::quiet_NaN()); }, {x}),
                    Error);
}

TEST_CASE("every differentiable primitive passes gradient checks over 50 seeds") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Tensor a = randn({2, 3, 4}, 1000 + seed, true);
        Tensor b = randn({2, 3, 4}, 2000 + seed, true);
        Tensor pos = randn({2, 3, 4}, 3000 + seed, true);
        for (auto& v : pos.data()) v = std::abs(v) + 0.5;  // bounded away from 0
        Tensor bc = randn({2, 1, 4}, 4000 + seed, true);
        Tensor bpos({2, 1, 4}, 0.0, true);
        for (auto& v : bpos.data()) v = 2.0;

        auto sum_all = [](Tensor t) { return reduce_sum(t, {0, 1, 2}); };
        CHECK(grad_check([&] { return sum_all(add(a, b)); }, {a, b}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(sub(a, b)); }, {a, b}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(mul(a, b)); }, {a, b}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(add_bcast(a, bc)); }, {a, bc}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(mul_bcast(a, bc)); }, {a, bc}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(div_bcast(a, bpos)); }, {a, bpos}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(mul(relu(a), a)); }, {a}) < 1e-5);
        CHECK(grad_check([&] { return sum_all(sigmoid(a)); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(dtdy::tanh(a)); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(dtdy::exp(scale(a, 0.3))); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(dtdy::log(pos)); }, {pos}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(dtdy::sqrt(pos)); }, {pos}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(softmax(a, 1)); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(mul(softmax(a, 2), b)); }, {a, b}) < 1e-6);
        CHECK(grad_check([&] { return reduce_sum(l2_norm(pos, 1), {0, 1}); }, {pos}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(concat({a, b}, 1)); }, {a, b}) < 1e-6);
        CHECK(grad_check([&] { return reduce_sum(mul(slice(a, 2, 1, 2), slice(b, 2, 0, 2)), {0, 1, 2}); }, {a, b}) <
              1e-6);
        CHECK(grad_check([&] { return sum_all(index_select(a, 2, {0, 2, 2, 3})); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(permute(a, {2, 0, 1})); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return reduce_sum(reshape(a, {6, 4}), {0, 1}); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return reduce_sum(reduce_mean(mul(a, a), {1}), {0, 1}); }, {a}) < 1e-6);
        CHECK(grad_check([&] { return sum_all(clamp_min(a, 0.1)); }, {a}) < 1e-5);

        Tensor m1 = randn({3, 2, 4}, 5000 + seed, true);
        Tensor m2 = randn({3, 4, 2}, 6000 + seed, true);
        CHECK(grad_check([&] { return reduce_sum(matmul_batched(m1, m2), {0, 1, 2}); }, {m1, m2}) < 1e-6);
        Tensor w = randn({3, 4}, 7000 + seed, true);
        Tensor bias = randn({3}, 8000 + seed, true);
        CHECK(grad_check([&] { return reduce_sum(affine(m1, w, bias), {0, 1, 2}); }, {m1, w, bias}) < 1e-6);

        Tensor cx = randn({1, 2, 4, 4}, 9000 + seed, true);
        Tensor ck = randn({2, 2, 3, 3}, 10000 + seed, true, 0.5);
        CHECK(grad_check([&] { return reduce_sum(conv2d(cx, ck, {2, 2, 1, 1}), {0, 1, 2, 3}); }, {cx, ck}) < 1e-6);

        Tensor gamma({2}, {1.2, 0.8}, true);
        Tensor beta({2}, {0.1, -0.2}, true);
        Tensor rm({2}, 0.0), rv({2}, 1.0);
        CHECK(grad_check([&] { return reduce_sum(batch_norm2d(cx, gamma, beta, rm, rv, true), {0, 1, 2, 3}); },
                         {cx, gamma, beta}) < 1e-5);
        Tensor rm2({2}, {0.3, -0.1}), rv2({2}, {1.5, 0.7});
        CHECK(grad_check([&] { return reduce_sum(batch_norm2d(cx, gamma, beta, rm2, rv2, false), {0, 1, 2, 3}); },
                         {cx, gamma, beta}) < 1e-6);
    }
}

TEST_CASE("operations are deterministic: identical inputs give bit-identical outputs") {
    Tensor x = randn({2, 3, 5, 6}, 17);
    Tensor k = randn({4, 3, 3, 3}, 18);
    CHECK(bit_identical(conv2d(x, k, {2, 2, 1, 1}), conv2d(x, k, {2, 2, 1, 1})));
    CHECK(bit_identical(softmax(x, 2), softmax(x, 2)));
    Tensor a = randn({3, 4, 5}, 19), b = randn({3, 5, 2}, 20);
    CHECK(bit_identical(matmul_batched(a, b), matmul_batched(a, b)));
}

TEST_CASE("finiteness guards: log, sqrt and division reject bad domains") {
    Tensor z({2}, {1.0, 0.0});
    CHECK_THROWS_AS(dtdy::log(z), Error);
    Tensor neg({1}, {-1.0});
    CHECK_THROWS_AS(dtdy::sqrt(neg), Error);
    Tensor a({2}, {1.0, 1.0});
    CHECK_THROWS_AS(div_bcast(a, z), Error);
}

TEST_CASE("tensor invariants: shape product and grad shape") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>{1.0, 2.0}), std::invalid_argument);
    Tensor x({2, 2}, 1.0, true);
    CHECK(x.grad().size() == x.data().size());
    CHECK_THROWS_AS(Tensor({0, 2}, 0.0), std::invalid_argument);
}
