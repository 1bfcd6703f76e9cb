#include <cmath>

#include "doctest.h"
#include "panfpn/ops.hpp"
#include "panfpn/reference.hpp"

using namespace panfpn;

namespace {
Tensor rand_t(Rng& rng, int n, int c, int h, int w) {
    return reference::random_tensor(rng, n, c, h, w);
}
}  // namespace

TEST_CASE("conv2d box-sum identity") {
    Tensor x(1, 1, 3, 3);
    x.fill(1.0f);
    ConvParams p(1, 1, 3, 1, 1);
    p.weight.fill(1.0f);
    Tensor y = conv2d(x, p);
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(9.0));
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 2, 2) == doctest::Approx(4.0));
}

TEST_CASE("conv2d dilation shape arithmetic") {
    // 5x5 input, k=3, pad 1, dilation 2: span (3-1)*2+1 = 5; out = (5+2-5)/1 + 1 = 3
    Tensor x(1, 1, 5, 5);
    ConvParams p(1, 1, 3, 1, 1, 2);
    Tensor y = conv2d(x, p);
    CHECK(y.h() == 3);
    CHECK(y.w() == 3);
}

TEST_CASE("conv2d channel mismatch names both shapes") {
    Tensor x(1, 2, 4, 4);
    ConvParams p(1, 3, 3);
    CHECK_THROWS_WITH_AS(conv2d(x, p), doctest::Contains("1,2,4,4"), ShapeError);
}

TEST_CASE("conv2d matches naive reference on random input") {
    Rng rng(1);
    Tensor x = rand_t(rng, 2, 4, 8, 8);
    ConvParams p(3, 4, 3, 1, 1);
    init_conv(p, rng);
    for (auto& b : p.bias) b = static_cast<float>(rng.uniform(-1, 1));
    Tensor y = conv2d(x, p);
    Tensor ref = reference::conv2d(x, p);
    CHECK(reference::max_abs_diff(y, ref) <= 1e-5);
}

TEST_CASE("group_norm normalizes each group slice") {
    Rng rng(2);
    Tensor x = rand_t(rng, 2, 8, 5, 5);
    GroupNormParams p(8, 4);
    Tensor y = group_norm(x, p);
    const int cpg = 2;
    for (int n = 0; n < 2; ++n) {
        for (int g = 0; g < 4; ++g) {
            double sum = 0.0, sq = 0.0;
            int count = 0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int i = 0; i < 5; ++i)
                    for (int j = 0; j < 5; ++j) {
                        sum += y.at(n, c, i, j);
                        sq += static_cast<double>(y.at(n, c, i, j)) * y.at(n, c, i, j);
                        ++count;
                    }
            const double mean = sum / count;
            CHECK(std::abs(mean) <= 1e-5);
            CHECK(std::abs(sq / count - mean * mean - 1.0) <= 1e-4);
        }
    }
}

TEST_CASE("group_norm on constant input is ~zero") {
    Tensor x(1, 4, 3, 3);
    x.fill(3.5f);
    GroupNormParams p(4, 2);
    Tensor y = group_norm(x, p);
    for (size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y.data()[i]) <= 1e-4);
}

TEST_CASE("group_norm matches scalar-loop reference") {
    Rng rng(3);
    Tensor x = rand_t(rng, 1, 8, 4, 4);
    GroupNormParams p(8, 4);
    for (int c = 0; c < 8; ++c) {
        p.gamma[c] = static_cast<float>(rng.uniform(0.5, 2.0));
        p.beta[c] = static_cast<float>(rng.uniform(-1, 1));
    }
    CHECK(reference::max_abs_diff(group_norm(x, p), reference::group_norm(x, p)) <= 1e-5);
}

TEST_CASE("group_norm rejects indivisible channels") {
    CHECK_THROWS_AS(GroupNormParams(6, 4), ShapeError);
    Tensor x(1, 6, 2, 2);
    GroupNormParams p(6, 3);
    CHECK_NOTHROW(group_norm(x, p));
}

TEST_CASE("relu") {
    Tensor x(1, 1, 1, 3);
    x.data()[0] = -1;
    x.data()[1] = 0;
    x.data()[2] = 2;
    Tensor y = relu(x);
    CHECK(y.data()[0] == 0);
    CHECK(y.data()[1] == 0);
    CHECK(y.data()[2] == 2);

    Tensor neg(1, 2, 3, 3);
    neg.fill(-5.0f);
    Tensor z = relu(neg);
    for (size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0f);

    Rng rng(4);
    Tensor r = rand_t(rng, 1, 3, 4, 4);
    Tensor once = relu(r), twice = relu(once);
    CHECK(reference::max_abs_diff(once, twice) == 0.0);
}

TEST_CASE("bilinear_upsample preserves constants") {
    Tensor x(1, 2, 3, 3);
    x.fill(1.75f);
    for (int factor : {2, 4}) {
        Tensor y = bilinear_upsample(x, factor);
        CHECK(y.h() == 3 * factor);
        for (size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(1.75));
    }
}

TEST_CASE("bilinear_upsample half-pixel convention on a 2-wide row") {
    // src = [0, 1], factor 2. dst x: (x+0.5)/2-0.5 -> -0.25, 0.25, 0.75, 1.25 (clamped)
    Tensor x(1, 1, 1, 2);
    x.data()[0] = 0.0f;
    x.data()[1] = 1.0f;
    Tensor y = bilinear_upsample(x, 2);
    REQUIRE(y.w() == 4);
    CHECK(y.data()[0] == doctest::Approx(0.0));
    CHECK(y.data()[1] == doctest::Approx(0.25));
    CHECK(y.data()[2] == doctest::Approx(0.75));
    CHECK(y.data()[3] == doctest::Approx(1.0));
}

TEST_CASE("bilinear_upsample approximately preserves the mean") {
    Rng rng(5);
    Tensor x = rand_t(rng, 1, 1, 16, 16);
    Tensor y = bilinear_upsample(x, 2);
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) mx += x.data()[i];
    for (size_t i = 0; i < y.size(); ++i) my += y.data()[i];
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(y.size());
    // boundary clamping causes small drift; bound measured on the loop oracle
    CHECK(std::abs(my - mx) <= 0.02 * std::max(1.0, std::abs(mx)));
}

TEST_CASE("bilinear_upsample is linear") {
    Rng rng(6);
    Tensor x = rand_t(rng, 1, 2, 5, 5);
    Tensor y = rand_t(rng, 1, 2, 5, 5);
    const float alpha = 0.7f, beta = -1.3f;
    Tensor mix(1, 2, 5, 5);
    for (size_t i = 0; i < mix.size(); ++i) mix.data()[i] = alpha * x.data()[i] + beta * y.data()[i];
    Tensor up_mix = bilinear_upsample(mix, 2);
    Tensor ux = bilinear_upsample(x, 2), uy = bilinear_upsample(y, 2);
    for (size_t i = 0; i < up_mix.size(); ++i) {
        CHECK(std::abs(up_mix.data()[i] - (alpha * ux.data()[i] + beta * uy.data()[i])) <= 1e-5);
    }
}

TEST_CASE("bilinear_upsample rejects unsupported factors") {
    Tensor x(1, 1, 2, 2);
    CHECK_THROWS_AS(bilinear_upsample(x, 3), ShapeError);
}

TEST_CASE("bilinear_upsample matches the loop reference") {
    Rng rng(7);
    for (int factor : {2, 4}) {
        Tensor x = rand_t(rng, 1, 3, 7, 9);
        CHECK(reference::max_abs_diff(bilinear_upsample(x, factor),
                                      reference::bilinear_upsample(x, factor)) <= 1e-5);
    }
}

TEST_CASE("elementwise_sum") {
    Rng rng(8);
    Tensor x = rand_t(rng, 1, 2, 3, 3);
    Tensor y = elementwise_sum({&x});
    CHECK(reference::max_abs_diff(x, y) == 0.0);

    Tensor nx(1, 2, 3, 3);
    for (size_t i = 0; i < x.size(); ++i) nx.data()[i] = -x.data()[i];
    Tensor z = elementwise_sum({&x, &nx});
    for (size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0f);

    // 4 random tensors vs loop accumulation
    Tensor a = rand_t(rng, 1, 2, 3, 3), b = rand_t(rng, 1, 2, 3, 3), c = rand_t(rng, 1, 2, 3, 3),
           d = rand_t(rng, 1, 2, 3, 3);
    Tensor s = elementwise_sum({&a, &b, &c, &d});
    for (size_t i = 0; i < s.size(); ++i) {
        const double want = static_cast<double>(a.data()[i]) + b.data()[i] + c.data()[i] + d.data()[i];
        CHECK(std::abs(s.data()[i] - want) <= 1e-6);
    }

    Tensor bad(1, 2, 4, 3);
    CHECK_THROWS_AS(elementwise_sum({&x, &bad}), ShapeError);
    CHECK_THROWS_AS(elementwise_sum({}), ShapeError);
}

TEST_CASE("channel_concat shape arithmetic and round trip") {
    Rng rng(9);
    Tensor a = rand_t(rng, 2, 2, 3, 4);
    Tensor b = rand_t(rng, 2, 3, 3, 4);
    Tensor y = channel_concat({&a, &b});
    CHECK(y.c() == 5);
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) {
                for (int c = 0; c < 2; ++c) CHECK(y.at(n, c, i, j) == a.at(n, c, i, j));
                for (int c = 0; c < 3; ++c) CHECK(y.at(n, 2 + c, i, j) == b.at(n, c, i, j));
            }

    Tensor solo = channel_concat({&a});
    CHECK(reference::max_abs_diff(solo, a) == 0.0);

    Tensor bad(2, 3, 4, 4);
    CHECK_THROWS_AS(channel_concat({&a, &bad}), ShapeError);
}

TEST_CASE("softmax_channels") {
    Tensor one(1, 1, 2, 2);
    one.fill(4.2f);
    Tensor y1 = softmax_channels(one);
    for (size_t i = 0; i < y1.size(); ++i) CHECK(y1.data()[i] == doctest::Approx(1.0));

    Tensor two(1, 2, 1, 1);
    two.fill(0.0f);
    Tensor y2 = softmax_channels(two);
    CHECK(y2.data()[0] == doctest::Approx(0.5));
    CHECK(y2.data()[1] == doctest::Approx(0.5));

    Tensor big(1, 3, 1, 1);
    big.fill(1000.0f);
    Tensor y3 = softmax_channels(big);
    for (int c = 0; c < 3; ++c) CHECK(y3.data()[c] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax_channels sums to one on random logits") {
    Rng rng(10);
    Tensor x = reference::random_tensor(rng, 2, 5, 4, 4, -10.0, 10.0);
    Tensor y = softmax_channels(x);
    const size_t plane = 16;
    for (int n = 0; n < 2; ++n)
        for (size_t p = 0; p < plane; ++p) {
            double sum = 0.0;
            for (int c = 0; c < 5; ++c) {
                const float v = y.data()[(n * 5 + c) * plane + p];
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
}

TEST_CASE("kernel determinism: same inputs give bitwise-identical outputs") {
    Rng rng(11);
    Tensor x = rand_t(rng, 1, 4, 6, 6);
    ConvParams p(4, 4, 3, 1, 1);
    Rng r2(12);
    init_conv(p, r2);
    Tensor y1 = conv2d(x, p), y2 = conv2d(x, p);
    CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * 4) == 0);
}
