#include <doctest.h>

#include <cmath>

#include "m2s/drm.hpp"
#include "m2s/fdcheck.hpp"
#include "m2s/gradcheck.hpp"

using namespace m2s;

namespace {

template <typename T>
Tensor<T> randt(Rng& rng, Shape4 s, double lo = -1, double hi = 1) {
    std::vector<T> d(s.numel());
    for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_vector(s, std::move(d));
}

template <typename T>
void zero_layer(ConvLayer<T>& layer) {
    layer.zero_weights();
}

}  // namespace

TEST_CASE("crm with a zero fc gate returns exactly half the input") {
    Rng rng(1);
    Crm<float> crm(rng, 8);
    zero_layer(crm.fc());
    auto x = randt<float>(rng, {2, 8, 6, 6});
    auto hi = randt<float>(rng, {2, 8, 6, 6});
    auto cr = crm.forward(x, hi);
    REQUIRE(cr.shape() == x.shape());
    for (std::size_t i = 0; i < cr.numel(); ++i) {
        CHECK(cr.value()[i] == doctest::Approx(0.5f * x.value()[i]).epsilon(1e-6));
    }
}

TEST_CASE("crm on an all-zero input returns zero regardless of weights") {
    Rng rng(2);
    Crm<float> crm(rng, 4);
    auto x = Tensor<float>::zeros({1, 4, 5, 5});
    auto hi = randt<float>(rng, {1, 4, 5, 5});
    auto cr = crm.forward(x, hi);
    for (float v : cr.value()) CHECK(v == 0.f);
}

TEST_CASE("hand-built single-channel crm gates by sigmoid(2)") {
    Rng rng(3);
    Crm<double> crm(rng, 1);
    // concat conv forced constant 2, fc reads only the avg statistic
    zero_layer(crm.concat_conv());
    crm.concat_conv().bias().mutable_value()[0] = 2.0;
    zero_layer(crm.fc());
    crm.fc().weight().mutable_value()[0] = 1.0;  // [1,2,1,1]: avg slot, std slot stays 0
    auto x = randt<double>(rng, {1, 1, 2, 2});
    auto hi = randt<double>(rng, {1, 1, 2, 2});
    auto cr = crm.forward(x, hi);
    const double m = 1.0 / (1.0 + std::exp(-2.0));  // 0.880797...
    CHECK(m == doctest::Approx(0.880797).epsilon(1e-6));
    for (std::size_t i = 0; i < cr.numel(); ++i) {
        CHECK(cr.value()[i] == doctest::Approx(m * x.value()[i]).epsilon(1e-9));
    }
}

TEST_CASE("srm zero-init closed form: LF = 0.5*(0.3*mid + 0.7*cr) + 0.5") {
    Rng rng(4);
    Srm<float> srm(rng, 3);
    zero_layer(srm.stats_conv());
    zero_layer(srm.bias_conv());
    auto cr = randt<float>(rng, {1, 6, 4, 4});
    auto mid = randt<float>(rng, {1, 6, 4, 4});
    auto low = randt<float>(rng, {1, 3, 4, 4});
    auto lf = srm.forward(cr, mid, low);
    for (std::size_t i = 0; i < lf.numel(); ++i) {
        const float expect = 0.5f * (0.3f * mid.value()[i] + 0.7f * cr.value()[i]) + 0.5f;
        CHECK(lf.value()[i] == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("srm at the beta = 1 endpoint suppresses cr in the gated branch") {
    Rng rng(5);
    Srm<float> srm(rng, 2);
    zero_layer(srm.stats_conv());
    zero_layer(srm.bias_conv());
    srm.beta().mutable_value()[0] = 1.0f;
    auto cr = randt<float>(rng, {1, 4, 3, 3});
    auto mid = randt<float>(rng, {1, 4, 3, 3});
    auto low = randt<float>(rng, {1, 2, 3, 3});
    auto lf = srm.forward(cr, mid, low);
    for (std::size_t i = 0; i < lf.numel(); ++i) {
        CHECK(lf.value()[i] == doctest::Approx(0.5f * mid.value()[i] + 0.5f).epsilon(1e-5));
    }
}

TEST_CASE("gradient of LF with respect to beta matches finite differences") {
    Rng rng(6);
    for (int seed = 0; seed < 5; ++seed) {
        Rng r(seed * 31 + 7);
        Srm<double> srm(r, 3);
        auto cr = randt<double>(r, {1, 4, 4, 4});
        auto mid = randt<double>(r, {1, 4, 4, 4});
        auto low = randt<double>(r, {1, 3, 4, 4});
        auto res = fd_check(
            "dLF/dbeta",
            [&] {
                Rng pr(17);
                auto w = randt<double>(pr, {1, 4, 4, 4});
                return sum(mul(srm.forward(cr, mid, low), w));
            },
            {srm.beta()}, rng);
        INFO("seed " << seed);
        CHECK(res.pass);
    }
}

TEST_CASE("drm zero-attention composition matches the stacked closed forms") {
    Rng rng(7);
    Drm<float> drm(rng, 8, 8, 12, 16, 0, 1, 2);
    zero_layer(drm.crm().fc());
    zero_layer(drm.srm().stats_conv());
    zero_layer(drm.srm().bias_conv());
    TriFeatures<float> tri;
    tri.low = randt<float>(rng, {1, 8, 8, 8});
    tri.mid = randt<float>(rng, {1, 12, 4, 4});
    tri.high = randt<float>(rng, {1, 16, 2, 2});
    auto lf = drm.forward(tri.low, tri);
    // mid' computed through the module's own adapter
    auto mid_a = drm.mid_adapter().forward(tri.mid, 8, 8);
    REQUIRE(lf.shape() == tri.low.shape());
    for (std::size_t i = 0; i < lf.numel(); ++i) {
        const float expect =
            0.5f * (0.3f * mid_a.value()[i] + 0.7f * 0.5f * tri.low.value()[i]) + 0.5f;
        CHECK(lf.value()[i] == doctest::Approx(expect).epsilon(1e-5));
    }
}

TEST_CASE("drm preserves the input shape") {
    Rng rng(8);
    Drm<float> drm(rng, 64, 64, 128, 256, 0, 1, 2);
    TriFeatures<float> tri;
    tri.low = randt<float>(rng, {1, 64, 16, 16});
    tri.mid = randt<float>(rng, {1, 128, 8, 8});
    tri.high = randt<float>(rng, {1, 256, 4, 4});
    CHECK(drm.forward(tri.low, tri).shape() == Shape4{1, 64, 16, 16});
}

TEST_CASE("gating keeps refined features inside their input envelopes") {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        Crm<float> crm(rng, 6);
        auto x = randt<float>(rng, {1, 6, 5, 5}, -3, 3);
        auto hi = randt<float>(rng, {1, 6, 5, 5}, -3, 3);
        auto cr = crm.forward(x, hi);
        auto amax = [](const Tensor<float>& t) {
            float m = 0;
            for (float v : t.value()) m = std::max(m, std::abs(v));
            return m;
        };
        CHECK(amax(cr) <= amax(x) + 1e-6f);

        // with beta in (0,1) the gated blend is convex, so LF stays within
        // max(|mid|, |cr|) plus the unit bias plane
        Srm<float> srm(rng, 3);
        auto mid = randt<float>(rng, {1, 6, 5, 5}, -3, 3);
        auto low = randt<float>(rng, {1, 3, 5, 5}, -3, 3);
        auto lf = srm.forward(cr, mid, low);
        CHECK(amax(lf) <= std::max(amax(mid), amax(cr)) + 1.0f + 1e-6f);
    }
}

TEST_CASE("beta participates in the gradient under random weights") {
    for (int seed = 0; seed < 5; ++seed) {
        Rng rng(seed * 13 + 5);
        Drm<double> drm(rng, 4, 4, 6, 8, 0, 1, 2);
        TriFeatures<double> tri;
        tri.low = randt<double>(rng, {1, 4, 8, 8});
        tri.mid = randt<double>(rng, {1, 6, 4, 4});
        tri.high = randt<double>(rng, {1, 8, 2, 2});
        drm.srm().beta().zero_grad();
        backward(sum(drm.forward(tri.low, tri)));
        INFO("seed " << seed);
        CHECK(std::abs(drm.srm().beta().grad()[0]) > 1e-8);
    }
}

TEST_CASE("se baseline with zero-initialized excitation halves the input") {
    Rng rng(10);
    SeBlock<float> se(rng, 32);
    zero_layer(se.fc1());
    zero_layer(se.fc2());
    auto x = randt<float>(rng, {1, 32, 6, 6});
    auto y = se.forward(x);
    for (std::size_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value()[i] == doctest::Approx(0.5f * x.value()[i]).epsilon(1e-6));
    }
}

TEST_CASE("cbam with all convolutions zero-initialized quarters the input") {
    Rng rng(11);
    CbamBlock<float> cbam(rng, 16);
    zero_layer(cbam.mlp1());
    zero_layer(cbam.mlp2());
    zero_layer(cbam.spatial());
    auto x = randt<float>(rng, {1, 16, 5, 5});
    auto y = cbam.forward(x);
    for (std::size_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value()[i] == doctest::Approx(0.25f * x.value()[i]).epsilon(1e-5));
    }
}

TEST_CASE("attention baselines preserve shape for every kind") {
    Rng rng(12);
    auto x = randt<float>(rng, {1, 64, 16, 16});
    for (AttentionKind kind : {AttentionKind::Se, AttentionKind::Eca, AttentionKind::Cbam}) {
        AttentionBaseline<float> block(rng, kind, 64);
        CHECK(block.forward(x).shape() == x.shape());
    }
    CHECK_THROWS_AS(AttentionBaseline<float>(rng, AttentionKind::None, 8), ValidationError);
    CHECK_THROWS_AS(attention_from_string("bogus"), ValidationError);
}

TEST_CASE("drm and baseline gradients match finite differences") {
    for (const char* op : {"crm", "srm_beta", "drm", "se", "eca", "cbam"}) {
        GradcheckOptions opts;
        opts.op_filter = op;
        auto report = run_gradcheck(opts);
        INFO("op = " << op);
        CHECK(report.all_pass);
    }
}
