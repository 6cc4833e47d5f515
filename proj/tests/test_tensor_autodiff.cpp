#include <doctest.h>

#include "m2s/gradcheck.hpp"
#include "m2s/ops.hpp"

using namespace m2s;

namespace {

Tensor<double> randt(Rng& rng, Shape4 s, bool rg = false) {
    std::vector<double> d(s.numel());
    for (auto& v : d) v = rng.uniform(-2, 2);
    return Tensor<double>::from_vector(s, std::move(d), rg);
}

}  // namespace

TEST_CASE("tensor construction enforces the shape/data invariant") {
    auto t = Tensor<float>::zeros({2, 3, 4, 5});
    CHECK(t.numel() == 2u * 3 * 4 * 5);
    CHECK(t.shape().str() == "[2,3,4,5]");
    CHECK_THROWS_AS(Tensor<float>::from_vector({1, 1, 2, 2}, {1.f, 2.f, 3.f}),
                    ValidationError);
}

TEST_CASE("grad buffer, when allocated, matches the value shape") {
    auto t = Tensor<float>::full({1, 2, 2, 2}, 1.f, true);
    CHECK_FALSE(t.has_grad());
    t.zero_grad();
    REQUIRE(t.has_grad());
    CHECK(t.grad().size() == t.numel());
}

TEST_CASE("backward of sum gives all-ones") {
    auto x = Tensor<double>::full({1, 2, 3, 3}, 0.7, true);
    auto loss = sum(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward of sum(sigmoid(x)) at zero gives 0.25 everywhere") {
    auto x = Tensor<double>::zeros({1, 1, 4, 4}, true);
    backward(sum(sigmoid(x)));
    for (double g : x.grad()) CHECK(g == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar losses") {
    auto x = Tensor<double>::full({1, 1, 2, 2}, 1.0, true);
    CHECK_THROWS_AS(backward(mul_scalar(x, 2.0)), ValidationError);
}

TEST_CASE("a reused subexpression accumulates gradient once per use") {
    auto x = Tensor<double>::full({1, 1, 1, 1}, 3.0, true);
    auto y = add(x, x);          // dy/dx = 2
    auto loss = mul(y, y);       // d/dx (2x)^2 = 8x = 24
    backward(sum(loss));
    CHECK(x.grad()[0] == doctest::Approx(24.0));
}

TEST_CASE("tensors not reachable from the loss keep zero grad") {
    auto x = Tensor<double>::full({1, 1, 2, 2}, 1.0, true);
    auto unused = Tensor<double>::full({1, 1, 2, 2}, 1.0, true);
    unused.zero_grad();
    backward(sum(mul_scalar(x, 3.0)));
    for (double g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("NoGradGuard suppresses recording") {
    auto x = Tensor<double>::full({1, 1, 2, 2}, 1.0, true);
    NoGradGuard ng;
    auto y = sigmoid(x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward ops keep finite inputs finite") {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = randt(rng, {1, 4, 6, 6});
        auto y = spatial_stats(leaky_relu(sigmoid(x)));
        auto [avg, sd] = style_pool(y);
        auto z = add(mul(avg, sd), exp(clamp(avg, -3, 3)));
        for (double v : z.value()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("identical op sequences produce bit-identical results") {
    Rng a(77), b(77);
    auto xa = randt(a, {2, 3, 8, 8});
    auto xb = randt(b, {2, 3, 8, 8});
    auto ya = bilinear_resize(sigmoid(xa), 5, 11);
    auto yb = bilinear_resize(sigmoid(xb), 5, 11);
    REQUIRE(ya.numel() == yb.numel());
    for (std::size_t i = 0; i < ya.numel(); ++i) CHECK(ya.value()[i] == yb.value()[i]);
}

TEST_CASE("value semantics: clone detaches storage, copies share it") {
    auto x = Tensor<float>::full({1, 1, 1, 2}, 1.f, false);
    Tensor<float> shared = x;
    Tensor<float> deep = x.clone();
    x.mutable_value()[0] = 9.f;
    CHECK(shared.value()[0] == 9.f);
    CHECK(deep.value()[0] == 1.f);
}

TEST_CASE("elementwise op gradients match finite differences over five seeds") {
    for (const char* op : {"sigmoid", "leaky_relu", "min_max", "bce_logits", "mul_div",
                           "add_sub", "exp_clamp"}) {
        GradcheckOptions opts;
        opts.op_filter = op;
        auto report = run_gradcheck(opts);
        INFO("op = " << op);
        CHECK(report.all_pass);
    }
}

TEST_CASE("gradcheck harness catches a corrupted gradient rule") {
    GradcheckOptions opts;
    opts.op_filter = "sigmoid";
    opts.corrupt = true;
    CHECK_FALSE(run_gradcheck(opts).all_pass);
}
