#include <gtest/gtest.h>

#include <cmath>

#include "poar/gradcheck.hpp"
#include "poar/ops.hpp"
#include "poar/transformer.hpp"
#include "test_util.hpp"

using namespace poar;
using poar::testing::random_tensor;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
    Tensor c = Tensor::matrix(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

constexpr double inf = std::numeric_limits<double>::infinity();

}  // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
    auto id = Tensor::from_rows({{1, 0}, {0, 1}});
    auto b = Tensor::from_rows({{3, 4}, {5, 6}});
    EXPECT_EQ(matmul(id, b), b);
    EXPECT_EQ(matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}})), Tensor::from_rows({{11}}));
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(7);
    auto a = random_tensor({4, 5}, rng);
    auto b = random_tensor({5, 3}, rng);
    EXPECT_LT(max_abs_diff(matmul(a, b), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Tensor::matrix(2, 3), Tensor::matrix(2, 3)), shape_error);
}

TEST(Matmul, AssociativityProperty) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6), p = 1 + rng.below(6);
        auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), c = random_tensor({n, p}, rng);
        EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-10);
    }
}

TEST(MaskedSoftmax, Examples) {
    auto uniform = masked_softmax(Tensor::vector({0, 0}), Tensor::vector({0, 0}));
    EXPECT_DOUBLE_EQ(uniform[0], 0.5);
    EXPECT_DOUBLE_EQ(uniform[1], 0.5);

    auto single = masked_softmax(Tensor::vector({5, 1}), Tensor::vector({0, -inf}));
    EXPECT_EQ(single[0], 1.0);
    EXPECT_EQ(single[1], 0.0);

    auto three = masked_softmax(Tensor::vector({1, 2, 3}), Tensor::vector({0, 0, mask_sentinel<double>}));
    const double e = std::exp(1.0);
    EXPECT_NEAR(three[0], 1 / (1 + e), 1e-15);
    EXPECT_NEAR(three[1], e / (1 + e), 1e-15);
    EXPECT_EQ(three[2], 0.0);
}

TEST(MaskedSoftmax, AllMaskedIsDegenerate) {
    EXPECT_THROW(masked_softmax(Tensor::vector({1, 2}), Tensor::vector({-inf, mask_sentinel<double>})), mask_error);
}

TEST(MaskedSoftmax, RejectsNonBinaryMask) {
    EXPECT_THROW(masked_softmax(Tensor::vector({1, 2}), Tensor::vector({0, -3})), mask_error);
}

TEST(MaskedSoftmax, RandomProperties) {
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(12);
        auto logits = random_tensor({n}, rng, 5.0);
        Tensor mask({n});
        for (auto& m : mask.storage()) m = rng.bernoulli(0.4) ? mask_sentinel<double> : 0.0;
        mask[rng.below(n)] = 0.0;
        auto out = masked_softmax(logits, mask);
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_GE(out[i], 0.0);
            if (mask[i] != 0.0) EXPECT_EQ(out[i], 0.0);
            total += out[i];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);

        auto shifted = logits;
        const double c = rng.normal(0.0, 10.0);
        for (auto& v : shifted.storage()) v += c;
        EXPECT_LT(max_abs_diff(masked_softmax(shifted, mask), out), 1e-12);
    }
}

TEST(LayerNorm, ConstantInputMapsToBias) {
    Tape<double> tape;
    auto y = layer_norm(tape.constant(Tensor::vector({1, 1, 1, 1})), tape.constant(Tensor::vector({1, 1, 1, 1})),
                        tape.constant(Tensor({4})));
    for (double v : y.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoPointHandComputation) {
    Tape<double> tape;
    auto y = layer_norm(tape.constant(Tensor::vector({-1, 1})), tape.constant(Tensor::vector({1, 1})),
                        tape.constant(Tensor({2})), 1e-14);
    EXPECT_NEAR(y.value()[0], -1.0, 1e-12);
    EXPECT_NEAR(y.value()[1], 1.0, 1e-12);
}

TEST(LayerNorm, UnitGainOutputIsStandardized) {
    Rng rng(5);
    Tape<double> tape;
    auto y = layer_norm(tape.constant(random_tensor({3, 16}, rng, 4.0)), tape.constant(Tensor({16}, 1.0)),
                        tape.constant(Tensor({16})), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (double v : y.value().row(r)) mean += v / 16;
        for (double v : y.value().row(r)) var += (v - mean) * (v - mean) / 16;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-9);
    }
}

TEST(LayerNorm, RequiresTwoFeatures) {
    Tape<double> tape;
    EXPECT_THROW(layer_norm(tape.constant(Tensor::vector({1})), tape.constant(Tensor::vector({1})),
                            tape.constant(Tensor::vector({0}))),
                 shape_error);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
    Rng rng(9);
    Parameter<double> x("x", random_tensor({2, 6}, rng));
    Parameter<double> g("gain", random_tensor({6}, rng));
    Parameter<double> b("bias", random_tensor({6}, rng));
    auto report = grad_check<double>(
        [&](Tape<double>& t) { return sum(layer_norm(t.param(x), t.param(g), t.param(b))); }, {&x, &g, &b},
        {.step = 1e-5, .samples_per_param = 100});
    EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(Gelu, ReferencePoints) {
    Tape<double> tape;
    auto y = gelu(tape.constant(Tensor::vector({0.0, 1.0, 20.0, -20.0})));
    EXPECT_EQ(y.value()[0], 0.0);
    EXPECT_NEAR(y.value()[1], 0.8412, 1e-4);
    EXPECT_NEAR(y.value()[2], 20.0, 1e-12);
    EXPECT_NEAR(y.value()[3], 0.0, 1e-12);
}

TEST(Gelu, MonotoneForPositiveInputs) {
    double prev = 0.0;
    for (double x = 0.01; x < 10.0; x += 0.01) {
        Tape<double> tape;
        double y = gelu(tape.constant(Tensor::vector({x}))).value()[0];
        EXPECT_GT(y, prev);
        prev = y;
    }
}

TEST(Backward, LinearAndQuadratic) {
    Rng rng(1);
    Parameter<double> p("p", random_tensor({3, 2}, rng));
    {
        Tape<double> tape;
        tape.backward(sum(tape.param(p)));
        for (double v : p.grad.storage()) EXPECT_EQ(v, 1.0);
    }
    p.zero_grad();
    {
        Tape<double> tape;
        auto v = tape.param(p);
        tape.backward(sum(mul(v, v)));
        for (std::size_t i = 0; i < p.value.size(); ++i) EXPECT_DOUBLE_EQ(p.grad[i], 2 * p.value[i]);
    }
}

TEST(Backward, ParameterUsedTwiceAccumulatesOnce) {
    Parameter<double> p("p", Tensor::vector({1.0, 2.0}));
    Tape<double> tape;
    auto a = tape.param(p);
    auto b = tape.param(p);
    EXPECT_EQ(a.id(), b.id());
    tape.backward(sum(add(a, b)));
    EXPECT_EQ(p.grad[0], 2.0);
    EXPECT_EQ(p.grad[1], 2.0);
}

TEST(Backward, NonScalarRootIsAContractError) {
    Parameter<double> p("p", Tensor::vector({1.0, 2.0}));
    Tape<double> tape;
    EXPECT_THROW(tape.backward(tape.param(p)), usage_error);
}

TEST(Tape, NonFiniteValueIsAnError) {
    Tape<double> tape;
    auto a = tape.constant(Tensor::vector({1e300}));
    EXPECT_THROW(mul(a, a), numeric_error);
}

TEST(GradCheck, QuadraticIsExact) {
    Parameter<double> p("p", Tensor::vector({0.3, -1.2, 2.5}));
    auto report = grad_check<double>(
        [&](Tape<double>& t) {
            auto v = t.param(p);
            return sum(mul(v, v));
        },
        {&p});
    EXPECT_LT(report.max_rel_error, 1e-9);
    EXPECT_EQ(report.checked, 3u);
}

TEST(GradCheck, DetectsWrongGradient) {
    Parameter<double> p("p", Tensor::vector({0.3, -1.2, 2.5}));
    auto report = grad_check<double>(
        [&](Tape<double>& t) {
            auto v = t.param(p);
            return sum(mul(v, v));
        },
        {&p}, {.fault_scale = 1.5});
    EXPECT_GT(report.max_rel_error, 0.1);
}

TEST(GradCheck, CompositeOfOps) {
    Rng rng(21);
    Parameter<double> a("a", random_tensor({4, 3}, rng));
    Parameter<double> b("b", random_tensor({3, 5}, rng));
    Parameter<double> bias("bias", random_tensor({5}, rng));
    auto report = grad_check<double>(
        [&](Tape<double>& t) {
            auto h = gelu(add_row(matmul(t.param(a), t.param(b)), t.param(bias)));
            auto n = l2_normalize_rows(concat_rows<double>({h, gather_rows(h, {2, 0})}));
            auto m = mean_row_groups(n, 2);
            auto s = masked_softmax(matmul(m, transpose(m)), Tensor::matrix(3, 3));
            return sum(mul(s, scale(s, 3.0)));
        },
        {&a, &b, &bias}, {.samples_per_param = 100});
    EXPECT_LT(report.max_rel_error, 1e-5);
}

TEST(Attention, MatchesComposedPerHeadPath) {
    Rng rng(4);
    const std::size_t n = 5, d = 4, heads = 2, hd = 2;
    auto q = random_tensor({2 * n, d}, rng), k = random_tensor({2 * n, d}, rng), v = random_tensor({2 * n, d}, rng);
    Tensor mask = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if ((i + 2 * j) % 3 == 0 && i != j) mask(i, j) = mask_sentinel<double>;
    Tape<double> tape;
    auto fused = multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), mask, heads, n);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh = Tensor::matrix(n, hd), kh = Tensor::matrix(n, hd), vh = Tensor::matrix(n, hd);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < hd; ++j) {
                    qh(i, j) = q(b * n + i, h * hd + j);
                    kh(i, j) = k(b * n + i, h * hd + j);
                    vh(i, j) = v(b * n + i, h * hd + j);
                }
            Tensor logits = matmul(qh, kh.transposed());
            for (auto& x : logits.storage()) x /= std::sqrt(double(hd));
            Tensor o = matmul(masked_softmax(logits, mask), vh);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < hd; ++j)
                    EXPECT_NEAR(fused.value()(b * n + i, h * hd + j), o(i, j), 1e-14);
        }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
    Rng rng(8);
    const std::size_t n = 4;
    Parameter<double> q("q", random_tensor({2 * n, 6}, rng)), k("k", random_tensor({2 * n, 6}, rng)),
        v("v", random_tensor({2 * n, 6}, rng));
    Tensor masks = Tensor::matrix(2 * n, n);
    for (std::size_t r = 0; r < 2 * n; ++r)
        for (std::size_t j = 0; j < n; ++j)
            if (j > r % n) masks(r, j) = mask_sentinel<double>;
    auto report = grad_check<double>(
        [&](Tape<double>& t) {
            auto o = multi_head_attention(t.param(q), t.param(k), t.param(v), masks, 3, n);
            return sum(mul(o, o));
        },
        {&q, &k, &v}, {.samples_per_param = 100});
    EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(TransformerBlock, ZeroOutputProjectionsGiveResidualIdentity) {
    Rng rng(2);
    ParameterStore<double> store;
    auto block = TransformerBlock<double>::create(store, "b.", 8, 2, 32, rng);
    std::fill(block.wo->value.storage().begin(), block.wo->value.storage().end(), 0.0);
    std::fill(block.w2->value.storage().begin(), block.w2->value.storage().end(), 0.0);
    Tape<double> tape;
    auto x = random_tensor({6, 8}, rng);
    auto y = block.forward(tape.constant(x), Tensor::matrix(3, 3), 3);
    EXPECT_EQ(y.value(), x);
}

TEST(TransformerBlock, ShapePreservedAndGradientChecks) {
    Rng rng(12);
    ParameterStore<double> store;
    auto block = TransformerBlock<double>::create(store, "b.", 8, 2, 16, rng);
    Parameter<double> x("x", random_tensor({6, 8}, rng));
    Tensor mask = Tensor::matrix(3, 3);
    mask(0, 2) = mask_sentinel<double>;
    {
        Tape<double> tape;
        EXPECT_EQ(block.forward(tape.param(x), mask, 3).shape(), x.value.shape());
    }
    auto params = store.all();
    params.push_back(&x);
    auto report = grad_check<double>(
        [&](Tape<double>& t) {
            auto y = block.forward(t.param(x), mask, 3);
            return sum(mul(y, y));
        },
        params, {.samples_per_param = 24});
    EXPECT_LT(report.max_rel_error, 1e-6);
}
