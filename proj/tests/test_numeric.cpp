// Linear algebra kernels, the Adam optimizer and the finite-difference
// checker, pinned against hand-computed values.

#include <gtest/gtest.h>

#include <cmath>

#include "confedmade/adam.hpp"
#include "confedmade/gradcheck.hpp"
#include "confedmade/linalg.hpp"
#include "confedmade/rng.hpp"

using namespace confedmade;

namespace {

DenseMatrix mat(std::size_t r, std::size_t c, std::initializer_list<double> v) {
    DenseMatrix m(r, c);
    std::copy(v.begin(), v.end(), m.values.begin());
    return m;
}

TEST(Dot, MatchesNaiveSum) {
    Vector a, b;
    for (std::size_t n : {1u, 2u, 3u, 4u, 5u, 7u, 8u, 13u, 64u, 100u}) {
        a.assign(n, 0.0);
        b.assign(n, 0.0);
        double expected = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = 0.5 * static_cast<double>(i) - 1.0;
            b[i] = 1.0 / static_cast<double>(i + 1);
        }
        for (std::size_t i = 0; i < n; ++i) expected += a[i] * b[i];
        EXPECT_NEAR(dot(a.data(), b.data(), n), expected, 1e-12) << "n=" << n;
    }
}

TEST(MaskedAffine, TinyOracle) {
    // y = b + (W ⊙ M) x with W=[[2,3]], M=[[1,0]], b=[1], x=[1,1] -> [3]
    const DenseMatrix w = mat(1, 2, {2.0, 3.0});
    const DenseMatrix m = mat(1, 2, {1.0, 0.0});
    const Vector y = masked_affine_forward({1.0, 1.0}, w, m, {1.0});
    ASSERT_EQ(y.size(), 1u);
    EXPECT_DOUBLE_EQ(y[0], 3.0);
}

TEST(MaskedAffine, RowMaskKillsUnit) {
    // W all ones, second row fully masked: y = [1+2, 0] for x=[1,2], b=0.
    const DenseMatrix w = mat(2, 2, {1.0, 1.0, 1.0, 1.0});
    const DenseMatrix m = mat(2, 2, {1.0, 1.0, 0.0, 0.0});
    const Vector y = masked_affine_forward({1.0, 2.0}, w, m, {0.0, 0.0});
    EXPECT_DOUBLE_EQ(y[0], 3.0);
    EXPECT_DOUBLE_EQ(y[1], 0.0);
}

TEST(MaskedAffine, RejectsNonBinaryMask) {
    const DenseMatrix w = mat(1, 1, {1.0});
    const DenseMatrix m = mat(1, 1, {0.5});
    EXPECT_THROW(masked_affine_forward({1.0}, w, m, {0.0}), ValidationError);
}

TEST(MaskedAffine, BackwardMatchesFiniteDifferences) {
    RngStream rng(42);
    DenseMatrix w(3, 4);
    DenseMatrix m(3, 4);
    for (double& v : w.values) v = rng.normal(0.0, 1.0);
    for (double& v : m.values) v = rng.bernoulli(0.6) ? 1.0 : 0.0;
    Vector x = {0.3, -0.2, 0.9, 0.5};
    Vector b = {0.1, -0.4, 0.2};
    const Vector w_out = {0.7, -1.1, 0.4};  // fixed cotangent: L = w_out . y

    const auto loss = [&] {
        const Vector y = masked_affine_forward(x, w, m, b);
        return dot(w_out.data(), y.data(), y.size());
    };
    const MaskedAffineGrads g = masked_affine_backward(w_out, x, w, m);

    std::vector<double*> ptrs;
    Vector analytic;
    for (std::size_t i = 0; i < w.size(); ++i) ptrs.push_back(&w.values[i]);
    analytic.insert(analytic.end(), g.grad_w.values.begin(), g.grad_w.values.end());
    for (double& v : b) ptrs.push_back(&v);
    analytic.insert(analytic.end(), g.grad_b.begin(), g.grad_b.end());
    for (double& v : x) ptrs.push_back(&v);
    analytic.insert(analytic.end(), g.grad_x.begin(), g.grad_x.end());

    const GradCheckResult r = finite_diff_check(loss, ptrs, analytic, 1e-5);
    EXPECT_LT(r.max_rel_err, 1e-5);
}

TEST(MaskedAffine, GradientZeroWhereMaskZero) {
    const DenseMatrix w = mat(2, 2, {1.0, 2.0, 3.0, 4.0});
    const DenseMatrix m = mat(2, 2, {1.0, 0.0, 0.0, 1.0});
    const auto g = masked_affine_backward({1.0, 1.0}, {5.0, 6.0}, w, m);
    EXPECT_DOUBLE_EQ(g.grad_w.at(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(g.grad_w.at(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(g.grad_w.at(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(g.grad_w.at(1, 1), 6.0);
}

TEST(BatchedProducts, MatchSingleRowKernel) {
    RngStream rng(7);
    DenseMatrix x(5, 3), w(4, 3);
    Vector b = {0.1, 0.2, 0.3, 0.4};
    for (double& v : x.values) v = rng.normal(0.0, 1.0);
    for (double& v : w.values) v = rng.normal(0.0, 1.0);
    DenseMatrix y;
    affine_batch(x, w, b, y);
    DenseMatrix ones(4, 3, 1.0);
    for (std::size_t s = 0; s < x.rows; ++s) {
        Vector xs(x.row(s), x.row(s) + x.cols);
        const Vector ys = masked_affine_forward(xs, w, ones, b);
        for (std::size_t r = 0; r < w.rows; ++r) EXPECT_NEAR(y.at(s, r), ys[r], 1e-12);
    }
}

TEST(Adam, SingleStepHandValue) {
    AdamConfig cfg;  // lr 1e-3, betas (0.9, 0.999), eps 1e-8, wd 0
    AdamMoments mom;
    double theta = 1.0;
    const double g = 1.0;
    adam_step(&theta, &g, 1, mom, 1, cfg, false);
    // mhat = 1, vhat = 1: theta = 1 - lr / (1 + eps)
    EXPECT_NEAR(theta, 1.0 - 1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, TwoStepTraceMatchesRecurrence) {
    AdamConfig cfg;
    cfg.weight_decay = 0.01;
    AdamMoments mom;
    double theta = 0.5;
    const double g1 = 0.3, g2 = -0.2;

    // independent recurrence
    double m = 0.0, v = 0.0, ref = 0.5;
    const auto step = [&](double g, int t) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
        const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
        ref -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * ref);
    };
    step(g1, 1);
    step(g2, 2);

    adam_step(&theta, &g1, 1, mom, 1, cfg, true);
    adam_step(&theta, &g2, 1, mom, 2, cfg, true);
    EXPECT_NEAR(theta, ref, 1e-12);
}

TEST(Adam, DecayFlagGatesWeightDecay) {
    AdamConfig cfg;
    cfg.weight_decay = 0.5;
    AdamMoments m1, m2;
    double with_decay = 1.0, without = 1.0;
    const double g = 0.0;
    adam_step(&with_decay, &g, 1, m1, 1, cfg, true);
    adam_step(&without, &g, 1, m2, 1, cfg, false);
    EXPECT_LT(with_decay, 1.0);
    EXPECT_DOUBLE_EQ(without, 1.0);
}

TEST(Adam, NonFiniteGradientNamesTensor) {
    AdamConfig cfg;
    AdamMoments mom;
    double theta = 1.0;
    const double g = std::numeric_limits<double>::quiet_NaN();
    try {
        adam_step(&theta, &g, 1, mom, 1, cfg, false, "W1");
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("W1"), std::string::npos);
    }
}

TEST(Adam, OptimizerSlotsAreIndependent) {
    AdamOptimizer opt{AdamConfig{}};
    const std::size_t a = opt.register_slot(1, false, "a");
    const std::size_t b = opt.register_slot(1, false, "b");
    double xa = 1.0, xb = 1.0;
    const double ga = 1.0, gb = -1.0;
    opt.begin_step();
    opt.update(a, &xa, &ga);
    opt.update(b, &xb, &gb);
    EXPECT_LT(xa, 1.0);
    EXPECT_GT(xb, 1.0);
    EXPECT_NEAR(xa - 1.0, -(xb - 1.0), 1e-15);
}

TEST(GradCheck, QuadraticOracle) {
    Vector x = {1.0, -2.0, 0.5};
    const Vector c = {0.3, 0.1, -0.7};
    const auto loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - c[i]) * (x[i] - c[i]);
        return s;
    };
    std::vector<double*> ptrs;
    Vector analytic;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ptrs.push_back(&x[i]);
        analytic.push_back(2.0 * (x[i] - c[i]));
    }
    const GradCheckResult r = finite_diff_check(loss, ptrs, analytic, 1e-4);
    EXPECT_LT(r.max_rel_err, 1e-8);
    EXPECT_EQ(r.checked, 3u);
}

TEST(GradCheck, RejectsNonDeterministicLoss) {
    double x = 1.0;
    int calls = 0;
    const auto loss = [&] { return x + 1e-9 * (calls++); };
    EXPECT_THROW(finite_diff_check(loss, {&x}, {1.0}), NumericError);
}

TEST(GradCheck, FlagsWrongGradient) {
    double x = 2.0;
    const auto loss = [&] { return x * x; };
    const GradCheckResult r = finite_diff_check(loss, {&x}, {1.0});  // true grad is 4
    EXPECT_GT(r.max_rel_err, 0.5);
}

TEST(Rng, DeriveSeedIsDeterministicAndSpread) {
    const std::uint64_t a = derive_seed(1, "mask", {0, 0});
    EXPECT_EQ(a, derive_seed(1, "mask", {0, 0}));
    EXPECT_NE(a, derive_seed(1, "mask", {0, 1}));
    EXPECT_NE(a, derive_seed(1, "mask", {1, 0}));
    EXPECT_NE(a, derive_seed(2, "mask", {0, 0}));
    EXPECT_NE(a, derive_seed(1, "batch", {0, 0}));
}

TEST(Rng, PermutationIsValidAndSeedStable) {
    RngStream r1(123), r2(123), r3(124);
    const auto p1 = r1.permutation(20);
    const auto p2 = r2.permutation(20);
    const auto p3 = r3.permutation(20);
    EXPECT_EQ(p1, p2);
    EXPECT_NE(p1, p3);
    std::vector<bool> seen(20, false);
    for (std::size_t v : p1) {
        ASSERT_LT(v, 20u);
        EXPECT_FALSE(seen[v]);
        seen[v] = true;
    }
}

TEST(Rng, Uniform01StaysInRange) {
    RngStream rng(9);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform01();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
}

TEST(Rng, UniformU64CoversInclusiveRange) {
    RngStream rng(5);
    bool lo = false, hi = false;
    for (int i = 0; i < 2000; ++i) {
        const std::uint64_t v = rng.uniform_u64(3, 7);
        ASSERT_GE(v, 3u);
        ASSERT_LE(v, 7u);
        lo = lo || v == 3;
        hi = hi || v == 7;
    }
    EXPECT_TRUE(lo);
    EXPECT_TRUE(hi);
}

}  // namespace
