#include <doctest.h>

#include <cmath>
#include <limits>

#include "malimg/error.hpp"
#include "malimg/losses.hpp"
#include "malimg/rng.hpp"

using namespace malimg;

namespace {

constexpr double kTol = 1e-6;

ClassProbs probs_with(std::size_t classes, std::size_t label, double p_true) {
    ClassProbs p{std::vector<Real>(classes, static_cast<Real>((1.0 - p_true) / static_cast<double>(classes - 1)))};
    p.probs[label] = static_cast<Real>(p_true);
    return p;
}

std::vector<double> softmax(const std::vector<double>& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    std::vector<double> e(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
    for (auto& v : e) v /= s;
    return e;
}

}  // namespace

TEST_CASE("cross-entropy examples") {
    const LossConfig cfg;
    CHECK(std::abs(cross_entropy({ClassProbs{{0, 1, 0}}}, {{3, 1}}, cfg)) < kTol);
    const ClassProbs uniform{std::vector<Real>(61, Real(1.0 / 61.0))};
    CHECK(std::abs(cross_entropy({uniform}, {{61, 17}}, cfg) - std::log(61.0)) < kTol);
    CHECK(std::abs(std::log(61.0) - 4.1109) < 1e-4);

    const double two = cross_entropy({probs_with(4, 0, 0.5), probs_with(4, 2, 0.25)}, {{4, 0}, {4, 2}}, cfg);
    CHECK(std::abs(two - (std::log(2.0) + std::log(4.0)) / 2) < kTol);
    CHECK(std::abs(two - 1.0397) < 1e-4);

    // Saturated softmax: ln is clamped at the epsilon.
    CHECK(std::abs(cross_entropy({ClassProbs{{1, 0}}}, {{2, 1}}, cfg) + std::log(1e-12)) < kTol);

    const std::vector<Real> flat{0.5f, 0.5f, 0.25f, 0.75f};
    const std::vector<int> labels{0, 0};
    CHECK(std::abs(cross_entropy(flat, labels, 2, cfg) - (std::log(2.0) + std::log(4.0)) / 2) < kTol);
}

TEST_CASE("cross-entropy errors and one-hot labels") {
    const LossConfig cfg;
    try {
        cross_entropy({ClassProbs{{0.5f, 0.5f}}}, {}, cfg);
        FAIL("expected BatchMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BatchMismatch);
    }
    CHECK_THROWS_AS(cross_entropy({ClassProbs{{0.5f, 0.5f}}}, {{3, 0}}, cfg), Error);
    CHECK(OneHotLabel::from_vector({0, 0, 1}).index == 2);
    CHECK_THROWS_AS(OneHotLabel::from_vector({0, 1, 1}), Error);
    CHECK_THROWS_AS(OneHotLabel::from_vector({0, 0.5, 0.5}), Error);
    CHECK_THROWS_AS(OneHotLabel::from_vector({0, 0}), Error);
}

TEST_CASE("smooth-L1 examples") {
    CHECK(std::abs(smooth_l1(0.25, 0.5) - 0.0625) < kTol);
    CHECK(std::abs(smooth_l1(2.0, 0.5) - 1.75) < kTol);
    CHECK(std::abs(smooth_l1(-2.0, 0.5) - 1.75) < kTol);
    CHECK(std::abs(smooth_l1(0.5, 0.5) - 0.25) < kTol);
    CHECK(std::abs((0.5 - 0.25) - 0.25) < kTol);  // linear branch at the knee

    const LossConfig cfg;
    const std::vector<Real> t{1.0f, -2.0f, 0.5f};
    CHECK(data2vec_loss(t, t, cfg) == 0.0);
    const std::vector<Real> s{1.25f, 0.0f, 0.5f};
    CHECK(std::abs(data2vec_loss(t, s, cfg) - (0.0625 + 1.75 + 0.0) / 3) < kTol);
}

TEST_CASE("knee continuity over random betas") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        const double beta = 2.0 * (1.0 - uniform01(rng));  // (0, 2]
        const double quad = 0.5 * beta * beta / beta;
        const double lin = beta - 0.5 * beta;
        REQUIRE(std::abs(quad - lin) < 1e-12);
        const double h = 1e-9 * std::max(1.0, beta);
        REQUIRE(std::abs(smooth_l1(beta - h, beta) - smooth_l1(beta + h, beta)) < 1e-8);
        REQUIRE(std::abs(smooth_l1(-beta - h, beta) - smooth_l1(-beta + h, beta)) < 1e-8);
        REQUIRE(smooth_l1(uniform01(rng) * 4 - 2, beta) >= 0.0);
    }
}

TEST_CASE("data2vec gradient matches finite differences") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const double beta = 0.1 + uniform01(rng);
        double d = 4.0 * uniform01(rng) - 2.0;
        if (std::abs(std::abs(d) - beta) < 1e-3) d += 0.01;  // keep off the kink
        const double h = 1e-6;
        const double fd = (smooth_l1(d + h, beta) - smooth_l1(d - h, beta)) / (2 * h);
        const double g = smooth_l1_grad(d, beta);
        CHECK(std::abs(fd - g) <= 1e-4 * std::max(1.0, std::abs(g)));
        CHECK(g == doctest::Approx(std::abs(d) <= beta ? d / beta : (d > 0 ? 1.0 : -1.0)));
    }

    // Mean reduction over the batch: each element gets grad / n.
    LossConfig cfg;
    const std::vector<Real> t{0.0f, 0.0f, 0.0f, 0.0f};
    const std::vector<Real> s{0.25f, -0.25f, 3.0f, -3.0f};
    const auto g = data2vec_grad(t, s, cfg);
    CHECK(std::abs(g[0] - 0.5 / 4) < kTol);
    CHECK(std::abs(g[1] + 0.5 / 4) < kTol);
    CHECK(std::abs(g[2] - 1.0 / 4) < kTol);
    CHECK(std::abs(g[3] + 1.0 / 4) < kTol);
}

TEST_CASE("cross-entropy logit gradient on a 5-class toy head") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> z(5);
        for (auto& v : z) v = 4.0 * uniform01(rng) - 2.0;
        const int y = static_cast<int>(trial % 5);
        const auto p = softmax(z);
        std::vector<Real> pr(p.begin(), p.end());
        const std::vector<int> labels{y};
        const auto g = cross_entropy_logit_grad(pr, labels, 5);
        for (std::size_t k = 0; k < 5; ++k) {
            const double h = 1e-5;
            auto zp = z, zm = z;
            zp[k] += h;
            zm[k] -= h;
            const double fd = (-std::log(softmax(zp)[y]) + std::log(softmax(zm)[y])) / (2 * h);
            CHECK(std::abs(fd - g[k]) <= 1e-3 * std::max(std::abs(fd), 1e-2));
        }
    }
}

TEST_CASE("composite loss") {
    LossConfig cfg;
    CHECK(composite_loss(1.0, 0.5, cfg) == 1.5);
    cfg.lambda_weight = 0.0;
    CHECK(composite_loss(0.731, 123.0, cfg) == 0.731);
    cfg.lambda_weight = 3.7;
    CHECK(composite_loss(0.0, 0.0, cfg) == 0.0);
    cfg.lambda_weight = 0.3;
    CHECK(std::abs(composite_loss(0.2, 0.7, cfg) - (0.2 + 0.3 * 0.7)) < 1e-7);
    try {
        composite_loss(std::numeric_limits<double>::quiet_NaN(), 0.0, cfg);
        FAIL("expected NonFinite");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
    }
    CHECK_THROWS_AS(composite_loss(0.0, std::numeric_limits<double>::infinity(), cfg), Error);
}

TEST_CASE("loss config validation and json") {
    LossConfig cfg;
    CHECK(cfg.beta == 0.5);
    CHECK(cfg.lambda_weight == 1.0);
    CHECK(cfg.log_epsilon == 1e-12);
    cfg.beta = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.lambda_weight = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);

    nlohmann::json j = LossConfig{};
    CHECK(j.get<LossConfig>() == LossConfig{});
    j["gamma"] = 1;
    CHECK_THROWS_AS((void)j.get<LossConfig>(), Error);

    const std::vector<Real> a{1.0f}, b{1.0f, 2.0f};
    CHECK_THROWS_AS(data2vec_loss(a, b, LossConfig{}), Error);
}
