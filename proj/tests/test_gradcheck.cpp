// Linked against the double-precision build of the library.
#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "malimg/trainer.hpp"

using namespace malimg;

static_assert(sizeof(Real) == sizeof(double));

namespace {

struct Check {
    double analytic;
    double numeric;
};

double rel_error(const Check& c) {
    const double scale = std::max(std::abs(c.analytic), std::abs(c.numeric));
    return scale < 1e-8 ? std::abs(c.analytic - c.numeric) : std::abs(c.analytic - c.numeric) / scale;
}

// Central differences of the optimized loss for a few entries of every tensor.
std::vector<Check> gradient_checks(const TrainConfig& cfg, const LabeledCorpus& corpus, std::size_t per_tensor) {
    TrainState state = init_train_state(cfg);
    // Zero biases on zero (masked) pixels put every pre-activation exactly on
    // the leaky-relu kink, where central differences are meaningless.
    Rng bias_rng(cfg.seed);
    for (auto& t : state.student.tensors) {
        if (!t.name.ends_with(".bias")) continue;
        for (auto& b : t.tensor.values) b = 0.05 + 0.1 * uniform01(bias_rng);
    }
    state.teacher = init_teacher(state.student);
    // Teacher differs from the student so the data2vec term has gradient.
    ema_update(state.teacher, init_model(cfg.model, cfg.seed + 1), {0.5});
    std::vector<const LabeledSample*> batch;
    for (const auto& s : corpus.samples) batch.push_back(&s);

    const auto loss = [&](const TrainState& s) {
        const auto r = compute_gradients(s, batch, cfg).losses;
        return cfg.mode == TrainMode::composite ? r.composite : r.ce;
    };
    const auto grads = compute_gradients(state, batch, cfg).grads;

    std::vector<Check> out;
    Rng rng(1);
    const double h = 1e-6;
    for (std::size_t t = 0; t < state.student.size(); ++t) {
        const std::size_t n = state.student[t].size();
        for (std::size_t j = 0; j < std::min(per_tensor, n); ++j) {
            const std::size_t k = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
            const double orig = state.student[t].values[k];
            state.student[t].values[k] = orig + h;
            const double up = loss(state);
            state.student[t].values[k] = orig - h;
            const double down = loss(state);
            state.student[t].values[k] = orig;
            out.push_back({grads[t].values[k], (up - down) / (2 * h)});
        }
    }
    return out;
}

TrainConfig gradcheck_config(TrainMode mode) {
    TrainConfig cfg;
    cfg.model = fixtures::reduced_config(3);
    cfg.mask = {8, 0.5};
    cfg.mode = mode;
    cfg.seed = 3;
    cfg.loss.lambda_weight = 0.7;
    return cfg;
}

}  // namespace

TEST_CASE("composite loss gradients match finite differences") {
    const auto corpus = fixtures::toy_corpus(3, 1, 32, 4);
    const auto checks = gradient_checks(gradcheck_config(TrainMode::composite), corpus, 6);
    double worst = 0.0;
    for (const auto& c : checks) worst = std::max(worst, rel_error(c));
    MESSAGE("checked " << checks.size() << " entries, worst relative error " << worst);
    CHECK(worst <= 1e-4);
}

TEST_CASE("cross-entropy-only gradients match finite differences") {
    const auto corpus = fixtures::toy_corpus(3, 1, 32, 5);
    const auto checks = gradient_checks(gradcheck_config(TrainMode::ce_only), corpus, 6);
    double worst = 0.0;
    for (const auto& c : checks) worst = std::max(worst, rel_error(c));
    CHECK(worst <= 1e-4);
}

TEST_CASE("normalized targets stay constants for the gradient") {
    auto cfg = gradcheck_config(TrainMode::composite);
    cfg.loss.normalize_targets = true;
    const auto corpus = fixtures::toy_corpus(3, 1, 32, 6);
    const auto checks = gradient_checks(cfg, corpus, 4);
    double worst = 0.0;
    for (const auto& c : checks) worst = std::max(worst, rel_error(c));
    CHECK(worst <= 1e-4);
}
