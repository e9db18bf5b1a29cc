#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "malimg/error.hpp"
#include "malimg/trainer.hpp"

using namespace malimg;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(std::size_t families = 2) {
    TrainConfig c;
    c.model = fixtures::reduced_config(families);
    c.mask = {8, 0.5};
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c.max_steps = 10;
    c.seed = 5;
    return c;
}

std::vector<const LabeledSample*> first_samples(const LabeledCorpus& c, std::size_t n) {
    std::vector<const LabeledSample*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&c.samples[(i * 7) % c.size()]);
    return out;
}

}  // namespace

TEST_CASE("backward pass leaves the teacher untouched") {
    const auto cfg = small_config();
    const auto corpus = fixtures::toy_corpus(2, 6, 32, 1);
    auto state = init_train_state(cfg);
    // Give the teacher its own values so accidental aliasing would show.
    ema_update(state.teacher, init_model(cfg.model, 99), {0.5});
    const auto before = state.teacher.params;

    const auto outcome = compute_gradients(state, first_samples(corpus, 4), cfg);
    CHECK(state.teacher.params.bit_identical(before));
    CHECK(outcome.grads.same_structure(state.student));
    CHECK(outcome.grads.role == Role::gradient);

    AdamConfig adam;
    adam.learning_rate = cfg.learning_rate;
    adam_step(state.student, outcome.grads, state.optimizer, adam);
    CHECK(state.teacher.params.bit_identical(before));

    const auto student = state.student;
    ema_update(state.teacher, state.student, cfg.ema);
    double worst = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        for (std::size_t k = 0; k < before[i].size(); ++k) {
            const double expect = cfg.ema.tau * before[i].values[k] + (1 - cfg.ema.tau) * student[i].values[k];
            worst = std::max(worst, std::abs(state.teacher.params[i].values[k] - expect));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("teacher changes only through the moving average") {
    const auto corpus = fixtures::toy_corpus(2, 6, 32, 1);
    auto cfg = small_config();
    cfg.mode = TrainMode::ce_only;
    auto state = init_train_state(cfg);
    const auto initial = state.teacher.params;
    for (int i = 0; i < 3; ++i) train_step(state, first_samples(corpus, 4), cfg);
    CHECK(state.teacher.params.bit_identical(initial));
    CHECK(state.teacher.step == 0);
    CHECK_FALSE(state.student.bit_identical(initial));

    cfg.mode = TrainMode::composite;
    cfg.ema.tau = 1.0;
    auto frozen = init_train_state(cfg);
    for (int i = 0; i < 3; ++i) train_step(frozen, first_samples(corpus, 4), cfg);
    CHECK(frozen.teacher.params.bit_identical(initial));
    CHECK(frozen.teacher.step == 3);
}

TEST_CASE("lambda 0 reduces to cross-entropy training") {
    const auto corpus = fixtures::toy_corpus(2, 6, 32, 2);
    auto composite = small_config();
    composite.loss.lambda_weight = 0.0;
    auto ce_only = small_config();
    ce_only.mode = TrainMode::ce_only;

    auto a = init_train_state(composite);
    auto b = init_train_state(ce_only);
    for (int i = 0; i < 3; ++i) {
        const auto batch = first_samples(corpus, 4);
        const auto ra = train_step(a, batch, composite);
        const auto rb = train_step(b, batch, ce_only);
        CHECK(ra.ce == rb.ce);
        CHECK(ra.composite == ra.ce);
    }
    CHECK(a.student.bit_identical(b.student));
}

TEST_CASE("unmasked single sample against an identical teacher") {
    const auto corpus = fixtures::toy_corpus(2, 3, 32, 3);
    auto cfg = small_config();
    cfg.mask.mask_ratio = 0.0;
    cfg.model.dropout_rate = 0.0;  // train-mode student must match the eval-mode teacher
    auto state = init_train_state(cfg);
    const auto outcome = compute_gradients(state, {&corpus.samples[0]}, cfg);
    // The student pass runs a 2-image batch, the teacher a 1-image batch, so
    // float rounding in the convolutions may differ slightly.
    CHECK(std::abs(outcome.losses.d2v) <= 1e-6);
    CHECK(std::abs(outcome.losses.composite - outcome.losses.ce) <= 1e-6);
    CHECK(outcome.losses.batch_size == 1);
}

TEST_CASE("batch indices walk seeded permutations") {
    auto cfg = small_config();
    cfg.batch_size = 5;
    const std::size_t n = 20;
    std::multiset<std::size_t> epoch0;
    for (std::uint64_t s = 0; s < 4; ++s) {
        const auto idx = batch_indices(n, cfg, s);
        CHECK(idx == batch_indices(n, cfg, s));
        epoch0.insert(idx.begin(), idx.end());
    }
    CHECK(epoch0.size() == n);
    CHECK(std::set<std::size_t>(epoch0.begin(), epoch0.end()).size() == n);
    auto other = cfg;
    other.seed = 6;
    CHECK(batch_indices(n, cfg, 0) != batch_indices(n, other, 0));
    CHECK_THROWS_AS(batch_indices(0, cfg, 0), Error);
}

TEST_CASE("max_steps 0 returns the initial state") {
    auto cfg = small_config();
    cfg.max_steps = 0;
    const auto corpus = fixtures::toy_corpus(2, 4, 32, 1);
    const auto result = train(cfg, corpus, {});
    CHECK(result.metrics.empty());
    CHECK(result.state.step == 0);
    CHECK(result.state.student.bit_identical(init_model(cfg.model, cfg.seed)));
    CHECK_FALSE(result.report.has_value());
}

TEST_CASE("training is deterministic and resumes exactly") {
    fixtures::TempDir dir("malimg_trainer_resume");
    const auto corpus = fixtures::toy_corpus(2, 8, 32, 4);
    auto cfg = small_config();
    cfg.max_steps = 10;
    cfg.checkpoint_every = 4;

    const auto full = train(cfg, corpus, corpus, {dir.path / "full"});
    const auto again = train(cfg, corpus, corpus, {});
    REQUIRE(full.metrics.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(full.metrics[i].step == i);
        CHECK(std::abs(full.metrics[i].ce - again.metrics[i].ce) <= 1e-6);
        CHECK(std::abs(full.metrics[i].d2v - again.metrics[i].d2v) <= 1e-6);
        CHECK(std::abs(full.metrics[i].composite - again.metrics[i].composite) <= 1e-6);
    }
    CHECK(full.state.student.bit_identical(again.state.student));

    // Initial, every 4 steps, and the final one.
    REQUIRE(full.checkpoints.size() == 4);
    CHECK(full.checkpoints[0] == checkpoint_path(dir.path / "full", 0));
    CHECK(full.checkpoints[1] == checkpoint_path(dir.path / "full", 4));
    CHECK(full.checkpoints[3] == checkpoint_path(dir.path / "full", 10));
    CHECK(latest_checkpoint(dir.path / "full") == full.checkpoints[3]);
    CHECK(fs::exists(dir.path / "full" / "report.json"));

    const auto resumed = train(cfg, corpus, corpus, {dir.path / "full", checkpoint_path(dir.path / "full", 4)});
    REQUIRE(resumed.metrics.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(resumed.metrics[i].step == i + 4);
        CHECK(std::abs(resumed.metrics[i].ce - full.metrics[i + 4].ce) <= 1e-6);
        CHECK(std::abs(resumed.metrics[i].d2v - full.metrics[i + 4].d2v) <= 1e-6);
    }
    CHECK(resumed.state.student.bit_identical(full.state.student));
    CHECK(resumed.state.teacher.params.bit_identical(full.state.teacher.params));
    const auto log = read_metrics_log(dir.path / "full" / "metrics.jsonl");
    REQUIRE(log.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(log[i].step == i);

    const auto loaded = load_checkpoint(full.checkpoints[3], cfg);
    CHECK(loaded.step == 10);
    CHECK(loaded.optimizer.t == 10);
    CHECK(loaded.student.bit_identical(full.state.student));
    CHECK(load_student(full.checkpoints[3]).model == cfg.model);

    auto other = cfg;
    other.model.head_width = 16;
    try {
        load_checkpoint(full.checkpoints[3], other);
        FAIL("expected BadConfig");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BadConfig);
    }
}

TEST_CASE("failed checkpoint write names the last good checkpoint") {
    fixtures::TempDir dir("malimg_trainer_diskfull");
    const auto corpus = fixtures::toy_corpus(2, 4, 32, 4);
    auto cfg = small_config();
    cfg.max_steps = 2;
    fs::create_directories(checkpoint_path(dir.path, 2) / "blocker");
    try {
        train(cfg, corpus, {}, {dir.path});
        FAIL("expected Io");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Io);
        CHECK(std::string(e.what()).find("step_00000000.ckpt") != std::string::npos);
    }
}

TEST_CASE("non-finite losses abort naming the step") {
    auto corpus = fixtures::toy_corpus(2, 4, 32, 4);
    corpus.samples[0].image.pixels[5] = std::nan("");
    auto cfg = small_config();
    auto state = init_train_state(cfg);
    try {
        train_step(state, {&corpus.samples[0]}, cfg);
        FAIL("expected NonFinite");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFinite);
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("evaluation report") {
    auto cfg = small_config(5);
    auto params = init_model(cfg.model, 3);
    for (auto& t : params.tensors) {
        if (t.name.starts_with("out.")) std::fill(t.tensor.values.begin(), t.tensor.values.end(), Real(0));
    }
    const auto balanced = fixtures::toy_corpus(5, 4, 32, 1);
    const auto chance = evaluate(cfg.model, params, balanced);
    CHECK(chance.count == 20);
    CHECK(chance.accuracy == doctest::Approx(0.2));
    CHECK(chance.confusion[3][0] == 4);
    REQUIRE(chance.per_family_accuracy[0].has_value());
    CHECK(*chance.per_family_accuracy[0] == 1.0);
    CHECK(*chance.per_family_accuracy[1] == 0.0);

    // Relabel with the model's own predictions: everything is correct.
    const auto model = init_model(cfg.model, 4);
    auto relabeled = balanced;
    const auto preds = predict_corpus(cfg.model, model, relabeled);
    for (std::size_t i = 0; i < relabeled.size(); ++i) relabeled.samples[i].family_id = static_cast<int>(preds[i].family);
    const auto perfect = evaluate(cfg.model, model, relabeled);
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.correct == 20);

    const auto j = to_json(perfect, relabeled.family_names);
    CHECK(j.at("accuracy") == 1.0);
    CHECK(j.at("confusion").size() == 5);

    CHECK_THROWS_AS(evaluate(cfg.model, model, LabeledCorpus{}), Error);
}

TEST_CASE("train config json and hashing") {
    const auto cfg = small_config();
    nlohmann::json j = cfg;
    CHECK(j.get<TrainConfig>() == cfg);

    j["learning_rte"] = 0.1;
    try {
        (void)j.get<TrainConfig>();
        FAIL("expected BadConfig");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BadConfig);
        CHECK(std::string(e.what()).find("learning_rte") != std::string::npos);
    }
    nlohmann::json nested = cfg;
    nested["mask"]["ratio"] = 0.1;
    CHECK_THROWS_AS((void)nested.get<TrainConfig>(), Error);
    nlohmann::json typed = cfg;
    typed["batch_size"] = "sixteen";
    CHECK_THROWS_AS((void)typed.get<TrainConfig>(), Error);

    auto reseeded = cfg;
    reseeded.seed = 77;
    CHECK(config_hash(reseeded) == config_hash(cfg));
    CHECK(config_hash(cfg).size() == 12);
    auto changed = cfg;
    changed.learning_rate = 2e-3;
    CHECK(config_hash(changed) != config_hash(cfg));

    const TrainConfig defaults;
    CHECK(defaults.learning_rate == 1e-4);
    CHECK(defaults.loss.beta == 0.5);
    CHECK(defaults.loss.lambda_weight == 1.0);
    CHECK(defaults.ema.tau == 0.999);
    CHECK(defaults.mask.block_size == 16);
    CHECK(defaults.mask.mask_ratio == 0.5);

    auto mismatch = small_config(3);
    CHECK_THROWS_AS(train(mismatch, fixtures::toy_corpus(2, 4, 32, 1), {}), Error);
}

TEST_CASE("overfits a tiny two-family corpus") {
    const auto corpus = fixtures::toy_corpus(2, 10, 32, 8);
    auto cfg = small_config();
    cfg.max_steps = 500;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-3;
    double best_window = 1e9;
    std::vector<double> ce;
    RunOptions opts;
    opts.on_step = [&](const MetricsRecord& r) {
        ce.push_back(r.ce);
        if (ce.size() >= 10) {
            double s = 0;
            for (std::size_t i = ce.size() - 10; i < ce.size(); ++i) s += ce[i];
            best_window = std::min(best_window, s / 10);
        }
    };
    train(cfg, corpus, {}, opts);
    MESSAGE("best 10-step mean ce " << best_window);
    CHECK(best_window < 0.1);
}
