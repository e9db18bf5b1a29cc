#include "malimg/trainer.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "malimg/checkpoint.hpp"
#include "malimg/error.hpp"
#include "malimg/hashing.hpp"

namespace malimg {

namespace {

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
    throw Error(ErrorKind::BadConfig, key + ": " + why);
}

// Single-image passes keep predictions independent of corpus order.
constexpr std::size_t kEvalBatch = 1;

// Per-step activation buffers are large; without this glibc hands them back
// to the kernel on free and every step pays the page faults again.
void keep_freed_memory() {
#if defined(__GLIBC__)
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)once;
#endif
}

std::vector<NamedTensor> prefixed(const std::string& prefix, const ParamSet& p) {
    std::vector<NamedTensor> out;
    for (const auto& t : p.tensors) out.push_back({prefix + t.name, t.tensor});
    return out;
}

ParamSet extract(const std::vector<NamedTensor>& all, const std::string& prefix, const ParamSet& layout, Role role) {
    ParamSet out;
    out.role = role;
    for (const auto& t : layout.tensors) {
        const auto it = std::find_if(all.begin(), all.end(), [&](const auto& n) { return n.name == prefix + t.name; });
        if (it == all.end()) throw Error(ErrorKind::StructuralMismatch, "checkpoint lacks '" + prefix + t.name + "'");
        out.tensors.push_back({t.name, it->tensor});
    }
    require_same_structure(out, layout);
    return out;
}

}  // namespace

std::string to_string(TrainMode mode) { return mode == TrainMode::composite ? "composite" : "ce_only"; }

TrainMode parse_train_mode(const std::string& text) {
    if (text == "composite") return TrainMode::composite;
    if (text == "ce_only") return TrainMode::ce_only;
    throw Error(ErrorKind::BadConfig, "mode: expected 'composite' or 'ce_only', got '" + text + "'");
}

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    ema.validate();
    mask.validate(model.input_size);
    if (batch_size == 0) bad_key("batch_size", "must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad_key("learning_rate", "must be positive");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) bad_key("train_fraction", "must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const MaskConfig& c) {
    j = nlohmann::json{{"block_size", c.block_size}, {"mask_ratio", c.mask_ratio}};
}

void from_json(const nlohmann::json& j, MaskConfig& c) {
    if (!j.is_object()) bad_key("mask", "expected an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "block_size") c.block_size = value.get<std::size_t>();
            else if (key == "mask_ratio") c.mask_ratio = value.get<double>();
            else bad_key("mask." + key, "unknown key");
        } catch (const nlohmann::json::exception& e) {
            bad_key("mask." + key, e.what());
        }
    }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"loss", c.loss},
                       {"ema", c.ema},
                       {"mask", c.mask},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"max_steps", c.max_steps},
                       {"seed", c.seed},
                       {"mode", to_string(c.mode)},
                       {"checkpoint_every", c.checkpoint_every},
                       {"train_fraction", c.train_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) bad_key("config", "expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "model") from_json(value, c.model);
            else if (key == "loss") from_json(value, c.loss);
            else if (key == "ema") from_json(value, c.ema);
            else if (key == "mask") from_json(value, c.mask);
            else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
            else if (key == "learning_rate") c.learning_rate = value.get<double>();
            else if (key == "max_steps") c.max_steps = value.get<std::uint64_t>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "mode") c.mode = parse_train_mode(value.get<std::string>());
            else if (key == "checkpoint_every") c.checkpoint_every = value.get<std::uint64_t>();
            else if (key == "train_fraction") c.train_fraction = value.get<double>();
            else bad_key(key, "unknown key");
        } catch (const nlohmann::json::exception& e) {
            bad_key(key, e.what());
        }
    }
}

std::string config_hash(const TrainConfig& config) {
    nlohmann::json j = config;
    j.erase("seed");
    return sha256_hex(j.dump()).substr(0, 12);
}

nlohmann::json to_json(const MetricsRecord& r) {
    return {{"step", r.step}, {"ce", r.ce}, {"d2v", r.d2v}, {"composite", r.composite}, {"wall_ms", r.wall_ms}};
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
    return {j.at("step").get<std::uint64_t>(), j.at("ce").get<double>(), j.at("d2v").get<double>(),
            j.at("composite").get<double>(), j.at("wall_ms").get<double>()};
}

std::vector<MetricsRecord> read_metrics_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MissingFile, "no metrics log at '" + path.string() + "'");
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(metrics_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::Io, "malformed metrics line in '" + path.string() + "': " + e.what());
        }
    }
    return out;
}

TrainState init_train_state(const TrainConfig& config) {
    TrainState state;
    state.student = init_model(config.model, config.seed);
    state.teacher = init_teacher(state.student);
    state.optimizer = adam_init(state.student);
    return state;
}

std::vector<std::size_t> batch_indices(std::size_t corpus_size, const TrainConfig& config, std::uint64_t step) {
    if (corpus_size == 0) throw Error(ErrorKind::EmptyCorpus, "training corpus is empty");
    std::vector<std::size_t> out;
    out.reserve(config.batch_size);
    std::uint64_t cached_epoch = ~std::uint64_t{0};
    std::vector<std::size_t> perm(corpus_size);
    for (std::size_t i = 0; i < config.batch_size; ++i) {
        const std::uint64_t position = step * config.batch_size + i;
        const std::uint64_t epoch = position / corpus_size;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            Rng rng = derive_rng(config.seed, epoch, Stream::Shuffle);
            std::shuffle(perm.begin(), perm.end(), rng);
            cached_epoch = epoch;
        }
        out.push_back(perm[position % corpus_size]);
    }
    return out;
}

StepOutcome compute_gradients(const TrainState& state, const std::vector<const LabeledSample*>& batch,
                              const TrainConfig& config) {
    if (batch.empty()) throw Error(ErrorKind::BatchMismatch, "empty batch");
    const ModelConfig& mc = config.model;
    const std::size_t n = batch.size();
    const std::size_t side = mc.input_size;

    std::vector<const GrayImage*> images;
    std::vector<int> labels;
    for (const auto* s : batch) {
        images.push_back(&s->image);
        labels.push_back(s->family_id);
        if (s->family_id < 0 || static_cast<std::size_t>(s->family_id) >= mc.families) {
            throw Error(ErrorKind::UnknownFamily, "sample '" + s->source_id + "' has no valid family");
        }
    }
    const ImageBatch clean = ImageBatch::from_images(images);

    // Rows [0, n) unmasked, rows [n, 2n) masked copies.
    ImageBatch both{2 * n, side, {}};
    both.pixels.reserve(2 * clean.pixels.size());
    both.pixels = clean.pixels;
    both.pixels.insert(both.pixels.end(), clean.pixels.begin(), clean.pixels.end());
    Rng mask_rng = derive_rng(config.seed, state.step, Stream::Mask);
    for (std::size_t i = 0; i < n; ++i) {
        const Mask mask = generate_mask(config.mask, side, mask_rng);
        apply_mask_inplace(both.image(n + i), side, mask);
    }

    Rng dropout_rng = derive_rng(config.seed, state.step, Stream::Dropout);
    EncoderTrace enc_trace;
    const EmbeddingBatch student_all = encoder_forward(mc, state.student, both, Mode::train, dropout_rng, &enc_trace);
    const std::size_t dim = student_all.dim;

    EmbeddingBatch unmasked{n, dim, {student_all.values.begin(), student_all.values.begin() + n * dim}};
    const std::span<const Real> masked(student_all.values.data() + n * dim, n * dim);

    HeadTrace head_trace;
    const auto probs = head_forward(mc, state.student, unmasked, Mode::train, dropout_rng, &head_trace);

    Rng unused(0);
    const EmbeddingBatch teacher = encoder_forward(mc, state.teacher.params, clean, Mode::eval, unused);
    const std::vector<Real> targets =
        config.loss.normalize_targets ? normalize_rows(teacher.values, dim) : teacher.values;

    StepOutcome out;
    out.losses.batch_size = n;
    out.losses.ce = cross_entropy(probs, labels, mc.families, config.loss);
    out.losses.d2v = data2vec_loss(targets, masked, config.loss);
    try {
        out.losses.composite = composite_loss(out.losses.ce, out.losses.d2v, config.loss);
    } catch (const Error& e) {
        throw Error(ErrorKind::NonFinite, "step " + std::to_string(state.step) + ": " + e.what());
    }

    out.grads = state.student.zeros_like(Role::gradient);
    const auto grad_logits = cross_entropy_logit_grad(probs, labels, mc.families);
    const EmbeddingBatch grad_unmasked = head_backward(mc, state.student, head_trace, grad_logits, out.grads);

    EmbeddingBatch grad_all{2 * n, dim, std::vector<Real>(2 * n * dim, Real(0))};
    std::copy(grad_unmasked.values.begin(), grad_unmasked.values.end(), grad_all.values.begin());
    if (config.mode == TrainMode::composite) {
        const auto g = data2vec_grad(targets, masked, config.loss);
        const auto lambda = static_cast<Real>(config.loss.lambda_weight);
        for (std::size_t k = 0; k < g.size(); ++k) grad_all.values[n * dim + k] = lambda * g[k];
    }
    encoder_backward(mc, state.student, enc_trace, grad_all, out.grads);
    return out;
}

MetricsRecord train_step(TrainState& state, const std::vector<const LabeledSample*>& batch,
                         const TrainConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    StepOutcome outcome = compute_gradients(state, batch, config);

    AdamConfig adam;
    adam.learning_rate = config.learning_rate;
    adam_step(state.student, outcome.grads, state.optimizer, adam);
    if (config.mode == TrainMode::composite) ema_update(state.teacher, state.student, config.ema);

    MetricsRecord rec;
    rec.step = state.step;
    rec.ce = outcome.losses.ce;
    rec.d2v = outcome.losses.d2v;
    rec.composite = outcome.losses.composite;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    ++state.step;
    return rec;
}

nlohmann::json to_json(const EvaluationReport& r, const std::vector<std::string>& family_names) {
    nlohmann::json per_family = nlohmann::json::object();
    for (std::size_t f = 0; f < r.per_family_accuracy.size(); ++f) {
        const std::string name = f < family_names.size() ? family_names[f] : std::to_string(f);
        per_family[name] = r.per_family_accuracy[f] ? nlohmann::json(*r.per_family_accuracy[f]) : nlohmann::json();
    }
    return {{"count", r.count},
            {"correct", r.correct},
            {"accuracy", r.accuracy},
            {"per_family_accuracy", per_family},
            {"family_names", family_names},
            {"confusion", r.confusion}};
}

std::vector<Prediction> predict_corpus(const ModelConfig& config, const ModelParams& params,
                                       const LabeledCorpus& corpus) {
    std::vector<Prediction> out;
    out.reserve(corpus.size());
    Rng unused(0);
    for (std::size_t start = 0; start < corpus.size(); start += kEvalBatch) {
        const std::size_t end = std::min(corpus.size(), start + kEvalBatch);
        std::vector<const GrayImage*> images;
        for (std::size_t i = start; i < end; ++i) images.push_back(&corpus.samples[i].image);
        const auto emb = encoder_forward(config, params, ImageBatch::from_images(images), Mode::eval, unused);
        const auto probs = head_forward(config, params, emb, Mode::eval, unused);
        for (std::size_t i = 0; i < end - start; ++i) {
            const Real* row = probs.data() + i * config.families;
            const std::size_t best = argmax(row, config.families);
            out.push_back({best, static_cast<double>(row[best])});
        }
    }
    return out;
}

EvaluationReport evaluate(const ModelConfig& config, const ModelParams& params, const LabeledCorpus& corpus) {
    if (corpus.empty()) throw Error(ErrorKind::EmptyCorpus, "cannot evaluate on an empty corpus");
    const std::size_t f = config.families;
    EvaluationReport r;
    r.count = corpus.size();
    r.confusion.assign(f, std::vector<std::size_t>(f, 0));
    const auto preds = predict_corpus(config, params, corpus);
    std::vector<std::size_t> totals(f, 0);
    std::vector<std::size_t> hits(f, 0);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const int truth = corpus.samples[i].family_id;
        if (truth < 0 || static_cast<std::size_t>(truth) >= f) {
            throw Error(ErrorKind::UnknownFamily, "sample '" + corpus.samples[i].source_id + "' has no valid family");
        }
        ++totals[truth];
        ++r.confusion[truth][preds[i].family];
        if (preds[i].family == static_cast<std::size_t>(truth)) {
            ++hits[truth];
            ++r.correct;
        }
    }
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
    for (std::size_t k = 0; k < f; ++k) {
        r.per_family_accuracy.push_back(totals[k] ? std::optional<double>(double(hits[k]) / double(totals[k]))
                                                  : std::nullopt);
    }
    return r;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config) {
    std::vector<NamedTensor> all = prefixed("student/", state.student);
    for (auto&& t : prefixed("teacher/", state.teacher.params)) all.push_back(std::move(t));
    for (auto&& t : prefixed("adam.m/", state.optimizer.first)) all.push_back(std::move(t));
    for (auto&& t : prefixed("adam.v/", state.optimizer.second)) all.push_back(std::move(t));
    write_tensor_container(path, all);

    nlohmann::json side{{"model", config.model},
                        {"config", config},
                        {"step", state.step},
                        {"teacher_step", state.teacher.step},
                        {"adam_t", state.optimizer.t}};
    write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config) {
    const auto side = read_json_file(sidecar_path(path));
    ModelConfig stored;
    from_json(side.at("model"), stored);
    if (!(stored == config.model)) {
        throw Error(ErrorKind::BadConfig, "checkpoint '" + path.string() + "' was written for a different model config");
    }
    const auto all = read_tensor_container(path);
    const ModelParams layout = init_model(config.model, 0);

    TrainState state;
    state.student = extract(all, "student/", layout, Role::student);
    state.teacher.params = extract(all, "teacher/", layout, Role::teacher);
    state.teacher.step = side.at("teacher_step").get<std::uint64_t>();
    state.optimizer.first = extract(all, "adam.m/", layout, Role::moment);
    state.optimizer.second = extract(all, "adam.v/", layout, Role::moment);
    state.optimizer.t = side.at("adam_t").get<std::uint64_t>();
    state.step = side.at("step").get<std::uint64_t>();
    return state;
}

StudentCheckpoint load_student(const std::filesystem::path& path) {
    const auto side = read_json_file(sidecar_path(path));
    StudentCheckpoint out;
    from_json(side.at("model"), out.model);
    out.model.validate();
    out.step = side.at("step").get<std::uint64_t>();
    const auto all = read_tensor_container(path);
    out.student = extract(all, "student/", init_model(out.model, 0), Role::student);
    return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::uint64_t step) {
    std::ostringstream name;
    name << "step_" << std::setw(8) << std::setfill('0') << step << ".ckpt";
    return run_dir / "checkpoints" / name.str();
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir) {
    const auto dir = run_dir / "checkpoints";
    std::filesystem::path best;
    if (std::filesystem::is_directory(dir)) {
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.path().extension() == ".ckpt" && (best.empty() || entry.path().filename() > best.filename())) {
                best = entry.path();
            }
        }
    }
    if (best.empty()) throw Error(ErrorKind::MissingFile, "no checkpoints under '" + dir.string() + "'");
    return best;
}

TrainResult train(const TrainConfig& config, const LabeledCorpus& train_corpus, const LabeledCorpus& eval_corpus,
                  const RunOptions& options) {
    config.validate();
    train_corpus.validate();
    keep_freed_memory();
    if (train_corpus.empty()) throw Error(ErrorKind::EmptyCorpus, "training corpus is empty");
    if (train_corpus.family_count() != config.model.families) {
        throw Error(ErrorKind::BadConfig, "model.families: config says " + std::to_string(config.model.families) +
                                              ", corpus has " + std::to_string(train_corpus.family_count()));
    }

    TrainResult result;
    result.state = options.resume_from ? load_checkpoint(*options.resume_from, config) : init_train_state(config);
    TrainState& state = result.state;

    std::ofstream metrics_out;
    std::filesystem::path last_good;
    const auto save = [&](std::uint64_t step) {
        if (!options.run_dir) return;
        const auto path = checkpoint_path(*options.run_dir, step);
        try {
            save_checkpoint(path, state, config);
        } catch (const Error& e) {
            throw Error(ErrorKind::Io, std::string(e.what()) + "; last good checkpoint: " +
                                           (last_good.empty() ? std::string("none") : last_good.string()));
        }
        last_good = path;
        result.checkpoints.push_back(path);
    };

    if (options.run_dir) {
        std::filesystem::create_directories(*options.run_dir / "checkpoints");
        const auto log_path = *options.run_dir / "metrics.jsonl";
        // On resume keep only the records of steps that precede the checkpoint.
        std::vector<MetricsRecord> kept;
        if (options.resume_from && std::filesystem::exists(log_path)) {
            for (const auto& r : read_metrics_log(log_path)) {
                if (r.step < state.step) kept.push_back(r);
            }
        }
        metrics_out.open(log_path, std::ios::trunc);
        if (!metrics_out) throw Error(ErrorKind::Io, "cannot write '" + log_path.string() + "'");
        for (const auto& r : kept) metrics_out << to_json(r).dump() << '\n';
        metrics_out.flush();
        if (!options.resume_from) save(state.step);
    }

    std::vector<const LabeledSample*> batch;
    while (state.step < config.max_steps) {
        batch.clear();
        for (auto i : batch_indices(train_corpus.size(), config, state.step)) batch.push_back(&train_corpus.samples[i]);
        const MetricsRecord rec = train_step(state, batch, config);
        result.metrics.push_back(rec);
        if (metrics_out.is_open()) {
            metrics_out << to_json(rec).dump() << '\n';
            metrics_out.flush();
        }
        if (options.on_step) options.on_step(rec);
        if (config.checkpoint_every != 0 && state.step % config.checkpoint_every == 0) save(state.step);
    }
    if (options.run_dir && (result.checkpoints.empty() || last_good != checkpoint_path(*options.run_dir, state.step))) {
        save(state.step);
    }

    if (!eval_corpus.empty()) {
        result.report = evaluate(config.model, state.student, eval_corpus);
        if (options.run_dir) {
            write_file_atomic(*options.run_dir / "report.json",
                              to_json(*result.report, eval_corpus.family_names).dump(2) + "\n");
        }
    }
    return result;
}

}  // namespace malimg
