#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malimg/dataset.hpp"
#include "malimg/ema.hpp"
#include "malimg/losses.hpp"
#include "malimg/masking.hpp"
#include "malimg/model.hpp"
#include "malimg/optimizer.hpp"

namespace malimg {

enum class TrainMode { composite, ce_only };

struct TrainConfig {
    ModelConfig model;
    LossConfig loss;
    EmaConfig ema;
    MaskConfig mask;
    std::size_t batch_size = 16;
    double learning_rate = 1e-4;
    std::uint64_t max_steps = 1000;
    std::uint64_t seed = 1;
    TrainMode mode = TrainMode::composite;
    std::uint64_t checkpoint_every = 0;  // 0: only the initial and final checkpoints
    double train_fraction = 0.9;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& text);

void to_json(nlohmann::json& j, const MaskConfig& c);
void from_json(const nlohmann::json& j, MaskConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
/// Strict parse: unknown keys and type errors raise BadConfig naming the key.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Short digest of the config with the seed removed; names run directories.
std::string config_hash(const TrainConfig& config);

struct TrainState {
    ModelParams student;
    TeacherState teacher;
    AdamState optimizer;
    std::uint64_t step = 0;
};

struct MetricsRecord {
    std::uint64_t step = 0;
    double ce = 0.0;
    double d2v = 0.0;
    double composite = 0.0;
    double wall_ms = 0.0;
};

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const nlohmann::json& j);
std::vector<MetricsRecord> read_metrics_log(const std::filesystem::path& path);

struct StepOutcome {
    ModelParams grads;
    LossReport losses;
};

TrainState init_train_state(const TrainConfig& config);

/// Indices of the training samples used at a given step. Walks seeded
/// per-epoch permutations, so the batch depends only on (seed, step).
std::vector<std::size_t> batch_indices(std::size_t corpus_size, const TrainConfig& config, std::uint64_t step);

/// Forward and backward passes of one step without touching any state.
///
/// The student sees the unmasked batch (cross-entropy through the head) and
/// a block-masked copy (data2vec regression onto the teacher's embeddings of
/// the unmasked batch). Both pass through the encoder as one 2N batch. In
/// ce_only mode the data2vec term is computed for logging only.
StepOutcome compute_gradients(const TrainState& state, const std::vector<const LabeledSample*>& batch,
                              const TrainConfig& config);

/// compute_gradients, one optimizer step, then the teacher EMA update
/// (composite mode only). Throws NonFinite naming the step.
MetricsRecord train_step(TrainState& state, const std::vector<const LabeledSample*>& batch,
                         const TrainConfig& config);

struct EvaluationReport {
    std::size_t count = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
    std::vector<std::optional<double>> per_family_accuracy;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

nlohmann::json to_json(const EvaluationReport& r, const std::vector<std::string>& family_names);

struct Prediction {
    std::size_t family = 0;
    double max_prob = 0.0;
};

std::vector<Prediction> predict_corpus(const ModelConfig& config, const ModelParams& params,
                                       const LabeledCorpus& corpus);

/// Accuracy, per-family accuracy and confusion matrix. Throws EmptyCorpus.
EvaluationReport evaluate(const ModelConfig& config, const ModelParams& params, const LabeledCorpus& corpus);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config);

/// Restores a full training state; throws BadConfig when the stored model
/// config differs from config.model.
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

struct StudentCheckpoint {
    ModelConfig model;
    ModelParams student;
    std::uint64_t step = 0;
};

StudentCheckpoint load_student(const std::filesystem::path& path);

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::uint64_t step);

/// Highest-step checkpoint in run_dir/checkpoints. Throws MissingFile.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

struct RunOptions {
    std::optional<std::filesystem::path> run_dir;      // metrics, checkpoints, report
    std::optional<std::filesystem::path> resume_from;  // checkpoint to continue from
    std::function<void(const MetricsRecord&)> on_step;
};

struct TrainResult {
    TrainState state;
    std::vector<MetricsRecord> metrics;
    std::vector<std::filesystem::path> checkpoints;
    std::optional<EvaluationReport> report;
};

TrainResult train(const TrainConfig& config, const LabeledCorpus& train_corpus, const LabeledCorpus& eval_corpus,
                  const RunOptions& options = {});

}  // namespace malimg
