#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "malimg/model.hpp"
#include "malimg/real.hpp"

namespace malimg {

struct LossConfig {
    double beta = 0.5;           // smooth-L1 knee
    double lambda_weight = 1.0;  // weight of the data2vec term
    double log_epsilon = 1e-12;  // floor inside ln() of the cross-entropy
    bool normalize_targets = false;

    void validate() const;
    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

struct OneHotLabel {
    std::size_t classes = 0;
    std::size_t index = 0;

    /// Throws BadSpec unless exactly one entry is 1 and the rest are 0.
    static OneHotLabel from_vector(const std::vector<double>& v);
};

struct LossReport {
    double ce = 0.0;
    double d2v = 0.0;
    double composite = 0.0;
    std::size_t batch_size = 0;
};

/// -(1/m) sum_i ln(max(p_i[y_i], eps)).
double cross_entropy(const std::vector<ClassProbs>& probs, const std::vector<OneHotLabel>& labels,
                     const LossConfig& config);

/// Flat variant over row-major m x classes probabilities and class indices.
double cross_entropy(std::span<const Real> probs, std::span<const int> labels, std::size_t classes,
                     const LossConfig& config);

/// d(cross_entropy)/d(logits) through the softmax: (p - y) / m.
std::vector<Real> cross_entropy_logit_grad(std::span<const Real> probs, std::span<const int> labels,
                                           std::size_t classes);

/// Per-element smooth-L1 with knee beta, and its derivative in d.
double smooth_l1(double d, double beta);
double smooth_l1_grad(double d, double beta);

/// Mean smooth-L1 between teacher targets and student embeddings over every
/// element of the batch. Teacher values are constants.
double data2vec_loss(std::span<const Real> teacher, std::span<const Real> student, const LossConfig& config);
double data2vec_loss(const std::vector<EmbeddingBlock>& teacher, const std::vector<EmbeddingBlock>& student,
                     const LossConfig& config);

/// Gradient of data2vec_loss with respect to the student values only.
std::vector<Real> data2vec_grad(std::span<const Real> teacher, std::span<const Real> student,
                                const LossConfig& config);

/// Per-row standardization (zero mean, unit variance) of teacher targets.
std::vector<Real> normalize_rows(std::span<const Real> values, std::size_t dim);

/// ce + lambda * d2v. Throws NonFinite on non-finite inputs.
double composite_loss(double ce, double d2v, const LossConfig& config);

}  // namespace malimg
