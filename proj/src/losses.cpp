#include "malimg/losses.hpp"

#include <cmath>
#include <string>

#include "malimg/error.hpp"

namespace malimg {

namespace {

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
    throw Error(ErrorKind::BadConfig, "loss." + key + ": " + why);
}

}  // namespace

void LossConfig::validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) bad_key("beta", "must be positive");
    if (!(lambda_weight >= 0.0) || !std::isfinite(lambda_weight)) bad_key("lambda_weight", "must be nonnegative");
    if (!(log_epsilon > 0.0 && log_epsilon < 1.0)) bad_key("log_epsilon", "must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
    j = nlohmann::json{{"beta", c.beta},
                       {"lambda_weight", c.lambda_weight},
                       {"log_epsilon", c.log_epsilon},
                       {"normalize_targets", c.normalize_targets}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
    if (!j.is_object()) bad_key("", "expected an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "beta") c.beta = value.get<double>();
            else if (key == "lambda_weight") c.lambda_weight = value.get<double>();
            else if (key == "log_epsilon") c.log_epsilon = value.get<double>();
            else if (key == "normalize_targets") c.normalize_targets = value.get<bool>();
            else bad_key(key, "unknown key");
        } catch (const nlohmann::json::exception& e) {
            bad_key(key, e.what());
        }
    }
}

OneHotLabel OneHotLabel::from_vector(const std::vector<double>& v) {
    std::size_t ones = 0;
    OneHotLabel label{v.size(), 0};
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] == 1.0) {
            ++ones;
            label.index = i;
        } else if (v[i] != 0.0) {
            throw Error(ErrorKind::BadSpec, "one-hot entries must be 0 or 1");
        }
    }
    if (ones != 1) throw Error(ErrorKind::BadSpec, "one-hot label needs exactly one 1");
    return label;
}

double cross_entropy(const std::vector<ClassProbs>& probs, const std::vector<OneHotLabel>& labels,
                     const LossConfig& config) {
    if (probs.empty() || probs.size() != labels.size()) {
        throw Error(ErrorKind::BatchMismatch, std::to_string(probs.size()) + " predictions vs " +
                                                  std::to_string(labels.size()) + " labels");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i].classes != probs[i].probs.size()) {
            throw Error(ErrorKind::BatchMismatch, "label width differs from prediction width at row " + std::to_string(i));
        }
        sum -= std::log(std::max(static_cast<double>(probs[i].probs[labels[i].index]), config.log_epsilon));
    }
    return sum / static_cast<double>(probs.size());
}

double cross_entropy(std::span<const Real> probs, std::span<const int> labels, std::size_t classes,
                     const LossConfig& config) {
    if (labels.empty() || probs.size() != labels.size() * classes) {
        throw Error(ErrorKind::BatchMismatch, "probability matrix does not match " + std::to_string(labels.size()) +
                                                  " labels");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        sum -= std::log(std::max(static_cast<double>(probs[i * classes + labels[i]]), config.log_epsilon));
    }
    return sum / static_cast<double>(labels.size());
}

std::vector<Real> cross_entropy_logit_grad(std::span<const Real> probs, std::span<const int> labels,
                                           std::size_t classes) {
    if (labels.empty() || probs.size() != labels.size() * classes) {
        throw Error(ErrorKind::BatchMismatch, "probability matrix does not match the labels");
    }
    const Real inv_m = Real(1) / static_cast<Real>(labels.size());
    std::vector<Real> grad(probs.begin(), probs.end());
    for (std::size_t i = 0; i < labels.size(); ++i) grad[i * classes + labels[i]] -= Real(1);
    for (auto& g : grad) g *= inv_m;
    return grad;
}

double smooth_l1(double d, double beta) {
    const double a = std::abs(d);
    return a <= beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double d, double beta) {
    if (std::abs(d) <= beta) return d / beta;
    return d > 0 ? 1.0 : -1.0;
}

double data2vec_loss(std::span<const Real> teacher, std::span<const Real> student, const LossConfig& config) {
    if (teacher.empty() || teacher.size() != student.size()) {
        throw Error(ErrorKind::ShapeMismatch, "teacher has " + std::to_string(teacher.size()) + " values, student " +
                                                  std::to_string(student.size()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        sum += smooth_l1(static_cast<double>(student[i]) - static_cast<double>(teacher[i]), config.beta);
    }
    return sum / static_cast<double>(teacher.size());
}

double data2vec_loss(const std::vector<EmbeddingBlock>& teacher, const std::vector<EmbeddingBlock>& student,
                     const LossConfig& config) {
    if (teacher.size() != student.size()) throw Error(ErrorKind::ShapeMismatch, "batch sizes differ");
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (teacher[i].height != student[i].height || teacher[i].width != student[i].width ||
            teacher[i].channels != student[i].channels) {
            throw Error(ErrorKind::ShapeMismatch, "embedding shapes differ at row " + std::to_string(i));
        }
    }
    const auto t = to_batch(teacher);
    const auto s = to_batch(student);
    return data2vec_loss(t.values, s.values, config);
}

std::vector<Real> data2vec_grad(std::span<const Real> teacher, std::span<const Real> student,
                                const LossConfig& config) {
    if (teacher.empty() || teacher.size() != student.size()) {
        throw Error(ErrorKind::ShapeMismatch, "teacher and student sizes differ");
    }
    const double inv = 1.0 / static_cast<double>(teacher.size());
    std::vector<Real> grad(student.size());
    for (std::size_t i = 0; i < student.size(); ++i) {
        const double d = static_cast<double>(student[i]) - static_cast<double>(teacher[i]);
        grad[i] = static_cast<Real>(smooth_l1_grad(d, config.beta) * inv);
    }
    return grad;
}

std::vector<Real> normalize_rows(std::span<const Real> values, std::size_t dim) {
    std::vector<Real> out(values.begin(), values.end());
    if (dim == 0) return out;
    for (std::size_t r = 0; r * dim < out.size(); ++r) {
        Real* row = out.data() + r * dim;
        double mean = 0.0;
        for (std::size_t k = 0; k < dim; ++k) mean += row[k];
        mean /= static_cast<double>(dim);
        double var = 0.0;
        for (std::size_t k = 0; k < dim; ++k) var += (row[k] - mean) * (row[k] - mean);
        const double inv = 1.0 / std::sqrt(var / static_cast<double>(dim) + 1e-6);
        for (std::size_t k = 0; k < dim; ++k) row[k] = static_cast<Real>((row[k] - mean) * inv);
    }
    return out;
}

double composite_loss(double ce, double d2v, const LossConfig& config) {
    if (!std::isfinite(ce) || !std::isfinite(d2v)) {
        throw Error(ErrorKind::NonFinite, "loss terms ce=" + std::to_string(ce) + " d2v=" + std::to_string(d2v));
    }
    return ce + config.lambda_weight * d2v;
}

}  // namespace malimg
