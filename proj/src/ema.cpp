#include "malimg/ema.hpp"

#include <algorithm>
#include <string>

#include "malimg/error.hpp"

namespace malimg {

double EmaConfig::tau_at(std::uint64_t n) const {
    if (warmup_steps == 0 || n >= warmup_steps) return tau;
    const double t = static_cast<double>(n) / static_cast<double>(warmup_steps);
    return tau_start + (tau - tau_start) * t;
}

void EmaConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw Error(ErrorKind::BadConfig, "ema.tau: must lie in [0, 1]");
    if (!(tau_start >= 0.0 && tau_start <= 1.0)) throw Error(ErrorKind::BadConfig, "ema.tau_start: must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const EmaConfig& c) {
    j = nlohmann::json{{"tau", c.tau}, {"warmup_steps", c.warmup_steps}, {"tau_start", c.tau_start}};
}

void from_json(const nlohmann::json& j, EmaConfig& c) {
    if (!j.is_object()) throw Error(ErrorKind::BadConfig, "ema: expected an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "tau") c.tau = value.get<double>();
            else if (key == "warmup_steps") c.warmup_steps = value.get<std::uint64_t>();
            else if (key == "tau_start") c.tau_start = value.get<double>();
            else throw Error(ErrorKind::BadConfig, "ema." + key + ": unknown key");
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::BadConfig, "ema." + key + ": " + e.what());
        }
    }
}

TeacherState init_teacher(const ModelParams& student) {
    TeacherState t{student, 0};
    t.params.role = Role::teacher;
    return t;
}

void ema_update(TeacherState& teacher, const ModelParams& student, const EmaConfig& config) {
    require_same_structure(teacher.params, student);
    const double tau = config.tau_at(teacher.step);
    const double keep = 1.0 - tau;
    for (std::size_t i = 0; i < student.size(); ++i) {
        auto& t = teacher.params[i].values;
        const auto& s = student[i].values;
        for (std::size_t k = 0; k < t.size(); ++k) {
            t[k] = static_cast<Real>(tau * static_cast<double>(t[k]) + keep * static_cast<double>(s[k]));
        }
    }
    ++teacher.step;
}

}  // namespace malimg
