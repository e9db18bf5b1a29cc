#pragma once

#include <cstdint>

#include <json.hpp>

#include "malimg/tensor.hpp"

namespace malimg {

struct EmaConfig {
    double tau = 0.999;
    // Optional linear warmup from tau_start to tau over warmup_steps updates.
    std::uint64_t warmup_steps = 0;
    double tau_start = 0.99;

    /// Multiplier used for the update that produces teacher step n + 1.
    double tau_at(std::uint64_t n) const;
    void validate() const;
    friend bool operator==(const EmaConfig&, const EmaConfig&) = default;
};

void to_json(nlohmann::json& j, const EmaConfig& c);
void from_json(const nlohmann::json& j, EmaConfig& c);

struct TeacherState {
    ModelParams params;
    std::uint64_t step = 0;
};

/// Deep copy of the student, tagged as teacher, at step 0.
TeacherState init_teacher(const ModelParams& student);

/// teacher <- tau * teacher + (1 - tau) * student, elementwise.
/// Throws StructuralMismatch if the layouts differ.
void ema_update(TeacherState& teacher, const ModelParams& student, const EmaConfig& config);

}  // namespace malimg
