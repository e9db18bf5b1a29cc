#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "malimg/real.hpp"

namespace malimg {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<Real> values;

    static Tensor zeros(std::vector<std::size_t> shape);
    static std::size_t numel(const std::vector<std::size_t>& shape);
    std::size_t size() const { return values.size(); }
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

enum class Role { student, teacher, gradient, moment };

// Ordered, named weight tensors of one network. Also used for gradients and
// optimizer moments, which share the parameter layout.
struct ParamSet {
    Role role = Role::student;
    std::vector<NamedTensor> tensors;

    Tensor& operator[](std::size_t i) { return tensors[i].tensor; }
    const Tensor& operator[](std::size_t i) const { return tensors[i].tensor; }
    std::size_t size() const { return tensors.size(); }

    const Tensor& find(const std::string& name) const;
    std::size_t parameter_count() const;

    /// Same names and shapes in the same order.
    bool same_structure(const ParamSet& other) const;
    bool bit_identical(const ParamSet& other) const;

    ParamSet zeros_like(Role role) const;
};

using ModelParams = ParamSet;

/// Throws StructuralMismatch naming the first differing tensor.
void require_same_structure(const ParamSet& a, const ParamSet& b);

}  // namespace malimg
