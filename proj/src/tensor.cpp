#include "malimg/tensor.hpp"

#include <cstring>
#include <functional>
#include <numeric>

#include "malimg/error.hpp"

namespace malimg {

std::size_t Tensor::numel(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.values.assign(numel(shape), Real(0));
    t.shape = std::move(shape);
    return t;
}

const Tensor& ParamSet::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.tensor;
    }
    throw Error(ErrorKind::StructuralMismatch, "no tensor named '" + name + "'");
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.tensor.size();
    return n;
}

bool ParamSet::same_structure(const ParamSet& other) const {
    if (tensors.size() != other.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].name != other.tensors[i].name || tensors[i].tensor.shape != other.tensors[i].tensor.shape) {
            return false;
        }
    }
    return true;
}

bool ParamSet::bit_identical(const ParamSet& other) const {
    if (!same_structure(other)) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& a = tensors[i].tensor.values;
        const auto& b = other.tensors[i].tensor.values;
        if (std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) != 0) return false;
    }
    return true;
}

ParamSet ParamSet::zeros_like(Role new_role) const {
    ParamSet out;
    out.role = new_role;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back({t.name, Tensor::zeros(t.tensor.shape)});
    return out;
}

void require_same_structure(const ParamSet& a, const ParamSet& b) {
    if (a.tensors.size() != b.tensors.size()) {
        throw Error(ErrorKind::StructuralMismatch, "tensor counts differ (" + std::to_string(a.tensors.size()) +
                                                       " vs " + std::to_string(b.tensors.size()) + ")");
    }
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        if (a.tensors[i].name != b.tensors[i].name || a.tensors[i].tensor.shape != b.tensors[i].tensor.shape) {
            throw Error(ErrorKind::StructuralMismatch, "tensor " + std::to_string(i) + " differs ('" +
                                                           a.tensors[i].name + "' vs '" + b.tensors[i].name + "')");
        }
    }
}

}  // namespace malimg
