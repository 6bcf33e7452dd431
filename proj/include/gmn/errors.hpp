#pragma once

#include <stdexcept>
#include <string>

namespace gmn {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error {
    int layer_index;
    ShapeMismatch(int layer, const std::string& msg)
        : Error("shape mismatch at layer " + std::to_string(layer) + ": " + msg),
          layer_index(layer) {}
};

struct EmptyArch : Error {
    EmptyArch() : Error("architecture has no layers") {}
};

struct UnsupportedLayer : Error {
    explicit UnsupportedLayer(const std::string& what_layer)
        : Error("unsupported layer: " + what_layer) {}
};

struct UnsupportedForComputationGraph : Error {
    explicit UnsupportedForComputationGraph(const std::string& what_layer)
        : Error("no computation graph for layer: " + what_layer) {}
};

struct MissingBinding : Error {
    explicit MissingBinding(const std::string& pid)
        : Error("parameter binding missing: " + pid) {}
};

struct EmptyGraph : Error {
    EmptyGraph() : Error("graph is empty") {}
};

struct NotABijection : Error {
    NotABijection() : Error("permutation is not a bijection on node ids") {}
};

struct TooLarge : Error {
    explicit TooLarge(const std::string& msg) : Error("search space too large: " + msg) {}
};

struct WrongFamily : Error {
    explicit WrongFamily(const std::string& msg) : Error(msg) {}
};

struct SharingViolation : Error {
    explicit SharingViolation(const std::string& msg)
        : Error("weight-sharing violation: " + msg) {}
};

struct UnsupportedNonlinearity : Error {
    explicit UnsupportedNonlinearity(const std::string& msg)
        : Error("unsupported nonlinearity: " + msg) {}
};

struct DimMismatch : Error {
    explicit DimMismatch(const std::string& msg) : Error("dimension mismatch: " + msg) {}
};

struct NonFiniteLoss : Error {
    explicit NonFiniteLoss(const std::string& msg) : Error("non-finite loss: " + msg) {}
};

struct DegenerateTarget : Error {
    DegenerateTarget() : Error("target variance is zero") {}
};

}  // namespace gmn
