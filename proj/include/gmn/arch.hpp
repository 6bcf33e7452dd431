#pragma once

#include <concepts>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gmn/errors.hpp"
#include "gmn/tensor.hpp"

namespace gmn {

enum class Act { Relu, Sine, Identity };
enum class NormKind { Batch, Layer, Group };
enum class ParamName { Weight, Bias, Gamma, Beta, Grid };

const char* to_string(Act a);
const char* to_string(NormKind k);
const char* to_string(ParamName n);
Act act_from_string(const std::string& s);
NormKind norm_kind_from_string(const std::string& s);
ParamName param_name_from_string(const std::string& s);

struct Linear {
    int in_dim = 0;
    int out_dim = 0;
    bool has_bias = true;
};

struct Conv {
    int spatial_rank = 2;  // 1 or 2
    int in_channels = 0;
    int out_channels = 0;
    std::vector<int> kernel_shape;
    int stride = 1;
    bool has_bias = true;
};

struct DeepSetsLinear {
    int in_channels = 0;
    int out_channels = 0;
    int set_size = 0;
};

struct MultiHeadAttention {
    int model_dim = 0;
    int num_heads = 1;
    int head_dim = 0;
    bool has_bias = true;
};

struct LayerSpec;

struct Residual {
    std::vector<LayerSpec> inner;
};

struct Norm {
    NormKind kind = NormKind::Batch;
    int groups = 1;  // only used for group norm
    int num_features = 0;
};

struct SpatialGrid {
    std::vector<int> grid_shape;  // [gh, gw]
    int channels = 0;
};

struct Activation {
    Act kind = Act::Relu;
};

struct Flatten {};

struct LayerSpec {
    std::variant<Linear, Conv, DeepSetsLinear, MultiHeadAttention, Residual, Norm,
                 SpatialGrid, Activation, Flatten>
        v;

    template <class T>
        requires(!std::same_as<std::decay_t<T>, LayerSpec>)
    LayerSpec(T layer) : v(std::move(layer)) {}
    LayerSpec() : v(Flatten{}) {}

    template <class T>
    bool is() const { return std::holds_alternative<T>(v); }
    template <class T>
    const T& as() const { return std::get<T>(v); }
};

struct ArchSpec {
    std::vector<LayerSpec> layers;
    std::vector<int> input_shape;
};

// Global layer index assigned by pre-order traversal (a Residual wrapper gets
// its own index, followed by its inner layers).
struct FlatLayer {
    int index;
    const LayerSpec* layer;
};
std::vector<FlatLayer> flatten_layers(const ArchSpec& spec);
int total_layer_count(const ArchSpec& spec);

struct ParamId {
    int layer_index = 0;
    ParamName name = ParamName::Weight;
    long long flat_index = 0;

    bool operator==(const ParamId&) const = default;
    auto operator<=>(const ParamId&) const = default;
};
std::string to_string(const ParamId& p);

struct ParamStore {
    // keyed by (layer_index, param name)
    std::map<std::pair<int, int>, Tensor> tensors;

    bool has(int layer, ParamName name) const {
        return tensors.count({layer, static_cast<int>(name)}) > 0;
    }
    Tensor& get(int layer, ParamName name);
    const Tensor& get(int layer, ParamName name) const;
    void set(int layer, ParamName name, Tensor t) {
        tensors[{layer, static_cast<int>(name)}] = std::move(t);
    }
    double get_scalar(const ParamId& id) const;
    void set_scalar(const ParamId& id, double v);
    long long scalar_count() const;

    bool operator==(const ParamStore&) const = default;
};

// Parameter tensors a layer owns, in declaration order.
std::vector<std::pair<ParamName, std::vector<int>>> param_shapes(const LayerSpec& layer);

// Shape inference for a single layer; throws ShapeMismatch on incompatibility.
std::vector<int> infer_shape(const LayerSpec& layer, const std::vector<int>& in,
                             int layer_index);

void validate_arch(const ArchSpec& spec);
std::vector<int> output_shape(const ArchSpec& spec);
long long count_params(const ArchSpec& spec);
ParamStore init_params(const ArchSpec& spec, uint64_t seed);
Tensor forward(const ArchSpec& spec, const ParamStore& params, const Tensor& x);

double apply_act(Act a, double x);
double apply_act_grad(Act a, double x);  // derivative at pre-activation x

// JSON round trip of the {"layers": ..., "input_shape": ..., "params": ...}
// document.
std::string to_json(const ArchSpec& spec, const ParamStore& params);
std::pair<ArchSpec, ParamStore> arch_from_json(const std::string& text);

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b);

}  // namespace gmn
