#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gmn/arch.hpp"

namespace gmn {

enum class NodeKind { Input, Output, Bias, Hidden };

const char* to_string(NodeKind k);

struct CompNode {
    int id = 0;
    NodeKind kind = NodeKind::Hidden;
    int subindex = 0;      // input index i, output index j, bias layer l; 0 for hidden
    int layer_number = 0;  // max path distance from any input node
    Act sigma = Act::Identity;
    // builder metadata used by the symmetry generators
    int spec_layer = -1;
    int channel = -1;
    int spatial = -1;
};

struct CompEdge {
    int src = 0;
    int dst = 0;
    double weight = 0.0;
    int share_class = 0;
    std::optional<ParamId> param;
};

struct CompGraph {
    std::vector<CompNode> nodes;
    std::vector<CompEdge> edges;
    int d_in = 0;
    int d_out = 0;
    std::vector<int> input_nodes;   // in input order
    std::vector<int> output_nodes;  // in output order
    int share_class_count = 0;
};

// Expands the per-activation DAG. Supported layers: linear, conv, residual,
// activation, flatten; everything else throws UnsupportedForComputationGraph.
CompGraph build_computation_graph(const ArchSpec& spec, const ParamStore& params);

Tensor eval_computation_graph(const CompGraph& g, const Tensor& x);

std::string comp_graph_to_json(const CompGraph& g);
std::string comp_graph_to_dot(const CompGraph& g);

}  // namespace gmn
