#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gmn/arch.hpp"

namespace gmn {

enum class PNodeType {
    Input = 0,
    Output = 1,
    Hidden = 2,
    BiasNode = 3,
    NormMean = 4,
    NormVar = 5,
    AttnHead = 6,
    GridCoord = 7,
    Channel = 8
};
const char* to_string(PNodeType t);

enum class PEdgeType {
    Weight = 0,
    Bias = 1,
    ResidualSkip = 2,
    NormGamma = 3,
    NormBeta = 4,
    Grid = 5
};
const char* to_string(PEdgeType t);

struct NodeFeature {
    int layer_index = -1;  // -1 for network input nodes
    PNodeType type = PNodeType::Hidden;
    int subindex = 0;  // input index, output index, head index, grid cell, bias layer

    // single-integer code used by the JSON schema
    int code() const { return static_cast<int>(type) * 10000 + subindex; }
    bool operator==(const NodeFeature&) const = default;
};

struct EdgeFeature {
    double value = 0.0;
    int layer_index = 0;
    PEdgeType type = PEdgeType::Weight;
    int direction = 0;         // 0 forward, 1 backward
    std::vector<int> pos;      // kernel coords, basis index, grid coords, spatial index
    bool operator==(const EdgeFeature&) const = default;
};

struct PGEdge {
    int src = 0;
    int dst = 0;
    EdgeFeature feat;
    std::optional<ParamId> param;
};

struct ParamGraph {
    std::vector<NodeFeature> nodes;  // node id == position
    std::vector<PGEdge> edges;
    int global_dim = 0;
    bool undirected = false;

    long long bound_edge_count() const {
        long long n = 0;
        for (const auto& e : edges)
            if (e.param) ++n;
        return n;
    }
};

ParamGraph build_param_graph(const ArchSpec& spec, const ParamStore& params);
ParamStore extract_params(const ParamGraph& g, const ArchSpec& spec);
ParamGraph to_undirected(const ParamGraph& g);

enum class ExportFormat { Json, Dot };
std::string export_graph(const ParamGraph& g, ExportFormat format);
ParamGraph param_graph_from_json(const std::string& text);

}  // namespace gmn
