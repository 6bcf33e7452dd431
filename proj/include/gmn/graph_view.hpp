#pragma once

#include <optional>
#include <vector>

#include "gmn/compute_graph.hpp"
#include "gmn/param_graph.hpp"

namespace gmn {

// Common graph representation consumed by the metanetwork. Node tags reuse the
// PNodeType codes; computation-graph kinds map onto the same space.

struct ViewNode {
    PNodeType tag = PNodeType::Hidden;
    int subindex = 0;
    int layer = 0;
    Act sigma = Act::Identity;
};

struct ViewEdge {
    int src = 0;
    int dst = 0;
    double value = 0.0;
    int layer = 0;
    PEdgeType etype = PEdgeType::Weight;
    int dir = 0;
    std::vector<int> pos;
    std::optional<ParamId> param;
};

struct GraphView {
    std::vector<ViewNode> nodes;
    std::vector<ViewEdge> edges;  // kept in canonical order
    std::vector<int> input_nodes;
    std::vector<int> output_nodes;
};

GraphView view_of(const CompGraph& g);
GraphView view_of(const ParamGraph& g);

// Sorts edges into the canonical order and returns old->new index map.
std::vector<int> canonicalize_edges(GraphView& g);

// Relabels nodes by perm (new id of node i is perm[i]) and re-canonicalizes.
// edge_map[k] gives the position of original edge k in the result.
GraphView permute_view(const GraphView& g, const std::vector<int>& perm,
                       std::vector<int>* edge_map = nullptr);

}  // namespace gmn
