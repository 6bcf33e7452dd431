#include "gmn/graph_view.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

namespace gmn {

namespace {

auto edge_key(const ViewEdge& e) {
    long long pid = e.param ? e.param->flat_index : -1;
    int player = e.param ? e.param->layer_index : -1;
    return std::make_tuple(e.src, e.dst, static_cast<int>(e.etype), e.dir, e.pos, player,
                           pid, e.value);
}

}  // namespace

GraphView view_of(const CompGraph& g) {
    GraphView v;
    v.nodes.reserve(g.nodes.size());
    for (const CompNode& n : g.nodes) {
        PNodeType tag = PNodeType::Hidden;
        switch (n.kind) {
            case NodeKind::Input: tag = PNodeType::Input; break;
            case NodeKind::Output: tag = PNodeType::Output; break;
            case NodeKind::Bias: tag = PNodeType::BiasNode; break;
            case NodeKind::Hidden: tag = PNodeType::Hidden; break;
        }
        v.nodes.push_back(ViewNode{tag, n.subindex, n.layer_number, n.sigma});
    }
    v.edges.reserve(g.edges.size());
    for (const CompEdge& e : g.edges) {
        ViewEdge ve;
        ve.src = e.src;
        ve.dst = e.dst;
        ve.value = e.weight;
        ve.layer = g.nodes[e.dst].layer_number;
        ve.etype = e.param ? (e.param->name == ParamName::Bias ? PEdgeType::Bias
                                                               : PEdgeType::Weight)
                           : PEdgeType::ResidualSkip;
        ve.param = e.param;
        v.edges.push_back(std::move(ve));
    }
    v.input_nodes = g.input_nodes;
    v.output_nodes = g.output_nodes;
    canonicalize_edges(v);
    return v;
}

GraphView view_of(const ParamGraph& g) {
    GraphView v;
    v.nodes.reserve(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const NodeFeature& n = g.nodes[i];
        // layer index shifted so network inputs sit at 0
        v.nodes.push_back(ViewNode{n.type, n.subindex, n.layer_index + 1, Act::Identity});
        if (n.type == PNodeType::Input) v.input_nodes.push_back(static_cast<int>(i));
        if (n.type == PNodeType::Output) v.output_nodes.push_back(static_cast<int>(i));
    }
    v.edges.reserve(g.edges.size());
    for (const PGEdge& e : g.edges)
        v.edges.push_back(ViewEdge{e.src, e.dst, e.feat.value, e.feat.layer_index + 1,
                                   e.feat.type, e.feat.direction, e.feat.pos, e.param});
    canonicalize_edges(v);
    return v;
}

std::vector<int> canonicalize_edges(GraphView& g) {
    std::vector<int> order(g.edges.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return edge_key(g.edges[a]) < edge_key(g.edges[b]);
    });
    std::vector<ViewEdge> sorted;
    sorted.reserve(g.edges.size());
    std::vector<int> old_to_new(g.edges.size());
    for (size_t pos = 0; pos < order.size(); ++pos) {
        sorted.push_back(std::move(g.edges[order[pos]]));
        old_to_new[order[pos]] = static_cast<int>(pos);
    }
    g.edges = std::move(sorted);
    return old_to_new;
}

GraphView permute_view(const GraphView& g, const std::vector<int>& perm,
                       std::vector<int>* edge_map) {
    if (perm.size() != g.nodes.size()) throw NotABijection();
    std::vector<char> seen(perm.size(), 0);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(perm.size()) || seen[p]) throw NotABijection();
        seen[p] = 1;
    }
    GraphView out;
    out.nodes.resize(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i) out.nodes[perm[i]] = g.nodes[i];
    out.edges = g.edges;
    for (ViewEdge& e : out.edges) {
        e.src = perm[e.src];
        e.dst = perm[e.dst];
    }
    for (int n : g.input_nodes) out.input_nodes.push_back(perm[n]);
    for (int n : g.output_nodes) out.output_nodes.push_back(perm[n]);
    std::vector<int> m = canonicalize_edges(out);
    if (edge_map) *edge_map = std::move(m);
    return out;
}

}  // namespace gmn
