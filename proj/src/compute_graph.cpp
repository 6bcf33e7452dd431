#include "gmn/compute_graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace gmn {

using nlohmann::json;

const char* to_string(NodeKind k) {
    switch (k) {
        case NodeKind::Input: return "input";
        case NodeKind::Output: return "output";
        case NodeKind::Bias: return "bias";
        case NodeKind::Hidden: return "hidden";
    }
    return "?";
}

namespace {

struct Builder {
    const ParamStore& params;
    CompGraph g;

    explicit Builder(const ParamStore& p) : params(p) {}

    int add_node(NodeKind kind, int subindex, int spec_layer, int channel, int spatial) {
        CompNode n;
        n.id = static_cast<int>(g.nodes.size());
        n.kind = kind;
        n.subindex = subindex;
        n.spec_layer = spec_layer;
        n.channel = channel;
        n.spatial = spatial;
        g.nodes.push_back(n);
        return n.id;
    }

    void add_edge(int src, int dst, double w, int share_class, std::optional<ParamId> pid) {
        g.edges.push_back({src, dst, w, share_class, pid});
    }

    int new_class() { return g.share_class_count++; }

    // frontier is a flat row-major list of node ids matching `shape`
    std::vector<int> build_chain(const std::vector<LayerSpec>& layers, int base_index,
                                 std::vector<int> frontier, std::vector<int>& shape,
                                 bool* ends_in_activation);
};

std::vector<int> Builder::build_chain(const std::vector<LayerSpec>& layers, int base_index,
                                      std::vector<int> frontier, std::vector<int>& shape,
                                      bool* ends_in_activation) {
    int idx = base_index;
    bool last_was_act = false;
    for (const LayerSpec& layer : layers) {
        int layer_index = idx;
        idx += 1;
        if (layer.is<Residual>())
            idx += total_layer_count(ArchSpec{layer.as<Residual>().inner, {}});
        last_was_act = false;

        if (layer.is<Linear>()) {
            const auto& l = layer.as<Linear>();
            const Tensor& w = params.get(layer_index, ParamName::Weight);
            std::vector<int> out;
            for (int o = 0; o < l.out_dim; ++o)
                out.push_back(add_node(NodeKind::Hidden, 0, layer_index, o, 0));
            for (int o = 0; o < l.out_dim; ++o)
                for (int i = 0; i < l.in_dim; ++i)
                    add_edge(frontier[i], out[o], w.data[o * l.in_dim + i], new_class(),
                             ParamId{layer_index, ParamName::Weight,
                                     static_cast<long long>(o) * l.in_dim + i});
            if (l.has_bias) {
                const Tensor& b = params.get(layer_index, ParamName::Bias);
                int bias = add_node(NodeKind::Bias, layer_index, layer_index, -1, -1);
                for (int o = 0; o < l.out_dim; ++o)
                    add_edge(bias, out[o], b.data[o], new_class(),
                             ParamId{layer_index, ParamName::Bias, o});
            }
            frontier = out;
            shape = {l.out_dim};
        } else if (layer.is<Conv>()) {
            const auto& c = layer.as<Conv>();
            const Tensor& w = params.get(layer_index, ParamName::Weight);
            std::vector<int> out_shape = infer_shape(layer, shape, layer_index);
            // spatial sizes
            std::vector<int> in_sp(shape.begin() + 1, shape.end());
            std::vector<int> out_sp(out_shape.begin() + 1, out_shape.end());
            long long in_spatial = 1, out_spatial = 1;
            for (int d : in_sp) in_spatial *= d;
            for (int d : out_sp) out_spatial *= d;
            std::vector<int> out;
            for (int o = 0; o < c.out_channels; ++o)
                for (long long p = 0; p < out_spatial; ++p)
                    out.push_back(add_node(NodeKind::Hidden, 0, layer_index, o,
                                           static_cast<int>(p)));
            long long ker = 1;
            for (int d : c.kernel_shape) ker *= d;
            // one share class per kernel scalar
            std::vector<int> wclass(static_cast<size_t>(c.out_channels) * c.in_channels * ker);
            for (auto& cl : wclass) cl = new_class();
            auto widx = [&](int o, int ci, long long k) {
                return (static_cast<long long>(o) * c.in_channels + ci) * ker + k;
            };
            if (c.spatial_rank == 1) {
                int L = in_sp[0], Lo = out_sp[0], k = c.kernel_shape[0];
                for (int o = 0; o < c.out_channels; ++o)
                    for (int p = 0; p < Lo; ++p)
                        for (int ci = 0; ci < c.in_channels; ++ci)
                            for (int dk = 0; dk < k; ++dk) {
                                long long kk = dk;
                                add_edge(frontier[ci * L + p * c.stride + dk],
                                         out[o * Lo + p], w.data[widx(o, ci, kk)],
                                         wclass[widx(o, ci, kk)],
                                         ParamId{layer_index, ParamName::Weight,
                                                 widx(o, ci, kk)});
                            }
            } else {
                int H = in_sp[0], W = in_sp[1];
                int Ho = out_sp[0], Wo = out_sp[1];
                int kh = c.kernel_shape[0], kw = c.kernel_shape[1];
                for (int o = 0; o < c.out_channels; ++o)
                    for (int ph = 0; ph < Ho; ++ph)
                        for (int pw = 0; pw < Wo; ++pw)
                            for (int ci = 0; ci < c.in_channels; ++ci)
                                for (int dh = 0; dh < kh; ++dh)
                                    for (int dw = 0; dw < kw; ++dw) {
                                        long long kk = static_cast<long long>(dh) * kw + dw;
                                        add_edge(
                                            frontier[(ci * H + ph * c.stride + dh) * W +
                                                     pw * c.stride + dw],
                                            out[(o * Ho + ph) * Wo + pw],
                                            w.data[widx(o, ci, kk)], wclass[widx(o, ci, kk)],
                                            ParamId{layer_index, ParamName::Weight,
                                                    widx(o, ci, kk)});
                                    }
            }
            if (c.has_bias) {
                const Tensor& b = params.get(layer_index, ParamName::Bias);
                int bias = add_node(NodeKind::Bias, layer_index, layer_index, -1, -1);
                for (int o = 0; o < c.out_channels; ++o) {
                    int cl = new_class();
                    for (long long p = 0; p < out_spatial; ++p)
                        add_edge(bias, out[o * out_spatial + p], b.data[o], cl,
                                 ParamId{layer_index, ParamName::Bias, o});
                }
            }
            frontier = out;
            shape = out_shape;
        } else if (layer.is<Residual>()) {
            const auto& r = layer.as<Residual>();
            std::vector<int> start = frontier;
            std::vector<int> inner_shape = shape;
            bool inner_ends_act = false;
            frontier = build_chain(r.inner, layer_index + 1, frontier, inner_shape,
                                   &inner_ends_act);
            if (inner_ends_act)
                throw UnsupportedForComputationGraph(
                    "residual branch ending in an activation layer");
            if (frontier.size() != start.size())
                throw ShapeMismatch(layer_index, "residual width changed");
            if (frontier == start) {
                // empty branch: skip edges would be self loops; identity anyway
            } else {
                for (size_t i = 0; i < start.size(); ++i) {
                    int cl = new_class();
                    add_edge(start[i], frontier[i], 1.0, cl, std::nullopt);
                }
            }
            shape = inner_shape;
        } else if (layer.is<Activation>()) {
            Act a = layer.as<Activation>().kind;
            for (int id : frontier) {
                if (g.nodes[id].kind == NodeKind::Input)
                    throw UnsupportedForComputationGraph(
                        "activation applied directly to input nodes");
                g.nodes[id].sigma = a;
            }
            last_was_act = true;
        } else if (layer.is<Flatten>()) {
            long long n = Tensor::numel(shape);
            shape = {static_cast<int>(n)};
        } else if (layer.is<Norm>()) {
            throw UnsupportedForComputationGraph("norm");
        } else if (layer.is<MultiHeadAttention>()) {
            throw UnsupportedForComputationGraph("attention");
        } else if (layer.is<SpatialGrid>()) {
            throw UnsupportedForComputationGraph("grid");
        } else if (layer.is<DeepSetsLinear>()) {
            throw UnsupportedForComputationGraph("deepsets");
        } else {
            throw UnsupportedForComputationGraph("unknown layer");
        }
    }
    if (ends_in_activation) *ends_in_activation = last_was_act;
    return frontier;
}

}  // namespace

CompGraph build_computation_graph(const ArchSpec& spec, const ParamStore& params) {
    validate_arch(spec);
    Builder b(params);
    long long d_in = Tensor::numel(spec.input_shape);
    std::vector<int> frontier;
    for (long long i = 0; i < d_in; ++i)
        frontier.push_back(b.add_node(NodeKind::Input, static_cast<int>(i), -1,
                                      static_cast<int>(i), 0));
    std::vector<int> shape = spec.input_shape;
    frontier = b.build_chain(spec.layers, 0, std::move(frontier), shape, nullptr);

    CompGraph g = std::move(b.g);
    g.d_in = static_cast<int>(d_in);
    g.d_out = static_cast<int>(frontier.size());
    for (int i = 0; i < g.d_in; ++i) g.input_nodes.push_back(i);
    for (size_t j = 0; j < frontier.size(); ++j) {
        CompNode& n = g.nodes[frontier[j]];
        if (n.kind == NodeKind::Hidden) {
            n.kind = NodeKind::Output;
            n.subindex = static_cast<int>(j);
        }
        g.output_nodes.push_back(frontier[j]);
    }

    // layer numbers: longest path from any input node
    std::vector<std::vector<std::pair<int, int>>> out_adj(g.nodes.size());
    std::vector<int> indeg(g.nodes.size(), 0);
    for (const CompEdge& e : g.edges) {
        out_adj[e.src].push_back({e.dst, 0});
        indeg[e.dst]++;
    }
    std::vector<int> order;
    for (size_t i = 0; i < g.nodes.size(); ++i)
        if (indeg[i] == 0) order.push_back(static_cast<int>(i));
    for (size_t h = 0; h < order.size(); ++h) {
        int u = order[h];
        for (auto [v, _] : out_adj[u])
            if (--indeg[v] == 0) order.push_back(v);
    }
    if (order.size() != g.nodes.size()) throw Error("computation graph has a cycle");
    std::vector<int> ln(g.nodes.size(), 0);
    for (int u : order)
        for (auto [v, _] : out_adj[u]) ln[v] = std::max(ln[v], ln[u] + 1);
    for (size_t i = 0; i < g.nodes.size(); ++i) g.nodes[i].layer_number = ln[i];
    return g;
}

Tensor eval_computation_graph(const CompGraph& g, const Tensor& x) {
    if (static_cast<int>(x.size()) != g.d_in)
        throw ShapeMismatch(0, "input length " + std::to_string(x.size()) +
                                   " != " + std::to_string(g.d_in));
    std::vector<std::vector<std::pair<int, double>>> incoming(g.nodes.size());
    for (const CompEdge& e : g.edges) incoming[e.dst].push_back({e.src, e.weight});
    std::vector<int> order(g.nodes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return g.nodes[a].layer_number < g.nodes[b].layer_number;
    });
    std::vector<double> h(g.nodes.size(), 0.0);
    for (int id : order) {
        const CompNode& n = g.nodes[id];
        switch (n.kind) {
            case NodeKind::Input: h[id] = x.data[n.subindex]; break;
            case NodeKind::Bias: h[id] = 1.0; break;
            default: {
                double s = 0.0;
                for (auto [src, w] : incoming[id]) s += w * h[src];
                h[id] = apply_act(n.sigma, s);
            }
        }
    }
    Tensor y(std::vector<int>{g.d_out});
    for (int j = 0; j < g.d_out; ++j) y.data[j] = h[g.output_nodes[j]];
    return y;
}

std::string comp_graph_to_json(const CompGraph& g) {
    json j;
    j["d_in"] = g.d_in;
    j["d_out"] = g.d_out;
    j["nodes"] = json::array();
    for (const CompNode& n : g.nodes)
        j["nodes"].push_back({{"id", n.id},
                              {"kind", to_string(n.kind)},
                              {"subindex", n.subindex},
                              {"layer_number", n.layer_number},
                              {"sigma", to_string(n.sigma)}});
    j["edges"] = json::array();
    for (const CompEdge& e : g.edges) {
        json je = {{"src", e.src},
                   {"dst", e.dst},
                   {"weight", e.weight},
                   {"share_class", e.share_class}};
        if (e.param)
            je["param"] = {{"layer", e.param->layer_index},
                           {"name", to_string(e.param->name)},
                           {"idx", e.param->flat_index}};
        else
            je["param"] = nullptr;
        j["edges"].push_back(je);
    }
    return j.dump();
}

std::string comp_graph_to_dot(const CompGraph& g) {
    std::ostringstream os;
    os << "digraph compgraph {\n  rankdir=LR;\n";
    for (const CompNode& n : g.nodes)
        os << "  n" << n.id << " [label=\"" << to_string(n.kind) << ":" << n.layer_number
           << "\"];\n";
    for (const CompEdge& e : g.edges) {
        os << "  n" << e.src << " -> n" << e.dst << " [label=\"" << e.weight << "\"";
        if (!e.param) os << ", style=dashed";
        os << "];\n";
    }
    os << "}\n";
    return os.str();
}

}  // namespace gmn
