#include "gmn/param_graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace gmn {

using nlohmann::json;

const char* to_string(PNodeType t) {
    switch (t) {
        case PNodeType::Input: return "input";
        case PNodeType::Output: return "output";
        case PNodeType::Hidden: return "hidden";
        case PNodeType::BiasNode: return "bias";
        case PNodeType::NormMean: return "norm_mean";
        case PNodeType::NormVar: return "norm_var";
        case PNodeType::AttnHead: return "attention_head";
        case PNodeType::GridCoord: return "grid_coord";
        case PNodeType::Channel: return "channel";
    }
    return "?";
}

const char* to_string(PEdgeType t) {
    switch (t) {
        case PEdgeType::Weight: return "weight";
        case PEdgeType::Bias: return "bias";
        case PEdgeType::ResidualSkip: return "residual";
        case PEdgeType::NormGamma: return "gamma";
        case PEdgeType::NormBeta: return "beta";
        case PEdgeType::Grid: return "grid";
    }
    return "?";
}

namespace {

struct Frontier {
    std::vector<int> nodes;           // one node per channel
    std::vector<int> spatial_shape;   // empty when scalar-per-channel
    bool channel_major = true;        // flat layout: channel*spatial+p vs p*channels+c

    long long spatial() const {
        long long s = 1;
        for (int d : spatial_shape) s *= d;
        return s;
    }
};

int add_node(ParamGraph& g, PNodeType type, int layer, int subindex) {
    g.nodes.push_back(NodeFeature{layer, type, subindex});
    return static_cast<int>(g.nodes.size()) - 1;
}

void add_edge(ParamGraph& g, int src, int dst, double value, int layer, PEdgeType type,
              std::vector<int> pos, std::optional<ParamId> pid) {
    g.edges.push_back(PGEdge{src, dst, EdgeFeature{value, layer, type, 0, std::move(pos)},
                             std::move(pid)});
}

void append_chain(ParamGraph& g, const std::vector<LayerSpec>& layers, int base_index,
                  const ParamStore& params, Frontier& f);

void append_layer(ParamGraph& g, const LayerSpec& layer, int layer_index,
                  const ParamStore& params, Frontier& f) {
    if (layer.is<Linear>()) {
        const auto& l = layer.as<Linear>();
        long long spatial = f.spatial();
        long long channels = static_cast<long long>(f.nodes.size());
        if (channels * spatial != l.in_dim)
            throw ShapeMismatch(layer_index,
                                "linear frontier " + std::to_string(channels) + "x" +
                                    std::to_string(spatial) + " != in_dim " +
                                    std::to_string(l.in_dim));
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        std::vector<int> out;
        for (int o = 0; o < l.out_dim; ++o)
            out.push_back(add_node(g, PNodeType::Hidden, layer_index, 0));
        for (int o = 0; o < l.out_dim; ++o)
            for (long long c = 0; c < channels; ++c)
                for (long long p = 0; p < spatial; ++p) {
                    long long col = f.channel_major ? c * spatial + p : p * channels + c;
                    std::vector<int> pos;
                    if (spatial > 1) pos = {static_cast<int>(p)};
                    add_edge(g, f.nodes[c], out[o], w.data[o * l.in_dim + col], layer_index,
                             PEdgeType::Weight, pos,
                             ParamId{layer_index, ParamName::Weight,
                                     static_cast<long long>(o) * l.in_dim + col});
                }
        if (l.has_bias) {
            const Tensor& b = params.get(layer_index, ParamName::Bias);
            int bias = add_node(g, PNodeType::BiasNode, layer_index, layer_index);
            for (int o = 0; o < l.out_dim; ++o)
                add_edge(g, bias, out[o], b.data[o], layer_index, PEdgeType::Bias, {},
                         ParamId{layer_index, ParamName::Bias, o});
        }
        f = Frontier{out, {}, true};
    } else if (layer.is<Conv>()) {
        const auto& c = layer.as<Conv>();
        if (static_cast<int>(f.nodes.size()) != c.in_channels)
            throw ShapeMismatch(layer_index, "conv frontier channels");
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        std::vector<int> out;
        for (int o = 0; o < c.out_channels; ++o)
            out.push_back(add_node(g, PNodeType::Hidden, layer_index, 0));
        long long ker = 1;
        for (int d : c.kernel_shape) ker *= d;
        for (int o = 0; o < c.out_channels; ++o)
            for (int ci = 0; ci < c.in_channels; ++ci)
                for (long long k = 0; k < ker; ++k) {
                    std::vector<int> pos;
                    if (c.spatial_rank == 1) {
                        pos = {static_cast<int>(k)};
                    } else {
                        pos = {static_cast<int>(k / c.kernel_shape[1]),
                               static_cast<int>(k % c.kernel_shape[1])};
                    }
                    long long flat = (static_cast<long long>(o) * c.in_channels + ci) * ker + k;
                    add_edge(g, f.nodes[ci], out[o], w.data[flat], layer_index,
                             PEdgeType::Weight, pos,
                             ParamId{layer_index, ParamName::Weight, flat});
                }
        if (c.has_bias) {
            const Tensor& b = params.get(layer_index, ParamName::Bias);
            int bias = add_node(g, PNodeType::BiasNode, layer_index, layer_index);
            for (int o = 0; o < c.out_channels; ++o)
                add_edge(g, bias, out[o], b.data[o], layer_index, PEdgeType::Bias, {},
                         ParamId{layer_index, ParamName::Bias, o});
        }
        std::vector<int> out_spatial;
        if (static_cast<int>(f.spatial_shape.size()) == c.spatial_rank) {
            for (int d = 0; d < c.spatial_rank; ++d)
                out_spatial.push_back((f.spatial_shape[d] - c.kernel_shape[d]) / c.stride + 1);
        }
        f = Frontier{out, out_spatial, true};
    } else if (layer.is<DeepSetsLinear>()) {
        const auto& d = layer.as<DeepSetsLinear>();
        if (static_cast<int>(f.nodes.size()) != d.in_channels)
            throw ShapeMismatch(layer_index, "deepsets frontier channels");
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        std::vector<int> out;
        for (int o = 0; o < d.out_channels; ++o)
            out.push_back(add_node(g, PNodeType::Hidden, layer_index, 0));
        for (int basis = 0; basis < 2; ++basis)
            for (int i = 0; i < d.in_channels; ++i)
                for (int o = 0; o < d.out_channels; ++o) {
                    long long flat =
                        (static_cast<long long>(basis) * d.in_channels + i) * d.out_channels + o;
                    add_edge(g, f.nodes[i], out[o], w.data[flat], layer_index,
                             PEdgeType::Weight, {basis},
                             ParamId{layer_index, ParamName::Weight, flat});
                }
        f = Frontier{out, {d.set_size}, false};
    } else if (layer.is<MultiHeadAttention>()) {
        const auto& a = layer.as<MultiHeadAttention>();
        if (static_cast<int>(f.nodes.size()) != a.model_dim)
            throw ShapeMismatch(layer_index, "attention frontier channels");
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        int H = a.num_heads * a.head_dim;
        std::vector<int> mid, out;
        for (int m = 0; m < H; ++m)
            mid.push_back(add_node(g, PNodeType::AttnHead, layer_index, m / a.head_dim));
        for (int o = 0; o < a.model_dim; ++o)
            out.push_back(add_node(g, PNodeType::Hidden, layer_index, 0));
        for (int slice = 0; slice < 3; ++slice)  // q, k, v maps
            for (int m = 0; m < H; ++m)
                for (int i = 0; i < a.model_dim; ++i) {
                    long long flat =
                        (static_cast<long long>(slice) * H + m) * a.model_dim + i;
                    add_edge(g, f.nodes[i], mid[m], w.data[flat], layer_index,
                             PEdgeType::Weight, {slice},
                             ParamId{layer_index, ParamName::Weight, flat});
                }
        for (int m = 0; m < H; ++m)  // output map
            for (int o = 0; o < a.model_dim; ++o) {
                long long flat = (3LL * H + m) * a.model_dim + o;
                add_edge(g, mid[m], out[o], w.data[flat], layer_index, PEdgeType::Weight,
                         {3}, ParamId{layer_index, ParamName::Weight, flat});
            }
        if (a.has_bias) {
            const Tensor& b = params.get(layer_index, ParamName::Bias);
            int bias = add_node(g, PNodeType::BiasNode, layer_index, layer_index);
            for (int slice = 0; slice < 3; ++slice)
                for (int m = 0; m < H; ++m)
                    add_edge(g, bias, mid[m], b.data[slice * H + m], layer_index,
                             PEdgeType::Bias, {slice},
                             ParamId{layer_index, ParamName::Bias, slice * H + m});
            for (int o = 0; o < a.model_dim; ++o)
                add_edge(g, bias, out[o], b.data[3 * H + o], layer_index, PEdgeType::Bias,
                         {3}, ParamId{layer_index, ParamName::Bias, 3 * H + o});
        }
        f.nodes = out;
    } else if (layer.is<Residual>()) {
        const auto& r = layer.as<Residual>();
        Frontier start = f;
        append_chain(g, r.inner, layer_index + 1, params, f);
        if (f.nodes.size() != start.nodes.size())
            throw ShapeMismatch(layer_index, "residual width changed");
        if (f.nodes != start.nodes)
            for (size_t i = 0; i < start.nodes.size(); ++i)
                add_edge(g, start.nodes[i], f.nodes[i], 1.0, layer_index,
                         PEdgeType::ResidualSkip, {}, std::nullopt);
    } else if (layer.is<Norm>()) {
        const auto& n = layer.as<Norm>();
        if (static_cast<int>(f.nodes.size()) != n.num_features)
            throw ShapeMismatch(layer_index, "norm frontier channels");
        const Tensor& gamma = params.get(layer_index, ParamName::Gamma);
        const Tensor& beta = params.get(layer_index, ParamName::Beta);
        int mean = add_node(g, PNodeType::NormMean, layer_index, 0);
        int var = add_node(g, PNodeType::NormVar, layer_index, 0);
        for (int c = 0; c < n.num_features; ++c) {
            add_edge(g, mean, f.nodes[c], beta.data[c], layer_index, PEdgeType::NormBeta, {},
                     ParamId{layer_index, ParamName::Beta, c});
            add_edge(g, var, f.nodes[c], gamma.data[c], layer_index, PEdgeType::NormGamma, {},
                     ParamId{layer_index, ParamName::Gamma, c});
        }
    } else if (layer.is<SpatialGrid>()) {
        const auto& gr = layer.as<SpatialGrid>();
        if (f.nodes.size() != 2)
            throw ShapeMismatch(layer_index, "grid expects a 2-node coordinate frontier");
        const Tensor& grid = params.get(layer_index, ParamName::Grid);
        int gh = gr.grid_shape[0], gw = gr.grid_shape[1];
        std::vector<int> channels;
        for (int c = 0; c < gr.channels; ++c)
            channels.push_back(add_node(g, PNodeType::Channel, layer_index, 0));
        for (int i = 0; i < gh; ++i)
            for (int j = 0; j < gw; ++j) {
                int cell = add_node(g, PNodeType::GridCoord, layer_index, i * gw + j);
                for (int c = 0; c < gr.channels; ++c) {
                    long long flat = (static_cast<long long>(i) * gw + j) * gr.channels + c;
                    add_edge(g, cell, channels[c], grid.data[flat], layer_index,
                             PEdgeType::Grid, {i, j},
                             ParamId{layer_index, ParamName::Grid, flat});
                }
            }
        // output is interpolated features concatenated with the raw coordinates
        std::vector<int> out = channels;
        out.push_back(f.nodes[0]);
        out.push_back(f.nodes[1]);
        f = Frontier{out, {}, true};
    } else if (layer.is<Activation>() || layer.is<Flatten>()) {
        // no nodes, no edges
    } else {
        throw UnsupportedLayer("param graph: unknown layer variant");
    }
}

void append_chain(ParamGraph& g, const std::vector<LayerSpec>& layers, int base_index,
                  const ParamStore& params, Frontier& f) {
    int idx = base_index;
    for (const LayerSpec& layer : layers) {
        append_layer(g, layer, idx, params, f);
        idx += 1;
        if (layer.is<Residual>())
            idx += total_layer_count(ArchSpec{layer.as<Residual>().inner, {}});
    }
}

}  // namespace

ParamGraph build_param_graph(const ArchSpec& spec, const ParamStore& params) {
    validate_arch(spec);
    ParamGraph g;
    Frontier f;
    const std::vector<int>& in = spec.input_shape;
    bool channel_minor_first =
        !spec.layers.empty() && (spec.layers.front().is<DeepSetsLinear>() ||
                                 spec.layers.front().is<MultiHeadAttention>());
    int channels;
    if (in.size() == 1) {
        channels = in[0];
        f.spatial_shape = {};
        f.channel_major = true;
    } else if (channel_minor_first) {
        channels = in.back();
        f.spatial_shape.assign(in.begin(), in.end() - 1);
        f.channel_major = false;
    } else {
        channels = in[0];
        f.spatial_shape.assign(in.begin() + 1, in.end());
        f.channel_major = true;
    }
    for (int i = 0; i < channels; ++i)
        f.nodes.push_back(add_node(g, PNodeType::Input, -1, i));
    append_chain(g, spec.layers, 0, params, f);
    for (size_t j = 0; j < f.nodes.size(); ++j) {
        NodeFeature& n = g.nodes[f.nodes[j]];
        if (n.type == PNodeType::Hidden || n.type == PNodeType::Channel) {
            n.type = PNodeType::Output;
            n.subindex = static_cast<int>(j);
        }
    }
    return g;
}

ParamStore extract_params(const ParamGraph& g, const ArchSpec& spec) {
    const double sentinel = std::numeric_limits<double>::quiet_NaN();
    ParamStore store;
    for (const FlatLayer& fl : flatten_layers(spec))
        for (const auto& [name, shape] : param_shapes(*fl.layer)) {
            Tensor t(shape);
            std::fill(t.data.begin(), t.data.end(), sentinel);
            store.set(fl.index, name, std::move(t));
        }
    for (const PGEdge& e : g.edges) {
        if (!e.param || e.feat.direction != 0) continue;
        store.set_scalar(*e.param, e.feat.value);
    }
    for (const auto& [key, t] : store.tensors)
        for (size_t i = 0; i < t.data.size(); ++i)
            if (std::isnan(t.data[i]))
                throw MissingBinding(std::to_string(key.first) + "." +
                                     to_string(static_cast<ParamName>(key.second)) + "[" +
                                     std::to_string(i) + "]");
    return store;
}

ParamGraph to_undirected(const ParamGraph& g) {
    ParamGraph out = g;
    for (const PGEdge& e : g.edges) {
        PGEdge rev = e;
        std::swap(rev.src, rev.dst);
        rev.feat.direction = 1;
        rev.param = std::nullopt;
        out.edges.push_back(std::move(rev));
    }
    out.undirected = true;
    return out;
}

std::string export_graph(const ParamGraph& g, ExportFormat format) {
    if (g.nodes.empty()) throw EmptyGraph();
    if (format == ExportFormat::Json) {
        json j;
        j["nodes"] = json::array();
        for (size_t i = 0; i < g.nodes.size(); ++i)
            j["nodes"].push_back({{"id", static_cast<int>(i)},
                                  {"layer", g.nodes[i].layer_index},
                                  {"type", g.nodes[i].code()}});
        j["edges"] = json::array();
        for (const PGEdge& e : g.edges) {
            json je = {{"src", e.src},       {"dst", e.dst},
                       {"value", e.feat.value}, {"layer", e.feat.layer_index},
                       {"etype", static_cast<int>(e.feat.type)},
                       {"dir", e.feat.direction}};
            if (e.feat.pos.empty())
                je["pos"] = nullptr;
            else
                je["pos"] = e.feat.pos;
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
    std::ostringstream os;
    os << "digraph paramgraph {\n  rankdir=LR;\n";
    for (size_t i = 0; i < g.nodes.size(); ++i)
        os << "  n" << i << " [label=\"" << to_string(g.nodes[i].type) << ":"
           << g.nodes[i].layer_index << "\"];\n";
    for (const PGEdge& e : g.edges) {
        if (e.feat.direction != 0) continue;
        os << "  n" << e.src << " -> n" << e.dst << " [label=\"" << e.feat.value << "\"";
        if (e.feat.type == PEdgeType::ResidualSkip) os << ", style=dashed";
        os << "];\n";
    }
    os << "}\n";
    return os.str();
}

ParamGraph param_graph_from_json(const std::string& text) {
    json j = json::parse(text);
    ParamGraph g;
    for (const auto& nj : j.at("nodes")) {
        int code = nj.at("type").get<int>();
        g.nodes.push_back(NodeFeature{nj.at("layer").get<int>(),
                                      static_cast<PNodeType>(code / 10000), code % 10000});
    }
    for (const auto& ej : j.at("edges")) {
        PGEdge e;
        e.src = ej.at("src").get<int>();
        e.dst = ej.at("dst").get<int>();
        e.feat.value = ej.at("value").get<double>();
        e.feat.layer_index = ej.at("layer").get<int>();
        e.feat.type = static_cast<PEdgeType>(ej.at("etype").get<int>());
        e.feat.direction = ej.at("dir").get<int>();
        if (!ej.at("pos").is_null()) e.feat.pos = ej.at("pos").get<std::vector<int>>();
        if (!ej.at("param").is_null())
            e.param = ParamId{ej.at("param").at("layer").get<int>(),
                              param_name_from_string(
                                  ej.at("param").at("name").get<std::string>()),
                              ej.at("param").at("idx").get<long long>()};
        g.edges.push_back(std::move(e));
        if (g.edges.back().feat.direction == 1) g.undirected = true;
    }
    return g;
}

}  // namespace gmn
