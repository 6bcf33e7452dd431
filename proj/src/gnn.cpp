#include "gmn/gnn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

namespace gmn {

using nlohmann::json;

Vec node_raw_features(const ViewNode& n) {
    Vec f(kNodeRaw, 0.0);
    f[static_cast<int>(n.tag)] = 1.0;
    f[9] = static_cast<double>(n.layer);
    f[10] = static_cast<double>(n.subindex);
    f[11 + static_cast<int>(n.sigma)] = 1.0;
    return f;
}

Vec edge_raw_features(const ViewEdge& e) {
    Vec f(kEdgeRaw, 0.0);
    f[0] = e.value;
    f[1] = static_cast<double>(e.layer);
    f[2 + static_cast<int>(e.etype)] = 1.0;
    f[8] = static_cast<double>(e.dir);
    for (int k = 0; k < 3; ++k)
        f[9 + k] = k < static_cast<int>(e.pos.size()) ? static_cast<double>(e.pos[k]) : -1.0;
    return f;
}

MlpWeights make_mlp(const std::vector<int>& dims, Act act, uint64_t seed) {
    if (dims.size() < 2) throw DimMismatch("mlp needs at least one layer");
    std::mt19937_64 rng(seed);
    MlpWeights m;
    m.act = act;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor w({dims[l + 1], dims[l]});
        for (double& v : w.data) v = dist(rng);
        Tensor b({dims[l + 1]});
        for (double& v : b.data) v = dist(rng);
        m.w.push_back(std::move(w));
        m.b.push_back(std::move(b));
    }
    return m;
}

Vec mlp_apply(const MlpWeights& m, const Vec& x) {
    if (static_cast<int>(x.size()) != m.in_dim())
        throw DimMismatch("mlp input " + std::to_string(x.size()) + " != " +
                          std::to_string(m.in_dim()));
    Vec h = x;
    for (size_t l = 0; l < m.w.size(); ++l) {
        int out = m.w[l].shape[0], in = m.w[l].shape[1];
        Vec z(out);
        for (int o = 0; o < out; ++o) {
            double acc = m.b[l].data[o];
            const double* row = m.w[l].data.data() + static_cast<size_t>(o) * in;
            for (int i = 0; i < in; ++i) acc += row[i] * h[i];
            z[o] = acc;
        }
        if (l + 1 < m.w.size())
            for (double& v : z) v = apply_act(m.act, v);
        h = std::move(z);
    }
    return h;
}

bool GnnModel::trainable() const {
    if (custom_embed) return false;
    for (const GnnLayer& l : layers)
        if (!std::holds_alternative<GnnLayerWeights>(l)) return false;
    return true;
}

GraphState embed(const GraphView& g) {
    GraphState s;
    s.v.reserve(g.nodes.size());
    for (const ViewNode& n : g.nodes) s.v.push_back(node_raw_features(n));
    s.e.reserve(g.edges.size());
    for (const ViewEdge& e : g.edges) s.e.push_back(edge_raw_features(e));
    return s;
}

GraphState embed_for_model(const GraphView& g, const GnnModel& m, const Vec* inputs) {
    if (m.custom_embed) return m.custom_embed(g, inputs);
    GraphState s = embed(g);
    if (m.node_embed)
        for (Vec& v : s.v) v = mlp_apply(*m.node_embed, v);
    if (m.edge_embed)
        for (Vec& e : s.e) e = mlp_apply(*m.edge_embed, e);
    s.u.assign(m.d_u, 0.0);
    return s;
}

namespace {

Vec concat(std::initializer_list<const Vec*> parts) {
    Vec out;
    size_t n = 0;
    for (const Vec* p : parts) n += p->size();
    out.reserve(n);
    for (const Vec* p : parts) out.insert(out.end(), p->begin(), p->end());
    return out;
}

void add_into(Vec& acc, const Vec& x) {
    if (acc.size() != x.size()) throw DimMismatch("sum accumulator size");
    for (size_t i = 0; i < x.size(); ++i) acc[i] += x[i];
}

}  // namespace

GraphState gnn_layer(const GraphState& s, const GraphView& g, const GnnLayerWeights& w) {
    size_t nv = g.nodes.size(), ne = g.edges.size();
    if (s.v.size() != nv || s.e.size() != ne) throw DimMismatch("state/graph mismatch");
    GraphState out;
    out.u = s.u;

    // node update: sum messages over incoming edges, parallel edges included
    int msg_dim = w.node_msg.out_dim();
    std::vector<Vec> msg_sum(nv, Vec(msg_dim, 0.0));
    for (size_t k = 0; k < ne; ++k) {
        const ViewEdge& e = g.edges[k];
        Vec m = mlp_apply(w.node_msg, concat({&s.v[e.dst], &s.v[e.src], &s.e[k], &s.u}));
        add_into(msg_sum[e.dst], m);
    }
    out.v.resize(nv);
    for (size_t i = 0; i < nv; ++i)
        out.v[i] = mlp_apply(w.node_upd, concat({&s.v[i], &msg_sum[i], &s.u}));

    // edge update from the fresh node features
    out.e.resize(ne);
    for (size_t k = 0; k < ne; ++k) {
        const ViewEdge& e = g.edges[k];
        out.e[k] =
            mlp_apply(w.edge_upd, concat({&out.v[e.dst], &out.v[e.src], &s.e[k], &s.u}));
    }

    if (w.global_upd) {
        Vec vsum(out.v.empty() ? 0 : out.v[0].size(), 0.0);
        for (const Vec& v : out.v) add_into(vsum, v);
        Vec esum(out.e.empty() ? w.edge_upd.out_dim() : static_cast<int>(out.e[0].size()),
                 0.0);
        for (const Vec& e : out.e) add_into(esum, e);
        out.u = mlp_apply(*w.global_upd, concat({&vsum, &esum, &s.u}));
    }
    return out;
}

void apply_layer(GraphState& s, const GraphView& g, const GnnLayer& layer) {
    if (const auto* w = std::get_if<GnnLayerWeights>(&layer))
        s = gnn_layer(s, g, *w);
    else
        std::get<FnLayer>(layer).fn(s, g);
}

MetanetOutput forward_metanet(const GraphView& g, const GnnModel& m, const Vec* inputs) {
    GraphState s = embed_for_model(g, m, inputs);
    for (const GnnLayer& layer : m.layers) apply_layer(s, g, layer);

    MetanetOutput out;
    switch (m.readout) {
        case Readout::EdgeMeanPool: {
            if (s.e.empty()) throw EmptyGraph();
            Vec mean(s.e[0].size(), 0.0);
            for (const Vec& e : s.e) add_into(mean, e);
            for (double& v : mean) v /= static_cast<double>(s.e.size());
            out.value = m.head ? mlp_apply(*m.head, mean) : mean;
            break;
        }
        case Readout::PerEdge: {
            for (size_t k = 0; k < g.edges.size(); ++k) {
                const ViewEdge& e = g.edges[k];
                if (!e.param || e.dir != 0) continue;
                Vec pred = m.head ? mlp_apply(*m.head, s.e[k]) : s.e[k];
                if (m.final_sigmoid)
                    for (double& v : pred) v = 1.0 / (1.0 + std::exp(-v));
                out.per_edge.push_back({static_cast<int>(k), std::move(pred)});
            }
            return out;
        }
        case Readout::OutputNodes: {
            for (int n : g.output_nodes)
                out.value.insert(out.value.end(), s.v[n].begin(), s.v[n].end());
            break;
        }
        case Readout::Global: {
            out.value = m.head ? mlp_apply(*m.head, s.u) : s.u;
            break;
        }
    }
    if (m.final_sigmoid)
        for (double& v : out.value) v = 1.0 / (1.0 + std::exp(-v));
    return out;
}

// ---- forward-pass simulation ----------------------------------------------

GnnModel build_forward_sim_gnn(const CompGraph& g) {
    int depth = 0;
    for (const CompNode& n : g.nodes) {
        if (n.sigma == Act::Sine)
            throw UnsupportedNonlinearity("sine activations cannot be simulated");
        depth = std::max(depth, n.layer_number);
    }
    GnnModel m;
    m.custom_embed = [](const GraphView& view, const Vec* inputs) {
        GraphState s;
        s.v.assign(view.nodes.size(), Vec{0.0});
        for (size_t i = 0; i < view.nodes.size(); ++i) {
            if (view.nodes[i].tag == PNodeType::BiasNode) s.v[i][0] = 1.0;
            if (view.nodes[i].tag == PNodeType::Input && inputs) {
                if (view.nodes[i].subindex >= static_cast<int>(inputs->size()))
                    throw DimMismatch("input vector too short");
                s.v[i][0] = (*inputs)[view.nodes[i].subindex];
            }
        }
        s.e.reserve(view.edges.size());
        for (const ViewEdge& e : view.edges) s.e.push_back(Vec{e.value});
        return s;
    };
    FnLayer step;
    step.name = "forward_sim";
    step.fn = [](GraphState& s, const GraphView& view) {
        std::vector<double> acc(view.nodes.size(), 0.0);
        for (size_t k = 0; k < view.edges.size(); ++k) {
            const ViewEdge& e = view.edges[k];
            acc[e.dst] += s.e[k][0] * s.v[e.src][0];
        }
        for (size_t i = 0; i < view.nodes.size(); ++i) {
            const ViewNode& n = view.nodes[i];
            if (n.tag == PNodeType::Input || n.tag == PNodeType::BiasNode) continue;
            s.v[i][0] = n.tag == PNodeType::Output ? acc[i] : apply_act(n.sigma, acc[i]);
        }
    };
    for (int d = 0; d < std::max(depth, 1); ++d) m.layers.push_back(step);
    m.readout = Readout::OutputNodes;
    return m;
}

// ---- StatNN ----------------------------------------------------------------

namespace {

void push_stats(Vec& out, const std::vector<double>& data, bool full) {
    double n = static_cast<double>(data.size());
    double mean = 0.0;
    for (double v : data) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : data) var += (v - mean) * (v - mean);
    var /= n;  // population variance
    out.push_back(mean);
    out.push_back(var);
    if (!full) return;
    std::vector<double> sorted = data;
    std::sort(sorted.begin(), sorted.end());
    for (int q : {0, 25, 50, 75, 100}) {
        double p = q / 100.0 * (n - 1.0);
        size_t lo = static_cast<size_t>(std::floor(p));
        size_t hi = static_cast<size_t>(std::ceil(p));
        double frac = p - static_cast<double>(lo);
        out.push_back(sorted[lo] * (1.0 - frac) + sorted[hi] * frac);
    }
}

}  // namespace

Vec statnn_stats(const ParamStore& params, const ArchSpec& spec, bool full) {
    Vec out;
    for (const FlatLayer& fl : flatten_layers(spec))
        for (const auto& [name, shape] : param_shapes(*fl.layer))
            push_stats(out, params.get(fl.index, name).data, full);
    return out;
}

double statnn_oracle(const ParamStore& params, const ArchSpec& spec,
                     const MlpWeights& head) {
    Vec stats = statnn_stats(params, spec, true);
    return mlp_apply(head, stats)[0];
}

GnnModel build_statnn_gnn(const MlpWeights& head) {
    GnnModel m;
    m.custom_embed = [](const GraphView& view, const Vec*) {
        GraphState s;
        s.v.assign(view.nodes.size(), Vec{});
        s.e.reserve(view.edges.size());
        for (const ViewEdge& e : view.edges) s.e.push_back(Vec{e.value});
        return s;
    };
    FnLayer collect;
    collect.name = "statnn_sum";
    collect.fn = [](GraphState& s, const GraphView& view) {
        // one slot triple (count, sum, sum of squares) per parameter tensor,
        // tensors keyed by (layer, edge type) in declaration order
        std::map<std::pair<int, int>, std::array<double, 3>> slots;
        for (size_t k = 0; k < view.edges.size(); ++k) {
            const ViewEdge& e = view.edges[k];
            if (!e.param || e.dir != 0) continue;
            auto& a = slots[{e.layer, static_cast<int>(e.etype)}];
            double w = s.e[k][0];
            a[0] += 1.0;
            a[1] += w;
            a[2] += w * w;
        }
        s.u.clear();
        for (const auto& [key, a] : slots) {
            double mean = a[1] / a[0];
            s.u.push_back(mean);
            s.u.push_back(a[2] / a[0] - mean * mean);
        }
    };
    m.layers.push_back(collect);
    m.readout = Readout::Global;
    m.head = head;
    return m;
}

// ---- NP-NFN -----------------------------------------------------------------

NpnfnCoeffs zero_npnfn_coeffs(int L) {
    NpnfnCoeffs c;
    c.L = L;
    c.a1.assign(L, Vec(L, 0.0));
    c.a7.assign(L, Vec(L, 0.0));
    c.c1.assign(L, Vec(L, 0.0));
    c.c4.assign(L, Vec(L, 0.0));
    for (Vec* v : {&c.a2, &c.a3, &c.a4, &c.a5, &c.a6, &c.a8, &c.a9, &c.c2, &c.c3, &c.c5})
        v->assign(L, 0.0);
    return c;
}

NpnfnCoeffs random_npnfn_coeffs(int L, uint64_t seed) {
    NpnfnCoeffs c = zero_npnfn_coeffs(L);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int l = 0; l < L; ++l)
        for (int s = 0; s < L; ++s) {
            c.a1[l][s] = dist(rng);
            c.a7[l][s] = dist(rng);
            c.c1[l][s] = dist(rng);
            c.c4[l][s] = dist(rng);
        }
    for (Vec* v : {&c.a2, &c.a3, &c.a4, &c.a5, &c.a6, &c.a8, &c.a9, &c.c2, &c.c3, &c.c5})
        for (int l = 0; l < L; ++l) (*v)[l] = dist(rng);
    return c;
}

std::pair<std::vector<Tensor>, std::vector<Tensor>> npnfn_linear(
    const std::vector<Tensor>& W, const std::vector<Tensor>& b,
    const NpnfnCoeffs& coeffs) {
    int L = static_cast<int>(W.size());
    if (L != coeffs.L || static_cast<int>(b.size()) != L)
        throw ShapeMismatch(-1, "npnfn expects L weight and bias tensors");
    for (int l = 1; l < L; ++l)
        if (W[l].shape[1] != W[l - 1].shape[0])
            throw ShapeMismatch(l, "weight chain broken");

    std::vector<double> wsum(L, 0.0), bsum(L, 0.0);
    std::vector<Vec> rowsum(L), colsum(L);
    for (int l = 0; l < L; ++l) {
        int rows = W[l].shape[0], cols = W[l].shape[1];
        rowsum[l].assign(rows, 0.0);
        colsum[l].assign(cols, 0.0);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                double v = W[l].data[static_cast<size_t>(i) * cols + j];
                wsum[l] += v;
                rowsum[l][i] += v;
                colsum[l][j] += v;
            }
        for (double v : b[l].data) bsum[l] += v;
    }

    std::vector<Tensor> Wt, bt;
    for (int l = 0; l < L; ++l) {
        int rows = W[l].shape[0], cols = W[l].shape[1];
        Tensor w(W[l].shape);
        double global_w = 0.0, global_b = 0.0;
        for (int s = 0; s < L; ++s) {
            global_w += coeffs.a1[l][s] * wsum[s] + coeffs.a7[l][s] * bsum[s];
            global_b += coeffs.c1[l][s] * wsum[s] + coeffs.c4[l][s] * bsum[s];
        }
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                double v = global_w;
                v += coeffs.a2[l] * colsum[l][j];
                if (l > 0) v += coeffs.a3[l] * rowsum[l - 1][j];
                v += coeffs.a4[l] * rowsum[l][i];
                if (l + 1 < L) v += coeffs.a5[l] * colsum[l + 1][i];
                v += coeffs.a6[l] * W[l].data[static_cast<size_t>(i) * cols + j];
                v += coeffs.a8[l] * b[l].data[i];
                if (l > 0) v += coeffs.a9[l] * b[l - 1].data[j];
                w.data[static_cast<size_t>(i) * cols + j] = v;
            }
        Tensor bb(b[l].shape);
        for (int j = 0; j < rows; ++j) {
            double v = global_b;
            v += coeffs.c2[l] * rowsum[l][j];
            if (l + 1 < L) v += coeffs.c3[l] * colsum[l + 1][j];
            v += coeffs.c5[l] * b[l].data[j];
            bb.data[j] = v;
        }
        Wt.push_back(std::move(w));
        bt.push_back(std::move(bb));
    }
    return {std::move(Wt), std::move(bt)};
}

GnnModel build_npnfn_gnn(const NpnfnCoeffs& coeffs) {
    GnnModel m;
    m.custom_embed = [](const GraphView& view, const Vec*) {
        GraphState s;
        s.v.assign(view.nodes.size(), Vec{});
        s.e.reserve(view.edges.size());
        for (const ViewEdge& e : view.edges) s.e.push_back(Vec{e.value});
        return s;
    };
    FnLayer fn;
    fn.name = "npnfn";
    fn.fn = [coeffs](GraphState& s, const GraphView& view) {
        // layer ordinals: sorted distinct layer tags of forward weight edges
        std::set<int> layers;
        for (const ViewEdge& e : view.edges)
            if (e.param && e.dir == 0 && e.etype == PEdgeType::Weight)
                layers.insert(e.layer);
        int L = static_cast<int>(layers.size());
        if (L != coeffs.L) throw DimMismatch("graph has " + std::to_string(L) +
                                             " weight layers, coefficients expect " +
                                             std::to_string(coeffs.L));
        std::map<int, int> ord;  // layer tag -> 0-based ordinal
        int next = 0;
        for (int l : layers) ord[l] = next++;

        // global slots (first) ...
        Vec wsum(L, 0.0), bsum(L, 0.0);
        // ... then node slots: incoming-weight sum (row), outgoing-weight sum
        // (column), incoming-bias value
        size_t nv = view.nodes.size();
        Vec row(nv, 0.0), col(nv, 0.0), bias(nv, 0.0);
        for (size_t k = 0; k < view.edges.size(); ++k) {
            const ViewEdge& e = view.edges[k];
            if (!e.param || e.dir != 0) continue;
            double w = s.e[k][0];
            auto it = ord.find(e.layer);
            if (it == ord.end()) throw DimMismatch("bias layer without weights");
            if (e.etype == PEdgeType::Weight) {
                wsum[it->second] += w;
                row[e.dst] += w;
                col[e.src] += w;
            } else if (e.etype == PEdgeType::Bias) {
                bsum[it->second] += w;
                bias[e.dst] += w;
            } else {
                throw WrongFamily("npnfn expects a plain multilayer perceptron graph");
            }
        }
        s.u = concat({&wsum, &bsum});

        // edge update combines globals, endpoint sums and the edge value
        std::vector<double> result(view.edges.size(), 0.0);
        for (size_t k = 0; k < view.edges.size(); ++k) {
            const ViewEdge& e = view.edges[k];
            if (!e.param || e.dir != 0) continue;
            int l = ord.at(e.layer);
            double v = 0.0;
            if (e.etype == PEdgeType::Weight) {
                int i = e.dst, j = e.src;
                for (int ss = 0; ss < L; ++ss)
                    v += coeffs.a1[l][ss] * wsum[ss] + coeffs.a7[l][ss] * bsum[ss];
                v += coeffs.a2[l] * col[j] + coeffs.a3[l] * row[j];
                v += coeffs.a4[l] * row[i] + coeffs.a5[l] * col[i];
                v += coeffs.a6[l] * s.e[k][0];
                v += coeffs.a8[l] * bias[i] + coeffs.a9[l] * bias[j];
            } else {
                int n = e.dst;  // bias edges end at the neuron
                for (int ss = 0; ss < L; ++ss)
                    v += coeffs.c1[l][ss] * wsum[ss] + coeffs.c4[l][ss] * bsum[ss];
                v += coeffs.c2[l] * row[n] + coeffs.c3[l] * col[n];
                v += coeffs.c5[l] * s.e[k][0];
            }
            result[k] = v;
        }
        for (size_t k = 0; k < view.edges.size(); ++k) s.e[k] = Vec{result[k]};
    };
    m.layers.push_back(fn);
    m.readout = Readout::PerEdge;
    return m;
}

double check_equivariance(const GnnModel& m, const GraphView& g,
                          const std::vector<NeuralAutomorphism>& autos) {
    MetanetOutput base = forward_metanet(g, m);
    double worst = 0.0;
    for (const NeuralAutomorphism& a : autos) {
        std::vector<int> edge_map;
        GraphView pg = permute_view(g, a.node_perm, &edge_map);
        MetanetOutput other = forward_metanet(pg, m);
        if (m.readout == Readout::PerEdge) {
            std::map<int, const Vec*> by_index;
            for (const auto& [k, pred] : other.per_edge) by_index[k] = &pred;
            for (const auto& [k, pred] : base.per_edge) {
                auto it = by_index.find(edge_map[k]);
                if (it == by_index.end()) return std::numeric_limits<double>::infinity();
                for (size_t c = 0; c < pred.size(); ++c)
                    worst = std::max(worst, std::fabs(pred[c] - (*it->second)[c]));
            }
        } else {
            if (base.value.size() != other.value.size())
                return std::numeric_limits<double>::infinity();
            for (size_t c = 0; c < base.value.size(); ++c)
                worst = std::max(worst, std::fabs(base.value[c] - other.value[c]));
        }
    }
    return worst;
}

// ---- trainable models -------------------------------------------------------

GnnModel make_trainable_model(const GnnConfig& cfg, uint64_t seed) {
    GnnModel m;
    m.node_embed = make_mlp({kNodeRaw, cfg.d_v}, Act::Relu, mix_seed(seed, 1, 0));
    m.edge_embed = make_mlp({kEdgeRaw, cfg.d_e}, Act::Relu, mix_seed(seed, 2, 0));
    m.d_u = cfg.use_global ? cfg.d_u : 0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        GnnLayerWeights w;
        int du = m.d_u;
        w.node_msg = make_mlp({2 * cfg.d_v + cfg.d_e + du, cfg.hidden, cfg.d_v}, Act::Relu,
                              mix_seed(seed, 3, l));
        w.node_upd = make_mlp({2 * cfg.d_v + du, cfg.hidden, cfg.d_v}, Act::Relu,
                              mix_seed(seed, 4, l));
        w.edge_upd = make_mlp({2 * cfg.d_v + cfg.d_e + du, cfg.hidden, cfg.d_e}, Act::Relu,
                              mix_seed(seed, 5, l));
        if (cfg.use_global)
            w.global_upd = make_mlp({cfg.d_v + cfg.d_e + du, cfg.hidden, du}, Act::Relu,
                                    mix_seed(seed, 6, l));
        m.layers.push_back(std::move(w));
    }
    int head_in = cfg.readout == Readout::Global ? m.d_u : cfg.d_e;
    m.head = make_mlp({head_in, cfg.head_hidden, cfg.head_out}, Act::Relu,
                      mix_seed(seed, 7, 0));
    m.readout = cfg.readout;
    m.final_sigmoid = cfg.final_sigmoid;
    return m;
}

std::vector<MlpWeights*> trainable_parts(GnnModel& m) {
    std::vector<MlpWeights*> parts;
    if (m.node_embed) parts.push_back(&*m.node_embed);
    if (m.edge_embed) parts.push_back(&*m.edge_embed);
    for (GnnLayer& l : m.layers)
        if (auto* w = std::get_if<GnnLayerWeights>(&l)) {
            parts.push_back(&w->node_msg);
            parts.push_back(&w->node_upd);
            parts.push_back(&w->edge_upd);
            if (w->global_upd) parts.push_back(&*w->global_upd);
        }
    if (m.head) parts.push_back(&*m.head);
    return parts;
}

std::vector<const MlpWeights*> trainable_parts(const GnnModel& m) {
    std::vector<const MlpWeights*> out;
    for (MlpWeights* p : trainable_parts(const_cast<GnnModel&>(m))) out.push_back(p);
    return out;
}

Vec flatten_params(const GnnModel& m) {
    Vec flat;
    for (const MlpWeights* p : trainable_parts(m))
        for (size_t l = 0; l < p->w.size(); ++l) {
            flat.insert(flat.end(), p->w[l].data.begin(), p->w[l].data.end());
            flat.insert(flat.end(), p->b[l].data.begin(), p->b[l].data.end());
        }
    return flat;
}

void load_flat_params(GnnModel& m, const Vec& flat) {
    size_t off = 0;
    for (MlpWeights* p : trainable_parts(m))
        for (size_t l = 0; l < p->w.size(); ++l) {
            for (double& v : p->w[l].data) v = flat.at(off++);
            for (double& v : p->b[l].data) v = flat.at(off++);
        }
    if (off != flat.size()) throw DimMismatch("flat parameter vector size");
}

namespace {

json mlp_header(const MlpWeights& m) {
    std::vector<int> dims;
    dims.push_back(m.in_dim());
    for (const Tensor& w : m.w) dims.push_back(w.shape[0]);
    return json{{"act", to_string(m.act)}, {"dims", dims}};
}

MlpWeights mlp_from_header(const json& j) {
    std::vector<int> dims = j.at("dims").get<std::vector<int>>();
    MlpWeights m = make_mlp(dims, act_from_string(j.at("act").get<std::string>()), 0);
    return m;  // values overwritten by the flat payload
}

const char* readout_name(Readout r) {
    switch (r) {
        case Readout::EdgeMeanPool: return "edge_mean_pool";
        case Readout::PerEdge: return "per_edge";
        case Readout::OutputNodes: return "output_nodes";
        case Readout::Global: return "global";
    }
    return "?";
}

Readout readout_from_name(const std::string& s) {
    if (s == "edge_mean_pool") return Readout::EdgeMeanPool;
    if (s == "per_edge") return Readout::PerEdge;
    if (s == "output_nodes") return Readout::OutputNodes;
    if (s == "global") return Readout::Global;
    throw Error("unknown readout: " + s);
}

}  // namespace

void save_model(const GnnModel& m, const std::string& path) {
    if (!m.trainable()) throw Error("only weight-based models can be saved");
    json hdr;
    hdr["d_u"] = m.d_u;
    hdr["readout"] = readout_name(m.readout);
    hdr["final_sigmoid"] = m.final_sigmoid;
    hdr["node_embed"] = m.node_embed ? mlp_header(*m.node_embed) : json();
    hdr["edge_embed"] = m.edge_embed ? mlp_header(*m.edge_embed) : json();
    hdr["head"] = m.head ? mlp_header(*m.head) : json();
    hdr["layers"] = json::array();
    for (const GnnLayer& l : m.layers) {
        const auto& w = std::get<GnnLayerWeights>(l);
        json jl;
        jl["node_msg"] = mlp_header(w.node_msg);
        jl["node_upd"] = mlp_header(w.node_upd);
        jl["edge_upd"] = mlp_header(w.edge_upd);
        jl["global_upd"] = w.global_upd ? mlp_header(*w.global_upd) : json();
        hdr["layers"].push_back(jl);
    }
    std::string htext = hdr.dump();
    Vec flat = flatten_params(m);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    f.write("GMN1", 4);
    uint64_t hlen = htext.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>(hlen >> (8 * i));
    f.write(reinterpret_cast<char*>(lenbuf), 8);
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (double v : flat) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
        f.write(reinterpret_cast<char*>(buf), 8);
    }
}

GnnModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "GMN1", 4) != 0) throw Error("bad model file");
    unsigned char lenbuf[8];
    f.read(reinterpret_cast<char*>(lenbuf), 8);
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
    std::string htext(hlen, '\0');
    f.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw Error("truncated model header");
    json hdr = json::parse(htext);

    GnnModel m;
    m.d_u = hdr.at("d_u").get<int>();
    m.readout = readout_from_name(hdr.at("readout").get<std::string>());
    m.final_sigmoid = hdr.at("final_sigmoid").get<bool>();
    if (!hdr.at("node_embed").is_null()) m.node_embed = mlp_from_header(hdr["node_embed"]);
    if (!hdr.at("edge_embed").is_null()) m.edge_embed = mlp_from_header(hdr["edge_embed"]);
    for (const json& jl : hdr.at("layers")) {
        GnnLayerWeights w;
        w.node_msg = mlp_from_header(jl.at("node_msg"));
        w.node_upd = mlp_from_header(jl.at("node_upd"));
        w.edge_upd = mlp_from_header(jl.at("edge_upd"));
        if (!jl.at("global_upd").is_null()) w.global_upd = mlp_from_header(jl["global_upd"]);
        m.layers.push_back(std::move(w));
    }
    if (!hdr.at("head").is_null()) m.head = mlp_from_header(hdr["head"]);

    Vec flat = flatten_params(m);
    for (double& v : flat) {
        unsigned char buf[8];
        f.read(reinterpret_cast<char*>(buf), 8);
        if (!f) throw Error("truncated model payload");
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(buf[i]) << (8 * i);
        std::memcpy(&v, &bits, 8);
    }
    load_flat_params(m, flat);
    return m;
}

}  // namespace gmn
