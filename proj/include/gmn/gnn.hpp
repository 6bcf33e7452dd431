#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gmn/automorphism.hpp"
#include "gmn/graph_view.hpp"

namespace gmn {

using Vec = std::vector<double>;

// raw feature layouts (fixed, graph-size independent)
//   node: [tag one-hot x9 | layer | subindex | sigma one-hot x3]
//   edge: [value | layer | etype one-hot x6 | dir | pos x3 (pad -1)]
constexpr int kNodeRaw = 14;
constexpr int kEdgeRaw = 12;

Vec node_raw_features(const ViewNode& n);
Vec edge_raw_features(const ViewEdge& e);

struct MlpWeights {
    std::vector<Tensor> w;  // [out x in], row-major
    std::vector<Tensor> b;  // [out]
    Act act = Act::Relu;    // applied between layers; last layer is linear

    int in_dim() const { return w.empty() ? 0 : w.front().shape[1]; }
    int out_dim() const { return w.empty() ? 0 : w.back().shape[0]; }
};

MlpWeights make_mlp(const std::vector<int>& dims, Act act, uint64_t seed);
Vec mlp_apply(const MlpWeights& m, const Vec& x);

struct GnnLayerWeights {
    MlpWeights node_msg;                    // (v_i, v_j, e, u) -> message
    MlpWeights node_upd;                    // (v_i, sum msg, u) -> v_i'
    MlpWeights edge_upd;                    // (v_i', v_j', e, u) -> e'
    std::optional<MlpWeights> global_upd;   // (sum v', sum e', u) -> u'
};

struct GraphState {
    std::vector<Vec> v;
    std::vector<Vec> e;  // aligned with the view's canonical edge list
    Vec u;
};

// hand-built update used by the constructive models
struct FnLayer {
    std::string name;
    std::function<void(GraphState&, const GraphView&)> fn;
};

using GnnLayer = std::variant<GnnLayerWeights, FnLayer>;

enum class Readout { EdgeMeanPool, PerEdge, OutputNodes, Global };

struct GnnModel {
    std::optional<MlpWeights> node_embed;  // raw node features -> d_v
    std::optional<MlpWeights> edge_embed;  // raw edge features -> d_e
    int d_u = 0;
    std::vector<GnnLayer> layers;
    Readout readout = Readout::EdgeMeanPool;
    std::optional<MlpWeights> head;
    bool final_sigmoid = false;
    // replaces the raw-feature embedding entirely (constructive models);
    // second argument optionally seeds input-node features
    std::function<GraphState(const GraphView&, const Vec*)> custom_embed;

    bool trainable() const;
};

GraphState embed(const GraphView& g);  // raw features, no learned weights
GraphState embed_for_model(const GraphView& g, const GnnModel& m,
                           const Vec* inputs = nullptr);

GraphState gnn_layer(const GraphState& s, const GraphView& g, const GnnLayerWeights& w);
void apply_layer(GraphState& s, const GraphView& g, const GnnLayer& layer);

struct MetanetOutput {
    Vec value;                                  // pooled / global / output-node modes
    std::vector<std::pair<int, Vec>> per_edge;  // (canonical edge index, prediction)
};

MetanetOutput forward_metanet(const GraphView& g, const GnnModel& m,
                              const Vec* inputs = nullptr);

// ---- constructions -------------------------------------------------------

GnnModel build_forward_sim_gnn(const CompGraph& g);

Vec statnn_stats(const ParamStore& params, const ArchSpec& spec, bool full = true);
double statnn_oracle(const ParamStore& params, const ArchSpec& spec,
                     const MlpWeights& head);
GnnModel build_statnn_gnn(const MlpWeights& head);  // mean/variance slots only

struct NpnfnCoeffs {
    int L = 0;
    std::vector<Vec> a1, a7, c1, c4;      // [L][L], coefficients of the sums over s
    Vec a2, a3, a4, a5, a6, a8, a9;       // [L]
    Vec c2, c3, c5;                       // [L]
};
NpnfnCoeffs zero_npnfn_coeffs(int L);
NpnfnCoeffs random_npnfn_coeffs(int L, uint64_t seed);

std::pair<std::vector<Tensor>, std::vector<Tensor>> npnfn_linear(
    const std::vector<Tensor>& W, const std::vector<Tensor>& b, const NpnfnCoeffs& coeffs);

GnnModel build_npnfn_gnn(const NpnfnCoeffs& coeffs);

double check_equivariance(const GnnModel& m, const GraphView& g,
                          const std::vector<NeuralAutomorphism>& autos);

// ---- trainable models ----------------------------------------------------

struct GnnConfig {
    int d_v = 16;
    int d_e = 16;
    int d_u = 0;
    int n_layers = 3;
    int hidden = 16;
    Readout readout = Readout::EdgeMeanPool;
    int head_hidden = 16;
    int head_out = 1;
    bool final_sigmoid = false;
    bool use_global = false;
};

GnnModel make_trainable_model(const GnnConfig& cfg, uint64_t seed);

// flat parameter order: node_embed, edge_embed, layers (msg, upd, edge, global), head
std::vector<MlpWeights*> trainable_parts(GnnModel& m);
std::vector<const MlpWeights*> trainable_parts(const GnnModel& m);
Vec flatten_params(const GnnModel& m);
void load_flat_params(GnnModel& m, const Vec& flat);

void save_model(const GnnModel& m, const std::string& path);
GnnModel load_model(const std::string& path);

}  // namespace gmn
