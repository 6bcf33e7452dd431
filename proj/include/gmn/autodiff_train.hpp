#pragma once

#include <map>
#include <string>

#include "gmn/gnn.hpp"

namespace gmn {

// ---- MLP with tape ----------------------------------------------------------

struct MlpTape {
    std::vector<Vec> xs;  // input of each layer
    std::vector<Vec> zs;  // pre-activations
};

Vec mlp_forward_tape(const MlpWeights& m, const Vec& x, MlpTape& tape);
// Returns dL/dx; accumulates parameter gradients into gw (layout w0,b0,w1,b1,...)
// unless gw is null.
Vec mlp_backward(const MlpWeights& m, const MlpTape& tape, Vec dy, double* gw);
long long mlp_param_count(const MlpWeights& m);

// ---- metanet forward/backward -----------------------------------------------

struct GnnLayerTape {
    GraphState in;
    std::vector<Vec> msg_sum;
    std::vector<MlpTape> msg, upd, edge;
    MlpTape global;
};

struct MetanetTape {
    GraphState s0;
    std::vector<MlpTape> embed_v, embed_e;
    std::vector<GnnLayerTape> layers;
    GraphState final_state;
    Vec pooled;
    std::vector<MlpTape> head;  // one entry, or one per collected edge
    MetanetOutput out;
    Vec pre_sigmoid;                   // pooled modes
    std::vector<Vec> pre_sigmoid_pe;   // per-edge mode
};

MetanetOutput forward_metanet_taped(const GraphView& g, const GnnModel& m,
                                    MetanetTape& tape);
// value_grad for pooled readouts; per_edge_grad aligned with tape.out.per_edge.
void backward_metanet(const GraphView& g, const GnnModel& m, const MetanetTape& tape,
                      const Vec& value_grad, const std::vector<Vec>& per_edge_grad,
                      Vec& grad);

// ---- losses, optimizer, training loop -----------------------------------------

enum class LossKind { Mse, BceWithSigmoid };
const char* to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

struct GraphTarget {
    const GraphView* g;
    Vec target;
};

double loss_and_grad(const GnnModel& m, const std::vector<GraphTarget>& batch,
                     LossKind loss, Vec& grad);

struct OptimizerState {
    enum class Kind { Adam, Sgd };
    Kind kind = Kind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    Vec m1, m2;
    long long t = 0;
};

std::pair<GnnModel, OptimizerState> optimizer_step(const GnnModel& m, const Vec& grad,
                                                   OptimizerState state);

struct TrainConfig {
    int epochs = 200;
    int batch_size = 16;
    double lr = 1e-3;
    uint64_t seed = 0;
    LossKind loss = LossKind::Mse;
};

struct TrainItem {
    GraphView g;
    Vec target;
};

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0, val_loss = 0, val_r2 = 0, val_tau = 0;
};

struct TrainResult {
    GnnModel model;
    std::vector<EpochMetrics> trace;
};

TrainResult train(GnnModel model, const std::vector<TrainItem>& train_set,
                  const std::vector<TrainItem>& val_set, const TrainConfig& cfg);

std::string trace_csv(const std::vector<EpochMetrics>& trace);

// ---- differentiation through the represented network --------------------------

// Returns (dL/dtheta, dL/dx) for y = forward(spec, params, x) given dy = dL/dy.
// Supports linear/conv/deep-sets/activation/flatten/residual chains.
std::pair<ParamStore, Tensor> arch_backward(const ArchSpec& spec, const ParamStore& params,
                                            const Tensor& x, const Tensor& dy);

ParamStore zero_like(const ArchSpec& spec);

}  // namespace gmn
