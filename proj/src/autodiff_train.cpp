#include "gmn/autodiff_train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "gmn/metrics.hpp"

namespace gmn {

// ---- MLP tape ---------------------------------------------------------------

Vec mlp_forward_tape(const MlpWeights& m, const Vec& x, MlpTape& tape) {
    if (static_cast<int>(x.size()) != m.in_dim()) throw DimMismatch("mlp tape input");
    tape.xs.clear();
    tape.zs.clear();
    Vec h = x;
    for (size_t l = 0; l < m.w.size(); ++l) {
        int out = m.w[l].shape[0], in = m.w[l].shape[1];
        tape.xs.push_back(h);
        Vec z(out);
        for (int o = 0; o < out; ++o) {
            double acc = m.b[l].data[o];
            const double* row = m.w[l].data.data() + static_cast<size_t>(o) * in;
            for (int i = 0; i < in; ++i) acc += row[i] * h[i];
            z[o] = acc;
        }
        tape.zs.push_back(z);
        if (l + 1 < m.w.size())
            for (double& v : z) v = apply_act(m.act, v);
        h = std::move(z);
    }
    return h;
}

long long mlp_param_count(const MlpWeights& m) {
    long long n = 0;
    for (size_t l = 0; l < m.w.size(); ++l)
        n += static_cast<long long>(m.w[l].data.size()) + m.b[l].data.size();
    return n;
}

Vec mlp_backward(const MlpWeights& m, const MlpTape& tape, Vec dy, double* gw) {
    // offset of layer l's (w, b) block within the part
    std::vector<size_t> off(m.w.size() + 1, 0);
    for (size_t l = 0; l < m.w.size(); ++l)
        off[l + 1] = off[l] + m.w[l].data.size() + m.b[l].data.size();
    for (size_t li = m.w.size(); li-- > 0;) {
        int out = m.w[li].shape[0], in = m.w[li].shape[1];
        if (li + 1 < m.w.size())
            for (int o = 0; o < out; ++o) dy[o] *= apply_act_grad(m.act, tape.zs[li][o]);
        const Vec& x = tape.xs[li];
        if (gw) {
            double* gwl = gw + off[li];
            double* gbl = gwl + m.w[li].data.size();
            for (int o = 0; o < out; ++o) {
                for (int i = 0; i < in; ++i)
                    gwl[static_cast<size_t>(o) * in + i] += dy[o] * x[i];
                gbl[o] += dy[o];
            }
        }
        Vec dx(in, 0.0);
        for (int o = 0; o < out; ++o) {
            const double* row = m.w[li].data.data() + static_cast<size_t>(o) * in;
            for (int i = 0; i < in; ++i) dx[i] += row[i] * dy[o];
        }
        dy = std::move(dx);
    }
    return dy;
}

// ---- metanet forward with tape ------------------------------------------------

namespace {

Vec concat(std::initializer_list<const Vec*> parts) {
    Vec out;
    for (const Vec* p : parts) out.insert(out.end(), p->begin(), p->end());
    return out;
}

void add_into(Vec& acc, const Vec& x) {
    if (acc.size() != x.size()) throw DimMismatch("sum accumulator size");
    for (size_t i = 0; i < x.size(); ++i) acc[i] += x[i];
}

// offsets of each trainable part in the flat parameter/gradient vector
std::map<const MlpWeights*, size_t> part_offsets(const GnnModel& m) {
    std::map<const MlpWeights*, size_t> off;
    size_t at = 0;
    for (const MlpWeights* p : trainable_parts(m)) {
        off[p] = at;
        at += static_cast<size_t>(mlp_param_count(*p));
    }
    return off;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

MetanetOutput forward_metanet_taped(const GraphView& g, const GnnModel& m,
                                    MetanetTape& tape) {
    if (!m.trainable()) throw Error("tape requires a weight-based model");
    tape = MetanetTape{};

    GraphState s;
    s.v.resize(g.nodes.size());
    tape.embed_v.resize(g.nodes.size());
    for (size_t i = 0; i < g.nodes.size(); ++i)
        s.v[i] = m.node_embed
                     ? mlp_forward_tape(*m.node_embed, node_raw_features(g.nodes[i]),
                                        tape.embed_v[i])
                     : node_raw_features(g.nodes[i]);
    s.e.resize(g.edges.size());
    tape.embed_e.resize(g.edges.size());
    for (size_t k = 0; k < g.edges.size(); ++k)
        s.e[k] = m.edge_embed
                     ? mlp_forward_tape(*m.edge_embed, edge_raw_features(g.edges[k]),
                                        tape.embed_e[k])
                     : edge_raw_features(g.edges[k]);
    s.u.assign(m.d_u, 0.0);
    tape.s0 = s;

    for (const GnnLayer& layer : m.layers) {
        const auto& w = std::get<GnnLayerWeights>(layer);
        GnnLayerTape lt;
        lt.in = s;
        size_t nv = g.nodes.size(), ne = g.edges.size();
        int msg_dim = w.node_msg.out_dim();
        lt.msg_sum.assign(nv, Vec(msg_dim, 0.0));
        lt.msg.resize(ne);
        for (size_t k = 0; k < ne; ++k) {
            const ViewEdge& e = g.edges[k];
            Vec mk = mlp_forward_tape(
                w.node_msg, concat({&s.v[e.dst], &s.v[e.src], &s.e[k], &s.u}), lt.msg[k]);
            add_into(lt.msg_sum[e.dst], mk);
        }
        GraphState out;
        out.u = s.u;
        out.v.resize(nv);
        lt.upd.resize(nv);
        for (size_t i = 0; i < nv; ++i)
            out.v[i] = mlp_forward_tape(w.node_upd,
                                        concat({&s.v[i], &lt.msg_sum[i], &s.u}), lt.upd[i]);
        out.e.resize(ne);
        lt.edge.resize(ne);
        for (size_t k = 0; k < ne; ++k) {
            const ViewEdge& e = g.edges[k];
            out.e[k] = mlp_forward_tape(
                w.edge_upd, concat({&out.v[e.dst], &out.v[e.src], &s.e[k], &s.u}),
                lt.edge[k]);
        }
        if (w.global_upd) {
            Vec vsum(out.v.empty() ? 0 : out.v[0].size(), 0.0);
            for (const Vec& v : out.v) add_into(vsum, v);
            Vec esum(out.e.empty() ? static_cast<size_t>(w.edge_upd.out_dim())
                                   : out.e[0].size(),
                     0.0);
            for (const Vec& e : out.e) add_into(esum, e);
            out.u = mlp_forward_tape(*w.global_upd, concat({&vsum, &esum, &s.u}),
                                     lt.global);
        }
        tape.layers.push_back(std::move(lt));
        s = std::move(out);
    }
    tape.final_state = s;

    MetanetOutput out;
    switch (m.readout) {
        case Readout::EdgeMeanPool: {
            if (s.e.empty()) throw EmptyGraph();
            Vec mean(s.e[0].size(), 0.0);
            for (const Vec& e : s.e) add_into(mean, e);
            for (double& v : mean) v /= static_cast<double>(s.e.size());
            tape.pooled = mean;
            tape.head.resize(1);
            Vec val = m.head ? mlp_forward_tape(*m.head, mean, tape.head[0]) : mean;
            tape.pre_sigmoid = val;
            if (m.final_sigmoid)
                for (double& v : val) v = sigmoid(v);
            out.value = val;
            break;
        }
        case Readout::Global: {
            tape.head.resize(1);
            Vec val = m.head ? mlp_forward_tape(*m.head, s.u, tape.head[0]) : s.u;
            tape.pre_sigmoid = val;
            if (m.final_sigmoid)
                for (double& v : val) v = sigmoid(v);
            out.value = val;
            break;
        }
        case Readout::OutputNodes: {
            for (int n : g.output_nodes)
                out.value.insert(out.value.end(), s.v[n].begin(), s.v[n].end());
            tape.pre_sigmoid = out.value;
            if (m.final_sigmoid)
                for (double& v : out.value) v = sigmoid(v);
            break;
        }
        case Readout::PerEdge: {
            for (size_t k = 0; k < g.edges.size(); ++k) {
                const ViewEdge& e = g.edges[k];
                if (!e.param || e.dir != 0) continue;
                tape.head.emplace_back();
                Vec pred = m.head ? mlp_forward_tape(*m.head, s.e[k], tape.head.back())
                                  : s.e[k];
                tape.pre_sigmoid_pe.push_back(pred);
                if (m.final_sigmoid)
                    for (double& v : pred) v = sigmoid(v);
                out.per_edge.push_back({static_cast<int>(k), std::move(pred)});
            }
            break;
        }
    }
    tape.out = out;
    return out;
}

void backward_metanet(const GraphView& g, const GnnModel& m, const MetanetTape& tape,
                      const Vec& value_grad, const std::vector<Vec>& per_edge_grad,
                      Vec& grad) {
    std::map<const MlpWeights*, size_t> off = part_offsets(m);
    auto gw = [&](const MlpWeights& part) { return grad.data() + off.at(&part); };

    size_t nv = g.nodes.size(), ne = g.edges.size();
    const GraphState& fin = tape.final_state;
    std::vector<Vec> dv(nv), de(ne);
    for (size_t i = 0; i < nv; ++i) dv[i].assign(fin.v[i].size(), 0.0);
    for (size_t k = 0; k < ne; ++k) de[k].assign(fin.e[k].size(), 0.0);
    Vec du(fin.u.size(), 0.0);

    auto desigmoid = [&](Vec dval, const Vec& pre) {
        if (m.final_sigmoid)
            for (size_t c = 0; c < dval.size(); ++c) {
                double sv = sigmoid(pre[c]);
                dval[c] *= sv * (1.0 - sv);
            }
        return dval;
    };

    switch (m.readout) {
        case Readout::EdgeMeanPool: {
            Vec dval = desigmoid(value_grad, tape.pre_sigmoid);
            Vec dpool = m.head ? mlp_backward(*m.head, tape.head[0], dval, gw(*m.head))
                               : dval;
            for (size_t k = 0; k < ne; ++k)
                for (size_t c = 0; c < dpool.size(); ++c)
                    de[k][c] += dpool[c] / static_cast<double>(ne);
            break;
        }
        case Readout::Global: {
            Vec dval = desigmoid(value_grad, tape.pre_sigmoid);
            du = m.head ? mlp_backward(*m.head, tape.head[0], dval, gw(*m.head)) : dval;
            break;
        }
        case Readout::OutputNodes: {
            Vec dval = desigmoid(value_grad, tape.pre_sigmoid);
            size_t at = 0;
            for (int n : g.output_nodes)
                for (size_t c = 0; c < fin.v[n].size(); ++c) dv[n][c] += dval[at++];
            break;
        }
        case Readout::PerEdge: {
            if (per_edge_grad.size() != tape.out.per_edge.size())
                throw DimMismatch("per-edge gradient count");
            for (size_t p = 0; p < tape.out.per_edge.size(); ++p) {
                int k = tape.out.per_edge[p].first;
                Vec dval = desigmoid(per_edge_grad[p], tape.pre_sigmoid_pe[p]);
                Vec dek = m.head ? mlp_backward(*m.head, tape.head[p], dval, gw(*m.head))
                                 : dval;
                add_into(de[k], dek);
            }
            break;
        }
    }

    for (size_t li = m.layers.size(); li-- > 0;) {
        const auto& w = std::get<GnnLayerWeights>(m.layers[li]);
        const GnnLayerTape& lt = tape.layers[li];
        std::vector<Vec> dvin(nv), dein(ne);
        for (size_t i = 0; i < nv; ++i) dvin[i].assign(lt.in.v[i].size(), 0.0);
        for (size_t k = 0; k < ne; ++k) dein[k].assign(lt.in.e[k].size(), 0.0);
        Vec duin(lt.in.u.size(), 0.0);

        if (w.global_upd) {
            Vec dx = mlp_backward(*w.global_upd, lt.global, du, gw(*w.global_upd));
            size_t dvdim = dv.empty() ? 0 : dv[0].size();
            size_t dedim = de.empty() ? 0 : de[0].size();
            for (size_t i = 0; i < nv; ++i)
                for (size_t c = 0; c < dvdim; ++c) dv[i][c] += dx[c];
            for (size_t k = 0; k < ne; ++k)
                for (size_t c = 0; c < dedim; ++c) de[k][c] += dx[dvdim + c];
            for (size_t c = 0; c < duin.size(); ++c) duin[c] += dx[dvdim + dedim + c];
        } else {
            duin = du;
        }

        for (size_t k = 0; k < ne; ++k) {
            const ViewEdge& e = g.edges[k];
            Vec dx = mlp_backward(w.edge_upd, lt.edge[k], de[k], gw(w.edge_upd));
            size_t vd = lt.upd[e.dst].zs.back().size();  // node_upd output dim
            size_t at = 0;
            for (size_t c = 0; c < vd; ++c) dv[e.dst][c] += dx[at++];
            for (size_t c = 0; c < vd; ++c) dv[e.src][c] += dx[at++];
            for (size_t c = 0; c < dein[k].size(); ++c) dein[k][c] += dx[at++];
            for (size_t c = 0; c < duin.size(); ++c) duin[c] += dx[at++];
        }

        std::vector<Vec> dmsg_sum(nv);
        for (size_t i = 0; i < nv; ++i) {
            Vec dx = mlp_backward(w.node_upd, lt.upd[i], dv[i], gw(w.node_upd));
            size_t at = 0;
            for (size_t c = 0; c < dvin[i].size(); ++c) dvin[i][c] += dx[at++];
            dmsg_sum[i].assign(lt.msg_sum[i].size(), 0.0);
            for (size_t c = 0; c < dmsg_sum[i].size(); ++c) dmsg_sum[i][c] += dx[at++];
            for (size_t c = 0; c < duin.size(); ++c) duin[c] += dx[at++];
        }

        for (size_t k = 0; k < ne; ++k) {
            const ViewEdge& e = g.edges[k];
            Vec dx = mlp_backward(w.node_msg, lt.msg[k], dmsg_sum[e.dst], gw(w.node_msg));
            size_t at = 0;
            for (size_t c = 0; c < dvin[e.dst].size(); ++c) dvin[e.dst][c] += dx[at++];
            for (size_t c = 0; c < dvin[e.src].size(); ++c) dvin[e.src][c] += dx[at++];
            for (size_t c = 0; c < dein[k].size(); ++c) dein[k][c] += dx[at++];
            for (size_t c = 0; c < duin.size(); ++c) duin[c] += dx[at++];
        }

        dv = std::move(dvin);
        de = std::move(dein);
        du = std::move(duin);
    }

    if (m.node_embed)
        for (size_t i = 0; i < nv; ++i)
            mlp_backward(*m.node_embed, tape.embed_v[i], dv[i], gw(*m.node_embed));
    if (m.edge_embed)
        for (size_t k = 0; k < ne; ++k)
            mlp_backward(*m.edge_embed, tape.embed_e[k], de[k], gw(*m.edge_embed));
}

// ---- losses -------------------------------------------------------------------

const char* to_string(LossKind k) {
    return k == LossKind::Mse ? "mse" : "bce_with_sigmoid";
}

LossKind loss_from_string(const std::string& s) {
    if (s == "mse") return LossKind::Mse;
    if (s == "bce_with_sigmoid" || s == "bce") return LossKind::BceWithSigmoid;
    throw Error("unknown loss: " + s);
}

double loss_and_grad(const GnnModel& m, const std::vector<GraphTarget>& batch,
                     LossKind loss, Vec& grad) {
    grad.assign(flatten_params(m).size(), 0.0);
    if (batch.empty()) throw Error("empty batch");
    double total = 0.0;
    double bn = static_cast<double>(batch.size());
    for (const GraphTarget& item : batch) {
        MetanetTape tape;
        MetanetOutput out = forward_metanet_taped(*item.g, m, tape);
        if (m.readout == Readout::PerEdge) {
            // target holds one value per collected edge, in per-edge order
            Vec flat_pred;
            for (const auto& [k, pred] : out.per_edge)
                flat_pred.insert(flat_pred.end(), pred.begin(), pred.end());
            if (flat_pred.size() != item.target.size())
                throw DimMismatch("target size " + std::to_string(item.target.size()) +
                                  " vs per-edge output " +
                                  std::to_string(flat_pred.size()));
            double dim = static_cast<double>(flat_pred.size());
            std::vector<Vec> pe_grad(out.per_edge.size());
            size_t at = 0;
            for (size_t ei = 0; ei < out.per_edge.size(); ++ei) {
                pe_grad[ei].assign(out.per_edge[ei].second.size(), 0.0);
                for (size_t c = 0; c < pe_grad[ei].size(); ++c, ++at) {
                    double r = flat_pred[at] - item.target[at];
                    total += r * r / (dim * bn);
                    pe_grad[ei][c] = 2.0 * r / (dim * bn);
                }
            }
            backward_metanet(*item.g, m, tape, {}, pe_grad, grad);
            continue;
        }
        if (out.value.size() != item.target.size())
            throw DimMismatch("target size " + std::to_string(item.target.size()) +
                              " vs output " + std::to_string(out.value.size()));
        double dim = static_cast<double>(out.value.size());
        Vec dval(out.value.size(), 0.0);
        if (loss == LossKind::Mse) {
            for (size_t c = 0; c < out.value.size(); ++c) {
                double r = out.value[c] - item.target[c];
                total += r * r / (dim * bn);
                dval[c] = 2.0 * r / (dim * bn);
            }
        } else {
            // model output is the logit; the sigmoid lives in the loss
            for (size_t c = 0; c < out.value.size(); ++c) {
                double z = out.value[c], t = item.target[c];
                double p = sigmoid(z);
                double l = -(t * std::log(std::max(p, 1e-300)) +
                             (1.0 - t) * std::log(std::max(1.0 - p, 1e-300)));
                total += l / (dim * bn);
                dval[c] = (p - t) / (dim * bn);
            }
        }
        backward_metanet(*item.g, m, tape, dval, {}, grad);
    }
    if (!std::isfinite(total)) throw NonFiniteLoss("batch loss is not finite");
    return total;
}

// ---- optimizer ------------------------------------------------------------------

std::pair<GnnModel, OptimizerState> optimizer_step(const GnnModel& m, const Vec& grad,
                                                   OptimizerState state) {
    GnnModel out = m;
    Vec flat = flatten_params(out);
    if (flat.size() != grad.size()) throw DimMismatch("gradient size");
    if (state.kind == OptimizerState::Kind::Adam) {
        if (state.m1.empty()) {
            state.m1.assign(flat.size(), 0.0);
            state.m2.assign(flat.size(), 0.0);
        }
        state.t += 1;
        double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
        double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
        for (size_t i = 0; i < flat.size(); ++i) {
            state.m1[i] = state.beta1 * state.m1[i] + (1.0 - state.beta1) * grad[i];
            state.m2[i] = state.beta2 * state.m2[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            double mhat = state.m1[i] / bc1;
            double vhat = state.m2[i] / bc2;
            flat[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    } else {
        state.t += 1;
        for (size_t i = 0; i < flat.size(); ++i) flat[i] -= state.lr * grad[i];
    }
    load_flat_params(out, flat);
    return {std::move(out), std::move(state)};
}

// ---- training loop ----------------------------------------------------------------

TrainResult train(GnnModel model, const std::vector<TrainItem>& train_set,
                  const std::vector<TrainItem>& val_set, const TrainConfig& cfg) {
    if (train_set.empty()) throw Error("empty training set");
    OptimizerState opt;
    opt.lr = cfg.lr;
    TrainResult res;
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(cfg.seed, 0x7261696eULL, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t at = 0; at < order.size(); at += cfg.batch_size) {
            std::vector<GraphTarget> batch;
            for (size_t k = at; k < std::min(order.size(), at + cfg.batch_size); ++k)
                batch.push_back({&train_set[order[k]].g, train_set[order[k]].target});
            Vec grad;
            double l;
            try {
                l = loss_and_grad(model, batch, cfg.loss, grad);
            } catch (const NonFiniteLoss& e) {
                throw NonFiniteLoss(std::string(e.what()) + " at epoch " +
                                    std::to_string(epoch));
            }
            auto [next, st] = optimizer_step(model, grad, std::move(opt));
            model = std::move(next);
            opt = std::move(st);
            epoch_loss += l;
            batches += 1;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = epoch_loss / std::max(batches, 1);
        if (!val_set.empty()) {
            std::vector<double> preds, targets;
            double vloss = 0.0;
            for (const TrainItem& item : val_set) {
                MetanetOutput out = forward_metanet(item.g, model);
                double dim = static_cast<double>(out.value.size());
                for (size_t c = 0; c < out.value.size(); ++c) {
                    double y = out.value[c];
                    if (cfg.loss == LossKind::BceWithSigmoid) y = sigmoid(y);
                    preds.push_back(y);
                    targets.push_back(item.target[c]);
                    double r = y - item.target[c];
                    vloss += r * r / (dim * static_cast<double>(val_set.size()));
                }
            }
            em.val_loss = vloss;
            try {
                em.val_r2 = eval_r2(preds, targets);
            } catch (const DegenerateTarget&) {
                em.val_r2 = std::numeric_limits<double>::quiet_NaN();
            }
            em.val_tau = eval_kendall_tau(preds, targets);
        } else {
            em.val_loss = em.val_r2 = em.val_tau = std::numeric_limits<double>::quiet_NaN();
        }
        res.trace.push_back(em);
    }
    res.model = std::move(model);
    return res;
}

std::string trace_csv(const std::vector<EpochMetrics>& trace) {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,val_r2,val_tau\n";
    os.precision(10);
    for (const EpochMetrics& e : trace)
        os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_r2 << ','
           << e.val_tau << '\n';
    return os.str();
}

// ---- backprop through the represented network --------------------------------------

ParamStore zero_like(const ArchSpec& spec) {
    ParamStore g;
    for (const FlatLayer& fl : flatten_layers(spec))
        for (const auto& [name, shape] : param_shapes(*fl.layer))
            g.set(fl.index, name, Tensor(shape));
    return g;
}

namespace {

Tensor fwd_store(const std::vector<LayerSpec>& layers, int base, const ParamStore& p,
                 Tensor x, std::map<int, Tensor>& ins);

Tensor bwd_layer(const LayerSpec& layer, int idx, const ParamStore& p,
                 const std::map<int, Tensor>& ins, Tensor dy, ParamStore& g);

Tensor bwd_chain(const std::vector<LayerSpec>& layers, int base, const ParamStore& p,
                 const std::map<int, Tensor>& ins, Tensor dy, ParamStore& g) {
    // recover each element's flat index, then walk backwards
    std::vector<int> idxs;
    int idx = base;
    for (const LayerSpec& l : layers) {
        idxs.push_back(idx);
        idx += 1;
        if (l.is<Residual>()) idx += total_layer_count(ArchSpec{l.as<Residual>().inner, {}});
    }
    for (size_t k = layers.size(); k-- > 0;)
        dy = bwd_layer(layers[k], idxs[k], p, ins, std::move(dy), g);
    return dy;
}

Tensor fwd_store(const std::vector<LayerSpec>& layers, int base, const ParamStore& p,
                 Tensor x, std::map<int, Tensor>& ins) {
    int idx = base;
    for (const LayerSpec& l : layers) {
        ins[idx] = x;
        if (l.is<Residual>()) {
            Tensor inner = fwd_store(l.as<Residual>().inner, idx + 1, p, x, ins);
            if (inner.shape != x.shape) throw ShapeMismatch(idx, "residual shape");
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += inner.data[i];
        } else if (l.is<Linear>() || l.is<Conv>() || l.is<DeepSetsLinear>() ||
                   l.is<Activation>() || l.is<Flatten>()) {
            // re-evaluate through the reference forward, one layer at a time
            ArchSpec one{{l}, x.shape};
            ParamStore sub;
            for (const auto& [name, shape] : param_shapes(l))
                sub.set(0, name, p.get(idx, name));
            x = forward(one, sub, x);
        } else {
            throw UnsupportedLayer("no gradient for this layer kind");
        }
        idx += 1;
        if (l.is<Residual>()) idx += total_layer_count(ArchSpec{l.as<Residual>().inner, {}});
    }
    return x;
}

Tensor bwd_layer(const LayerSpec& layer, int idx, const ParamStore& p,
                 const std::map<int, Tensor>& ins, Tensor dy, ParamStore& g) {
    const Tensor& x = ins.at(idx);
    if (layer.is<Linear>()) {
        const auto& l = layer.as<Linear>();
        const Tensor& w = p.get(idx, ParamName::Weight);
        Tensor& gw = g.get(idx, ParamName::Weight);
        Tensor dx(x.shape);
        for (int o = 0; o < l.out_dim; ++o)
            for (int i = 0; i < l.in_dim; ++i) {
                gw.data[o * l.in_dim + i] += dy.data[o] * x.data[i];
                dx.data[i] += w.data[o * l.in_dim + i] * dy.data[o];
            }
        if (l.has_bias) {
            Tensor& gb = g.get(idx, ParamName::Bias);
            for (int o = 0; o < l.out_dim; ++o) gb.data[o] += dy.data[o];
        }
        return dx;
    }
    if (layer.is<Conv>()) {
        const auto& c = layer.as<Conv>();
        const Tensor& w = p.get(idx, ParamName::Weight);
        Tensor& gw = g.get(idx, ParamName::Weight);
        Tensor dx(x.shape);
        if (c.spatial_rank == 1) {
            int L = x.shape[1], k = c.kernel_shape[0];
            int Lo = dy.shape[1];
            for (int o = 0; o < c.out_channels; ++o)
                for (int ppos = 0; ppos < Lo; ++ppos) {
                    double d = dy.data[o * Lo + ppos];
                    for (int ci = 0; ci < c.in_channels; ++ci)
                        for (int dk = 0; dk < k; ++dk) {
                            size_t wi = (static_cast<size_t>(o) * c.in_channels + ci) * k + dk;
                            size_t xi = static_cast<size_t>(ci) * L + ppos * c.stride + dk;
                            gw.data[wi] += d * x.data[xi];
                            dx.data[xi] += d * w.data[wi];
                        }
                }
        } else {
            int H = x.shape[1], W = x.shape[2];
            int kh = c.kernel_shape[0], kw = c.kernel_shape[1];
            int Ho = dy.shape[1], Wo = dy.shape[2];
            for (int o = 0; o < c.out_channels; ++o)
                for (int ph = 0; ph < Ho; ++ph)
                    for (int pw = 0; pw < Wo; ++pw) {
                        double d = dy.data[(static_cast<size_t>(o) * Ho + ph) * Wo + pw];
                        for (int ci = 0; ci < c.in_channels; ++ci)
                            for (int dh = 0; dh < kh; ++dh)
                                for (int dw = 0; dw < kw; ++dw) {
                                    size_t wi =
                                        ((static_cast<size_t>(o) * c.in_channels + ci) * kh +
                                         dh) *
                                            kw +
                                        dw;
                                    size_t xi = (static_cast<size_t>(ci) * H +
                                                 ph * c.stride + dh) *
                                                    W +
                                                pw * c.stride + dw;
                                    gw.data[wi] += d * x.data[xi];
                                    dx.data[xi] += d * w.data[wi];
                                }
                    }
        }
        if (c.has_bias) {
            Tensor& gb = g.get(idx, ParamName::Bias);
            long long per = Tensor::numel(dy.shape) / c.out_channels;
            for (int o = 0; o < c.out_channels; ++o)
                for (long long q = 0; q < per; ++q) gb.data[o] += dy.data[o * per + q];
        }
        return dx;
    }
    if (layer.is<DeepSetsLinear>()) {
        const auto& d = layer.as<DeepSetsLinear>();
        const Tensor& w = p.get(idx, ParamName::Weight);
        Tensor& gw = g.get(idx, ParamName::Weight);
        Tensor dx(x.shape);
        auto widx = [&](int basis, int i, int o) {
            return (static_cast<size_t>(basis) * d.in_channels + i) * d.out_channels + o;
        };
        std::vector<double> colsum(d.in_channels, 0.0), dysum(d.out_channels, 0.0);
        for (int s = 0; s < d.set_size; ++s)
            for (int i = 0; i < d.in_channels; ++i)
                colsum[i] += x.data[s * d.in_channels + i];
        for (int s = 0; s < d.set_size; ++s)
            for (int o = 0; o < d.out_channels; ++o)
                dysum[o] += dy.data[s * d.out_channels + o];
        for (int i = 0; i < d.in_channels; ++i)
            for (int o = 0; o < d.out_channels; ++o) {
                double g1 = 0.0;
                for (int s = 0; s < d.set_size; ++s)
                    g1 += x.data[s * d.in_channels + i] * dy.data[s * d.out_channels + o];
                gw.data[widx(0, i, o)] += g1;
                gw.data[widx(1, i, o)] += colsum[i] * dysum[o];
            }
        for (int s = 0; s < d.set_size; ++s)
            for (int i = 0; i < d.in_channels; ++i) {
                double v = 0.0;
                for (int o = 0; o < d.out_channels; ++o)
                    v += dy.data[s * d.out_channels + o] * w.data[widx(0, i, o)] +
                         dysum[o] * w.data[widx(1, i, o)];
                dx.data[s * d.in_channels + i] = v;
            }
        return dx;
    }
    if (layer.is<Activation>()) {
        Act a = layer.as<Activation>().kind;
        Tensor dx(x.shape);
        for (size_t i = 0; i < x.data.size(); ++i)
            dx.data[i] = dy.data[i] * apply_act_grad(a, x.data[i]);
        return dx;
    }
    if (layer.is<Flatten>()) {
        Tensor dx(x.shape);
        dx.data = dy.data;
        return dx;
    }
    if (layer.is<Residual>()) {
        Tensor dinner =
            bwd_chain(layer.as<Residual>().inner, idx + 1, p, ins, dy, g);
        if (dinner.shape != dy.shape) {
            Tensor fixed(dy.shape);
            fixed.data = dinner.data;
            dinner = std::move(fixed);
        }
        for (size_t i = 0; i < dy.data.size(); ++i) dy.data[i] += dinner.data[i];
        return dy;
    }
    throw UnsupportedLayer("no gradient for this layer kind");
}

}  // namespace

std::pair<ParamStore, Tensor> arch_backward(const ArchSpec& spec, const ParamStore& params,
                                            const Tensor& x, const Tensor& dy) {
    std::map<int, Tensor> ins;
    Tensor y = fwd_store(spec.layers, 0, params, x, ins);
    if (dy.shape != y.shape) throw ShapeMismatch(-1, "output gradient shape");
    ParamStore grads = zero_like(spec);
    Tensor dx = bwd_chain(spec.layers, 0, params, ins, dy, grads);
    return {std::move(grads), std::move(dx)};
}

}  // namespace gmn
