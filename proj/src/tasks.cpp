#include "gmn/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gmn/graph_view.hpp"

namespace gmn {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- metrics ----------------------------------------------------------------

double eval_r2(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.size() < 2)
        throw Error("r2 needs two equally sized series");
    double mean = 0.0;
    for (double t : target) mean += t;
    mean /= static_cast<double>(target.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (size_t i = 0; i < target.size(); ++i) {
        ss_tot += (target[i] - mean) * (target[i] - mean);
        ss_res += (pred[i] - target[i]) * (pred[i] - target[i]);
    }
    if (ss_tot == 0.0) throw DegenerateTarget();
    return 1.0 - ss_res / ss_tot;
}

double eval_kendall_tau(const std::vector<double>& pred,
                        const std::vector<double>& target) {
    size_t n = pred.size();
    if (n != target.size() || n < 2) throw Error("tau needs two equally sized series");
    long long concordant = 0, discordant = 0, ties_p = 0, ties_t = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double dp = pred[i] - pred[j], dt = target[i] - target[j];
            if (dp == 0.0 && dt == 0.0) continue;
            if (dp == 0.0) {
                ties_p++;
            } else if (dt == 0.0) {
                ties_t++;
            } else if ((dp > 0) == (dt > 0)) {
                concordant++;
            } else {
                discordant++;
            }
        }
    double n1 = static_cast<double>(concordant + discordant + ties_p);
    double n2 = static_cast<double>(concordant + discordant + ties_t);
    if (n1 == 0.0 || n2 == 0.0) return 0.0;
    return static_cast<double>(concordant - discordant) / std::sqrt(n1 * n2);
}

// ---- flat parameter vectors ----------------------------------------------------

Vec ps_flatten(const ParamStore& ps) {
    Vec out;
    for (const auto& [key, t] : ps.tensors)
        out.insert(out.end(), t.data.begin(), t.data.end());
    return out;
}

void ps_load(ParamStore& ps, const Vec& flat) {
    size_t at = 0;
    for (auto& [key, t] : ps.tensors)
        for (double& v : t.data) v = flat.at(at++);
    if (at != flat.size()) throw DimMismatch("flat parameter size");
}

namespace {

// flat position of every scalar, keyed by ParamId
std::map<ParamId, size_t> ps_positions(const ParamStore& ps) {
    std::map<ParamId, size_t> pos;
    size_t at = 0;
    for (const auto& [key, t] : ps.tensors) {
        for (long long i = 0; i < static_cast<long long>(t.data.size()); ++i)
            pos[ParamId{key.first, static_cast<ParamName>(key.second), i}] = at + i;
        at += t.data.size();
    }
    return pos;
}

void adam_step(Vec& flat, const Vec& grad, Vec& m1, Vec& m2, long long t, double lr) {
    if (m1.empty()) {
        m1.assign(flat.size(), 0.0);
        m2.assign(flat.size(), 0.0);
    }
    double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t));
    for (size_t i = 0; i < flat.size(); ++i) {
        m1[i] = 0.9 * m1[i] + 0.1 * grad[i];
        m2[i] = 0.999 * m2[i] + 0.001 * grad[i] * grad[i];
        flat[i] -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + 1e-8);
    }
}

constexpr int kGrid = 101;

std::vector<double> signal_grid() {
    std::vector<double> xs(kGrid);
    for (int i = 0; i < kGrid; ++i)
        xs[i] = -M_PI + 2.0 * M_PI * i / static_cast<double>(kGrid - 1);
    return xs;
}

double inr_mse(const ArchSpec& spec, const ParamStore& ps, double a, double b,
               double amp_scale) {
    double mse = 0.0;
    Tensor x({1});
    for (double xv : signal_grid()) {
        x.data[0] = xv;
        Tensor y = forward(spec, ps, x);
        double r = y.data[0] - amp_scale * a * std::sin(b * xv);
        mse += r * r / kGrid;
    }
    return mse;
}

// gradient-descent fit of a sine MLP to a*sin(bx); true on success
bool fit_inr(const ArchSpec& spec, ParamStore& ps, double a, double b, uint64_t seed) {
    std::vector<double> xs = signal_grid();
    (void)seed;
    Vec flat = ps_flatten(ps), m1, m2;
    long long t = 0;
    for (int iter = 0; iter < 4000; ++iter) {
        ps_load(ps, flat);
        ParamStore grads = zero_like(spec);
        double mse = 0.0;
        Tensor x({1}), dy({1});
        for (double xv : xs) {
            x.data[0] = xv;
            Tensor y = forward(spec, ps, x);
            double r = y.data[0] - a * std::sin(b * xv);
            mse += r * r / kGrid;
            dy.data[0] = 2.0 * r / kGrid;
            auto [g, dx] = arch_backward(spec, ps, x, dy);
            for (const auto& [key, gt] : g.tensors) {
                Tensor& acc = grads.tensors.at(key);
                for (size_t i = 0; i < gt.data.size(); ++i) acc.data[i] += gt.data[i];
            }
        }
        if (mse < 5e-4) return true;
        Vec gflat = ps_flatten(grads);
        adam_step(flat, gflat, m1, m2, ++t, 0.02);
    }
    ps_load(ps, flat);
    return inr_mse(spec, ps, a, b, 1.0) < 1e-3;
}

void assign_splits(NetworkDataset& ds, uint64_t seed, double train_frac, double val_frac) {
    std::vector<int> idx(ds.items.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, 0x73706c69ULL, 0));
    std::shuffle(idx.begin(), idx.end(), rng);
    size_t ntrain = static_cast<size_t>(train_frac * idx.size());
    size_t nval = static_cast<size_t>(val_frac * idx.size());
    for (size_t k = 0; k < idx.size(); ++k) {
        if (k < ntrain)
            ds.train_idx.push_back(idx[k]);
        else if (k < ntrain + nval)
            ds.val_idx.push_back(idx[k]);
        else
            ds.test_idx.push_back(idx[k]);
    }
}

}  // namespace

NetworkDataset gen_sinusoid_inrs(int n, uint64_t seed, const std::vector<int>& widths) {
    if (n < 10) throw Error("need at least 10 items");
    NetworkDataset ds;
    ds.task = "inr";
    ds.seed = seed;
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix_seed(seed, 0x696e72ULL, i));
        std::uniform_real_distribution<double> ua(0.5, 2.0), ub(1.0, 3.0);
        double a = ua(rng), b = ub(rng);
        DatasetItem item;
        for (size_t l = 0; l + 1 < widths.size(); ++l) {
            item.spec.layers.push_back(Linear{widths[l], widths[l + 1], true});
            if (l + 2 < widths.size()) item.spec.layers.push_back(Activation{Act::Sine});
        }
        item.spec.input_shape = {widths.front()};
        item.target = {a, b};
        bool ok = false;
        for (int attempt = 0; attempt < 3 && !ok; ++attempt) {
            item.params = init_params(item.spec, mix_seed(seed, i, 100 + attempt));
            // a slightly hotter first layer helps the sine fit lock onto b
            Tensor& w0 = item.params.get(0, ParamName::Weight);
            for (double& v : w0.data) v *= 3.0;
            ok = fit_inr(item.spec, item.params, a, b, mix_seed(seed, i, attempt));
        }
        item.fit_failed = !ok;
        ds.items.push_back(std::move(item));
    }
    assign_splits(ds, seed, 0.8, 0.1);
    return ds;
}

namespace {

struct SynthTask {
    std::vector<int> input_shape;
    std::vector<Tensor> xs;  // samples
    std::vector<int> ys;     // 0/1 labels
};

SynthTask make_synth_task(const std::vector<int>& input_shape, double sep, int n,
                          std::mt19937_64& rng) {
    SynthTask t;
    t.input_shape = input_shape;
    long long dim = Tensor::numel(input_shape);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec mu(dim);
    double norm = 0.0;
    for (double& v : mu) {
        v = gauss(rng);
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : mu) v *= sep / (2.0 * norm);
    for (int i = 0; i < n; ++i) {
        int label = static_cast<int>(rng() & 1);
        Tensor x(input_shape);
        for (long long d = 0; d < dim; ++d)
            x.data[d] = gauss(rng) + (label ? mu[d] : -mu[d]);
        t.xs.push_back(std::move(x));
        t.ys.push_back(label);
    }
    return t;
}

double classifier_accuracy(const ArchSpec& spec, const ParamStore& ps, const SynthTask& t,
                           size_t from) {
    int hit = 0, total = 0;
    for (size_t i = from; i < t.xs.size(); ++i) {
        Tensor y = forward(spec, ps, t.xs[i]);
        if ((y.data[0] > 0.0) == (t.ys[i] == 1)) hit++;
        total++;
    }
    return static_cast<double>(hit) / std::max(total, 1);
}

}  // namespace

NetworkDataset gen_tiny_classifiers(int n, uint64_t seed, int width_scale) {
    NetworkDataset ds;
    ds.task = "acc";
    ds.seed = seed;
    const int n_train = 128, n_test = 256;
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix_seed(seed, 0x616363ULL, i));
        DatasetItem item;
        int kind = i % 3;
        if (kind == 0) {
            int h = (4 + static_cast<int>(rng() % 3)) * width_scale;
            item.spec.input_shape = {4};
            item.spec.layers = {Linear{4, h, true}, Activation{Act::Relu},
                                Linear{h, 1, true}};
        } else if (kind == 1) {
            int c = (2 + static_cast<int>(rng() % 2)) * width_scale;
            item.spec.input_shape = {1, 8};
            item.spec.layers = {Conv{1, 1, c, {3}, 1, true}, Activation{Act::Relu},
                                Flatten{}, Linear{6 * c, 1, true}};
        } else {
            int c = (3 + static_cast<int>(rng() % 2)) * width_scale;
            item.spec.input_shape = {4, 2};
            item.spec.layers = {DeepSetsLinear{2, c, 4}, Activation{Act::Relu}, Flatten{},
                                Linear{4 * c, 1, true}};
        }
        item.params = init_params(item.spec, mix_seed(seed, i, 7));

        std::uniform_real_distribution<double> usep(1.5, 3.0);
        double sep = usep(rng);
        SynthTask task = make_synth_task(item.spec.input_shape, sep, n_train + n_test, rng);
        const int step_pool[] = {0, 0, 5, 15, 40, 100, 250};
        int steps = step_pool[rng() % 7];

        Vec flat = ps_flatten(item.params), m1, m2;
        long long t = 0;
        for (int s = 0; s < steps; ++s) {
            ps_load(item.params, flat);
            ParamStore grads = zero_like(item.spec);
            for (int k = 0; k < 16; ++k) {
                size_t pick = rng() % n_train;
                Tensor y = forward(item.spec, item.params, task.xs[pick]);
                double p = 1.0 / (1.0 + std::exp(-y.data[0]));
                Tensor dy({1});
                dy.data[0] = (p - task.ys[pick]) / 16.0;
                auto [g, dx] = arch_backward(item.spec, item.params, task.xs[pick], dy);
                for (const auto& [key, gt] : g.tensors) {
                    Tensor& acc = grads.tensors.at(key);
                    for (size_t q = 0; q < gt.data.size(); ++q) acc.data[q] += gt.data[q];
                }
            }
            adam_step(flat, ps_flatten(grads), m1, m2, ++t, 0.05);
        }
        ps_load(item.params, flat);
        item.target = {classifier_accuracy(item.spec, item.params, task, n_train)};
        ds.items.push_back(std::move(item));
    }
    assign_splits(ds, seed, 0.7, 0.15);
    return ds;
}

EditDataset gen_edit_dataset(int n, uint64_t seed) {
    EditDataset ed;
    ed.data = gen_sinusoid_inrs(n, seed);
    ed.data.task = "edit";
    ed.description = "amplitude doubling: a*sin(bx) -> 2a*sin(bx)";
    return ed;
}

// ---- storage ------------------------------------------------------------------

void save_dataset(const NetworkDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["task"] = ds.task;
    manifest["seed"] = ds.seed;
    manifest["splits"] = {{"train", ds.train_idx}, {"val", ds.val_idx},
                          {"test", ds.test_idx}};
    manifest["targets"] = json::array();
    manifest["fit_failed"] = json::array();
    manifest["items"] = json::array();
    for (size_t i = 0; i < ds.items.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "item_%04zu.json", i);
        std::ofstream f(fs::path(dir) / name);
        f << to_json(ds.items[i].spec, ds.items[i].params);
        manifest["items"].push_back(name);
        manifest["targets"].push_back(ds.items[i].target);
        manifest["fit_failed"].push_back(ds.items[i].fit_failed);
    }
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2);
}

NetworkDataset load_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw Error("no manifest.json in " + dir);
    json manifest = json::parse(mf);
    NetworkDataset ds;
    ds.task = manifest.at("task").get<std::string>();
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.train_idx = manifest.at("splits").at("train").get<std::vector<int>>();
    ds.val_idx = manifest.at("splits").at("val").get<std::vector<int>>();
    ds.test_idx = manifest.at("splits").at("test").get<std::vector<int>>();
    for (size_t i = 0; i < manifest.at("items").size(); ++i) {
        std::ifstream f(fs::path(dir) / manifest["items"][i].get<std::string>());
        if (!f) throw Error("missing dataset item file");
        std::stringstream buf;
        buf << f.rdbuf();
        DatasetItem item;
        std::tie(item.spec, item.params) = arch_from_json(buf.str());
        item.target = manifest.at("targets")[i].get<Vec>();
        item.fit_failed = manifest.at("fit_failed")[i].get<bool>();
        ds.items.push_back(std::move(item));
    }
    return ds;
}

// ---- task drivers ------------------------------------------------------------

GraphView dataset_view(const DatasetItem& item) {
    return view_of(to_undirected(build_param_graph(item.spec, item.params)));
}

TaskEvalResult eval_gmn(const GnnModel& model, const NetworkDataset& ds,
                        const std::vector<int>& idx, bool sigmoid_out) {
    std::vector<double> preds, targets;
    double mse = 0.0;
    int count = 0;
    for (int i : idx) {
        if (ds.items[i].fit_failed) continue;
        MetanetOutput out = forward_metanet(dataset_view(ds.items[i]), model);
        for (size_t c = 0; c < out.value.size(); ++c) {
            double y = out.value[c];
            if (sigmoid_out) y = 1.0 / (1.0 + std::exp(-y));
            preds.push_back(y);
            targets.push_back(ds.items[i].target[c]);
            double r = y - ds.items[i].target[c];
            mse += r * r;
            count++;
        }
    }
    TaskEvalResult res;
    res.test_mse = mse / std::max(count, 1);
    try {
        res.test_r2 = eval_r2(preds, targets);
    } catch (const DegenerateTarget&) {
        res.test_r2 = std::numeric_limits<double>::quiet_NaN();
    }
    res.test_tau = eval_kendall_tau(preds, targets);
    return res;
}

TaskEvalResult run_gmn_regression(const NetworkDataset& ds, const GnnConfig& gcfg,
                                  const TrainConfig& tcfg, GnnModel* out_model) {
    GnnModel model = make_trainable_model(gcfg, tcfg.seed);
    std::vector<TrainItem> train_set, val_set;
    for (int i : ds.train_idx)
        if (!ds.items[i].fit_failed)
            train_set.push_back({dataset_view(ds.items[i]), ds.items[i].target});
    for (int i : ds.val_idx)
        if (!ds.items[i].fit_failed)
            val_set.push_back({dataset_view(ds.items[i]), ds.items[i].target});
    TrainResult tr = train(std::move(model), train_set, val_set, tcfg);
    TaskEvalResult res =
        eval_gmn(tr.model, ds, ds.test_idx, tcfg.loss == LossKind::BceWithSigmoid);
    if (out_model) *out_model = std::move(tr.model);
    return res;
}

// ---- baselines -----------------------------------------------------------------

namespace {

Vec flatten_parts(const std::vector<MlpWeights*>& parts) {
    Vec flat;
    for (MlpWeights* p : parts)
        for (size_t l = 0; l < p->w.size(); ++l) {
            flat.insert(flat.end(), p->w[l].data.begin(), p->w[l].data.end());
            flat.insert(flat.end(), p->b[l].data.begin(), p->b[l].data.end());
        }
    return flat;
}

void load_parts(const std::vector<MlpWeights*>& parts, const Vec& flat) {
    size_t at = 0;
    for (MlpWeights* p : parts)
        for (size_t l = 0; l < p->w.size(); ++l) {
            for (double& v : p->w[l].data) v = flat.at(at++);
            for (double& v : p->b[l].data) v = flat.at(at++);
        }
}

double item_loss_grad(const Vec& y, const Vec& target, bool bce, Vec& dy) {
    double loss = 0.0;
    double dim = static_cast<double>(y.size());
    dy.assign(y.size(), 0.0);
    for (size_t c = 0; c < y.size(); ++c) {
        if (bce) {
            double p = 1.0 / (1.0 + std::exp(-y[c]));
            loss += -(target[c] * std::log(std::max(p, 1e-300)) +
                      (1 - target[c]) * std::log(std::max(1 - p, 1e-300))) /
                    dim;
            dy[c] = (p - target[c]) / dim;
        } else {
            double r = y[c] - target[c];
            loss += r * r / dim;
            dy[c] = 2 * r / dim;
        }
    }
    return loss;
}

TaskEvalResult eval_predictions(const std::vector<Vec>& preds,
                                const std::vector<Vec>& targets) {
    std::vector<double> p, t;
    double mse = 0.0;
    int count = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        for (size_t c = 0; c < preds[i].size(); ++c) {
            p.push_back(preds[i][c]);
            t.push_back(targets[i][c]);
            mse += (preds[i][c] - targets[i][c]) * (preds[i][c] - targets[i][c]);
            count++;
        }
    TaskEvalResult res;
    res.test_mse = mse / std::max(count, 1);
    try {
        res.test_r2 = eval_r2(p, t);
    } catch (const DegenerateTarget&) {
        res.test_r2 = std::numeric_limits<double>::quiet_NaN();
    }
    res.test_tau = eval_kendall_tau(p, t);
    return res;
}

}  // namespace

TaskEvalResult run_deepsets_baseline(const NetworkDataset& ds, const TrainConfig& tcfg,
                                     int hidden, uint64_t seed) {
    int out_dim = static_cast<int>(ds.items.at(0).target.size());
    MlpWeights phi = make_mlp({1, hidden, hidden}, Act::Relu, mix_seed(seed, 11, 0));
    MlpWeights rho = make_mlp({hidden, hidden, out_dim}, Act::Relu, mix_seed(seed, 12, 0));
    std::vector<MlpWeights*> parts = {&phi, &rho};
    bool bce = tcfg.loss == LossKind::BceWithSigmoid;

    std::vector<Vec> weights;  // flattened parameters per item
    for (const DatasetItem& item : ds.items) weights.push_back(ps_flatten(item.params));

    auto fwd = [&](int i, std::vector<MlpTape>* phi_tapes, MlpTape* rho_tape, Vec* pooled) {
        Vec mean(hidden, 0.0);
        const Vec& ws = weights[i];
        if (phi_tapes) phi_tapes->resize(ws.size());
        for (size_t k = 0; k < ws.size(); ++k) {
            Vec f = phi_tapes ? mlp_forward_tape(phi, {ws[k]}, (*phi_tapes)[k])
                              : mlp_apply(phi, {ws[k]});
            for (int c = 0; c < hidden; ++c) mean[c] += f[c] / static_cast<double>(ws.size());
        }
        if (pooled) *pooled = mean;
        return rho_tape ? mlp_forward_tape(rho, mean, *rho_tape) : mlp_apply(rho, mean);
    };

    Vec flat = flatten_parts(parts), m1, m2;
    long long t = 0;
    std::vector<int> order;
    for (int i : ds.train_idx)
        if (!ds.items[i].fit_failed) order.push_back(i);
    size_t phi_n = static_cast<size_t>(mlp_param_count(phi));

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(tcfg.seed, 0x6473ULL, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t at = 0; at < order.size(); at += tcfg.batch_size) {
            Vec grad(flat.size(), 0.0);
            size_t hi = std::min(order.size(), at + tcfg.batch_size);
            double bn = static_cast<double>(hi - at);
            for (size_t k = at; k < hi; ++k) {
                int i = order[k];
                load_parts(parts, flat);
                std::vector<MlpTape> phi_tapes;
                MlpTape rho_tape;
                Vec y = fwd(i, &phi_tapes, &rho_tape, nullptr);
                Vec dy;
                item_loss_grad(y, ds.items[i].target, bce, dy);
                for (double& v : dy) v /= bn;
                Vec dmean = mlp_backward(rho, rho_tape, dy, grad.data() + phi_n);
                double wn = static_cast<double>(weights[i].size());
                for (size_t q = 0; q < weights[i].size(); ++q) {
                    Vec df = dmean;
                    for (double& v : df) v /= wn;
                    mlp_backward(phi, phi_tapes[q], df, grad.data());
                }
            }
            adam_step(flat, grad, m1, m2, ++t, tcfg.lr);
        }
    }
    load_parts(parts, flat);

    std::vector<Vec> preds, targets;
    for (int i : ds.test_idx) {
        if (ds.items[i].fit_failed) continue;
        Vec y = fwd(i, nullptr, nullptr, nullptr);
        if (bce)
            for (double& v : y) v = 1.0 / (1.0 + std::exp(-v));
        preds.push_back(y);
        targets.push_back(ds.items[i].target);
    }
    return eval_predictions(preds, targets);
}

TaskEvalResult run_flat_mlp_baseline(const NetworkDataset& ds, const TrainConfig& tcfg,
                                     int hidden, uint64_t seed) {
    int out_dim = static_cast<int>(ds.items.at(0).target.size());
    size_t max_len = 0;
    std::vector<Vec> inputs;
    for (const DatasetItem& item : ds.items) {
        inputs.push_back(ps_flatten(item.params));
        max_len = std::max(max_len, inputs.back().size());
    }
    for (Vec& v : inputs) v.resize(max_len, 0.0);

    MlpWeights mlp = make_mlp({static_cast<int>(max_len), hidden, hidden, out_dim},
                              Act::Relu, mix_seed(seed, 21, 0));
    std::vector<MlpWeights*> parts = {&mlp};
    bool bce = tcfg.loss == LossKind::BceWithSigmoid;

    Vec flat = flatten_parts(parts), m1, m2;
    long long t = 0;
    std::vector<int> order;
    for (int i : ds.train_idx)
        if (!ds.items[i].fit_failed) order.push_back(i);

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(tcfg.seed, 0x666cULL, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t at = 0; at < order.size(); at += tcfg.batch_size) {
            Vec grad(flat.size(), 0.0);
            size_t hi = std::min(order.size(), at + tcfg.batch_size);
            double bn = static_cast<double>(hi - at);
            for (size_t k = at; k < hi; ++k) {
                int i = order[k];
                load_parts(parts, flat);
                MlpTape tape;
                Vec y = mlp_forward_tape(mlp, inputs[i], tape);
                Vec dy;
                item_loss_grad(y, ds.items[i].target, bce, dy);
                for (double& v : dy) v /= bn;
                mlp_backward(mlp, tape, dy, grad.data());
            }
            adam_step(flat, grad, m1, m2, ++t, tcfg.lr);
        }
    }
    load_parts(parts, flat);

    std::vector<Vec> preds, targets;
    for (int i : ds.test_idx) {
        if (ds.items[i].fit_failed) continue;
        Vec y = mlp_apply(mlp, inputs[i]);
        if (bce)
            for (double& v : y) v = 1.0 / (1.0 + std::exp(-v));
        preds.push_back(y);
        targets.push_back(ds.items[i].target);
    }
    return eval_predictions(preds, targets);
}

// ---- editing -------------------------------------------------------------------

double edit_functional_mse(const ArchSpec& spec, const ParamStore& params, double a,
                           double b) {
    return inr_mse(spec, params, a, b, 2.0);
}

EditResult run_edit_task(const EditDataset& ed, const GnnConfig& gcfg,
                         const TrainConfig& tcfg) {
    const NetworkDataset& ds = ed.data;
    GnnConfig cfg = gcfg;
    cfg.readout = Readout::PerEdge;
    cfg.head_out = 1;
    cfg.final_sigmoid = false;
    GnnModel model = make_trainable_model(cfg, tcfg.seed);

    struct Item {
        const DatasetItem* d;
        GraphView view;
        std::map<ParamId, size_t> pos;
        Vec theta;
    };
    std::vector<Item> items;
    for (const DatasetItem& d : ds.items) {
        if (d.fit_failed) continue;
        items.push_back({&d, dataset_view(d), ps_positions(d.params), ps_flatten(d.params)});
    }
    if (items.empty()) throw Error("edit dataset has no usable items");
    size_t P = items[0].theta.size();
    Vec gamma(P, ed.gamma_init);

    std::vector<double> xs = signal_grid();

    // returns loss; fills model/gamma grads when tapes given
    auto item_pass = [&](const Item& it, Vec* model_grad, Vec* gamma_grad, double scale) {
        MetanetTape tape;
        MetanetOutput out = forward_metanet_taped(it.view, model, tape);
        Vec theta_e = it.theta;
        std::vector<size_t> edge_pos(out.per_edge.size());
        for (size_t p = 0; p < out.per_edge.size(); ++p) {
            const ViewEdge& e = it.view.edges[out.per_edge[p].first];
            size_t pos = it.pos.at(*e.param);
            edge_pos[p] = pos;
            theta_e[pos] += gamma[pos] * out.per_edge[p].second[0];
        }
        ParamStore edited = it.d->params;
        ps_load(edited, theta_e);

        double a = it.d->target[0], bfreq = it.d->target[1];
        double loss = 0.0;
        Vec dtheta(P, 0.0);
        Tensor x({1}), dy({1});
        for (double xv : xs) {
            x.data[0] = xv;
            Tensor y = forward(it.d->spec, edited, x);
            double r = y.data[0] - 2.0 * a * std::sin(bfreq * xv);
            loss += r * r / kGrid;
            if (model_grad) {
                dy.data[0] = 2.0 * r / kGrid;
                auto [g, dx] = arch_backward(it.d->spec, edited, x, dy);
                Vec gf = ps_flatten(g);
                for (size_t q = 0; q < P; ++q) dtheta[q] += gf[q];
            }
        }
        if (model_grad) {
            std::vector<Vec> per_edge_grad(out.per_edge.size());
            for (size_t p = 0; p < out.per_edge.size(); ++p) {
                size_t pos = edge_pos[p];
                per_edge_grad[p] = {scale * gamma[pos] * dtheta[pos]};
                (*gamma_grad)[pos] += scale * out.per_edge[p].second[0] * dtheta[pos];
            }
            backward_metanet(it.view, model, tape, {}, per_edge_grad, *model_grad);
        }
        return loss;
    };

    EditResult res;
    for (const Item& it : items) res.initial_mse += item_pass(it, nullptr, nullptr, 0);
    res.initial_mse /= static_cast<double>(items.size());

    Vec model_flat = flatten_params(model);
    size_t mn = model_flat.size();
    Vec all = model_flat;
    all.insert(all.end(), gamma.begin(), gamma.end());
    Vec m1, m2;
    long long t = 0;

    std::vector<size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(tcfg.seed, 0x65646974ULL, epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t at = 0; at < order.size(); at += tcfg.batch_size) {
            size_t hi = std::min(order.size(), at + tcfg.batch_size);
            double bn = static_cast<double>(hi - at);
            Vec mg(mn, 0.0), gg(P, 0.0);
            double batch_loss = 0.0;
            for (size_t k = at; k < hi; ++k) {
                Vec mg_item(mn, 0.0);
                batch_loss += item_pass(items[order[k]], &mg_item, &gg, 1.0 / bn);
                for (size_t q = 0; q < mn; ++q) mg[q] += mg_item[q];
            }
            if (!std::isfinite(batch_loss)) throw NonFiniteLoss("edit loss diverged");
            Vec grad = mg;
            grad.insert(grad.end(), gg.begin(), gg.end());
            adam_step(all, grad, m1, m2, ++t, tcfg.lr);
            std::copy(all.begin(), all.begin() + mn, model_flat.begin());
            load_flat_params(model, model_flat);
            std::copy(all.begin() + mn, all.end(), gamma.begin());
        }
    }

    for (const Item& it : items) res.final_mse += item_pass(it, nullptr, nullptr, 0);
    res.final_mse /= static_cast<double>(items.size());
    res.gamma = gamma;
    return res;
}

}  // namespace gmn
