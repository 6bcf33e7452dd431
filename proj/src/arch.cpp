#include "gmn/arch.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <json.hpp>

namespace gmn {

using nlohmann::json;

const char* to_string(Act a) {
    switch (a) {
        case Act::Relu: return "relu";
        case Act::Sine: return "sine";
        case Act::Identity: return "identity";
    }
    return "?";
}

const char* to_string(NormKind k) {
    switch (k) {
        case NormKind::Batch: return "batch";
        case NormKind::Layer: return "layer";
        case NormKind::Group: return "group";
    }
    return "?";
}

const char* to_string(ParamName n) {
    switch (n) {
        case ParamName::Weight: return "weight";
        case ParamName::Bias: return "bias";
        case ParamName::Gamma: return "gamma";
        case ParamName::Beta: return "beta";
        case ParamName::Grid: return "grid";
    }
    return "?";
}

Act act_from_string(const std::string& s) {
    if (s == "relu") return Act::Relu;
    if (s == "sine") return Act::Sine;
    if (s == "identity") return Act::Identity;
    throw Error("unknown activation: " + s);
}

NormKind norm_kind_from_string(const std::string& s) {
    if (s == "batch") return NormKind::Batch;
    if (s == "layer") return NormKind::Layer;
    if (s == "group") return NormKind::Group;
    throw Error("unknown norm kind: " + s);
}

ParamName param_name_from_string(const std::string& s) {
    if (s == "weight") return ParamName::Weight;
    if (s == "bias") return ParamName::Bias;
    if (s == "gamma") return ParamName::Gamma;
    if (s == "beta") return ParamName::Beta;
    if (s == "grid") return ParamName::Grid;
    throw Error("unknown param name: " + s);
}

std::string to_string(const ParamId& p) {
    return std::to_string(p.layer_index) + "." + to_string(p.name) + "[" +
           std::to_string(p.flat_index) + "]";
}

static void flatten_into(const std::vector<LayerSpec>& layers, int& next,
                         std::vector<FlatLayer>& out) {
    for (const LayerSpec& l : layers) {
        out.push_back({next++, &l});
        if (l.is<Residual>()) flatten_into(l.as<Residual>().inner, next, out);
    }
}

std::vector<FlatLayer> flatten_layers(const ArchSpec& spec) {
    std::vector<FlatLayer> out;
    int next = 0;
    flatten_into(spec.layers, next, out);
    return out;
}

int total_layer_count(const ArchSpec& spec) {
    return static_cast<int>(flatten_layers(spec).size());
}

Tensor& ParamStore::get(int layer, ParamName name) {
    auto it = tensors.find({layer, static_cast<int>(name)});
    if (it == tensors.end())
        throw Error("missing parameter tensor " + std::to_string(layer) + "." +
                    to_string(name));
    return it->second;
}

const Tensor& ParamStore::get(int layer, ParamName name) const {
    auto it = tensors.find({layer, static_cast<int>(name)});
    if (it == tensors.end())
        throw Error("missing parameter tensor " + std::to_string(layer) + "." +
                    to_string(name));
    return it->second;
}

double ParamStore::get_scalar(const ParamId& id) const {
    const Tensor& t = get(id.layer_index, id.name);
    if (id.flat_index < 0 || id.flat_index >= t.size())
        throw Error("param index out of range: " + to_string(id));
    return t.data[static_cast<size_t>(id.flat_index)];
}

void ParamStore::set_scalar(const ParamId& id, double v) {
    Tensor& t = get(id.layer_index, id.name);
    if (id.flat_index < 0 || id.flat_index >= t.size())
        throw Error("param index out of range: " + to_string(id));
    t.data[static_cast<size_t>(id.flat_index)] = v;
}

long long ParamStore::scalar_count() const {
    long long n = 0;
    for (const auto& [k, t] : tensors) n += t.size();
    return n;
}

std::vector<std::pair<ParamName, std::vector<int>>> param_shapes(const LayerSpec& layer) {
    std::vector<std::pair<ParamName, std::vector<int>>> out;
    if (layer.is<Linear>()) {
        const auto& l = layer.as<Linear>();
        out.push_back({ParamName::Weight, {l.out_dim, l.in_dim}});
        if (l.has_bias) out.push_back({ParamName::Bias, {l.out_dim}});
    } else if (layer.is<Conv>()) {
        const auto& c = layer.as<Conv>();
        std::vector<int> ws = {c.out_channels, c.in_channels};
        ws.insert(ws.end(), c.kernel_shape.begin(), c.kernel_shape.end());
        out.push_back({ParamName::Weight, ws});
        if (c.has_bias) out.push_back({ParamName::Bias, {c.out_channels}});
    } else if (layer.is<DeepSetsLinear>()) {
        const auto& d = layer.as<DeepSetsLinear>();
        out.push_back({ParamName::Weight, {2, d.in_channels, d.out_channels}});
    } else if (layer.is<MultiHeadAttention>()) {
        const auto& a = layer.as<MultiHeadAttention>();
        int h = a.num_heads * a.head_dim;
        // slices: 0=Q, 1=K, 2=V (each [h, model_dim]); 3 = output map [h, model_dim]
        out.push_back({ParamName::Weight, {4, h, a.model_dim}});
        if (a.has_bias) out.push_back({ParamName::Bias, {3 * h + a.model_dim}});
    } else if (layer.is<Norm>()) {
        const auto& n = layer.as<Norm>();
        out.push_back({ParamName::Gamma, {n.num_features}});
        out.push_back({ParamName::Beta, {n.num_features}});
    } else if (layer.is<SpatialGrid>()) {
        const auto& g = layer.as<SpatialGrid>();
        std::vector<int> gs = g.grid_shape;
        gs.push_back(g.channels);
        out.push_back({ParamName::Grid, gs});
    }
    return out;
}

static int conv_out_len(int in, int k, int stride) { return (in - k) / stride + 1; }

std::vector<int> infer_shape(const LayerSpec& layer, const std::vector<int>& in,
                             int layer_index) {
    if (layer.is<Linear>()) {
        const auto& l = layer.as<Linear>();
        if (in.size() != 1 || in[0] != l.in_dim)
            throw ShapeMismatch(layer_index, "linear expects [" +
                                                 std::to_string(l.in_dim) + "], got " +
                                                 shape_str(in));
        return {l.out_dim};
    }
    if (layer.is<Conv>()) {
        const auto& c = layer.as<Conv>();
        if (c.spatial_rank != 1 && c.spatial_rank != 2)
            throw ShapeMismatch(layer_index, "conv spatial rank must be 1 or 2");
        if (static_cast<int>(c.kernel_shape.size()) != c.spatial_rank)
            throw ShapeMismatch(layer_index, "kernel rank mismatch");
        if (static_cast<int>(in.size()) != c.spatial_rank + 1 || in[0] != c.in_channels)
            throw ShapeMismatch(layer_index, "conv input " + shape_str(in));
        std::vector<int> out = {c.out_channels};
        for (int d = 0; d < c.spatial_rank; ++d) {
            if (in[d + 1] < c.kernel_shape[d])
                throw ShapeMismatch(layer_index, "kernel larger than input");
            out.push_back(conv_out_len(in[d + 1], c.kernel_shape[d], c.stride));
        }
        return out;
    }
    if (layer.is<DeepSetsLinear>()) {
        const auto& d = layer.as<DeepSetsLinear>();
        if (in.size() != 2 || in[0] != d.set_size || in[1] != d.in_channels)
            throw ShapeMismatch(layer_index, "deepsets input " + shape_str(in));
        return {d.set_size, d.out_channels};
    }
    if (layer.is<MultiHeadAttention>()) {
        const auto& a = layer.as<MultiHeadAttention>();
        if (in.size() != 2 || in[1] != a.model_dim)
            throw ShapeMismatch(layer_index, "attention input " + shape_str(in));
        return in;
    }
    if (layer.is<Residual>()) {
        const auto& r = layer.as<Residual>();
        std::vector<int> s = in;
        int idx = layer_index + 1;
        for (const LayerSpec& l : r.inner) {
            s = infer_shape(l, s, idx);
            idx += 1;
            if (l.is<Residual>())
                idx += total_layer_count(ArchSpec{l.as<Residual>().inner, {}});
        }
        if (s != in)
            throw ShapeMismatch(layer_index, "residual branch output " + shape_str(s) +
                                                 " != input " + shape_str(in));
        return in;
    }
    if (layer.is<Norm>()) {
        const auto& n = layer.as<Norm>();
        if (in.empty() || in[0] != n.num_features)
            throw ShapeMismatch(layer_index, "norm features " + shape_str(in));
        if (n.kind == NormKind::Group && (n.groups <= 0 || n.num_features % n.groups != 0))
            throw ShapeMismatch(layer_index, "group count must divide num_features");
        return in;
    }
    if (layer.is<SpatialGrid>()) {
        const auto& g = layer.as<SpatialGrid>();
        if (g.grid_shape.size() != 2)
            throw ShapeMismatch(layer_index, "grid must be 2-D");
        if (in.size() != 1 || in[0] != 2)
            throw ShapeMismatch(layer_index, "grid expects [2] coordinates, got " +
                                                 shape_str(in));
        return {g.channels + 2};
    }
    if (layer.is<Activation>()) return in;
    if (layer.is<Flatten>()) {
        long long n = Tensor::numel(in);
        return {static_cast<int>(n)};
    }
    throw UnsupportedLayer("unknown layer variant");
}

void validate_arch(const ArchSpec& spec) {
    if (spec.layers.empty()) throw EmptyArch();
    if (spec.input_shape.empty()) throw ShapeMismatch(0, "empty input shape");
    std::vector<int> s = spec.input_shape;
    auto flat = flatten_layers(spec);
    // walk only top-level layers; residual recursion is inside infer_shape
    int idx = 0;
    for (const LayerSpec& l : spec.layers) {
        s = infer_shape(l, s, idx);
        idx += 1;
        if (l.is<Residual>())
            idx += total_layer_count(ArchSpec{l.as<Residual>().inner, {}});
    }
    (void)flat;
}

std::vector<int> output_shape(const ArchSpec& spec) {
    std::vector<int> s = spec.input_shape;
    int idx = 0;
    for (const LayerSpec& l : spec.layers) {
        s = infer_shape(l, s, idx);
        idx += 1;
        if (l.is<Residual>())
            idx += total_layer_count(ArchSpec{l.as<Residual>().inner, {}});
    }
    return s;
}

long long count_params(const ArchSpec& spec) {
    long long n = 0;
    for (const FlatLayer& fl : flatten_layers(spec))
        for (const auto& [name, shape] : param_shapes(*fl.layer)) n += Tensor::numel(shape);
    return n;
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t h = seed + 0x9e3779b97f4a7c15ULL;
    for (uint64_t v : {a, b}) {
        h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xbf58476d1ce4e5b9ULL;
        h ^= h >> 31;
    }
    return h;
}

static double layer_fan_in(const LayerSpec& layer) {
    if (layer.is<Linear>()) return layer.as<Linear>().in_dim;
    if (layer.is<Conv>()) {
        const auto& c = layer.as<Conv>();
        long long k = 1;
        for (int d : c.kernel_shape) k *= d;
        return static_cast<double>(c.in_channels * k);
    }
    if (layer.is<DeepSetsLinear>()) return 2.0 * layer.as<DeepSetsLinear>().in_channels;
    if (layer.is<MultiHeadAttention>()) return layer.as<MultiHeadAttention>().model_dim;
    if (layer.is<SpatialGrid>()) return layer.as<SpatialGrid>().channels;
    return 1.0;
}

ParamStore init_params(const ArchSpec& spec, uint64_t seed) {
    validate_arch(spec);
    ParamStore store;
    for (const FlatLayer& fl : flatten_layers(spec)) {
        for (const auto& [name, shape] : param_shapes(*fl.layer)) {
            Tensor t(shape);
            if (name == ParamName::Bias || name == ParamName::Beta) {
                // zeros
            } else if (name == ParamName::Gamma) {
                std::fill(t.data.begin(), t.data.end(), 1.0);
            } else {
                double a = 1.0 / std::sqrt(layer_fan_in(*fl.layer));
                std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(fl.index),
                                             static_cast<uint64_t>(name)));
                std::uniform_real_distribution<double> dist(-a, a);
                for (double& v : t.data) v = dist(rng);
            }
            store.set(fl.index, name, std::move(t));
        }
    }
    return store;
}

double apply_act(Act a, double x) {
    switch (a) {
        case Act::Relu: return x > 0 ? x : 0.0;
        case Act::Sine: return std::sin(x);
        case Act::Identity: return x;
    }
    return x;
}

double apply_act_grad(Act a, double x) {
    switch (a) {
        case Act::Relu: return x > 0 ? 1.0 : 0.0;
        case Act::Sine: return std::cos(x);
        case Act::Identity: return 1.0;
    }
    return 1.0;
}

namespace {

Tensor eval_layer(const LayerSpec& layer, int layer_index, const ParamStore& params,
                  const Tensor& x);

Tensor eval_chain(const std::vector<LayerSpec>& layers, int base_index,
                  const ParamStore& params, Tensor x) {
    int idx = base_index;
    for (const LayerSpec& l : layers) {
        x = eval_layer(l, idx, params, x);
        idx += 1;
        if (l.is<Residual>())
            idx += total_layer_count(ArchSpec{l.as<Residual>().inner, {}});
    }
    return x;
}

Tensor eval_layer(const LayerSpec& layer, int layer_index, const ParamStore& params,
                  const Tensor& x) {
    std::vector<int> out_shape = infer_shape(layer, x.shape, layer_index);
    if (layer.is<Linear>()) {
        const auto& l = layer.as<Linear>();
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        Tensor y(out_shape);
        for (int o = 0; o < l.out_dim; ++o) {
            double s = 0.0;
            for (int i = 0; i < l.in_dim; ++i) s += w.data[o * l.in_dim + i] * x.data[i];
            y.data[o] = s;
        }
        if (l.has_bias) {
            const Tensor& b = params.get(layer_index, ParamName::Bias);
            for (int o = 0; o < l.out_dim; ++o) y.data[o] += b.data[o];
        }
        return y;
    }
    if (layer.is<Conv>()) {
        const auto& c = layer.as<Conv>();
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        Tensor y(out_shape);
        if (c.spatial_rank == 1) {
            int L = x.shape[1], k = c.kernel_shape[0], Lo = out_shape[1];
            for (int o = 0; o < c.out_channels; ++o)
                for (int p = 0; p < Lo; ++p) {
                    double s = 0.0;
                    for (int ci = 0; ci < c.in_channels; ++ci)
                        for (int dk = 0; dk < k; ++dk)
                            s += w.data[(o * c.in_channels + ci) * k + dk] *
                                 x.data[ci * L + p * c.stride + dk];
                    y.data[o * Lo + p] = s;
                }
        } else {
            int H = x.shape[1], W = x.shape[2];
            int kh = c.kernel_shape[0], kw = c.kernel_shape[1];
            int Ho = out_shape[1], Wo = out_shape[2];
            for (int o = 0; o < c.out_channels; ++o)
                for (int ph = 0; ph < Ho; ++ph)
                    for (int pw = 0; pw < Wo; ++pw) {
                        double s = 0.0;
                        for (int ci = 0; ci < c.in_channels; ++ci)
                            for (int dh = 0; dh < kh; ++dh)
                                for (int dw = 0; dw < kw; ++dw)
                                    s += w.data[((o * c.in_channels + ci) * kh + dh) * kw +
                                                dw] *
                                         x.data[(ci * H + ph * c.stride + dh) * W +
                                                pw * c.stride + dw];
                        y.data[(o * Ho + ph) * Wo + pw] = s;
                    }
        }
        if (c.has_bias) {
            const Tensor& b = params.get(layer_index, ParamName::Bias);
            long long per = Tensor::numel(out_shape) / c.out_channels;
            for (int o = 0; o < c.out_channels; ++o)
                for (long long p = 0; p < per; ++p) y.data[o * per + p] += b.data[o];
        }
        return y;
    }
    if (layer.is<DeepSetsLinear>()) {
        const auto& d = layer.as<DeepSetsLinear>();
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        Tensor y(out_shape);
        std::vector<double> colsum(d.in_channels, 0.0);
        for (int s = 0; s < d.set_size; ++s)
            for (int i = 0; i < d.in_channels; ++i) colsum[i] += x.data[s * d.in_channels + i];
        auto w1 = [&](int i, int o) { return w.data[(0 * d.in_channels + i) * d.out_channels + o]; };
        auto w2 = [&](int i, int o) { return w.data[(1 * d.in_channels + i) * d.out_channels + o]; };
        for (int s = 0; s < d.set_size; ++s)
            for (int o = 0; o < d.out_channels; ++o) {
                double v = 0.0;
                for (int i = 0; i < d.in_channels; ++i)
                    v += x.data[s * d.in_channels + i] * w1(i, o) + colsum[i] * w2(i, o);
                y.data[s * d.out_channels + o] = v;
            }
        return y;
    }
    if (layer.is<MultiHeadAttention>()) {
        const auto& a = layer.as<MultiHeadAttention>();
        int n = x.shape[0], d = a.model_dim, H = a.num_heads * a.head_dim;
        const Tensor& w = params.get(layer_index, ParamName::Weight);
        const double* wq = &w.data[0];
        const double* wk = &w.data[static_cast<size_t>(H) * d];
        const double* wv = &w.data[2 * static_cast<size_t>(H) * d];
        const double* wo = &w.data[3 * static_cast<size_t>(H) * d];  // [H, d]
        std::vector<double> bq(H, 0), bk(H, 0), bv(H, 0), bo(d, 0);
        if (a.has_bias) {
            const Tensor& b = params.get(layer_index, ParamName::Bias);
            for (int m = 0; m < H; ++m) {
                bq[m] = b.data[m];
                bk[m] = b.data[H + m];
                bv[m] = b.data[2 * H + m];
            }
            for (int o = 0; o < d; ++o) bo[o] = b.data[3 * H + o];
        }
        auto project = [&](const double* W, const std::vector<double>& bias) {
            std::vector<double> out(static_cast<size_t>(n) * H);
            for (int t = 0; t < n; ++t)
                for (int m = 0; m < H; ++m) {
                    double s = bias[m];
                    for (int i = 0; i < d; ++i) s += W[m * d + i] * x.data[t * d + i];
                    out[t * H + m] = s;
                }
            return out;
        };
        std::vector<double> Q = project(wq, bq), K = project(wk, bk), V = project(wv, bv);
        std::vector<double> attn(static_cast<size_t>(n) * H, 0.0);
        double scale = 1.0 / std::sqrt(static_cast<double>(a.head_dim));
        for (int h = 0; h < a.num_heads; ++h) {
            int off = h * a.head_dim;
            for (int t = 0; t < n; ++t) {
                std::vector<double> scores(n);
                double mx = -1e300;
                for (int s = 0; s < n; ++s) {
                    double dot = 0.0;
                    for (int k = 0; k < a.head_dim; ++k)
                        dot += Q[t * H + off + k] * K[s * H + off + k];
                    scores[s] = dot * scale;
                    mx = std::max(mx, scores[s]);
                }
                double z = 0.0;
                for (int s = 0; s < n; ++s) {
                    scores[s] = std::exp(scores[s] - mx);
                    z += scores[s];
                }
                for (int s = 0; s < n; ++s) scores[s] /= z;
                for (int k = 0; k < a.head_dim; ++k) {
                    double acc = 0.0;
                    for (int s = 0; s < n; ++s) acc += scores[s] * V[s * H + off + k];
                    attn[t * H + off + k] = acc;
                }
            }
        }
        Tensor y(out_shape);
        for (int t = 0; t < n; ++t)
            for (int o = 0; o < d; ++o) {
                double s = bo[o];
                for (int m = 0; m < H; ++m) s += attn[t * H + m] * wo[m * d + o];
                y.data[t * d + o] = s;
            }
        return y;
    }
    if (layer.is<Residual>()) {
        const auto& r = layer.as<Residual>();
        Tensor y = eval_chain(r.inner, layer_index + 1, params, x);
        for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
        return y;
    }
    if (layer.is<Norm>()) {
        const auto& nrm = layer.as<Norm>();
        const Tensor& gamma = params.get(layer_index, ParamName::Gamma);
        const Tensor& beta = params.get(layer_index, ParamName::Beta);
        Tensor y = x;
        int C = nrm.num_features;
        long long per = x.size() / C;
        const double eps = 1e-5;
        if (nrm.kind == NormKind::Batch) {
            // inference style: learned affine only
            for (int c = 0; c < C; ++c)
                for (long long p = 0; p < per; ++p)
                    y.data[c * per + p] = gamma.data[c] * x.data[c * per + p] + beta.data[c];
        } else {
            int groups = nrm.kind == NormKind::Layer ? 1 : nrm.groups;
            int cg = C / groups;
            for (int g = 0; g < groups; ++g) {
                double mean = 0.0, var = 0.0;
                long long cnt = cg * per;
                for (int c = g * cg; c < (g + 1) * cg; ++c)
                    for (long long p = 0; p < per; ++p) mean += x.data[c * per + p];
                mean /= static_cast<double>(cnt);
                for (int c = g * cg; c < (g + 1) * cg; ++c)
                    for (long long p = 0; p < per; ++p) {
                        double d = x.data[c * per + p] - mean;
                        var += d * d;
                    }
                var /= static_cast<double>(cnt);
                double inv = 1.0 / std::sqrt(var + eps);
                for (int c = g * cg; c < (g + 1) * cg; ++c)
                    for (long long p = 0; p < per; ++p)
                        y.data[c * per + p] =
                            gamma.data[c] * (x.data[c * per + p] - mean) * inv + beta.data[c];
            }
        }
        return y;
    }
    if (layer.is<SpatialGrid>()) {
        const auto& g = layer.as<SpatialGrid>();
        const Tensor& grid = params.get(layer_index, ParamName::Grid);
        int gh = g.grid_shape[0], gw = g.grid_shape[1], C = g.channels;
        double u = std::clamp(x.data[0], 0.0, 1.0) * (gh - 1);
        double v = std::clamp(x.data[1], 0.0, 1.0) * (gw - 1);
        int u0 = std::min(static_cast<int>(u), gh - 2 >= 0 ? gh - 2 : 0);
        int v0 = std::min(static_cast<int>(v), gw - 2 >= 0 ? gw - 2 : 0);
        if (gh == 1) u0 = 0;
        if (gw == 1) v0 = 0;
        double fu = u - u0, fv = v - v0;
        Tensor y(std::vector<int>{C + 2});
        for (int c = 0; c < C; ++c) {
            auto cell = [&](int i, int j) { return grid.data[(i * gw + j) * C + c]; };
            double a = cell(u0, v0), b = gw > 1 ? cell(u0, v0 + 1) : a;
            double cc = gh > 1 ? cell(u0 + 1, v0) : a;
            double dd = (gh > 1 && gw > 1) ? cell(u0 + 1, v0 + 1) : a;
            y.data[c] = a * (1 - fu) * (1 - fv) + b * (1 - fu) * fv + cc * fu * (1 - fv) +
                        dd * fu * fv;
        }
        y.data[C] = x.data[0];
        y.data[C + 1] = x.data[1];
        return y;
    }
    if (layer.is<Activation>()) {
        Tensor y = x;
        Act a = layer.as<Activation>().kind;
        for (double& v : y.data) v = apply_act(a, v);
        return y;
    }
    if (layer.is<Flatten>()) {
        Tensor y = x;
        y.shape = out_shape;
        return y;
    }
    throw UnsupportedLayer("unknown layer variant");
}

}  // namespace

Tensor forward(const ArchSpec& spec, const ParamStore& params, const Tensor& x) {
    if (x.shape != spec.input_shape)
        throw ShapeMismatch(0, "input " + shape_str(x.shape) + " != expected " +
                                   shape_str(spec.input_shape));
    return eval_chain(spec.layers, 0, params, x);
}

// --- JSON ---

static json layer_to_json(const LayerSpec& l) {
    json j;
    if (l.is<Linear>()) {
        const auto& x = l.as<Linear>();
        j = {{"type", "linear"}, {"in", x.in_dim}, {"out", x.out_dim}, {"bias", x.has_bias}};
    } else if (l.is<Conv>()) {
        const auto& x = l.as<Conv>();
        j = {{"type", "conv"},          {"rank", x.spatial_rank},
             {"in_channels", x.in_channels}, {"out_channels", x.out_channels},
             {"kernel", x.kernel_shape},     {"stride", x.stride},
             {"bias", x.has_bias}};
    } else if (l.is<DeepSetsLinear>()) {
        const auto& x = l.as<DeepSetsLinear>();
        j = {{"type", "deepsets"},
             {"in_channels", x.in_channels},
             {"out_channels", x.out_channels},
             {"set_size", x.set_size}};
    } else if (l.is<MultiHeadAttention>()) {
        const auto& x = l.as<MultiHeadAttention>();
        j = {{"type", "attention"},
             {"model_dim", x.model_dim},
             {"num_heads", x.num_heads},
             {"head_dim", x.head_dim},
             {"bias", x.has_bias}};
    } else if (l.is<Residual>()) {
        json inner = json::array();
        for (const auto& il : l.as<Residual>().inner) inner.push_back(layer_to_json(il));
        j = {{"type", "residual"}, {"inner", inner}};
    } else if (l.is<Norm>()) {
        const auto& x = l.as<Norm>();
        j = {{"type", "norm"},
             {"kind", to_string(x.kind)},
             {"groups", x.groups},
             {"num_features", x.num_features}};
    } else if (l.is<SpatialGrid>()) {
        const auto& x = l.as<SpatialGrid>();
        j = {{"type", "grid"}, {"grid_shape", x.grid_shape}, {"channels", x.channels}};
    } else if (l.is<Activation>()) {
        j = {{"type", "activation"}, {"kind", to_string(l.as<Activation>().kind)}};
    } else if (l.is<Flatten>()) {
        j = {{"type", "flatten"}};
    }
    return j;
}

static LayerSpec layer_from_json(const json& j) {
    std::string type = j.at("type").get<std::string>();
    if (type == "linear")
        return Linear{j.at("in").get<int>(), j.at("out").get<int>(),
                      j.value("bias", true)};
    if (type == "conv")
        return Conv{j.at("rank").get<int>(),
                    j.at("in_channels").get<int>(),
                    j.at("out_channels").get<int>(),
                    j.at("kernel").get<std::vector<int>>(),
                    j.value("stride", 1),
                    j.value("bias", true)};
    if (type == "deepsets")
        return DeepSetsLinear{j.at("in_channels").get<int>(),
                              j.at("out_channels").get<int>(), j.at("set_size").get<int>()};
    if (type == "attention")
        return MultiHeadAttention{j.at("model_dim").get<int>(), j.at("num_heads").get<int>(),
                                  j.at("head_dim").get<int>(), j.value("bias", true)};
    if (type == "residual") {
        Residual r;
        for (const auto& ij : j.at("inner")) r.inner.push_back(layer_from_json(ij));
        return LayerSpec{r};
    }
    if (type == "norm")
        return Norm{norm_kind_from_string(j.at("kind").get<std::string>()),
                    j.value("groups", 1), j.at("num_features").get<int>()};
    if (type == "grid")
        return SpatialGrid{j.at("grid_shape").get<std::vector<int>>(),
                           j.at("channels").get<int>()};
    if (type == "activation")
        return Activation{act_from_string(j.at("kind").get<std::string>())};
    if (type == "flatten") return Flatten{};
    throw Error("unknown layer type in json: " + type);
}

std::string to_json(const ArchSpec& spec, const ParamStore& params) {
    json j;
    j["layers"] = json::array();
    for (const auto& l : spec.layers) j["layers"].push_back(layer_to_json(l));
    j["input_shape"] = spec.input_shape;
    json p = json::object();
    for (const auto& [key, t] : params.tensors) {
        std::string name = std::to_string(key.first) + "." +
                           to_string(static_cast<ParamName>(key.second));
        p[name] = {{"shape", t.shape}, {"data", t.data}};
    }
    j["params"] = p;
    return j.dump();
}

std::pair<ArchSpec, ParamStore> arch_from_json(const std::string& text) {
    json j = json::parse(text);
    ArchSpec spec;
    for (const auto& lj : j.at("layers")) spec.layers.push_back(layer_from_json(lj));
    spec.input_shape = j.at("input_shape").get<std::vector<int>>();
    ParamStore store;
    for (auto it = j.at("params").begin(); it != j.at("params").end(); ++it) {
        std::string key = it.key();
        auto dot = key.find('.');
        if (dot == std::string::npos) throw Error("bad param key: " + key);
        int layer = std::stoi(key.substr(0, dot));
        ParamName name = param_name_from_string(key.substr(dot + 1));
        Tensor t(it.value().at("shape").get<std::vector<int>>(),
                 it.value().at("data").get<std::vector<double>>());
        store.set(layer, name, std::move(t));
    }
    return {spec, store};
}

}  // namespace gmn
