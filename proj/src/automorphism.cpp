#include "gmn/automorphism.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <tuple>

namespace gmn {

namespace {

bool check_bijection(size_t n, const std::vector<int>& perm) {
    if (perm.size() != n) return false;
    std::vector<char> seen(n, 0);
    for (int p : perm) {
        if (p < 0 || p >= static_cast<int>(n) || seen[p]) return false;
        seen[p] = 1;
    }
    return true;
}

// (src, dst, carries-a-parameter) uniquely identifies an edge: at most one
// parameter edge and one skip edge can connect the same ordered pair.
using EdgeKey = std::tuple<int, int, bool>;

std::map<EdgeKey, int> edge_index(const CompGraph& g) {
    std::map<EdgeKey, int> m;
    for (size_t k = 0; k < g.edges.size(); ++k) {
        const CompEdge& e = g.edges[k];
        m[{e.src, e.dst, e.param.has_value()}] = static_cast<int>(k);
    }
    return m;
}

}  // namespace

bool is_automorphism(const CompGraph& g, const std::vector<int>& perm) {
    if (!check_bijection(g.nodes.size(), perm)) throw NotABijection();
    for (size_t i = 0; i < g.nodes.size(); ++i) {
        const CompNode& a = g.nodes[i];
        const CompNode& b = g.nodes[perm[i]];
        if (a.kind != b.kind || a.subindex != b.subindex ||
            a.layer_number != b.layer_number || a.sigma != b.sigma)
            return false;
        if (a.kind != NodeKind::Hidden && perm[i] != static_cast<int>(i)) return false;
    }
    std::map<EdgeKey, int> idx = edge_index(g);
    std::vector<int> class_image(g.share_class_count, -1);
    std::vector<char> class_hit(g.share_class_count, 0);
    for (const CompEdge& e : g.edges) {
        auto it = idx.find({perm[e.src], perm[e.dst], e.param.has_value()});
        if (it == idx.end()) return false;
        const CompEdge& img = g.edges[it->second];
        if (class_image[e.share_class] == -1) {
            class_image[e.share_class] = img.share_class;
        } else if (class_image[e.share_class] != img.share_class) {
            return false;  // tied weights pulled apart
        }
    }
    for (int c : class_image)
        if (c >= 0) {
            if (class_hit[c]) return false;  // two classes merged
            class_hit[c] = 1;
        }
    return true;
}

std::vector<NeuralAutomorphism> enumerate_automorphisms(const CompGraph& g,
                                                        EnumLimits limits) {
    size_t n = g.nodes.size();
    if (n == 0) throw EmptyGraph();

    // group permutable nodes by every cheap invariant we have
    std::map<EdgeKey, int> idx = edge_index(g);
    std::vector<int> indeg(n, 0), outdeg(n, 0);
    for (const CompEdge& e : g.edges) {
        outdeg[e.src]++;
        indeg[e.dst]++;
    }
    // initial colors: fixed nodes are singletons, hidden nodes share a color
    // per cheap label tuple
    std::vector<int> color(n);
    {
        std::map<std::tuple<int, int, int, int, int>, int> label_color;
        int next = 0;
        for (size_t i = 0; i < n; ++i) {
            const CompNode& nd = g.nodes[i];
            if (nd.kind != NodeKind::Hidden) {
                color[i] = next++;
                continue;
            }
            auto key = std::tuple(nd.layer_number, static_cast<int>(nd.sigma),
                                  nd.subindex, indeg[i], outdeg[i]);
            auto [it, fresh] = label_color.insert({key, next});
            if (fresh) next++;
            color[i] = it->second;
        }
    }

    // neighborhood color refinement: any automorphism preserves colors, so
    // refining shrinks the search classes without losing solutions (conv
    // spatial copies separate here because they touch distinct inputs)
    {
        // per-node neighbor signatures, rebuilt until the partition stabilizes
        std::vector<std::vector<std::pair<int, bool>>> outs(n), ins(n);
        for (const CompEdge& e : g.edges) {
            outs[e.src].push_back({e.dst, e.param.has_value()});
            ins[e.dst].push_back({e.src, e.param.has_value()});
        }
        int distinct = 0;
        for (int c : color) distinct = std::max(distinct, c + 1);
        while (true) {
            std::map<std::tuple<int, std::vector<std::tuple<int, int, bool>>>, int> next;
            std::vector<int> nc(n);
            for (size_t i = 0; i < n; ++i) {
                std::vector<std::tuple<int, int, bool>> sig;
                for (auto [m, hp] : outs[i]) sig.push_back({0, color[m], hp});
                for (auto [m, hp] : ins[i]) sig.push_back({1, color[m], hp});
                std::sort(sig.begin(), sig.end());
                auto [it, fresh] =
                    next.insert({{color[i], std::move(sig)}, (int)next.size()});
                nc[i] = it->second;
            }
            int nd = static_cast<int>(next.size());
            color = std::move(nc);
            if (nd == distinct) break;
            distinct = nd;
        }
    }

    std::map<int, std::vector<int>> classes;
    std::vector<int> class_of(n, -1);
    std::vector<int> permutable;
    for (size_t i = 0; i < n; ++i) {
        if (g.nodes[i].kind != NodeKind::Hidden) continue;
        classes[color[i]].push_back(static_cast<int>(i));
        permutable.push_back(static_cast<int>(i));
    }
    // per-class bound: weight-sharing propagation prunes cross-class
    // combinations during the search, so only the branching within a single
    // class needs a static cap (a step budget below guards the rest)
    for (const auto& [key, members] : classes) {
        double leaves = 1.0;
        for (size_t k = 2; k <= members.size(); ++k) leaves *= static_cast<double>(k);
        if (leaves > static_cast<double>(limits.candidate_bound))
            throw TooLarge("automorphism search space estimate " + std::to_string(leaves));
    }
    std::vector<std::vector<int>> cls(classes.size());
    {
        int ci = 0;
        for (auto& [key, members] : classes) {
            for (int m : members) class_of[m] = ci;
            cls[ci++] = members;
        }
    }

    std::vector<int> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
    std::vector<char> assigned(n, 1), used(n, 0);
    for (int p : permutable) assigned[p] = 0;

    // adjacency with the carries-a-parameter flag and the share class, for
    // pruning: an assignment must extend a consistent bijection on classes
    std::vector<std::vector<std::tuple<int, bool, int>>> out_adj(n), in_adj(n);
    for (const CompEdge& e : g.edges) {
        out_adj[e.src].push_back({e.dst, e.param.has_value(), e.share_class});
        in_adj[e.dst].push_back({e.src, e.param.has_value(), e.share_class});
    }

    std::vector<NeuralAutomorphism> found;
    std::vector<int> order = permutable;  // ascending id = lexicographic output

    std::vector<int> class_img(g.share_class_count, -1);
    std::vector<int> class_pre(g.share_class_count, -1);
    long long steps = 0;

    // try node -> image; on success records the newly fixed class images so
    // the caller can roll them back, on failure rolls back itself
    auto try_assign = [&](int node, int image, std::vector<int>& fixed) {
        auto rollback = [&]() {
            for (int c : fixed) {
                class_pre[class_img[c]] = -1;
                class_img[c] = -1;
            }
            fixed.clear();
        };
        auto map_class = [&](int from, int to) {
            if (class_img[from] == -1) {
                if (class_pre[to] != -1) return false;  // two classes merged
                class_img[from] = to;
                class_pre[to] = from;
                fixed.push_back(from);
                return true;
            }
            return class_img[from] == to;  // tied weights stay tied
        };
        for (auto [m, hp, c] : out_adj[node]) {
            if (!assigned[m]) continue;
            auto it = idx.find({image, perm[m], hp});
            if (it == idx.end() || !map_class(c, g.edges[it->second].share_class)) {
                rollback();
                return false;
            }
        }
        for (auto [m, hp, c] : in_adj[node]) {
            if (!assigned[m]) continue;
            auto it = idx.find({perm[m], image, hp});
            if (it == idx.end() || !map_class(c, g.edges[it->second].share_class)) {
                rollback();
                return false;
            }
        }
        return true;
    };

    std::function<bool(size_t)> rec = [&](size_t depth) -> bool {
        if (depth == order.size()) {
            if (is_automorphism(g, perm)) found.push_back(NeuralAutomorphism{perm});
            if (found.size() > static_cast<size_t>(limits.max_count))
                throw TooLarge("more than " + std::to_string(limits.max_count) +
                               " automorphisms");
            return false;
        }
        int node = order[depth];
        for (int cand : cls[class_of[node]]) {
            if (++steps > limits.candidate_bound)
                throw TooLarge("automorphism search exceeded " +
                               std::to_string(limits.candidate_bound) + " steps");
            if (used[cand]) continue;
            std::vector<int> fixed;
            if (!try_assign(node, cand, fixed)) continue;
            perm[node] = cand;
            used[cand] = 1;
            assigned[node] = 1;
            bool stop = rec(depth + 1);
            assigned[node] = 0;
            used[cand] = 0;
            perm[node] = node;
            for (int c : fixed) {
                class_pre[class_img[c]] = -1;
                class_img[c] = -1;
            }
            if (stop) return true;
        }
        return false;
    };
    rec(0);
    std::sort(found.begin(), found.end());
    return found;
}

namespace {

NeuralAutomorphism transposition(size_t n, const std::vector<std::pair<int, int>>& swaps) {
    NeuralAutomorphism a;
    a.node_perm.resize(n);
    for (size_t i = 0; i < n; ++i) a.node_perm[i] = static_cast<int>(i);
    for (auto [x, y] : swaps) {
        a.node_perm[x] = y;
        a.node_perm[y] = x;
    }
    return a;
}

}  // namespace

std::vector<NeuralAutomorphism> mlp_hidden_automorphisms(const ArchSpec& spec,
                                                         const CompGraph& g) {
    std::vector<int> linear_layers;
    for (const FlatLayer& fl : flatten_layers(spec)) {
        if (fl.layer->is<Linear>())
            linear_layers.push_back(fl.index);
        else if (!fl.layer->is<Activation>())
            throw WrongFamily("expected a pure multilayer perceptron");
    }
    if (linear_layers.empty()) throw WrongFamily("no linear layers");
    std::vector<NeuralAutomorphism> gens;
    for (size_t li = 0; li + 1 < linear_layers.size(); ++li) {
        std::vector<int> neurons;
        for (const CompNode& nd : g.nodes)
            if (nd.kind == NodeKind::Hidden && nd.spec_layer == linear_layers[li])
                neurons.push_back(nd.id);
        for (size_t k = 0; k + 1 < neurons.size(); ++k)
            gens.push_back(transposition(g.nodes.size(), {{neurons[k], neurons[k + 1]}}));
    }
    return gens;
}

std::vector<NeuralAutomorphism> cnn_channel_automorphisms(const ArchSpec& spec,
                                                          const CompGraph& g) {
    std::vector<int> conv_layers;
    bool saw_tail = false;  // optional flatten+linear head after the conv stack
    for (const FlatLayer& fl : flatten_layers(spec)) {
        if (fl.layer->is<Conv>()) {
            if (saw_tail) throw WrongFamily("conv after dense head");
            conv_layers.push_back(fl.index);
        } else if (fl.layer->is<Flatten>() || fl.layer->is<Linear>()) {
            saw_tail = true;
        } else if (!fl.layer->is<Activation>()) {
            throw WrongFamily("expected a convolutional network");
        }
    }
    if (conv_layers.empty()) throw WrongFamily("no conv layers");
    std::vector<NeuralAutomorphism> gens;
    for (int layer : conv_layers) {
        // channel -> all of its hidden spatial copies, in spatial order
        std::map<int, std::vector<int>> by_channel;
        bool all_hidden = true;
        for (const CompNode& nd : g.nodes)
            if (nd.spec_layer == layer && nd.channel >= 0) {
                if (nd.kind != NodeKind::Hidden) all_hidden = false;
                by_channel[nd.channel].push_back(nd.id);
            }
        if (!all_hidden) continue;  // output channels are pinned
        for (auto it = by_channel.begin(); it != by_channel.end(); ++it) {
            auto next = std::next(it);
            if (next == by_channel.end()) break;
            std::vector<std::pair<int, int>> swaps;
            for (size_t p = 0; p < it->second.size(); ++p)
                swaps.push_back({it->second[p], next->second[p]});
            gens.push_back(transposition(g.nodes.size(), swaps));
        }
    }
    return gens;
}

ParamStore apply_automorphism(const ParamStore& params, const CompGraph& g,
                              const NeuralAutomorphism& a) {
    if (!check_bijection(g.nodes.size(), a.node_perm)) throw NotABijection();
    std::map<EdgeKey, int> idx = edge_index(g);
    ParamStore out = params;
    std::map<ParamId, double> written;
    for (const CompEdge& e : g.edges) {
        if (!e.param) continue;
        auto it = idx.find({a.node_perm[e.src], a.node_perm[e.dst], true});
        if (it == idx.end()) throw SharingViolation("edge image missing");
        const CompEdge& img = g.edges[it->second];
        double v = params.get_scalar(*e.param);
        auto [w, fresh] = written.insert({*img.param, v});
        if (!fresh && w->second != v)
            throw SharingViolation("tied weights mapped to conflicting values at " +
                                   to_string(*img.param));
        out.set_scalar(*img.param, v);
    }
    return out;
}

double verify_function_preservation(const ArchSpec& spec, const ParamStore& params,
                                    const NeuralAutomorphism& a, int n_samples,
                                    uint64_t seed) {
    CompGraph g = build_computation_graph(spec, params);
    ParamStore permuted = apply_automorphism(params, g, a);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor x(spec.input_shape);
    double worst = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        for (double& v : x.data) v = dist(rng);
        Tensor y0 = forward(spec, params, x);
        Tensor y1 = forward(spec, permuted, x);
        for (size_t k = 0; k < y0.data.size(); ++k)
            worst = std::max(worst, std::fabs(y0.data[k] - y1.data[k]));
    }
    return worst;
}

NeuralAutomorphism compose(const NeuralAutomorphism& first, const NeuralAutomorphism& then) {
    NeuralAutomorphism out;
    out.node_perm.resize(first.node_perm.size());
    for (size_t i = 0; i < first.node_perm.size(); ++i)
        out.node_perm[i] = then.node_perm[first.node_perm[i]];
    return out;
}

NeuralAutomorphism inverse(const NeuralAutomorphism& a) {
    NeuralAutomorphism out;
    out.node_perm.resize(a.node_perm.size());
    for (size_t i = 0; i < a.node_perm.size(); ++i)
        out.node_perm[a.node_perm[i]] = static_cast<int>(i);
    return out;
}

}  // namespace gmn
