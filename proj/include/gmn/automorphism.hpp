#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "gmn/compute_graph.hpp"

namespace gmn {

struct NeuralAutomorphism {
    std::vector<int> node_perm;  // phi: node id -> node id

    // induced map on edges: (i <- j) goes to (phi(i) <- phi(j))
    std::pair<int, int> edge_image(const CompEdge& e) const {
        return {node_perm[e.src], node_perm[e.dst]};
    }
    bool operator==(const NeuralAutomorphism&) const = default;
    bool operator<(const NeuralAutomorphism& o) const { return node_perm < o.node_perm; }
};

bool is_automorphism(const CompGraph& g, const std::vector<int>& perm);

struct EnumLimits {
    int max_count = 1 << 20;
    long long candidate_bound = 4000000;  // upper estimate of search-tree leaves
};
std::vector<NeuralAutomorphism> enumerate_automorphisms(const CompGraph& g,
                                                        EnumLimits limits = {});

std::vector<NeuralAutomorphism> mlp_hidden_automorphisms(const ArchSpec& spec,
                                                         const CompGraph& g);
std::vector<NeuralAutomorphism> cnn_channel_automorphisms(const ArchSpec& spec,
                                                          const CompGraph& g);

ParamStore apply_automorphism(const ParamStore& params, const CompGraph& g,
                              const NeuralAutomorphism& a);

double verify_function_preservation(const ArchSpec& spec, const ParamStore& params,
                                    const NeuralAutomorphism& a, int n_samples,
                                    uint64_t seed);

NeuralAutomorphism compose(const NeuralAutomorphism& first, const NeuralAutomorphism& then);
NeuralAutomorphism inverse(const NeuralAutomorphism& a);

}  // namespace gmn
