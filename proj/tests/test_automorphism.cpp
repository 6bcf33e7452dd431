#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "gmn/automorphism.hpp"

using namespace gmn;

static ArchSpec mlp(const std::vector<int>& widths) {
    ArchSpec s;
    s.input_shape = {widths.front()};
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
        s.layers.push_back(Linear{widths[i], widths[i + 1], true});
        if (i + 2 < widths.size()) s.layers.push_back(Activation{Act::Relu});
    }
    return s;
}

static long long fact(int n) {
    long long f = 1;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
}

// closure of a generator set under composition, starting from the identity
static std::set<NeuralAutomorphism> closure(const std::vector<NeuralAutomorphism>& gens,
                                            size_t n_nodes) {
    NeuralAutomorphism id;
    id.node_perm.resize(n_nodes);
    for (size_t i = 0; i < n_nodes; ++i) id.node_perm[i] = int(i);
    std::set<NeuralAutomorphism> group{id};
    std::vector<NeuralAutomorphism> frontier{id};
    while (!frontier.empty()) {
        std::vector<NeuralAutomorphism> next;
        for (const auto& a : frontier)
            for (const auto& g : gens) {
                auto c = compose(a, g);
                if (group.insert(c).second) next.push_back(c);
            }
        frontier = std::move(next);
    }
    return group;
}

TEST_CASE("tiny MLP symmetry group orders match the factorial product") {
    struct Case {
        std::vector<int> widths;
        long long order;
    };
    std::vector<Case> cases = {
        {{3, 2, 1}, 2},
        {{2, 3, 3, 1}, 36},
        {{1, 4, 1}, 24},
        {{2, 2, 2, 2}, 4},
    };
    for (const auto& c : cases) {
        // oracle: product of hidden-width factorials (Prop. 5)
        long long expect = 1;
        for (size_t i = 1; i + 1 < c.widths.size(); ++i) expect *= fact(c.widths[i]);
        REQUIRE(expect == c.order);

        auto s = mlp(c.widths);
        auto p = init_params(s, 17);
        auto g = build_computation_graph(s, p);
        auto autos = enumerate_automorphisms(g);
        CHECK((long long)autos.size() == c.order);
        for (const auto& a : autos) CHECK(is_automorphism(g, a.node_perm));

        // identity sorts first
        bool id_first = true;
        for (size_t i = 0; i < autos[0].node_perm.size(); ++i)
            if (autos[0].node_perm[i] != int(i)) id_first = false;
        CHECK(id_first);
    }
}

TEST_CASE("generator closure reproduces the enumerated group") {
    auto s = mlp({2, 3, 3, 1});
    auto p = init_params(s, 8);
    auto g = build_computation_graph(s, p);

    auto gens = mlp_hidden_automorphisms(s, g);
    CHECK(gens.size() == 4);  // adjacent transpositions: 2 per 3-wide layer
    for (const auto& a : gens) CHECK(is_automorphism(g, a.node_perm));

    auto grp = closure(gens, g.nodes.size());
    auto autos = enumerate_automorphisms(g);
    CHECK(grp.size() == autos.size());
    for (const auto& a : autos) CHECK(grp.count(a) == 1);
}

TEST_CASE("cnn channel swap is the only symmetry") {
    ArchSpec s;
    s.input_shape = {1, 4, 4};
    s.layers = {Conv{2, 1, 2, {2, 2}, 2, true}, Activation{Act::Relu}, Flatten{},
                Linear{8, 1, true}};
    auto p = init_params(s, 23);
    auto g = build_computation_graph(s, p);

    auto gens = cnn_channel_automorphisms(s, g);
    CHECK(gens.size() == 1);
    for (const auto& a : gens) CHECK(is_automorphism(g, a.node_perm));

    auto autos = enumerate_automorphisms(g);
    CHECK(autos.size() == 2);  // identity + channel swap (Prop. 6)
    CHECK(closure(gens, g.nodes.size()).size() == 2);
}

TEST_CASE("non-automorphism permutations are rejected") {
    auto s = mlp({3, 2, 1});
    auto p = init_params(s, 3);
    auto g = build_computation_graph(s, p);

    // swapping an input with a hidden node violates the label constraints
    std::vector<int> perm(g.nodes.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = int(i);
    std::swap(perm[g.input_nodes[0]], perm[g.output_nodes[0]]);
    CHECK_FALSE(is_automorphism(g, perm));

    std::vector<int> bad(g.nodes.size(), 0);
    CHECK_THROWS_AS(is_automorphism(g, bad), NotABijection);

    std::vector<int> short_perm(2, 0);
    CHECK_THROWS_AS(is_automorphism(g, short_perm), NotABijection);
}

TEST_CASE("share classes constrain conv symmetries") {
    // a pure conv layer keeps spatial structure rigid: no non-trivial symmetry
    ArchSpec s;
    s.input_shape = {1, 4, 4};
    s.layers = {Conv{2, 1, 1, {2, 2}, 2, false}};
    auto p = init_params(s, 4);
    auto g = build_computation_graph(s, p);
    auto autos = enumerate_automorphisms(g);
    CHECK(autos.size() == 1);
}

TEST_CASE("apply_automorphism permutes parameters consistently") {
    auto s = mlp({3, 4, 2});
    auto p = init_params(s, 31);
    auto g = build_computation_graph(s, p);
    auto autos = enumerate_automorphisms(g);
    REQUIRE(autos.size() == 24);

    for (size_t k = 0; k < autos.size(); k += 5) {
        const auto& a = autos[k];
        auto q = apply_automorphism(p, g, a);
        CHECK(q.scalar_count() == p.scalar_count());
        // multiset of scalars is preserved
        std::multiset<double> mp, mq;
        for (auto& [key, t] : p.tensors) mp.insert(t.data.begin(), t.data.end());
        for (auto& [key, t] : q.tensors) mq.insert(t.data.begin(), t.data.end());
        CHECK(mp == mq);
        // applying the inverse restores the original store
        auto r = apply_automorphism(q, g, inverse(a));
        CHECK(r == p);
    }
}

TEST_CASE("automorphisms preserve the network function") {
    auto s = mlp({2, 3, 3, 1});
    auto p = init_params(s, 77);
    auto g = build_computation_graph(s, p);
    auto autos = enumerate_automorphisms(g);
    for (const auto& a : autos) {
        double dev = verify_function_preservation(s, p, a, 20, 5);
        CHECK(dev < 1e-9);
    }
}

TEST_CASE("negative control: a label-respecting non-automorphism breaks the function") {
    auto s = mlp({2, 3, 1});
    auto p = init_params(s, 13);
    auto g = build_computation_graph(s, p);

    // permute hidden neurons in W1 only (not W2): not an automorphism image
    ParamStore q = p;
    auto& w1 = q.get(0, ParamName::Weight);
    std::swap(w1.data[0], w1.data[3]);
    std::swap(w1.data[1], w1.data[4]);
    std::swap(w1.data[2], w1.data[5]);

    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    double worst = 0;
    for (int t = 0; t < 20; ++t) {
        Tensor x({2}, {nd(rng), nd(rng)});
        auto ya = forward(s, p, x);
        auto yb = forward(s, q, x);
        worst = std::max(worst, std::abs(ya.data[0] - yb.data[0]));
    }
    CHECK(worst > 1e-6);
}

TEST_CASE("group laws: composition closed, inverse works") {
    auto s = mlp({1, 3, 1});
    auto p = init_params(s, 2);
    auto g = build_computation_graph(s, p);
    auto autos = enumerate_automorphisms(g);
    REQUIRE(autos.size() == 6);
    std::set<NeuralAutomorphism> grp(autos.begin(), autos.end());

    for (const auto& a : autos)
        for (const auto& b : autos) {
            auto c = compose(a, b);
            CHECK(grp.count(c) == 1);
        }
    for (const auto& a : autos) {
        auto e = compose(a, inverse(a));
        for (size_t i = 0; i < e.node_perm.size(); ++i) CHECK(e.node_perm[i] == int(i));
    }
}

TEST_CASE("enumeration bails out on huge groups") {
    auto s = mlp({1, 8, 8, 1});  // 8!·8! candidate leaves
    auto p = init_params(s, 1);
    auto g = build_computation_graph(s, p);
    EnumLimits tight;
    tight.candidate_bound = 1000;
    CHECK_THROWS_AS(enumerate_automorphisms(g, tight), TooLarge);

    EnumLimits few;
    few.max_count = 10;
    CHECK_THROWS_AS(enumerate_automorphisms(g, few), TooLarge);
}

TEST_CASE("wrong family rejected by the closed-form generators") {
    ArchSpec s;
    s.input_shape = {1, 4, 4};
    s.layers = {Conv{2, 1, 2, {2, 2}, 2, true}};
    auto p = init_params(s, 3);
    auto g = build_computation_graph(s, p);
    CHECK_THROWS_AS(mlp_hidden_automorphisms(s, g), WrongFamily);

    auto m = mlp({2, 3, 1});
    auto pm = init_params(m, 3);
    auto gm = build_computation_graph(m, pm);
    CHECK_THROWS_AS(cnn_channel_automorphisms(m, gm), WrongFamily);
}
