#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include "gmn/compute_graph.hpp"

using namespace gmn;

static ArchSpec strided_conv() {
    ArchSpec s;
    s.input_shape = {1, 4, 4};
    s.layers = {Conv{2, 1, 1, {2, 2}, 2, false}};
    return s;
}

TEST_CASE("stride-2 conv on 4x4: 16 edges in 4 share classes") {
    auto s = strided_conv();
    auto p = init_params(s, 11);
    auto g = build_computation_graph(s, p);

    CHECK(g.d_in == 16);
    CHECK(g.d_out == 4);
    CHECK(g.edges.size() == 16);

    std::set<int> classes;
    std::map<int, double> class_weight;
    for (const auto& e : g.edges) {
        classes.insert(e.share_class);
        auto it = class_weight.find(e.share_class);
        if (it == class_weight.end())
            class_weight[e.share_class] = e.weight;
        else
            CHECK(it->second == e.weight);  // share class => identical weight
        REQUIRE(e.param.has_value());
    }
    CHECK(classes.size() == 4);

    // every kernel scalar backs exactly 4 edges
    std::map<long long, int> uses;
    for (const auto& e : g.edges) uses[e.param->flat_index]++;
    CHECK(uses.size() == 4);
    for (auto& [idx, n] : uses) CHECK(n == 4);
}

TEST_CASE("kernel [[1,0],[0,0]] subsamples the image") {
    auto s = strided_conv();
    ParamStore p;
    p.set(0, ParamName::Weight, Tensor({1, 1, 2, 2}, {1, 0, 0, 0}));
    auto g = build_computation_graph(s, p);

    Tensor img({1, 4, 4});
    for (int i = 0; i < 16; ++i) img.data[i] = double(i + 1);
    auto y = eval_computation_graph(g, img);
    // stride-2 top-left taps: positions (0,0),(0,2),(2,0),(2,2)
    CHECK(y.data == std::vector<double>{1, 3, 9, 11});

    auto ref = forward(s, p, img);
    CHECK(y.data == ref.data);
}

TEST_CASE("dense layer edge counts, singleton classes") {
    ArchSpec s;
    s.input_shape = {2};
    s.layers = {Linear{2, 3, true}};
    auto p = init_params(s, 2);
    auto g = build_computation_graph(s, p);

    int weight_edges = 0, bias_edges = 0;
    std::map<int, int> class_sizes;
    for (const auto& e : g.edges) {
        class_sizes[e.share_class]++;
        REQUIRE(e.param.has_value());
        if (e.param->name == ParamName::Weight) weight_edges++;
        if (e.param->name == ParamName::Bias) bias_edges++;
    }
    CHECK(weight_edges == 6);
    CHECK(bias_edges == 3);
    for (auto& [c, n] : class_sizes) CHECK(n == 1);

    int bias_nodes = 0;
    for (const auto& n : g.nodes)
        if (n.kind == NodeKind::Bias) bias_nodes++;
    CHECK(bias_nodes == 1);  // one bias node per layer
}

TEST_CASE("residual skip edges carry weight 1 and no param") {
    ArchSpec s;
    s.input_shape = {2};
    s.layers = {Residual{{Linear{2, 2, false}}}};
    auto p = init_params(s, 5);
    auto g = build_computation_graph(s, p);

    int param_edges = 0, skip_edges = 0;
    for (const auto& e : g.edges) {
        if (e.param) {
            param_edges++;
        } else {
            skip_edges++;
            CHECK(e.weight == 1.0);
        }
    }
    CHECK(param_edges == 4);
    CHECK(skip_edges == 2);
}

TEST_CASE("zero weights and relu give zero output") {
    ArchSpec s;
    s.input_shape = {3};
    s.layers = {Linear{3, 4, true}, Activation{Act::Relu}, Linear{4, 2, true}};
    ParamStore p = init_params(s, 1);
    for (auto& [k, t] : p.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
    auto g = build_computation_graph(s, p);
    auto y = eval_computation_graph(g, Tensor({3}, {1, -2, 3}));
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("evaluation matches the reference forward pass") {
    std::vector<ArchSpec> specs;
    {
        ArchSpec s;
        s.input_shape = {3};
        s.layers = {Linear{3, 5, true}, Activation{Act::Relu}, Linear{5, 4, true},
                    Activation{Act::Sine}, Linear{4, 2, true}};
        specs.push_back(s);
    }
    {
        ArchSpec s;
        s.input_shape = {2, 6};
        s.layers = {Conv{1, 2, 3, {3}, 1, true}, Activation{Act::Relu}, Flatten{},
                    Linear{12, 2, true}};
        specs.push_back(s);
    }
    {
        ArchSpec s;
        s.input_shape = {1, 5, 5};
        s.layers = {Conv{2, 1, 2, {2, 2}, 1, true}, Activation{Act::Relu},
                    Conv{2, 2, 1, {2, 2}, 2, false}, Flatten{}, Linear{4, 3, true}};
        specs.push_back(s);
    }
    {
        ArchSpec s;
        s.input_shape = {3};
        s.layers = {Linear{3, 3, true}, Residual{{Linear{3, 3, true},
                                                  Activation{Act::Relu},
                                                  Linear{3, 3, true}}},
                    Activation{Act::Relu}, Linear{3, 1, true}};
        specs.push_back(s);
    }

    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd;
    for (size_t k = 0; k < specs.size(); ++k) {
        const auto& s = specs[k];
        auto p = init_params(s, 100 + k);
        auto g = build_computation_graph(s, p);
        for (int t = 0; t < 20; ++t) {
            Tensor x(s.input_shape);
            for (auto& v : x.data) v = nd(rng);
            auto a = eval_computation_graph(g, x);
            auto b = forward(s, p, x);
            REQUIRE(a.data.size() == b.data.size());
            for (size_t i = 0; i < a.data.size(); ++i)
                CHECK(std::abs(a.data[i] - b.data[i]) < 1e-9);
        }
    }
}

TEST_CASE("mutating one parameter moves exactly its bound edges") {
    auto s = strided_conv();
    auto p = init_params(s, 21);
    auto g0 = build_computation_graph(s, p);

    ParamId target{0, ParamName::Weight, 2};
    ParamStore q = p;
    q.set_scalar(target, q.get_scalar(target) + 1.0);
    auto g1 = build_computation_graph(s, q);

    REQUIRE(g0.edges.size() == g1.edges.size());
    for (size_t i = 0; i < g0.edges.size(); ++i) {
        bool bound = g0.edges[i].param && *g0.edges[i].param == target;
        if (bound)
            CHECK(g1.edges[i].weight == g0.edges[i].weight + 1.0);
        else
            CHECK(g1.edges[i].weight == g0.edges[i].weight);
    }
}

TEST_CASE("graph structure: DAG order, layer numbers, bias degrees") {
    ArchSpec s;
    s.input_shape = {2};
    s.layers = {Linear{2, 3, true}, Activation{Act::Relu}, Linear{3, 1, true}};
    auto p = init_params(s, 4);
    auto g = build_computation_graph(s, p);

    std::vector<int> indeg(g.nodes.size(), 0), outdeg(g.nodes.size(), 0);
    for (const auto& e : g.edges) {
        CHECK(g.nodes[e.src].layer_number < g.nodes[e.dst].layer_number);
        indeg[e.dst]++;
        outdeg[e.src]++;
    }
    for (const auto& n : g.nodes) {
        if (n.kind == NodeKind::Input) CHECK(n.layer_number == 0);
        if (n.kind == NodeKind::Bias) {
            CHECK(indeg[n.id] == 0);
            CHECK(outdeg[n.id] >= 1);
        }
        if (n.kind != NodeKind::Input && n.kind != NodeKind::Bias)
            CHECK(indeg[n.id] >= 1);  // reachable from earlier layers
    }
}

TEST_CASE("unsupported layers are rejected") {
    ArchSpec s;
    s.input_shape = {2, 4};
    s.layers = {MultiHeadAttention{4, 2, 2, true}};
    auto p = init_params(s, 0);
    CHECK_THROWS_AS(build_computation_graph(s, p), UnsupportedForComputationGraph);

    ArchSpec n;
    n.input_shape = {3};
    n.layers = {Norm{NormKind::Layer, 1, 3}};
    auto pn = init_params(n, 0);
    CHECK_THROWS_AS(build_computation_graph(n, pn), UnsupportedForComputationGraph);
}

TEST_CASE("json and dot exports mention every node") {
    ArchSpec s;
    s.input_shape = {2};
    s.layers = {Linear{2, 2, true}};
    auto p = init_params(s, 3);
    auto g = build_computation_graph(s, p);
    auto js = comp_graph_to_json(g);
    auto dot = comp_graph_to_dot(g);
    CHECK(js.find("\"edges\"") != std::string::npos);
    for (const auto& n : g.nodes)
        CHECK(dot.find("n" + std::to_string(n.id)) != std::string::npos);
}
