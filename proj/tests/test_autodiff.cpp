#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gmn/autodiff_train.hpp"

using namespace gmn;

static ArchSpec mlp(const std::vector<int>& widths, Act act = Act::Relu) {
    ArchSpec s;
    s.input_shape = {widths.front()};
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
        s.layers.push_back(Linear{widths[i], widths[i + 1], true});
        if (i + 2 < widths.size()) s.layers.push_back(Activation{act});
    }
    return s;
}

static double rel_err(double a, double b) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

TEST_CASE("mlp tape backward matches finite differences") {
    auto m = make_mlp({3, 5, 2}, Act::Relu, 3);
    Vec x = {0.3, -0.8, 1.1};
    Vec c = {0.7, -1.3};  // loss = c . y

    MlpTape tape;
    Vec y = mlp_forward_tape(m, x, tape);
    CHECK(y == mlp_apply(m, x));

    long long np = mlp_param_count(m);
    Vec gw(np, 0.0);
    Vec dx = mlp_backward(m, tape, c, gw.data());

    auto loss_at = [&](const MlpWeights& mm, const Vec& xx) {
        Vec yy = mlp_apply(mm, xx);
        double L = 0;
        for (size_t i = 0; i < yy.size(); ++i) L += c[i] * yy[i];
        return L;
    };

    const double h = 1e-6;
    // parameter gradient, layout w0,b0,w1,b1,...
    long long at = 0;
    for (size_t l = 0; l < m.w.size(); ++l) {
        for (auto* t : {&m.w[l], &m.b[l]}) {
            for (size_t i = 0; i < t->data.size(); ++i) {
                MlpWeights mp = m, mm2 = m;
                auto* tp = (t == &m.w[l]) ? &mp.w[l] : &mp.b[l];
                auto* tm = (t == &m.w[l]) ? &mm2.w[l] : &mm2.b[l];
                tp->data[i] += h;
                tm->data[i] -= h;
                double g = (loss_at(mp, x) - loss_at(mm2, x)) / (2 * h);
                CHECK(rel_err(gw[at], g) < 1e-4);
                at++;
            }
        }
    }
    CHECK(at == np);

    for (size_t i = 0; i < x.size(); ++i) {
        Vec xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        double g = (loss_at(m, xp) - loss_at(m, xm)) / (2 * h);
        CHECK(rel_err(dx[i], g) < 1e-4);
    }
}

static GraphView test_graph(uint64_t seed = 5) {
    auto spec = mlp({2, 3, 1});
    auto p = init_params(spec, seed);
    return view_of(build_computation_graph(spec, p));
}

static void check_metanet_grad(GnnConfig cfg, LossKind loss, uint64_t seed) {
    auto m = make_trainable_model(cfg, seed);
    auto g = test_graph(seed + 1);

    std::vector<GraphTarget> batch;
    Vec target(cfg.readout == Readout::PerEdge ? 0 : cfg.head_out, 0.5);
    if (cfg.readout == Readout::PerEdge) {
        auto out = forward_metanet(g, m);
        target.assign(out.per_edge.size(), 0.5);
    }
    batch.push_back({&g, target});

    Vec grad;
    double L0 = loss_and_grad(m, batch, loss, grad);
    Vec flat = flatten_params(m);
    REQUIRE(grad.size() == flat.size());

    std::mt19937_64 rng(seed + 7);
    const double h = 1e-5;
    int checked = 0;
    for (size_t trial = 0; trial < 150 && checked < 40; ++trial) {
        size_t i = rng() % flat.size();
        GnnModel mp = m, mm = m;
        Vec fp = flat, fm = flat;
        fp[i] += h;
        fm[i] -= h;
        load_flat_params(mp, fp);
        load_flat_params(mm, fm);
        Vec dummy;
        double Lp = loss_and_grad(mp, batch, loss, dummy);
        double Lm = loss_and_grad(mm, batch, loss, dummy);
        double g_num = (Lp - Lm) / (2 * h);
        if (std::abs(g_num) < 1e-10 && std::abs(grad[i]) < 1e-10) continue;
        CHECK(rel_err(grad[i], g_num) < 1e-4);
        checked++;
    }
    CHECK(checked >= 30);
    CHECK(std::isfinite(L0));
}

TEST_CASE("metanet gradients: pooled mse") {
    GnnConfig cfg;
    cfg.d_v = 6;
    cfg.d_e = 6;
    cfg.n_layers = 2;
    cfg.hidden = 6;
    check_metanet_grad(cfg, LossKind::Mse, 21);
}

TEST_CASE("metanet gradients: pooled bce on logits") {
    GnnConfig cfg;
    cfg.d_v = 6;
    cfg.d_e = 6;
    cfg.n_layers = 2;
    cfg.hidden = 6;
    check_metanet_grad(cfg, LossKind::BceWithSigmoid, 22);
}

TEST_CASE("metanet gradients: per-edge readout") {
    GnnConfig cfg;
    cfg.d_v = 5;
    cfg.d_e = 5;
    cfg.n_layers = 2;
    cfg.hidden = 5;
    cfg.readout = Readout::PerEdge;
    check_metanet_grad(cfg, LossKind::Mse, 23);
}

TEST_CASE("metanet gradients: with a global state") {
    GnnConfig cfg;
    cfg.d_v = 5;
    cfg.d_e = 5;
    cfg.d_u = 4;
    cfg.use_global = true;
    cfg.n_layers = 2;
    cfg.hidden = 5;
    check_metanet_grad(cfg, LossKind::Mse, 24);
}

TEST_CASE("bce loss value on a fixed logit") {
    GnnConfig cfg;
    cfg.d_v = 4;
    cfg.d_e = 4;
    cfg.n_layers = 1;
    cfg.hidden = 4;
    auto m = make_trainable_model(cfg, 2);
    auto g = test_graph(3);
    auto out = forward_metanet(g, m);
    double z = out.value[0];

    std::vector<GraphTarget> batch{{&g, {1.0}}};
    Vec grad;
    double L = loss_and_grad(m, batch, LossKind::BceWithSigmoid, grad);
    double sig = 1.0 / (1.0 + std::exp(-z));
    CHECK(L == doctest::Approx(-std::log(sig)).epsilon(1e-9));
}

TEST_CASE("sgd and adam steps") {
    GnnConfig cfg;
    cfg.d_v = 4;
    cfg.d_e = 4;
    cfg.n_layers = 1;
    cfg.hidden = 4;
    auto m = make_trainable_model(cfg, 1);
    Vec flat = flatten_params(m);
    Vec grad(flat.size());
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    for (auto& v : grad) v = nd(rng);

    OptimizerState sgd;
    sgd.kind = OptimizerState::Kind::Sgd;
    sgd.lr = 0.1;
    auto [m2, st2] = optimizer_step(m, grad, sgd);
    Vec f2 = flatten_params(m2);
    for (size_t i = 0; i < flat.size(); ++i)
        CHECK(f2[i] == doctest::Approx(flat[i] - 0.1 * grad[i]).epsilon(1e-12));

    OptimizerState adam;
    adam.lr = 0.01;
    auto [m3, st3] = optimizer_step(m, grad, adam);
    Vec f3 = flatten_params(m3);
    CHECK(st3.t == 1);
    for (size_t i = 0; i < flat.size(); ++i) {
        // bias-corrected first step moves by ~lr in the gradient direction
        double want = flat[i] - 0.01 * grad[i] / (std::abs(grad[i]) + 1e-8);
        CHECK(f3[i] == doctest::Approx(want).epsilon(1e-5));
    }
}

TEST_CASE("training loop fits a trivial pooled target") {
    auto spec = mlp({2, 3, 1});
    std::vector<TrainItem> train_set, val_set;
    for (int i = 0; i < 8; ++i) {
        auto p = init_params(spec, 100 + i);
        double target = (i % 2) ? 1.0 : 0.0;  // depends only on parameter values
        // make the two classes very different in scale
        if (i % 2)
            for (auto& [k, t] : p.tensors)
                for (auto& v : t.data) v *= 3.0;
        TrainItem it{view_of(build_computation_graph(spec, p)), {target}};
        (i < 6 ? train_set : val_set).push_back(std::move(it));
    }

    GnnConfig cfg;
    cfg.d_v = 8;
    cfg.d_e = 8;
    cfg.n_layers = 2;
    cfg.hidden = 8;
    auto model = make_trainable_model(cfg, 5);

    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 4;
    tc.lr = 1e-2;
    auto res = train(model, train_set, val_set, tc);
    REQUIRE(res.trace.size() == 60);
    CHECK(res.trace.back().train_loss < 0.25 * res.trace.front().train_loss);

    auto csv = trace_csv(res.trace);
    CHECK(csv.rfind("epoch,train_loss,val_loss,val_r2,val_tau", 0) == 0);
}

TEST_CASE("arch_backward matches finite differences across layer families") {
    std::vector<ArchSpec> specs;
    specs.push_back(mlp({3, 4, 2}));
    specs.push_back(mlp({2, 5, 3, 1}, Act::Sine));
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
        s.layers = {Conv{2, 1, 2, {2, 2}, 2, true}, Activation{Act::Sine}, Flatten{},
                    Linear{8, 1, true}};
        specs.push_back(s);
    }
    {
        ArchSpec s;
        s.input_shape = {4, 2};
        s.layers = {DeepSetsLinear{2, 3, 4}, Activation{Act::Relu}, Flatten{},
                    Linear{12, 2, false}};
        specs.push_back(s);
    }
    {
        ArchSpec s;
        s.input_shape = {3};
        s.layers = {Linear{3, 3, true}, Residual{{Linear{3, 3, true},
                                                  Activation{Act::Sine}}},
                    Linear{3, 1, true}};
        specs.push_back(s);
    }

    std::mt19937_64 rng(55);
    std::normal_distribution<double> nd;
    for (size_t k = 0; k < specs.size(); ++k) {
        const auto& s = specs[k];
        auto p = init_params(s, 300 + k);
        Tensor x(s.input_shape);
        for (auto& v : x.data) v = nd(rng);
        auto out_shape = output_shape(s);
        Tensor dy(out_shape);
        for (auto& v : dy.data) v = nd(rng);

        auto [gp, dx] = arch_backward(s, p, x, dy);

        auto loss_at = [&](const ParamStore& ps, const Tensor& xx) {
            auto y = forward(s, ps, xx);
            double L = 0;
            for (size_t i = 0; i < y.data.size(); ++i) L += dy.data[i] * y.data[i];
            return L;
        };

        const double h = 1e-5;
        for (auto& [key, t] : p.tensors) {
            auto& gt = gp.tensors.at(key);
            for (size_t i = 0; i < t.data.size(); ++i) {
                ParamStore pp = p, pm = p;
                pp.tensors.at(key).data[i] += h;
                pm.tensors.at(key).data[i] -= h;
                double g = (loss_at(pp, x) - loss_at(pm, x)) / (2 * h);
                CHECK(rel_err(gt.data[i], g) < 1e-4);
            }
        }
        for (size_t i = 0; i < x.data.size(); ++i) {
            Tensor xp = x, xm = x;
            xp.data[i] += h;
            xm.data[i] -= h;
            double g = (loss_at(p, xp) - loss_at(p, xm)) / (2 * h);
            CHECK(rel_err(dx.data[i], g) < 1e-4);
        }
    }
}

TEST_CASE("zero_like mirrors the parameter shapes") {
    ArchSpec s;
    s.input_shape = {1, 4, 4};
    s.layers = {Conv{2, 1, 2, {2, 2}, 2, true}, Activation{Act::Relu}, Flatten{},
                Linear{8, 1, true}};
    auto p = init_params(s, 1);
    auto z = zero_like(s);
    REQUIRE(z.tensors.size() == p.tensors.size());
    for (auto& [k, t] : z.tensors) {
        CHECK(t.shape == p.tensors.at(k).shape);
        for (double v : t.data) CHECK(v == 0.0);
    }
}

TEST_CASE("arch_backward rejects unsupported layers") {
    ArchSpec s;
    s.input_shape = {2, 4};
    s.layers = {MultiHeadAttention{4, 2, 2, true}};
    auto p = init_params(s, 1);
    Tensor x(s.input_shape), dy(s.input_shape);
    CHECK_THROWS_AS(arch_backward(s, p, x, dy), UnsupportedLayer);
}
