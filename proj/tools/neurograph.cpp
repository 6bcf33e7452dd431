// neurograph: turn feedforward nets into graphs, check their symmetries, and
// run/train graph metanetworks on them.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gmn/automorphism.hpp"
#include "gmn/compute_graph.hpp"
#include "gmn/gnn.hpp"
#include "gmn/graph_view.hpp"
#include "gmn/param_graph.hpp"
#include "gmn/tasks.hpp"

using nlohmann::json;
using namespace gmn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitInput = 2;
constexpr int kExitUnsupported = 3;
constexpr int kExitInternal = 4;

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

std::pair<ArchSpec, ParamStore> read_net(const std::string& path) {
    return arch_from_json(slurp(path));
}

int max_threads() {
    const char* env = std::getenv("NEUROGRAPH_THREADS");
    if (!env) return 0;
    int n = std::atoi(env);
    return n > 0 ? n : 0;
}

// key=value config files; [section] headers and # comments are skipped
std::map<std::string, std::string> parse_config(const std::string& path) {
    std::map<std::string, std::string> kv;
    std::ifstream f(path);
    if (!f) throw Error("cannot open config " + path);
    std::string line;
    while (std::getline(f, line)) {
        size_t h = line.find('#');
        if (h != std::string::npos) line = line.substr(0, h);
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty() || line.front() == '[') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw Error("bad config line: " + line);
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

struct CommonOpts {
    bool json_out = false;
    uint64_t seed = 0;
};

void echo_config(const CommonOpts& c, const std::map<std::string, std::string>& resolved) {
    if (c.json_out) return;  // folded into the final JSON object instead
    std::cout << "config:";
    for (const auto& [k, v] : resolved) std::cout << ' ' << k << '=' << v;
    std::cout << '\n';
}

int cmd_build_graph(const std::string& net_path, const std::string& kind,
                    const std::string& out_path, const std::string& format,
                    const CommonOpts& c) {
    auto [spec, params] = read_net(net_path);
    echo_config(c, {{"net", net_path}, {"kind", kind}, {"out", out_path},
                    {"format", format}});
    json report;
    std::string payload;
    if (kind == "computation") {
        CompGraph g = build_computation_graph(spec, params);
        payload = format == "dot" ? comp_graph_to_dot(g) : comp_graph_to_json(g);
        report = {{"kind", kind},
                  {"nodes", g.nodes.size()},
                  {"edges", g.edges.size()},
                  {"share_classes", g.share_class_count},
                  {"params", count_params(spec)}};
    } else {
        ParamGraph g = build_param_graph(spec, params);
        payload = export_graph(g, format == "dot" ? ExportFormat::Dot : ExportFormat::Json);
        long long weight_edges = 0;
        for (const PGEdge& e : g.edges)
            if (e.feat.type == PEdgeType::Weight) weight_edges++;
        report = {{"kind", kind},
                  {"nodes", g.nodes.size()},
                  {"edges", g.edges.size()},
                  {"weight_edges", weight_edges},
                  {"params", count_params(spec)}};
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) throw Error("cannot write " + out_path);
        f << payload;
    } else if (!c.json_out) {
        std::cout << payload << '\n';
    }
    if (c.json_out)
        std::cout << report.dump() << '\n';
    else
        std::cout << report["nodes"].get<long long>() << " nodes, "
                  << report["edges"].get<long long>() << " edges, "
                  << report["params"].get<long long>() << " parameters\n";
    return kExitOk;
}

int cmd_verify_symmetry(const std::string& net_path, int samples, int max_autos,
                        const CommonOpts& c) {
    auto [spec, params] = read_net(net_path);
    echo_config(c, {{"net", net_path},
                    {"samples", std::to_string(samples)},
                    {"max_autos", std::to_string(max_autos)}});
    CompGraph g = build_computation_graph(spec, params);
    EnumLimits limits;
    limits.max_count = max_autos;
    std::vector<NeuralAutomorphism> autos = enumerate_automorphisms(g, limits);
    double worst = 0.0;
    for (const NeuralAutomorphism& a : autos)
        worst = std::max(worst,
                         verify_function_preservation(spec, params, a, samples, c.seed));
    json report;
    report["group_order"] = autos.size();
    report["max_deviation"] = worst;
    report["generators"] = json::array();
    int shown = 0;
    for (const NeuralAutomorphism& a : autos) {
        bool identity = true;
        for (size_t i = 0; i < a.node_perm.size(); ++i)
            if (a.node_perm[i] != static_cast<int>(i)) identity = false;
        if (identity) continue;
        report["generators"].push_back(a.node_perm);
        if (++shown >= 8) break;
    }
    std::cout << report.dump() << '\n';
    return worst > 1e-6 ? kExitVerifyFail : kExitOk;
}

int cmd_simulate_forward(const std::string& net_path, const std::string& x_path,
                         const CommonOpts& c) {
    auto [spec, params] = read_net(net_path);
    json xj = json::parse(slurp(x_path));
    Vec x = xj.is_array() ? xj.get<Vec>() : xj.at("data").get<Vec>();
    echo_config(c, {{"net", net_path}, {"x", x_path}});

    Tensor xt(spec.input_shape);
    if (xt.data.size() != x.size()) throw Error("input size mismatch");
    xt.data = x;
    Tensor ref = forward(spec, params, xt);

    CompGraph g = build_computation_graph(spec, params);
    GnnModel sim = build_forward_sim_gnn(g);
    MetanetOutput out = forward_metanet(view_of(g), sim, &x);

    double dev = 0.0;
    for (size_t i = 0; i < ref.data.size(); ++i)
        dev = std::max(dev, std::fabs(ref.data[i] - out.value[i]));
    json report = {{"simulated", out.value}, {"reference", ref.data},
                   {"max_deviation", dev}};
    std::cout << report.dump() << '\n';
    return kExitOk;
}

int cmd_gen_data(const std::string& task, int n, uint64_t seed, const std::string& out_dir,
                 const CommonOpts& c) {
    echo_config(c, {{"task", task}, {"n", std::to_string(n)},
                    {"seed", std::to_string(seed)}, {"out", out_dir}});
    NetworkDataset ds;
    if (task == "inr") {
        ds = gen_sinusoid_inrs(n, seed);
    } else if (task == "acc") {
        ds = gen_tiny_classifiers(n, seed);
    } else if (task == "edit") {
        ds = gen_edit_dataset(n, seed).data;
    } else {
        throw Error("unknown task " + task);
    }
    save_dataset(ds, out_dir);
    int failed = 0;
    for (const DatasetItem& i : ds.items) failed += i.fit_failed ? 1 : 0;
    json report = {{"task", task}, {"items", ds.items.size()}, {"fit_failed", failed},
                   {"dir", out_dir}};
    std::cout << report.dump() << '\n';
    return kExitOk;
}

int cmd_train(const std::string& task, const std::string& data_dir,
              const std::string& model_out, const std::string& trace_out,
              const TrainConfig& tcfg, const GnnConfig& gcfg, const CommonOpts& c) {
    echo_config(c, {{"task", task},
                    {"data", data_dir},
                    {"epochs", std::to_string(tcfg.epochs)},
                    {"lr", std::to_string(tcfg.lr)},
                    {"batch_size", std::to_string(tcfg.batch_size)},
                    {"seed", std::to_string(tcfg.seed)},
                    {"loss", to_string(tcfg.loss)}});
    NetworkDataset ds = load_dataset(data_dir);
    if (ds.items.empty()) throw Error("dataset is empty");

    if (task == "edit") {
        EditDataset ed;
        ed.data = ds;
        ed.description = "amplitude doubling";
        EditResult res = run_edit_task(ed, gcfg, tcfg);
        json report = {{"initial_mse", res.initial_mse}, {"final_mse", res.final_mse}};
        std::cout << report.dump() << '\n';
        return kExitOk;
    }

    GnnConfig cfg = gcfg;
    cfg.head_out = static_cast<int>(ds.items[0].target.size());
    TrainConfig tc = tcfg;
    if (task == "acc") tc.loss = LossKind::BceWithSigmoid;

    GnnModel model = make_trainable_model(cfg, tc.seed);
    std::vector<TrainItem> train_set, val_set;
    for (int i : ds.train_idx)
        if (!ds.items[i].fit_failed)
            train_set.push_back({dataset_view(ds.items[i]), ds.items[i].target});
    for (int i : ds.val_idx)
        if (!ds.items[i].fit_failed)
            val_set.push_back({dataset_view(ds.items[i]), ds.items[i].target});
    TrainResult tr = train(std::move(model), train_set, val_set, tc);

    if (!model_out.empty()) save_model(tr.model, model_out);
    if (!trace_out.empty()) {
        std::ofstream f(trace_out);
        f << trace_csv(tr.trace);
    }
    const EpochMetrics& last = tr.trace.back();
    json report = {{"epochs", tr.trace.size()},
                   {"final_train_loss", last.train_loss},
                   {"final_val_loss", last.val_loss},
                   {"final_val_r2", last.val_r2},
                   {"final_val_tau", last.val_tau},
                   {"model", model_out},
                   {"trace", trace_out}};
    std::cout << report.dump() << '\n';
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const CommonOpts& c) {
    echo_config(c, {{"model", model_path}, {"data", data_dir}});
    NetworkDataset ds = load_dataset(data_dir);
    if (ds.items.empty()) throw Error("dataset is empty");
    GnnModel model = load_model(model_path);
    TaskEvalResult res = eval_gmn(model, ds, ds.test_idx, ds.task == "acc");
    json report = {{"task", ds.task}, {"test_mse", res.test_mse}};
    if (ds.task == "acc") {
        report["test_r2"] = res.test_r2;
        report["test_tau"] = res.test_tau;
    }
    std::cout << report.dump() << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"graph metanetworks for processing neural network parameters"};
    app.require_subcommand(1);
    (void)max_threads();  // NEUROGRAPH_THREADS caps worker threads

    CommonOpts common;
    app.add_flag("--json", common.json_out, "machine-parseable JSON output");
    app.add_option("--seed", common.seed, "global random seed");

    std::string net_path, out_path, format = "json", kind = "param";
    auto* build = app.add_subcommand("build-graph", "expand a network into a graph");
    build->add_option("net", net_path, "network JSON file")->required();
    build->add_option("--kind", kind, "param|computation")
        ->check(CLI::IsMember({"param", "computation"}));
    build->add_option("--out", out_path, "output file (stdout if omitted)");
    build->add_option("--format", format, "json|dot")
        ->check(CLI::IsMember({"json", "dot"}));

    int samples = 20, max_autos = 10000;
    auto* verify = app.add_subcommand("verify-symmetry",
                                      "enumerate automorphisms and check they preserve the function");
    verify->add_option("net", net_path, "network JSON file")->required();
    verify->add_option("--samples", samples, "random inputs per automorphism");
    verify->add_option("--max-autos", max_autos, "cap on enumerated automorphisms");

    std::string x_path;
    auto* sim = app.add_subcommand("simulate-forward",
                                   "run the forward-simulation metanet against the "
                                   "reference forward pass");
    sim->add_option("net", net_path, "network JSON file")->required();
    sim->add_option("x", x_path, "input JSON (array)")->required();

    std::string task = "inr", data_dir, config_path, model_path, trace_path;
    int gen_n = 50;
    auto* gen = app.add_subcommand("gen-data", "generate a task dataset");
    gen->add_option("--task", task, "inr|acc|edit")
        ->check(CLI::IsMember({"inr", "acc", "edit"}));
    gen->add_option("--n", gen_n, "number of networks");
    gen->add_option("--out", data_dir, "output directory")->required();

    TrainConfig tcfg;
    GnnConfig gcfg;
    auto* tr = app.add_subcommand("train", "train a graph metanetwork");
    tr->add_option("--task", task, "inr|acc|edit");
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--config", config_path, "key=value config file");
    auto* opt_epochs = tr->add_option("--epochs", tcfg.epochs, "training epochs");
    auto* opt_lr = tr->add_option("--lr", tcfg.lr, "learning rate");
    auto* opt_batch = tr->add_option("--batch-size", tcfg.batch_size, "batch size");
    auto* opt_layers = tr->add_option("--layers", gcfg.n_layers, "metanet depth");
    auto* opt_hidden = tr->add_option("--hidden", gcfg.hidden, "update MLP width");
    tr->add_option("--model-out", model_path, "checkpoint path");
    tr->add_option("--trace-out", trace_path, "metric trace CSV path");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--model", model_path, "checkpoint path")->required();
    ev->add_option("--data", data_dir, "dataset directory");

    // let --json / --seed appear after the subcommand as well
    for (auto* sc : app.get_subcommands(nullptr)) sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitInput;
    }

    try {
        if (!config_path.empty()) {
            // flags win over config-file values
            for (const auto& [key, value] : parse_config(config_path)) {
                if (key == "epochs" && opt_epochs->count() == 0)
                    tcfg.epochs = std::stoi(value);
                else if (key == "lr" && opt_lr->count() == 0)
                    tcfg.lr = std::stod(value);
                else if (key == "batch_size" && opt_batch->count() == 0)
                    tcfg.batch_size = std::stoi(value);
                else if (key == "layers" && opt_layers->count() == 0)
                    gcfg.n_layers = std::stoi(value);
                else if (key == "hidden" && opt_hidden->count() == 0)
                    gcfg.hidden = std::stoi(value);
                else if (key == "seed")
                    common.seed = std::stoull(value);
                else if (key == "epochs" || key == "lr" || key == "batch_size" ||
                         key == "layers" || key == "hidden") {
                    // flag provided; config value ignored
                } else {
                    throw Error("unknown config key: " + key);
                }
            }
        }
        tcfg.seed = common.seed;

        if (build->parsed())
            return cmd_build_graph(net_path, kind, out_path, format, common);
        if (verify->parsed())
            return cmd_verify_symmetry(net_path, samples, max_autos, common);
        if (sim->parsed()) return cmd_simulate_forward(net_path, x_path, common);
        if (gen->parsed()) return cmd_gen_data(task, gen_n, common.seed, data_dir, common);
        if (tr->parsed())
            return cmd_train(task, data_dir, model_path, trace_path, tcfg, gcfg, common);
        if (ev->parsed()) return cmd_eval(model_path, data_dir, common);
    } catch (const UnsupportedLayer& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUnsupported;
    } catch (const UnsupportedForComputationGraph& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUnsupported;
    } catch (const UnsupportedNonlinearity& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUnsupported;
    } catch (const TooLarge& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUnsupported;
    } catch (const SharingViolation& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInternal;
    } catch (const NotABijection& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInternal;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitOk;
}
