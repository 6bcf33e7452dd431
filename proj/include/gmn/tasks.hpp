#pragma once

#include <string>
#include <vector>

#include "gmn/autodiff_train.hpp"
#include "gmn/metrics.hpp"
#include "gmn/param_graph.hpp"

namespace gmn {

struct DatasetItem {
    ArchSpec spec;
    ParamStore params;
    Vec target;
    bool fit_failed = false;
};

struct NetworkDataset {
    std::string task;
    uint64_t seed = 0;
    std::vector<DatasetItem> items;
    std::vector<int> train_idx, val_idx, test_idx;
};

NetworkDataset gen_sinusoid_inrs(int n, uint64_t seed,
                                 const std::vector<int>& widths = {1, 8, 8, 1});

// width_scale scales every hidden width; use a different scale for an
// out-of-distribution split
NetworkDataset gen_tiny_classifiers(int n, uint64_t seed, int width_scale = 1);

struct EditDataset {
    NetworkDataset data;
    std::string description;
    double gamma_init = 0.01;
};
EditDataset gen_edit_dataset(int n, uint64_t seed);

void save_dataset(const NetworkDataset& ds, const std::string& dir);
NetworkDataset load_dataset(const std::string& dir);

// ---- parameter-store flattening (canonical tensor-map order) ---------------

Vec ps_flatten(const ParamStore& ps);
void ps_load(ParamStore& ps, const Vec& flat);

// ---- task drivers ------------------------------------------------------------

struct TaskEvalResult {
    double test_mse = 0;
    double test_r2 = 0;
    double test_tau = 0;
};

GraphView dataset_view(const DatasetItem& item);  // undirected parameter graph

TaskEvalResult run_gmn_regression(const NetworkDataset& ds, const GnnConfig& gcfg,
                                  const TrainConfig& tcfg, GnnModel* out_model = nullptr);
TaskEvalResult eval_gmn(const GnnModel& model, const NetworkDataset& ds,
                        const std::vector<int>& idx, bool sigmoid_out);

TaskEvalResult run_deepsets_baseline(const NetworkDataset& ds, const TrainConfig& tcfg,
                                     int hidden, uint64_t seed);
TaskEvalResult run_flat_mlp_baseline(const NetworkDataset& ds, const TrainConfig& tcfg,
                                     int hidden, uint64_t seed);

struct EditResult {
    double initial_mse = 0;
    double final_mse = 0;
    Vec gamma;
};
EditResult run_edit_task(const EditDataset& ds, const GnnConfig& gcfg,
                         const TrainConfig& tcfg);

// functional mse of an INR's parameters against amplitude-doubled a*sin(bx)
double edit_functional_mse(const ArchSpec& spec, const ParamStore& params, double a,
                           double b);

}  // namespace gmn
