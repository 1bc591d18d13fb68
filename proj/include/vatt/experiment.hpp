#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vatt/metrics.hpp"
#include "vatt/phantom.hpp"
#include "vatt/toy_model.hpp"

namespace vatt {

inline constexpr int kExperimentEpochs = 60;
inline constexpr double kExperimentLr = 0.5;

// One experiment = train + evaluate the toy model over k paired seeds.
// Phantom draws and model init depend only on (base_seed, seed index), so
// every (mode, bag) cell sees identical data and identical backbone init.
struct ExperimentConfig {
    AttnMode mode = AttnMode::both;
    int bag_size = 9;
    int seeds = 5;
    std::uint64_t base_seed = 12;
    int epochs = kExperimentEpochs;
    double lr = kExperimentLr;
    int train_cases = 1;
    int eval_cases = 2;
    PhantomConfig phantom;  // template; per-draw seeds overwrite phantom.seed

    void validate() const;
};

struct SeedOutcome {
    int seed_index = 0;
    double dice = 0.0;
    bool trend_ok = false;
    MetricsReport report;
    std::vector<double> loss_curve;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<SeedOutcome> outcomes;
    double median_dice = 0.0;
};

// Sorted-middle median (lower middle for even sizes, matching paired-seed
// comparisons that need an actually-realized value).
double median(std::vector<double> values);

ExperimentResult run_experiment(const ExperimentConfig& cfg);

// One run_experiment per swept value; everything else shared with `base`.
struct AblationTable {
    std::string axis;
    std::vector<std::string> labels;
    std::vector<ExperimentResult> rows;
};

AblationTable ablate_modes(const ExperimentConfig& base, const std::vector<AttnMode>& modes);
AblationTable ablate_bags(const ExperimentConfig& base, const std::vector<int>& bags);

// Canonical serializations: stable key order and formatting, so identical
// seeds reproduce byte-identical files.
std::string experiment_to_json(const ExperimentResult& r);
std::string ablation_to_json(const AblationTable& t);
std::string ablation_to_csv(const AblationTable& t);
std::string loss_curves_to_csv(const ExperimentResult& r);
std::string froc_to_csv(const ExperimentResult& r);

}  // namespace vatt
