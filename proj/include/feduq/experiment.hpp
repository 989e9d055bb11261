#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "feduq/federation.hpp"

namespace feduq::cli {

// Flat experiment configuration. Defaults match the reference federated
// setup: 10 clients, 20 rounds, 4 local epochs, batch 32, Adam at 1e-4,
// alpha 0.6, T 0.2, beta 0.5, Dirichlet 0.5.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::size_t k = 10;
    std::size_t ratio_unimodal = 8;
    std::size_t ratio_multimodal = 2;
    std::size_t rounds = 20;
    std::size_t local_epochs = 4;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double alpha = 0.6;
    double temperature = 0.2;
    double beta = 0.5;
    double alpha_dir = 0.5;
    std::size_t d = 32;
    std::size_t latent_dim = 16;
    std::size_t n_labels = 14;
    std::size_t n_samples = 2500;
    double s_min = 0.1;
    double s_max = 1.0;
    double unimodal_shift = 0.0;
    double test_fraction = 0.2;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t fusion_heads = 1;
    double log_var_clamp = 10.0;
    double lambda_imp = 1.0;
    std::string method = "pfin_feduq";
    std::string strategy = "auto";  // auto | fedavg | fed_uq_avg
    std::string sigma_window = "post_pass";
    bool unimodal_bce_to_pfin = false;
    std::uint64_t schedule_seed = 0;
    std::size_t checkpoint_interval = 0;  // rounds between checkpoints; 0 = final only
    std::string output_dir = "out";

    bool operator==(const ExperimentConfig&) const = default;

    void validate() const;
    fed::FederationConfig federation_config() const;
    synth::GeneratorSpec generator_spec() const;
};

// Flat key = value document; '#' starts a comment. Unknown keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);
// "key=value" command-line override
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

struct ExperimentSummary {
    std::string method;
    std::string ratio;
    std::uint64_t seed = 0;
    double auc = 0.0;
    std::optional<double> ece;
    std::optional<double> decile_spearman;
    std::optional<double> sigma_unimodal_round1;
    std::optional<double> sigma_unimodal_final;
    std::optional<double> sigma_multimodal_final;
};

// Generates data, partitions, trains the federation, evaluates, and writes
// round CSVs, calibration reports, checkpoints, summary.json and a hash
// manifest into cfg.output_dir. Partial outputs are removed on failure.
ExperimentSummary run_experiment(const ExperimentConfig& cfg);

struct SweepSpec {
    ExperimentConfig base;
    std::vector<std::string> methods;
    std::vector<std::pair<std::size_t, std::size_t>> ratios;  // unimodal:multimodal
    std::vector<std::uint64_t> seeds;
};
SweepSpec parse_sweep(const std::string& text);
SweepSpec load_sweep(const std::string& path);

struct ResultRow {
    std::string method;
    std::string ratio;
    double mean_auc = 0.0;
    std::optional<double> std_auc;  // absent with fewer than 2 seeds
    std::size_t n_seeds = 0;
};

// methods x ratios x seeds sweep under base.output_dir; returns the
// aggregated table (also written to results_table.csv)
std::vector<ResultRow> run_matrix(const SweepSpec& sweep);

// Ordering report over summary.json files: per ratio, methods ranked by mean
// AUC plus pairwise gaps. Missing methods leave their gaps unavailable.
std::string compare_summaries(const std::vector<std::string>& summary_paths);

// Loads a checkpoint, regenerates the configured dataset, and writes a
// standalone calibration report (reliability + deciles) for the eval split.
ExperimentSummary run_calibrate(const ExperimentConfig& cfg, const std::string& checkpoint_stem,
                                const std::string& report_dir);

std::string sha256_file(const std::string& path);

}  // namespace feduq::cli
