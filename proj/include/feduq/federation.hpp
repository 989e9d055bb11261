#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "feduq/model.hpp"
#include "feduq/params.hpp"
#include "feduq/synthdata.hpp"

namespace feduq::fed {

using math::ParamSet;
using math::Tensor;

enum class Strategy { FedAvg, FedUqAvg };
Strategy strategy_from_string(const std::string& s);
std::string strategy_to_string(Strategy s);

// window over which a client's mean imputation uncertainty is measured
enum class SigmaWindow { PostPass, RunningMean };

struct ClientUpdate {
    ParamSet theta;
    // mean of exp(log_var) over local samples and dimensions; NaN for models
    // without a log-variance head
    double sigma_bar_sq = std::numeric_limits<double>::quiet_NaN();
    std::size_t n = 0;
    int client_id = 0;
    double train_loss = std::numeric_limits<double>::quiet_NaN();
};

struct AggregationWeights {
    std::vector<double> w_data;
    std::vector<double> w_conf;
    std::vector<double> lambda;
    double alpha = 0.0;
    double temperature = 0.0;
};

// lambda_k = (1-alpha) n_k/sum(n) + alpha softmax_k(-sigma_bar_sq/T).
// The confidence term is computed as a shifted softmax so it cannot underflow
// to an all-zero denominator.
AggregationWeights fed_uq_avg_weights(const std::vector<ClientUpdate>& updates, double alpha,
                                      double T);
// size-proportional weights; w_conf reported uniform
AggregationWeights fedavg_weights(const std::vector<ClientUpdate>& updates);

// convex combination per parameter, accumulated in update order
ParamSet aggregate(const std::vector<ClientUpdate>& updates, const AggregationWeights& weights);

struct FederationConfig {
    model::Method method = model::Method::PfinFeduq;
    Strategy strategy = Strategy::FedUqAvg;
    model::PfinConfig pfin;
    std::size_t rounds = 20;
    std::size_t local_epochs = 4;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double alpha = 0.6;
    double temperature = 0.2;
    SigmaWindow sigma_window = SigmaWindow::PostPass;
    std::uint64_t seed = 0;
    // permutes client execution order within a round; the result must not
    // depend on it (per-client RNG streams are keyed by (seed, client, round))
    std::uint64_t schedule_seed = 0;
};

struct ClientRoundStat {
    int client_id = 0;
    synth::Modality modality = synth::Modality::Multimodal;
    std::size_t n = 0;
    double sigma_bar_sq = std::numeric_limits<double>::quiet_NaN();
    double lambda = 0.0;
    double train_loss = std::numeric_limits<double>::quiet_NaN();
};

struct RoundRecord {
    std::size_t round = 0;  // 1-based
    std::vector<ClientRoundStat> clients;
    double val_auc = std::numeric_limits<double>::quiet_NaN();
    double mean_train_loss = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;  // in-memory diagnostic, never serialized
};

struct FederationResult {
    std::vector<RoundRecord> records;
    ParamSet final_params;
    std::vector<double> global_mean;  // populated for the uniform-fill method
};

ClientUpdate local_train(const ParamSet& global_theta, const synth::ClientDataset& client,
                         const FederationConfig& cfg, const std::vector<double>* global_mean,
                         std::size_t round);

// Full round loop: broadcast, (logically parallel) local training, weighting,
// aggregation, pooled validation. eval_split provides the per-round val AUC.
// round_hook, when set, observes the aggregated model after each round
// (checkpointing).
FederationResult run_federation(const std::vector<synth::ClientDataset>& clients,
                                const std::vector<synth::Sample>& eval_split,
                                const FederationConfig& cfg,
                                const std::function<void(std::size_t, const ParamSet&)>& round_hook = {});

// Image-only-path scores of the current global model on a sample set.
Tensor eval_scores(const ParamSet& theta, const FederationConfig& cfg,
                   const std::vector<synth::Sample>& samples,
                   const std::vector<double>* global_mean);

}  // namespace feduq::fed
