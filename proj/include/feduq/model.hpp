#pragma once

#include <optional>
#include <string>
#include <vector>

#include "feduq/graph.hpp"
#include "feduq/params.hpp"
#include "feduq/synthdata.hpp"

namespace feduq::model {

using math::Graph;
using math::ParamSet;
using math::Tensor;

enum class Method { Zero, Uniform, FinFedavg, PfinFedavg, PfinFeduq };

Method method_from_string(const std::string& s);
std::string method_to_string(Method m);
// fin and pfin variants carry the imputation trunk; pfin variants add the
// log-variance head
bool method_has_imputer(Method m);
bool method_has_sigma(Method m);

struct PfinConfig {
    std::size_t d = 32;
    std::size_t n_labels = 14;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t fusion_heads = 1;
    double beta = 0.5;
    double log_var_clamp = 10.0;
    double lambda_imp = 1.0;
    // classification gradient into the imputer on unimodal clients is blocked
    // by default; flip to let it through
    bool unimodal_bce_to_pfin = false;
    // non-unit-norm imputer inputs: warn (false) or throw (true)
    bool strict_input_norm = false;

    void validate() const;
};

// Weights N(0, 0.02), biases zero, layernorm gains one. Both imputer output
// heads start at zero so the initial state is pinned: mu = 0, sigma^2 = 1,
// gate = 0.5.
ParamSet init_params(const PfinConfig& cfg, Method method, std::uint64_t seed);

// ParamSet entries bound onto a graph as leaf nodes, one per key.
struct BoundParams {
    const ParamSet* ps = nullptr;
    std::vector<Graph::NodeId> ids;

    Graph::NodeId id(const std::string& name) const;
    math::AttnWeights attn(const std::string& prefix) const;
};
BoundParams bind(Graph& g, const ParamSet& ps);

struct ImputationNodes {
    Graph::NodeId mu = -1;
    Graph::NodeId log_var = -1;  // -1 when the model has no sigma head
    bool has_sigma() const { return log_var >= 0; }
};

// Batched multi-head attention where the token sequence is a list of
// [batch x d] tensors (per-sample sequences, vectorized over the batch).
std::vector<Graph::NodeId> mha_positions(Graph& g, const std::vector<Graph::NodeId>& q,
                                         const std::vector<Graph::NodeId>& k,
                                         const std::vector<Graph::NodeId>& v, std::size_t heads,
                                         const math::AttnWeights& w);

ImputationNodes pfin_forward(Graph& g, Graph::NodeId z_img, const BoundParams& p,
                             const PfinConfig& cfg, bool with_sigma);

// g = sigmoid(-log sigma^2), elementwise on the log-variance
Graph::NodeId uncertainty_gate(Graph& g, Graph::NodeId log_var);

struct FusionNodes {
    Graph::NodeId z_fused = -1;
    Graph::NodeId gate = -1;
};

// Imputed-text path: t = gate (*) mu. block_imputer_grad detaches mu/log_var
// so the downstream classification loss cannot reach the imputer.
FusionNodes fuse(Graph& g, Graph::NodeId z_img, const ImputationNodes& out, const BoundParams& p,
                 const PfinConfig& cfg, bool block_imputer_grad);
// Real-text path: same network, t = z_txt, gate pinned to 1.
FusionNodes fuse_multimodal(Graph& g, Graph::NodeId z_img, Graph::NodeId z_txt,
                            const BoundParams& p, const PfinConfig& cfg);
// Baseline fills: arbitrary t, gate pinned to 1.
FusionNodes fuse_filled(Graph& g, Graph::NodeId z_img, Graph::NodeId t, const BoundParams& p,
                        const PfinConfig& cfg);

Graph::NodeId classify(Graph& g, Graph::NodeId z_fused, const BoundParams& p);

// mean over batch of (1/d) sum_j SG(sigma_j^2beta) * (log sigma_j^2 / 2 +
// (z_j - mu_j)^2 / (2 sigma_j^2)); the 0.5*log(2*pi) constant is omitted
Graph::NodeId beta_nll_loss(Graph& g, const ImputationNodes& out, Graph::NodeId target,
                            double beta);
Graph::NodeId mse_loss(Graph& g, Graph::NodeId mu, Graph::NodeId target);

enum class BaselineKind { Zero, Uniform, DeterministicFin };
BaselineKind baseline_kind_from_string(const std::string& s);

struct BaselineContext {
    std::size_t batch = 0;
    std::size_t d = 0;
    const std::vector<double>* global_mean = nullptr;  // uniform fill
    Graph::NodeId z_img = -1;                          // deterministic fin
    const BoundParams* params = nullptr;
    const PfinConfig* cfg = nullptr;
};
Graph::NodeId impute_baseline(Graph& g, BaselineKind kind, const BaselineContext& ctx);

// ---- batching helpers ----
Tensor stack_zimg(const std::vector<synth::Sample>& samples, const std::vector<std::size_t>& idx);
Tensor stack_ztxt(const std::vector<synth::Sample>& samples, const std::vector<std::size_t>& idx);
Tensor stack_labels(const std::vector<synth::Sample>& samples, const std::vector<std::size_t>& idx);

// ---- whole-model passes used by training and evaluation ----
struct BatchLossNodes {
    Graph::NodeId total = -1;
    Graph::NodeId bce = -1;
    Graph::NodeId imputation = -1;  // -1 when the method has no imputation loss
    Graph::NodeId log_var = -1;     // -1 when the model has no sigma head
};
BatchLossNodes client_batch_loss(Graph& g, const BoundParams& p, Method method,
                                 const PfinConfig& cfg, synth::Modality modality,
                                 const Tensor& z_img, const Tensor* z_txt, const Tensor& labels,
                                 const std::vector<double>* global_mean);

struct EvalOutput {
    Tensor logits;
    std::optional<Tensor> mu;
    std::optional<Tensor> log_var;
    std::optional<Tensor> gate;
};
// Image-only inference: text is imputed or filled per method, fused,
// classified. This is the deployment path for clients missing text.
EvalOutput forward_eval(const ParamSet& ps, Method method, const PfinConfig& cfg,
                        const Tensor& z_img, const std::vector<double>* global_mean);

// Imputer-only inference (mu, log_var); used for uncertainty reporting.
std::pair<Tensor, Tensor> imputation_eval(const ParamSet& ps, const PfinConfig& cfg,
                                          const Tensor& z_img);

}  // namespace feduq::model
