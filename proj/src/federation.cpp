#include "feduq/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "feduq/adam.hpp"
#include "feduq/common.hpp"
#include "feduq/metrics.hpp"

namespace feduq::fed {

namespace {
constexpr std::uint64_t kTagTrain = 0x74;
constexpr std::uint64_t kTagSchedule = 0x73;
constexpr std::size_t kEvalChunk = 256;
}  // namespace

Strategy strategy_from_string(const std::string& s) {
    if (s == "fedavg") return Strategy::FedAvg;
    if (s == "fed_uq_avg") return Strategy::FedUqAvg;
    throw ConfigError("unknown strategy: " + s);
}

std::string strategy_to_string(Strategy s) {
    return s == Strategy::FedAvg ? "fedavg" : "fed_uq_avg";
}

AggregationWeights fed_uq_avg_weights(const std::vector<ClientUpdate>& updates, double alpha,
                                      double T) {
    if (updates.empty()) throw AggregationError("no client updates to weight");
    if (!(T > 0.0)) throw ConfigError("temperature must be positive");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    const std::size_t K = updates.size();

    AggregationWeights w;
    w.alpha = alpha;
    w.temperature = T;
    w.w_data.resize(K);
    w.w_conf.resize(K);
    w.lambda.resize(K);

    double n_total = 0.0;
    double min_sigma = std::numeric_limits<double>::infinity();
    for (const ClientUpdate& u : updates) {
        if (u.n == 0) throw AggregationError("client update with zero samples");
        if (!std::isfinite(u.sigma_bar_sq) || u.sigma_bar_sq < 0.0)
            throw AggregationError("client " + std::to_string(u.client_id) +
                                   " reports invalid mean uncertainty");
        n_total += static_cast<double>(u.n);
        min_sigma = std::min(min_sigma, u.sigma_bar_sq);
    }

    // shifted softmax of -sigma/T: exp(-(sigma - min)/T) keeps the largest
    // term at 1, so the normalizer never underflows to zero
    double z_conf = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        w.w_data[k] = static_cast<double>(updates[k].n) / n_total;
        w.w_conf[k] = std::exp(-(updates[k].sigma_bar_sq - min_sigma) / T);
        z_conf += w.w_conf[k];
    }
    for (std::size_t k = 0; k < K; ++k) {
        w.w_conf[k] /= z_conf;
        w.lambda[k] = (1.0 - alpha) * w.w_data[k] + alpha * w.w_conf[k];
    }
    return w;
}

AggregationWeights fedavg_weights(const std::vector<ClientUpdate>& updates) {
    if (updates.empty()) throw AggregationError("no client updates to weight");
    const std::size_t K = updates.size();
    AggregationWeights w;
    w.alpha = 0.0;
    w.w_data.resize(K);
    w.w_conf.assign(K, 1.0 / static_cast<double>(K));
    w.lambda.resize(K);
    double n_total = 0.0;
    for (const ClientUpdate& u : updates) {
        if (u.n == 0) throw AggregationError("client update with zero samples");
        n_total += static_cast<double>(u.n);
    }
    for (std::size_t k = 0; k < K; ++k) {
        w.w_data[k] = static_cast<double>(updates[k].n) / n_total;
        w.lambda[k] = w.w_data[k];
    }
    return w;
}

ParamSet aggregate(const std::vector<ClientUpdate>& updates, const AggregationWeights& weights) {
    if (updates.empty()) throw AggregationError("nothing to aggregate");
    if (weights.lambda.size() != updates.size())
        throw AggregationError("weight/update count mismatch");
    double sum = 0.0;
    for (double l : weights.lambda) {
        if (l < 0.0) throw AggregationError("negative aggregation weight");
        sum += l;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw AggregationError("aggregation weights sum to " + std::to_string(sum));

    const ParamSet& first = updates[0].theta;
    for (const ClientUpdate& u : updates) {
        if (!u.theta.same_schema(first)) {
            for (const std::string& name : first.names())
                if (!u.theta.has(name) || u.theta.at(name).shape != first.at(name).shape)
                    throw AggregationError("client " + std::to_string(u.client_id) +
                                           " parameter mismatch on key '" + name + "'");
            throw AggregationError("client " + std::to_string(u.client_id) +
                                   " parameter schema mismatch");
        }
    }

    ParamSet out;
    for (std::size_t i = 0; i < first.size(); ++i)
        out.add(first.names()[i], math::Tensor::zeros(first[i].shape));
    for (std::size_t k = 0; k < updates.size(); ++k) {
        const double l = weights.lambda[k];
        for (std::size_t i = 0; i < out.size(); ++i) {
            const auto& src = updates[k].theta[i].data;
            auto& dst = out[i].data;
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += l * src[j];
        }
    }
    return out;
}

namespace {

// mean exp(log_var) over every sample and dimension, in fixed chunk order
double sigma_post_pass(const ParamSet& theta, const model::PfinConfig& cfg,
                       const std::vector<synth::Sample>& samples) {
    double acc = 0.0;
    std::size_t count = 0;
    std::vector<std::size_t> idx;
    for (std::size_t lo = 0; lo < samples.size(); lo += kEvalChunk) {
        const std::size_t hi = std::min(samples.size(), lo + kEvalChunk);
        idx.resize(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        const Tensor z = model::stack_zimg(samples, idx);
        const auto [mu, log_var] = model::imputation_eval(theta, cfg, z);
        (void)mu;
        for (double lv : log_var.data) acc += std::exp(lv);
        count += log_var.numel();
    }
    return acc / static_cast<double>(count);
}

}  // namespace

ClientUpdate local_train(const ParamSet& global_theta, const synth::ClientDataset& client,
                         const FederationConfig& cfg, const std::vector<double>* global_mean,
                         std::size_t round) {
    if (client.samples.empty()) throw DataError("local_train on an empty client");

    ClientUpdate update;
    update.client_id = client.client_id;
    update.n = client.samples.size();
    update.theta = global_theta;

    const bool has_sigma = model::method_has_sigma(cfg.method);
    auto rng = make_stream(cfg.seed, {kTagTrain, static_cast<std::uint64_t>(client.client_id),
                                      round});

    Adam opt(update.theta, cfg.lr);
    std::vector<std::size_t> order(client.samples.size());
    std::iota(order.begin(), order.end(), 0);

    double loss_acc = 0.0;
    std::size_t loss_count = 0;
    double running_sigma_acc = 0.0;
    std::size_t running_sigma_count = 0;

    const Tensor* txt_ptr = nullptr;
    Tensor z_txt;

    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
            const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                               order.begin() + static_cast<std::ptrdiff_t>(hi));
            const Tensor z_img = model::stack_zimg(client.samples, idx);
            const Tensor labels = model::stack_labels(client.samples, idx);
            if (client.modality == synth::Modality::Multimodal) {
                z_txt = model::stack_ztxt(client.samples, idx);
                txt_ptr = &z_txt;
            }

            math::Graph g;
            model::BoundParams bound = model::bind(g, update.theta);
            model::BatchLossNodes loss =
                model::client_batch_loss(g, bound, cfg.method, cfg.pfin, client.modality, z_img,
                                         txt_ptr, labels, global_mean);
            g.backward(loss.total);

            std::vector<Tensor> grads;
            grads.reserve(bound.ids.size());
            for (math::Graph::NodeId id : bound.ids) grads.push_back(g.grad(id));
            opt.step(update.theta, grads);

            loss_acc += g.scalar(loss.total);
            ++loss_count;
            if (cfg.sigma_window == SigmaWindow::RunningMean && has_sigma && loss.log_var >= 0) {
                for (double lv : g.value(loss.log_var).data) running_sigma_acc += std::exp(lv);
                running_sigma_count += g.value(loss.log_var).numel();
            }
        }
    }

    update.train_loss = loss_count > 0 ? loss_acc / static_cast<double>(loss_count)
                                       : std::numeric_limits<double>::quiet_NaN();
    if (has_sigma) {
        if (cfg.sigma_window == SigmaWindow::RunningMean && running_sigma_count > 0)
            update.sigma_bar_sq = running_sigma_acc / static_cast<double>(running_sigma_count);
        else
            update.sigma_bar_sq = sigma_post_pass(update.theta, cfg.pfin, client.samples);
    }
    return update;
}

Tensor eval_scores(const ParamSet& theta, const FederationConfig& cfg,
                   const std::vector<synth::Sample>& samples,
                   const std::vector<double>* global_mean) {
    if (samples.empty()) throw DataError("evaluation split is empty");
    const std::size_t C = samples[0].labels.size();
    Tensor scores = Tensor::zeros({samples.size(), C});
    std::vector<std::size_t> idx;
    for (std::size_t lo = 0; lo < samples.size(); lo += kEvalChunk) {
        const std::size_t hi = std::min(samples.size(), lo + kEvalChunk);
        idx.resize(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        const Tensor z = model::stack_zimg(samples, idx);
        const model::EvalOutput out = model::forward_eval(theta, cfg.method, cfg.pfin, z, global_mean);
        std::copy(out.logits.data.begin(), out.logits.data.end(), &scores.data[lo * C]);
    }
    return scores;
}

FederationResult run_federation(const std::vector<synth::ClientDataset>& clients,
                                const std::vector<synth::Sample>& eval_split,
                                const FederationConfig& cfg,
                                const std::function<void(std::size_t, const ParamSet&)>& round_hook) {
    if (clients.empty()) throw ConfigError("federation requires at least one client");
    bool any_multimodal = false;
    for (const auto& c : clients) any_multimodal |= c.modality == synth::Modality::Multimodal;
    if (!any_multimodal)
        throw ConfigError("federation requires at least one multimodal client");
    if (cfg.strategy == Strategy::FedUqAvg && !model::method_has_sigma(cfg.method))
        throw ConfigError("fed_uq_avg weighting requires a method with an uncertainty head");

    FederationResult result;
    result.final_params = model::init_params(cfg.pfin, cfg.method, cfg.seed);

    if (cfg.method == model::Method::Uniform) {
        // server-side mean of multimodal clients' text embeddings, computed
        // once before training
        result.global_mean.assign(cfg.pfin.d, 0.0);
        std::size_t count = 0;
        for (const auto& c : clients) {
            if (c.modality != synth::Modality::Multimodal) continue;
            for (const auto& s : c.samples) {
                if (!s.z_txt) continue;
                for (std::size_t j = 0; j < cfg.pfin.d; ++j)
                    result.global_mean[j] += (*s.z_txt)[j];
                ++count;
            }
        }
        if (count == 0) throw DataError("uniform fill found no multimodal text features");
        for (double& v : result.global_mean) v /= static_cast<double>(count);
    }
    const std::vector<double>* mean_ptr =
        result.global_mean.empty() ? nullptr : &result.global_mean;

    const int K = static_cast<int>(clients.size());
    Tensor eval_labels;
    if (!eval_split.empty()) {
        std::vector<std::size_t> all(eval_split.size());
        std::iota(all.begin(), all.end(), 0);
        eval_labels = model::stack_labels(eval_split, all);
    }

    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        const auto t_start = std::chrono::steady_clock::now();

        std::vector<int> exec_order(K);
        std::iota(exec_order.begin(), exec_order.end(), 0);
        if (cfg.schedule_seed != 0) {
            auto rng = make_stream(cfg.schedule_seed, {kTagSchedule, t});
            std::shuffle(exec_order.begin(), exec_order.end(), rng);
        }

        // clients train independently; results land in client-id slots, so
        // execution order cannot affect the aggregate
        std::vector<ClientUpdate> updates(K);
        std::vector<std::string> errors(K);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (int pos = 0; pos < K; ++pos) {
            const int k = exec_order[pos];
            try {
                if (clients[k].samples.empty()) {
                    errors[k] = "empty";
                } else {
                    updates[k] = local_train(result.final_params, clients[k], cfg, mean_ptr, t);
                }
            } catch (const std::exception& e) {
                errors[k] = e.what();
            }
        }

        std::vector<ClientUpdate> participating;
        for (int k = 0; k < K; ++k) {
            if (errors[k] == "empty") {
                std::fprintf(stderr, "round %zu: excluding empty client %d\n", t, k);
                continue;
            }
            if (!errors[k].empty())
                throw AggregationError("round " + std::to_string(t) + ", client " +
                                       std::to_string(k) + ": " + errors[k]);
            participating.push_back(std::move(updates[k]));
        }
        if (participating.empty())
            throw AggregationError("round " + std::to_string(t) + " has no participating clients");

        const AggregationWeights weights = cfg.strategy == Strategy::FedUqAvg
                                               ? fed_uq_avg_weights(participating, cfg.alpha,
                                                                    cfg.temperature)
                                               : fedavg_weights(participating);
        result.final_params = aggregate(participating, weights);

        RoundRecord rec;
        rec.round = t;
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < participating.size(); ++i) {
            const ClientUpdate& u = participating[i];
            ClientRoundStat stat;
            stat.client_id = u.client_id;
            stat.modality = clients[u.client_id].modality;
            stat.n = u.n;
            stat.sigma_bar_sq = u.sigma_bar_sq;
            stat.lambda = weights.lambda[i];
            stat.train_loss = u.train_loss;
            rec.clients.push_back(stat);
            loss_sum += u.train_loss;
        }
        rec.mean_train_loss = loss_sum / static_cast<double>(participating.size());
        if (!eval_split.empty()) {
            const Tensor scores = eval_scores(result.final_params, cfg, eval_split, mean_ptr);
            rec.val_auc = metrics::mean_auc(scores, eval_labels);
        }
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        result.records.push_back(std::move(rec));
        if (round_hook) round_hook(t, result.final_params);
    }
    return result;
}

}  // namespace feduq::fed
