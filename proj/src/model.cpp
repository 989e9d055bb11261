#include "feduq/model.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>

#include "feduq/common.hpp"

namespace feduq::model {

Method method_from_string(const std::string& s) {
    if (s == "zero") return Method::Zero;
    if (s == "uniform") return Method::Uniform;
    if (s == "fin_fedavg") return Method::FinFedavg;
    if (s == "pfin_fedavg") return Method::PfinFedavg;
    if (s == "pfin_feduq") return Method::PfinFeduq;
    throw ConfigError("unknown method: " + s);
}

std::string method_to_string(Method m) {
    switch (m) {
        case Method::Zero: return "zero";
        case Method::Uniform: return "uniform";
        case Method::FinFedavg: return "fin_fedavg";
        case Method::PfinFedavg: return "pfin_fedavg";
        case Method::PfinFeduq: return "pfin_feduq";
    }
    throw ConfigError("unknown method enum");
}

bool method_has_imputer(Method m) {
    return m == Method::FinFedavg || m == Method::PfinFedavg || m == Method::PfinFeduq;
}

bool method_has_sigma(Method m) {
    return m == Method::PfinFedavg || m == Method::PfinFeduq;
}

void PfinConfig::validate() const {
    if (d == 0 || d % n_heads != 0)
        throw ConfigError("feature dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    if (fusion_heads == 0 || d % fusion_heads != 0)
        throw ConfigError("feature dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(fusion_heads) + " fusion heads");
    if (beta < 0.0 || beta > 1.0) throw ConfigError("beta must lie in [0, 1]");
    if (log_var_clamp <= 0.0) throw ConfigError("log_var_clamp must be positive");
}

namespace {

void add_linear(ParamSet& ps, std::mt19937_64& rng, const std::string& prefix, std::size_t in,
                std::size_t out, bool zero_init = false) {
    ps.add(prefix + ".w", zero_init ? Tensor::zeros({in, out}) : Tensor::randn({in, out}, rng, 0.02));
    ps.add(prefix + ".b", Tensor::zeros({1, out}));
}

void add_layernorm(ParamSet& ps, const std::string& prefix, std::size_t d) {
    ps.add(prefix + ".g", Tensor::full({1, d}, 1.0));
    ps.add(prefix + ".b", Tensor::zeros({1, d}));
}

void add_attention(ParamSet& ps, std::mt19937_64& rng, const std::string& prefix, std::size_t d) {
    add_linear(ps, rng, prefix + ".q", d, d);
    add_linear(ps, rng, prefix + ".k", d, d);
    add_linear(ps, rng, prefix + ".v", d, d);
    add_linear(ps, rng, prefix + ".o", d, d);
}

}  // namespace

ParamSet init_params(const PfinConfig& cfg, Method method, std::uint64_t seed) {
    cfg.validate();
    auto rng = make_stream(seed, {0x1217});
    ParamSet ps;
    const std::size_t d = cfg.d;

    if (method_has_imputer(method)) {
        add_linear(ps, rng, "imp.in", d, d);
        add_layernorm(ps, "imp.in.ln", d);
        ps.add("imp.q", Tensor::randn({1, d}, rng, 0.02));
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const std::string lp = "imp.l" + std::to_string(l);
            add_layernorm(ps, lp + ".ln1", d);
            add_attention(ps, rng, lp + ".attn", d);
            add_layernorm(ps, lp + ".ln2", d);
            add_linear(ps, rng, lp + ".ff1", d, 4 * d);
            add_linear(ps, rng, lp + ".ff2", 4 * d, d);
        }
        add_linear(ps, rng, "imp.mu1", d, d);
        add_linear(ps, rng, "imp.mu2", d, d, /*zero_init=*/true);
        if (method_has_sigma(method)) {
            add_linear(ps, rng, "imp.sig1", d, d);
            add_linear(ps, rng, "imp.sig2", d, d, /*zero_init=*/true);
        }
    }

    add_attention(ps, rng, "fus.i2t", d);
    add_attention(ps, rng, "fus.t2i", d);
    add_layernorm(ps, "fus.ln_i", d);
    add_layernorm(ps, "fus.ln_t", d);
    add_linear(ps, rng, "fus.out", 2 * d, d);

    add_linear(ps, rng, "clf.h", d, d);
    add_linear(ps, rng, "clf.out", d, cfg.n_labels);
    return ps;
}

Graph::NodeId BoundParams::id(const std::string& name) const {
    return ids[ps->index_of(name)];
}

math::AttnWeights BoundParams::attn(const std::string& prefix) const {
    return math::AttnWeights{id(prefix + ".q.w"), id(prefix + ".q.b"), id(prefix + ".k.w"),
                             id(prefix + ".k.b"), id(prefix + ".v.w"), id(prefix + ".v.b"),
                             id(prefix + ".o.w"), id(prefix + ".o.b")};
}

BoundParams bind(Graph& g, const ParamSet& ps) {
    BoundParams bp;
    bp.ps = &ps;
    bp.ids.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) bp.ids.push_back(g.param(ps[i]));
    return bp;
}

std::vector<Graph::NodeId> mha_positions(Graph& g, const std::vector<Graph::NodeId>& q,
                                         const std::vector<Graph::NodeId>& k,
                                         const std::vector<Graph::NodeId>& v, std::size_t heads,
                                         const math::AttnWeights& w) {
    if (k.size() != v.size() || q.empty() || k.empty())
        throw DimensionError("attention requires matching non-empty key/value position lists");
    const std::size_t d = g.value(q[0]).cols();
    if (heads == 0 || d % heads != 0)
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const std::size_t hd = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<Graph::NodeId> Q(q.size()), K(k.size()), V(v.size());
    for (std::size_t i = 0; i < q.size(); ++i) Q[i] = g.add_bias(g.matmul(q[i], w.wq), w.bq);
    for (std::size_t j = 0; j < k.size(); ++j) {
        K[j] = g.add_bias(g.matmul(k[j], w.wk), w.bk);
        V[j] = g.add_bias(g.matmul(v[j], w.wv), w.bv);
    }

    std::vector<Graph::NodeId> out(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<Graph::NodeId> head_out;
        for (std::size_t h = 0; h < heads; ++h) {
            Graph::NodeId Qh = g.slice_cols(Q[i], h * hd, (h + 1) * hd);
            std::vector<Graph::NodeId> scores(k.size());
            std::vector<Graph::NodeId> Vh(k.size());
            for (std::size_t j = 0; j < k.size(); ++j) {
                Graph::NodeId Kh = g.slice_cols(K[j], h * hd, (h + 1) * hd);
                Vh[j] = g.slice_cols(V[j], h * hd, (h + 1) * hd);
                scores[j] = g.scale(g.row_dot(Qh, Kh), inv_scale);
            }
            Graph::NodeId S = scores.size() == 1 ? scores[0] : g.concat_cols(scores);
            Graph::NodeId A = g.softmax(S);
            Graph::NodeId acc = -1;
            for (std::size_t j = 0; j < k.size(); ++j) {
                Graph::NodeId aj = g.slice_cols(A, j, j + 1);
                Graph::NodeId term = g.col_mul(Vh[j], aj);
                acc = (acc < 0) ? term : g.add(acc, term);
            }
            head_out.push_back(acc);
        }
        Graph::NodeId O = head_out.size() == 1 ? head_out[0] : g.concat_cols(head_out);
        out[i] = g.add_bias(g.matmul(O, w.wo), w.bo);
    }
    return out;
}

namespace {

Graph::NodeId mlp2(Graph& g, Graph::NodeId x, const BoundParams& p, const std::string& l1,
                   const std::string& l2) {
    Graph::NodeId h = g.gelu(g.add_bias(g.matmul(x, p.id(l1 + ".w")), p.id(l1 + ".b")));
    return g.add_bias(g.matmul(h, p.id(l2 + ".w")), p.id(l2 + ".b"));
}

void check_unit_rows(const Tensor& x, bool strict) {
    static std::atomic<bool> warned{false};
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(r, j) * x.at(r, j);
        if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
            if (strict)
                throw ContractError("imputer input row " + std::to_string(r) +
                                    " is not unit-norm (|x| = " + std::to_string(std::sqrt(s)) + ")");
            if (!warned.exchange(true))
                std::fprintf(stderr, "warning: imputer input rows are not unit-norm\n");
            return;
        }
    }
}

}  // namespace

ImputationNodes pfin_forward(Graph& g, Graph::NodeId z_img, const BoundParams& p,
                             const PfinConfig& cfg, bool with_sigma) {
    check_unit_rows(g.value(z_img), cfg.strict_input_norm);
    const std::size_t batch = g.value(z_img).rows();

    Graph::NodeId h0 = g.gelu(g.layernorm(g.add_bias(g.matmul(z_img, p.id("imp.in.w")), p.id("imp.in.b")),
                                          p.id("imp.in.ln.g"), p.id("imp.in.ln.b")));
    std::vector<Graph::NodeId> pos{g.expand_rows(p.id("imp.q"), batch), h0};

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = "imp.l" + std::to_string(l);
        std::vector<Graph::NodeId> normed(pos.size());
        for (std::size_t i = 0; i < pos.size(); ++i)
            normed[i] = g.layernorm(pos[i], p.id(lp + ".ln1.g"), p.id(lp + ".ln1.b"));
        std::vector<Graph::NodeId> att =
            mha_positions(g, normed, normed, normed, cfg.n_heads, p.attn(lp + ".attn"));
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = g.add(pos[i], att[i]);
        for (std::size_t i = 0; i < pos.size(); ++i) {
            Graph::NodeId f = g.layernorm(pos[i], p.id(lp + ".ln2.g"), p.id(lp + ".ln2.b"));
            Graph::NodeId ff = mlp2(g, f, p, lp + ".ff1", lp + ".ff2");
            pos[i] = g.add(pos[i], ff);
        }
    }

    ImputationNodes out;
    out.mu = mlp2(g, pos[0], p, "imp.mu1", "imp.mu2");
    if (with_sigma)
        out.log_var = g.clamp(mlp2(g, pos[0], p, "imp.sig1", "imp.sig2"), -cfg.log_var_clamp,
                              cfg.log_var_clamp);
    return out;
}

Graph::NodeId uncertainty_gate(Graph& g, Graph::NodeId log_var) {
    return g.sigmoid(g.neg(log_var));
}

namespace {

FusionNodes fuse_core(Graph& g, Graph::NodeId z_img, Graph::NodeId t, Graph::NodeId gate,
                      const BoundParams& p, const PfinConfig& cfg) {
    std::vector<Graph::NodeId> img{z_img}, txt{t};
    Graph::NodeId a_i = mha_positions(g, img, txt, txt, cfg.fusion_heads, p.attn("fus.i2t"))[0];
    Graph::NodeId zhat_i = g.layernorm(g.add(z_img, a_i), p.id("fus.ln_i.g"), p.id("fus.ln_i.b"));
    Graph::NodeId a_t = mha_positions(g, txt, img, img, cfg.fusion_heads, p.attn("fus.t2i"))[0];
    Graph::NodeId zhat_t = g.layernorm(g.add(t, a_t), p.id("fus.ln_t.g"), p.id("fus.ln_t.b"));
    std::vector<Graph::NodeId> cat{zhat_i, zhat_t};
    Graph::NodeId fused = g.add_bias(g.matmul(g.concat_cols(cat), p.id("fus.out.w")), p.id("fus.out.b"));
    return FusionNodes{fused, gate};
}

}  // namespace

FusionNodes fuse(Graph& g, Graph::NodeId z_img, const ImputationNodes& out, const BoundParams& p,
                 const PfinConfig& cfg, bool block_imputer_grad) {
    if (!out.has_sigma()) throw ContractError("fuse() requires a log-variance head");
    Graph::NodeId mu = out.mu;
    Graph::NodeId log_var = out.log_var;
    if (block_imputer_grad) {
        mu = g.stop_gradient(mu);
        log_var = g.stop_gradient(log_var);
    }
    Graph::NodeId gate = uncertainty_gate(g, log_var);
    Graph::NodeId t = g.mul(gate, mu);
    return fuse_core(g, z_img, t, gate, p, cfg);
}

FusionNodes fuse_multimodal(Graph& g, Graph::NodeId z_img, Graph::NodeId z_txt,
                            const BoundParams& p, const PfinConfig& cfg) {
    Graph::NodeId gate = g.leaf(Tensor::full(g.value(z_txt).shape, 1.0));
    return fuse_core(g, z_img, z_txt, gate, p, cfg);
}

FusionNodes fuse_filled(Graph& g, Graph::NodeId z_img, Graph::NodeId t, const BoundParams& p,
                        const PfinConfig& cfg) {
    Graph::NodeId gate = g.leaf(Tensor::full(g.value(t).shape, 1.0));
    return fuse_core(g, z_img, t, gate, p, cfg);
}

Graph::NodeId classify(Graph& g, Graph::NodeId z_fused, const BoundParams& p) {
    return mlp2(g, z_fused, p, "clf.h", "clf.out");
}

Graph::NodeId beta_nll_loss(Graph& g, const ImputationNodes& out, Graph::NodeId target,
                            double beta) {
    if (!out.has_sigma()) throw ContractError("beta_nll_loss requires a log-variance head");
    if (!g.value(out.mu).same_shape(g.value(target)))
        throw DimensionError("beta_nll_loss shape mismatch: " + g.value(out.mu).shape_str() +
                             " vs " + g.value(target).shape_str());
    Graph::NodeId diff = g.sub(target, out.mu);
    Graph::NodeId quad = g.scale(g.mul(g.square(diff), g.exp(g.neg(out.log_var))), 0.5);
    Graph::NodeId term = g.add(g.scale(out.log_var, 0.5), quad);
    Graph::NodeId sg = g.stop_gradient(g.exp(g.scale(out.log_var, beta)));
    return g.mean_all(g.mul(sg, term));
}

Graph::NodeId mse_loss(Graph& g, Graph::NodeId mu, Graph::NodeId target) {
    return g.mean_all(g.square(g.sub(target, mu)));
}

BaselineKind baseline_kind_from_string(const std::string& s) {
    if (s == "zero") return BaselineKind::Zero;
    if (s == "uniform") return BaselineKind::Uniform;
    if (s == "deterministic_fin") return BaselineKind::DeterministicFin;
    throw ConfigError("unknown baseline kind: " + s);
}

Graph::NodeId impute_baseline(Graph& g, BaselineKind kind, const BaselineContext& ctx) {
    switch (kind) {
        case BaselineKind::Zero:
            return g.leaf(Tensor::zeros({ctx.batch, ctx.d}));
        case BaselineKind::Uniform: {
            if (!ctx.global_mean || ctx.global_mean->size() != ctx.d)
                throw ConfigError("uniform fill requires a global mean embedding of width " +
                                  std::to_string(ctx.d));
            Tensor t = Tensor::zeros({ctx.batch, ctx.d});
            for (std::size_t r = 0; r < ctx.batch; ++r)
                for (std::size_t j = 0; j < ctx.d; ++j) t.at(r, j) = (*ctx.global_mean)[j];
            return g.leaf(std::move(t));
        }
        case BaselineKind::DeterministicFin: {
            if (!ctx.params || !ctx.cfg || ctx.z_img < 0)
                throw ConfigError("deterministic_fin fill requires bound parameters and z_img");
            return pfin_forward(g, ctx.z_img, *ctx.params, *ctx.cfg, /*with_sigma=*/false).mu;
        }
    }
    throw ConfigError("unknown baseline kind");
}

Tensor stack_zimg(const std::vector<synth::Sample>& samples, const std::vector<std::size_t>& idx) {
    const std::size_t d = samples.at(idx.at(0)).z_img.size();
    Tensor t = Tensor::zeros({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(samples[idx[r]].z_img.begin(), samples[idx[r]].z_img.end(), &t.data[r * d]);
    return t;
}

Tensor stack_ztxt(const std::vector<synth::Sample>& samples, const std::vector<std::size_t>& idx) {
    if (!samples.at(idx.at(0)).z_txt)
        throw ContractError("text features are absent on this client");
    const std::size_t d = samples[idx[0]].z_txt->size();
    Tensor t = Tensor::zeros({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (!samples[idx[r]].z_txt) throw ContractError("text features are absent on this client");
        std::copy(samples[idx[r]].z_txt->begin(), samples[idx[r]].z_txt->end(), &t.data[r * d]);
    }
    return t;
}

Tensor stack_labels(const std::vector<synth::Sample>& samples, const std::vector<std::size_t>& idx) {
    const std::size_t c = samples.at(idx.at(0)).labels.size();
    Tensor t = Tensor::zeros({idx.size(), c});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) t.at(r, j) = samples[idx[r]].labels[j];
    return t;
}

BatchLossNodes client_batch_loss(Graph& g, const BoundParams& p, Method method,
                                 const PfinConfig& cfg, synth::Modality modality,
                                 const Tensor& z_img, const Tensor* z_txt, const Tensor& labels,
                                 const std::vector<double>* global_mean) {
    BatchLossNodes out;
    Graph::NodeId zi = g.leaf(z_img);
    FusionNodes fused;

    if (modality == synth::Modality::Multimodal) {
        if (!z_txt) throw ContractError("multimodal client batch without text features");
        Graph::NodeId zt = g.leaf(*z_txt);
        fused = fuse_multimodal(g, zi, zt, p, cfg);
        if (method_has_sigma(method)) {
            ImputationNodes imp = pfin_forward(g, zi, p, cfg, /*with_sigma=*/true);
            out.log_var = imp.log_var;
            out.imputation = beta_nll_loss(g, imp, zt, cfg.beta);
        } else if (method == Method::FinFedavg) {
            ImputationNodes imp = pfin_forward(g, zi, p, cfg, /*with_sigma=*/false);
            out.imputation = mse_loss(g, imp.mu, zt);
        }
    } else {
        switch (method) {
            case Method::Zero: {
                BaselineContext ctx;
                ctx.batch = z_img.rows();
                ctx.d = z_img.cols();
                fused = fuse_filled(g, zi, impute_baseline(g, BaselineKind::Zero, ctx), p, cfg);
                break;
            }
            case Method::Uniform: {
                BaselineContext ctx;
                ctx.batch = z_img.rows();
                ctx.d = z_img.cols();
                ctx.global_mean = global_mean;
                fused = fuse_filled(g, zi, impute_baseline(g, BaselineKind::Uniform, ctx), p, cfg);
                break;
            }
            case Method::FinFedavg: {
                ImputationNodes imp = pfin_forward(g, zi, p, cfg, /*with_sigma=*/false);
                Graph::NodeId mu = cfg.unimodal_bce_to_pfin ? imp.mu : g.stop_gradient(imp.mu);
                fused = fuse_filled(g, zi, mu, p, cfg);
                break;
            }
            case Method::PfinFedavg:
            case Method::PfinFeduq: {
                ImputationNodes imp = pfin_forward(g, zi, p, cfg, /*with_sigma=*/true);
                out.log_var = imp.log_var;
                fused = fuse(g, zi, imp, p, cfg, /*block_imputer_grad=*/!cfg.unimodal_bce_to_pfin);
                break;
            }
        }
    }

    out.bce = g.bce_with_logits(classify(g, fused.z_fused, p), labels);
    out.total = out.imputation >= 0 ? g.add(out.bce, g.scale(out.imputation, cfg.lambda_imp))
                                    : out.bce;
    return out;
}

EvalOutput forward_eval(const ParamSet& ps, Method method, const PfinConfig& cfg,
                        const Tensor& z_img, const std::vector<double>* global_mean) {
    Graph g;
    BoundParams p = bind(g, ps);
    Graph::NodeId zi = g.leaf(z_img);
    FusionNodes fused;
    EvalOutput out;

    switch (method) {
        case Method::Zero: {
            BaselineContext ctx;
            ctx.batch = z_img.rows();
            ctx.d = z_img.cols();
            fused = fuse_filled(g, zi, impute_baseline(g, BaselineKind::Zero, ctx), p, cfg);
            break;
        }
        case Method::Uniform: {
            BaselineContext ctx;
            ctx.batch = z_img.rows();
            ctx.d = z_img.cols();
            ctx.global_mean = global_mean;
            fused = fuse_filled(g, zi, impute_baseline(g, BaselineKind::Uniform, ctx), p, cfg);
            break;
        }
        case Method::FinFedavg: {
            ImputationNodes imp = pfin_forward(g, zi, p, cfg, /*with_sigma=*/false);
            out.mu = g.value(imp.mu);
            fused = fuse_filled(g, zi, imp.mu, p, cfg);
            break;
        }
        case Method::PfinFedavg:
        case Method::PfinFeduq: {
            ImputationNodes imp = pfin_forward(g, zi, p, cfg, /*with_sigma=*/true);
            out.mu = g.value(imp.mu);
            out.log_var = g.value(imp.log_var);
            fused = fuse(g, zi, imp, p, cfg, /*block_imputer_grad=*/false);
            break;
        }
    }

    out.logits = g.value(classify(g, fused.z_fused, p));
    if (fused.gate >= 0 && method_has_sigma(method)) out.gate = g.value(fused.gate);
    return out;
}

std::pair<Tensor, Tensor> imputation_eval(const ParamSet& ps, const PfinConfig& cfg,
                                          const Tensor& z_img) {
    Graph g;
    BoundParams p = bind(g, ps);
    ImputationNodes imp = pfin_forward(g, g.leaf(z_img), p, cfg, /*with_sigma=*/true);
    return {g.value(imp.mu), g.value(imp.log_var)};
}

}  // namespace feduq::model
