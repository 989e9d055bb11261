#include "feduq/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <openssl/evp.h>

#include <json.hpp>

#include "feduq/metrics.hpp"

namespace fs = std::filesystem;

namespace feduq::cli {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("invalid integer for " + key + ": '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("invalid number for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("invalid boolean for " + key + ": '" + v + "'");
}

std::pair<std::size_t, std::size_t> parse_ratio(const std::string& v) {
    const auto parts = split(v, ':');
    if (parts.size() != 2)
        throw ConfigError("ratio must look like '8:2', got '" + v + "'");
    return {parse_u64("ratio", parts[0]), parse_u64("ratio", parts[1])};
}

void set_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
    if (key == "seed") c.seed = parse_u64(key, value);
    else if (key == "k") c.k = parse_u64(key, value);
    else if (key == "ratio") std::tie(c.ratio_unimodal, c.ratio_multimodal) = parse_ratio(value);
    else if (key == "rounds") c.rounds = parse_u64(key, value);
    else if (key == "local_epochs") c.local_epochs = parse_u64(key, value);
    else if (key == "batch_size") c.batch_size = parse_u64(key, value);
    else if (key == "lr") c.lr = parse_f64(key, value);
    else if (key == "alpha") c.alpha = parse_f64(key, value);
    else if (key == "temperature") c.temperature = parse_f64(key, value);
    else if (key == "beta") c.beta = parse_f64(key, value);
    else if (key == "alpha_dir") c.alpha_dir = parse_f64(key, value);
    else if (key == "d") c.d = parse_u64(key, value);
    else if (key == "latent_dim") c.latent_dim = parse_u64(key, value);
    else if (key == "n_labels") c.n_labels = parse_u64(key, value);
    else if (key == "n_samples") c.n_samples = parse_u64(key, value);
    else if (key == "s_min") c.s_min = parse_f64(key, value);
    else if (key == "s_max") c.s_max = parse_f64(key, value);
    else if (key == "unimodal_shift") c.unimodal_shift = parse_f64(key, value);
    else if (key == "test_fraction") c.test_fraction = parse_f64(key, value);
    else if (key == "n_layers") c.n_layers = parse_u64(key, value);
    else if (key == "n_heads") c.n_heads = parse_u64(key, value);
    else if (key == "fusion_heads") c.fusion_heads = parse_u64(key, value);
    else if (key == "log_var_clamp") c.log_var_clamp = parse_f64(key, value);
    else if (key == "lambda_imp") c.lambda_imp = parse_f64(key, value);
    else if (key == "method") c.method = value;
    else if (key == "strategy") c.strategy = value;
    else if (key == "sigma_window") c.sigma_window = value;
    else if (key == "unimodal_bce_to_pfin") c.unimodal_bce_to_pfin = parse_bool(key, value);
    else if (key == "schedule_seed") c.schedule_seed = parse_u64(key, value);
    else if (key == "checkpoint_interval") c.checkpoint_interval = parse_u64(key, value);
    else if (key == "output_dir") c.output_dir = value;
    else throw ConfigError("unknown config key: " + key);
}

}  // namespace

void ExperimentConfig::validate() const {
    if (k < 2) throw ConfigError("need at least 2 clients");
    if (ratio_unimodal + ratio_multimodal != k)
        throw ConfigError("ratio " + std::to_string(ratio_unimodal) + ":" +
                          std::to_string(ratio_multimodal) + " does not sum to k=" +
                          std::to_string(k));
    if (ratio_multimodal == 0)
        throw ConfigError("at least one multimodal client is required");
    if (n_samples < k) throw ConfigError("n_samples must be at least k");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw ConfigError("test_fraction must lie in (0, 1)");
    if (beta < 0.0 || beta > 1.0) throw ConfigError("beta must lie in [0, 1]");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(alpha_dir > 0.0)) throw ConfigError("alpha_dir must be positive");
    if (strategy != "auto" && strategy != "fedavg" && strategy != "fed_uq_avg")
        throw ConfigError("unknown strategy: " + strategy);
    if (sigma_window != "post_pass" && sigma_window != "running_mean")
        throw ConfigError("unknown sigma_window: " + sigma_window);
    (void)model::method_from_string(method);
    federation_config().pfin.validate();
}

fed::FederationConfig ExperimentConfig::federation_config() const {
    fed::FederationConfig fc;
    fc.method = model::method_from_string(method);
    if (strategy == "auto")
        fc.strategy = fc.method == model::Method::PfinFeduq ? fed::Strategy::FedUqAvg
                                                            : fed::Strategy::FedAvg;
    else
        fc.strategy = fed::strategy_from_string(strategy);
    fc.pfin.d = d;
    fc.pfin.n_labels = n_labels;
    fc.pfin.n_layers = n_layers;
    fc.pfin.n_heads = n_heads;
    fc.pfin.fusion_heads = fusion_heads;
    fc.pfin.beta = beta;
    fc.pfin.log_var_clamp = log_var_clamp;
    fc.pfin.lambda_imp = lambda_imp;
    fc.pfin.unimodal_bce_to_pfin = unimodal_bce_to_pfin;
    fc.rounds = rounds;
    fc.local_epochs = local_epochs;
    fc.batch_size = batch_size;
    fc.lr = lr;
    fc.alpha = alpha;
    fc.temperature = temperature;
    fc.sigma_window = sigma_window == "running_mean" ? fed::SigmaWindow::RunningMean
                                                     : fed::SigmaWindow::PostPass;
    fc.seed = seed;
    fc.schedule_seed = schedule_seed;
    return fc;
}

synth::GeneratorSpec ExperimentConfig::generator_spec() const {
    return synth::GeneratorSpec::make(d, latent_dim, n_labels, s_min, s_max, seed);
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        set_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "seed = " << c.seed << "\n";
    os << "k = " << c.k << "\n";
    os << "ratio = " << c.ratio_unimodal << ":" << c.ratio_multimodal << "\n";
    os << "rounds = " << c.rounds << "\n";
    os << "local_epochs = " << c.local_epochs << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "lr = " << fmt_double(c.lr) << "\n";
    os << "alpha = " << fmt_double(c.alpha) << "\n";
    os << "temperature = " << fmt_double(c.temperature) << "\n";
    os << "beta = " << fmt_double(c.beta) << "\n";
    os << "alpha_dir = " << fmt_double(c.alpha_dir) << "\n";
    os << "d = " << c.d << "\n";
    os << "latent_dim = " << c.latent_dim << "\n";
    os << "n_labels = " << c.n_labels << "\n";
    os << "n_samples = " << c.n_samples << "\n";
    os << "s_min = " << fmt_double(c.s_min) << "\n";
    os << "s_max = " << fmt_double(c.s_max) << "\n";
    os << "unimodal_shift = " << fmt_double(c.unimodal_shift) << "\n";
    os << "test_fraction = " << fmt_double(c.test_fraction) << "\n";
    os << "n_layers = " << c.n_layers << "\n";
    os << "n_heads = " << c.n_heads << "\n";
    os << "fusion_heads = " << c.fusion_heads << "\n";
    os << "log_var_clamp = " << fmt_double(c.log_var_clamp) << "\n";
    os << "lambda_imp = " << fmt_double(c.lambda_imp) << "\n";
    os << "method = " << c.method << "\n";
    os << "strategy = " << c.strategy << "\n";
    os << "sigma_window = " << c.sigma_window << "\n";
    os << "unimodal_bce_to_pfin = " << (c.unimodal_bce_to_pfin ? "true" : "false") << "\n";
    os << "schedule_seed = " << c.schedule_seed << "\n";
    os << "checkpoint_interval = " << c.checkpoint_interval << "\n";
    os << "output_dir = " << c.output_dir << "\n";
    return os.str();
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must look like key=value, got '" + assignment + "'");
    set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string sha256_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot hash missing file " + path);
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(buf.data(), buf.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 failed for " + path);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

static std::string sha256_string(const std::string& s) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(s.data(), s.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

namespace {

struct Emitter {
    fs::path dir;
    std::vector<std::string> files;  // relative paths, emission order

    fs::path path(const std::string& rel) { return dir / rel; }
    void note(const std::string& rel) { files.push_back(rel); }
    void write_text(const std::string& rel, const std::string& text) {
        std::ofstream f(path(rel));
        if (!f) throw IoError("cannot write " + path(rel).string());
        f << text;
        note(rel);
    }
    void cleanup() {
        for (const std::string& rel : files) {
            std::error_code ec;
            fs::remove(dir / rel, ec);
        }
    }
};

std::string ratio_string(const ExperimentConfig& cfg) {
    return std::to_string(cfg.ratio_unimodal) + ":" + std::to_string(cfg.ratio_multimodal);
}

std::string round_clients_csv(const std::vector<fed::RoundRecord>& records) {
    std::ostringstream os;
    os << "t,client_id,modality,n_k,sigma_bar_sq,lambda,train_loss\n";
    for (const auto& rec : records)
        for (const auto& c : rec.clients)
            os << rec.round << "," << c.client_id << ","
               << (c.modality == synth::Modality::Multimodal ? "multimodal" : "unimodal") << ","
               << c.n << "," << fmt_double(c.sigma_bar_sq) << "," << fmt_double(c.lambda) << ","
               << fmt_double(c.train_loss) << "\n";
    return os.str();
}

double mean_sigma(const fed::RoundRecord& rec, synth::Modality modality) {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& c : rec.clients) {
        if (c.modality != modality || std::isnan(c.sigma_bar_sq)) continue;
        acc += c.sigma_bar_sq;
        ++n;
    }
    return n > 0 ? acc / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

std::string round_summary_csv(const std::vector<fed::RoundRecord>& records) {
    std::ostringstream os;
    os << "t,val_auc,mean_sigma_unimodal,mean_sigma_multimodal\n";
    for (const auto& rec : records)
        os << rec.round << "," << fmt_double(rec.val_auc) << ","
           << fmt_double(mean_sigma(rec, synth::Modality::Unimodal)) << ","
           << fmt_double(mean_sigma(rec, synth::Modality::Multimodal)) << "\n";
    return os.str();
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.output_dir);

    // previous manifest (if any) lets a re-run verify byte-stability
    nlohmann::json old_manifest;
    const fs::path manifest_path = fs::path(cfg.output_dir) / "manifest.json";
    if (fs::exists(manifest_path)) {
        std::ifstream f(manifest_path);
        old_manifest = nlohmann::json::parse(f, nullptr, /*allow_exceptions=*/false);
    }

    Emitter em;
    em.dir = cfg.output_dir;
    try {
        const synth::GeneratorSpec spec = cfg.generator_spec();
        std::vector<synth::Sample> samples = synth::generate(spec, cfg.n_samples);
        const std::size_t n_eval = std::max<std::size_t>(
            1, static_cast<std::size_t>(cfg.test_fraction * static_cast<double>(cfg.n_samples)));
        std::vector<synth::Sample> eval_split(samples.end() - static_cast<std::ptrdiff_t>(n_eval),
                                              samples.end());
        samples.resize(cfg.n_samples - n_eval);

        std::vector<synth::ClientDataset> clients =
            synth::dirichlet_partition(samples, cfg.k, cfg.alpha_dir, cfg.seed);
        synth::assign_modalities(clients, cfg.ratio_unimodal, cfg.ratio_multimodal, cfg.seed,
                                 cfg.unimodal_shift);

        const fed::FederationConfig fedcfg = cfg.federation_config();
        std::function<void(std::size_t, const math::ParamSet&)> hook;
        if (cfg.checkpoint_interval > 0) {
            hook = [&](std::size_t round, const math::ParamSet& ps) {
                if (round % cfg.checkpoint_interval != 0) return;
                char name[48];
                std::snprintf(name, sizeof(name), "round_%03zu.params", round);
                ps.save((em.dir / name).string());
                em.note(std::string(name) + ".json");
                em.note(std::string(name) + ".bin");
            };
        }
        const fed::FederationResult result = fed::run_federation(clients, eval_split, fedcfg, hook);

        em.write_text("config.toml", serialize_config(cfg));
        em.write_text("round_clients.csv", round_clients_csv(result.records));
        em.write_text("round_summary.csv", round_summary_csv(result.records));
        result.final_params.save((em.dir / "final.params").string());
        em.note("final.params.json");
        em.note("final.params.bin");

        ExperimentSummary summary;
        summary.method = cfg.method;
        summary.ratio = ratio_string(cfg);
        summary.seed = cfg.seed;
        summary.auc = result.records.empty() ? std::numeric_limits<double>::quiet_NaN()
                                             : result.records.back().val_auc;
        if (!result.records.empty() && model::method_has_sigma(fedcfg.method)) {
            summary.sigma_unimodal_round1 = mean_sigma(result.records.front(), synth::Modality::Unimodal);
            summary.sigma_unimodal_final = mean_sigma(result.records.back(), synth::Modality::Unimodal);
            summary.sigma_multimodal_final =
                mean_sigma(result.records.back(), synth::Modality::Multimodal);
        }

        if (model::method_has_sigma(fedcfg.method) && !eval_split.empty()) {
            std::vector<std::size_t> idx(eval_split.size());
            std::iota(idx.begin(), idx.end(), 0);
            const math::Tensor z_img = model::stack_zimg(eval_split, idx);
            const math::Tensor z_txt = model::stack_ztxt(eval_split, idx);
            math::Tensor mu = math::Tensor::zeros(z_txt.shape);
            math::Tensor log_var = math::Tensor::zeros(z_txt.shape);
            const std::size_t chunk = 256;
            for (std::size_t lo = 0; lo < eval_split.size(); lo += chunk) {
                const std::size_t hi = std::min(eval_split.size(), lo + chunk);
                std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                              idx.begin() + static_cast<std::ptrdiff_t>(hi));
                const math::Tensor zc = model::stack_zimg(eval_split, part);
                const auto [mc, lc] = model::imputation_eval(result.final_params, fedcfg.pfin, zc);
                std::copy(mc.data.begin(), mc.data.end(), &mu.data[lo * cfg.d]);
                std::copy(lc.data.begin(), lc.data.end(), &log_var.data[lo * cfg.d]);
            }
            const metrics::ReliabilityCurve curve = metrics::reliability(mu, log_var, z_txt);
            metrics::write_reliability_csv((em.dir / "reliability.csv").string(), curve);
            em.note("reliability.csv");
            summary.ece = curve.ece;
            const metrics::DecileReport deciles = metrics::decile_analysis(mu, log_var, z_txt);
            metrics::write_deciles_csv((em.dir / "deciles.csv").string(), deciles);
            em.note("deciles.csv");
            std::vector<double> bin_sigma, bin_err;
            for (const auto& b : deciles.bins) {
                bin_sigma.push_back(b.mean_sigma_sq);
                bin_err.push_back(b.mean_sq_err);
            }
            summary.decile_spearman = metrics::spearman(bin_sigma, bin_err).value_or(
                std::numeric_limits<double>::quiet_NaN());
        }

        nlohmann::json sj;
        sj["method"] = summary.method;
        sj["ratio"] = summary.ratio;
        sj["seed"] = summary.seed;
        sj["rounds"] = cfg.rounds;
        sj["auc"] = summary.auc;
        sj["ece"] = summary.ece ? nlohmann::json(*summary.ece) : nlohmann::json(nullptr);
        sj["decile_spearman"] = summary.decile_spearman ? nlohmann::json(*summary.decile_spearman)
                                                        : nlohmann::json(nullptr);
        sj["sigma_unimodal_round1"] = summary.sigma_unimodal_round1
                                          ? nlohmann::json(*summary.sigma_unimodal_round1)
                                          : nlohmann::json(nullptr);
        sj["sigma_unimodal_final"] = summary.sigma_unimodal_final
                                         ? nlohmann::json(*summary.sigma_unimodal_final)
                                         : nlohmann::json(nullptr);
        sj["sigma_multimodal_final"] = summary.sigma_multimodal_final
                                           ? nlohmann::json(*summary.sigma_multimodal_final)
                                           : nlohmann::json(nullptr);
        sj["config_sha256"] = sha256_string(serialize_config(cfg));
        em.write_text("summary.json", sj.dump(2) + "\n");

        nlohmann::json manifest;
        manifest["config_sha256"] = sha256_string(serialize_config(cfg));
        nlohmann::json files = nlohmann::json::object();
        for (const std::string& rel : em.files) files[rel] = sha256_file((em.dir / rel).string());
        manifest["files"] = files;
        {
            std::ofstream f(manifest_path);
            if (!f) throw IoError("cannot write " + manifest_path.string());
            f << manifest.dump(2) << "\n";
        }

        // verify against the previous run of the identical config
        if (old_manifest.is_object() && old_manifest.contains("config_sha256") &&
            old_manifest["config_sha256"] == manifest["config_sha256"]) {
            for (auto& [rel, hash] : old_manifest["files"].items()) {
                if (files.contains(rel) && files[rel] != hash)
                    throw DataError("re-run produced different bytes for " + rel);
            }
        }
        return summary;
    } catch (...) {
        em.cleanup();
        throw;
    }
}

SweepSpec parse_sweep(const std::string& text) {
    SweepSpec sweep;
    std::stringstream ss(text);
    std::string line, rest;
    while (std::getline(ss, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("sweep line needs key = value: " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "methods") {
            sweep.methods = split(value, ',');
        } else if (key == "ratios") {
            for (const std::string& r : split(value, ','))
                sweep.ratios.push_back(parse_ratio(r));
        } else if (key == "seeds") {
            for (const std::string& s : split(value, ','))
                sweep.seeds.push_back(parse_u64("seeds", s));
        } else {
            rest += key + " = " + value + "\n";
        }
    }
    sweep.base = parse_config(rest);
    if (sweep.methods.empty()) sweep.methods = {"zero", "uniform", "fin_fedavg", "pfin_fedavg",
                                                "pfin_feduq"};
    if (sweep.ratios.empty())
        sweep.ratios.push_back({sweep.base.ratio_unimodal, sweep.base.ratio_multimodal});
    if (sweep.seeds.empty())
        for (std::uint64_t s = 1; s <= 5; ++s) sweep.seeds.push_back(s);
    return sweep;
}

SweepSpec load_sweep(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read sweep " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_sweep(ss.str());
}

std::vector<ResultRow> run_matrix(const SweepSpec& sweep) {
    std::vector<ResultRow> table;
    for (const std::string& method : sweep.methods) {
        for (const auto& [uni, multi] : sweep.ratios) {
            std::vector<double> aucs;
            for (std::uint64_t seed : sweep.seeds) {
                ExperimentConfig cfg = sweep.base;
                cfg.method = method;
                cfg.ratio_unimodal = uni;
                cfg.ratio_multimodal = multi;
                cfg.seed = seed;
                cfg.output_dir = (fs::path(sweep.base.output_dir) / method /
                                  ("r" + std::to_string(uni) + "x" + std::to_string(multi)) /
                                  ("s" + std::to_string(seed)))
                                     .string();
                aucs.push_back(run_experiment(cfg).auc);
            }
            ResultRow row;
            row.method = method;
            row.ratio = std::to_string(uni) + ":" + std::to_string(multi);
            row.n_seeds = aucs.size();
            row.mean_auc = std::accumulate(aucs.begin(), aucs.end(), 0.0) /
                           static_cast<double>(aucs.size());
            if (aucs.size() >= 2) {
                double ss_ = 0.0;
                for (double a : aucs) ss_ += (a - row.mean_auc) * (a - row.mean_auc);
                row.std_auc = std::sqrt(ss_ / static_cast<double>(aucs.size() - 1));
            }
            table.push_back(row);
        }
    }

    std::ostringstream os;
    os << "method,ratio,mean_auc,std_auc,n_seeds\n";
    for (const ResultRow& r : table)
        os << r.method << "," << r.ratio << "," << fmt_double(r.mean_auc) << ","
           << (r.std_auc ? fmt_double(*r.std_auc) : "") << "," << r.n_seeds << "\n";
    fs::create_directories(sweep.base.output_dir);
    std::ofstream f(fs::path(sweep.base.output_dir) / "results_table.csv");
    if (!f) throw IoError("cannot write results_table.csv");
    f << os.str();
    return table;
}

std::string compare_summaries(const std::vector<std::string>& summary_paths) {
    struct Acc {
        std::vector<double> aucs;
    };
    std::map<std::string, std::map<std::string, Acc>> by_ratio;  // ratio -> method -> aucs
    for (const std::string& path : summary_paths) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot read summary " + path);
        const nlohmann::json j = nlohmann::json::parse(f);
        by_ratio[j.at("ratio").get<std::string>()][j.at("method").get<std::string>()]
            .aucs.push_back(j.at("auc").get<double>());
    }
    if (by_ratio.empty()) throw DataError("no summaries to compare");

    const std::vector<std::pair<std::string, std::string>> gap_pairs = {
        {"pfin_feduq", "pfin_fedavg"}, {"pfin_fedavg", "fin_fedavg"},
        {"pfin_feduq", "fin_fedavg"},  {"fin_fedavg", "zero"},
        {"fin_fedavg", "uniform"}};

    std::ostringstream os;
    for (const auto& [ratio, methods] : by_ratio) {
        os << "ratio " << ratio << "\n";
        std::vector<std::pair<std::string, double>> ranked;
        for (const auto& [method, acc] : methods) {
            const double mean = std::accumulate(acc.aucs.begin(), acc.aucs.end(), 0.0) /
                                static_cast<double>(acc.aucs.size());
            ranked.push_back({method, mean});
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;  // ties in stable method-name order
        });
        for (std::size_t i = 0; i < ranked.size(); ++i) {
            os << "  " << (i + 1) << ". " << ranked[i].first << " mean_auc="
               << fmt_double(ranked[i].second);
            if (i + 1 < ranked.size() && ranked[i].second == ranked[i + 1].second)
                os << " (tie)";
            os << "\n";
        }
        auto mean_of = [&](const std::string& m) -> std::optional<double> {
            auto it = methods.find(m);
            if (it == methods.end()) return std::nullopt;
            return std::accumulate(it->second.aucs.begin(), it->second.aucs.end(), 0.0) /
                   static_cast<double>(it->second.aucs.size());
        };
        for (const auto& [hi, lo] : gap_pairs) {
            const auto a = mean_of(hi), b = mean_of(lo);
            os << "  gap " << hi << " - " << lo << " = ";
            if (a && b) os << fmt_double(*a - *b);
            else os << "unavailable";
            os << "\n";
        }
    }
    return os.str();
}

ExperimentSummary run_calibrate(const ExperimentConfig& cfg, const std::string& checkpoint_stem,
                                const std::string& report_dir) {
    cfg.validate();
    if (!model::method_has_sigma(model::method_from_string(cfg.method)))
        throw ConfigError("calibration report requires a method with an uncertainty head");
    const math::ParamSet theta = math::ParamSet::load(checkpoint_stem);
    const fed::FederationConfig fedcfg = cfg.federation_config();

    const synth::GeneratorSpec spec = cfg.generator_spec();
    std::vector<synth::Sample> samples = synth::generate(spec, cfg.n_samples);
    const std::size_t n_eval = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg.test_fraction * static_cast<double>(cfg.n_samples)));
    std::vector<synth::Sample> eval_split(samples.end() - static_cast<std::ptrdiff_t>(n_eval),
                                          samples.end());

    std::vector<std::size_t> idx(eval_split.size());
    std::iota(idx.begin(), idx.end(), 0);
    const math::Tensor z_txt = model::stack_ztxt(eval_split, idx);
    math::Tensor mu = math::Tensor::zeros(z_txt.shape);
    math::Tensor log_var = math::Tensor::zeros(z_txt.shape);
    const std::size_t chunk = 256;
    for (std::size_t lo = 0; lo < eval_split.size(); lo += chunk) {
        const std::size_t hi = std::min(eval_split.size(), lo + chunk);
        std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                      idx.begin() + static_cast<std::ptrdiff_t>(hi));
        const math::Tensor zc = model::stack_zimg(eval_split, part);
        const auto [mc, lc] = model::imputation_eval(theta, fedcfg.pfin, zc);
        std::copy(mc.data.begin(), mc.data.end(), &mu.data[lo * cfg.d]);
        std::copy(lc.data.begin(), lc.data.end(), &log_var.data[lo * cfg.d]);
    }

    fs::create_directories(report_dir);
    const metrics::ReliabilityCurve curve = metrics::reliability(mu, log_var, z_txt);
    metrics::write_reliability_csv((fs::path(report_dir) / "reliability.csv").string(), curve);
    const metrics::DecileReport deciles = metrics::decile_analysis(mu, log_var, z_txt);
    metrics::write_deciles_csv((fs::path(report_dir) / "deciles.csv").string(), deciles);

    std::vector<double> bin_sigma, bin_err;
    for (const auto& b : deciles.bins) {
        bin_sigma.push_back(b.mean_sigma_sq);
        bin_err.push_back(b.mean_sq_err);
    }

    ExperimentSummary summary;
    summary.method = cfg.method;
    summary.ratio = ratio_string(cfg);
    summary.seed = cfg.seed;
    summary.auc = std::numeric_limits<double>::quiet_NaN();
    summary.ece = curve.ece;
    summary.decile_spearman =
        metrics::spearman(bin_sigma, bin_err).value_or(std::numeric_limits<double>::quiet_NaN());

    nlohmann::json sj;
    sj["ece"] = *summary.ece;
    sj["decile_spearman"] = *summary.decile_spearman;
    sj["checkpoint"] = checkpoint_stem;
    std::ofstream f(fs::path(report_dir) / "calibration.json");
    if (!f) throw IoError("cannot write calibration.json");
    f << sj.dump(2) << "\n";
    return summary;
}

}  // namespace feduq::cli
