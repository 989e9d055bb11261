#include "feduq/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "feduq/common.hpp"
#include "feduq/kernels.hpp"

namespace feduq::synth {

namespace {
constexpr std::uint64_t kTagLatent = 0x75;    // 'u'
constexpr std::uint64_t kTagNoise = 0x65;     // 'e'
constexpr std::uint64_t kTagLabels = 0x79;    // 'y'
constexpr std::uint64_t kTagPartition = 0x70;
constexpr std::uint64_t kTagModality = 0x6d;

std::vector<double> matvec(const math::Tensor& M, const std::vector<double>& x) {
    std::vector<double> y(M.rows(), 0.0);
    for (std::size_t i = 0; i < M.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < M.cols(); ++j) s += M.at(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

void l2norm_inplace(std::vector<double>& v, double eps = 1e-12) {
    double s = 0.0;
    for (double x : v) s += x * x;
    const double nrm = std::max(std::sqrt(s), eps);
    for (double& x : v) x /= nrm;
}
}  // namespace

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

GeneratorSpec GeneratorSpec::make(std::size_t d, std::size_t m, std::size_t n_labels,
                                  double s_min, double s_max, std::uint64_t seed) {
    if (d < m) throw ConfigError("generator requires d >= m");
    if (!(s_min < s_max) && !(s_min == s_max))
        throw ConfigError("generator requires s_min <= s_max");
    if (s_min < 0.0) throw ConfigError("generator requires s_min >= 0");
    GeneratorSpec spec;
    spec.d = d;
    spec.m = m;
    spec.n_labels = n_labels;
    spec.s_min = s_min;
    spec.s_max = s_max;
    spec.seed = seed;
    auto rng = make_stream(seed, {0x6d6178});
    spec.A = math::Tensor::randn({d, m}, rng);
    spec.B = math::Tensor::randn({d, m}, rng);
    spec.W_y = math::Tensor::randn({n_labels, m}, rng, 1.0 / std::sqrt(static_cast<double>(m)));
    spec.w_diff.resize(m);
    for (std::size_t j = 0; j < m; ++j) spec.w_diff[j] = spec.W_y.at(0, j);
    l2norm_inplace(spec.w_diff);
    return spec;
}

std::vector<double> latent(const GeneratorSpec& spec, std::size_t index) {
    auto rng = make_stream(spec.seed, {kTagLatent, index});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> u(spec.m);
    for (double& x : u) x = normal(rng);
    return u;
}

std::vector<Sample> generate(const GeneratorSpec& spec, std::size_t n) {
    if (n == 0) throw DataError("cannot generate an empty dataset");
    std::vector<Sample> out(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        const std::vector<double> u = latent(spec, static_cast<std::size_t>(i));
        Sample& s = out[i];

        s.z_img = matvec(spec.A, u);
        l2norm_inplace(s.z_img);

        double proj = 0.0;
        for (std::size_t j = 0; j < spec.m; ++j) proj += spec.w_diff[j] * u[j];
        s.difficulty = sigmoid(proj);
        s.true_sigma = spec.s_min + s.difficulty * (spec.s_max - spec.s_min);

        auto noise_rng = make_stream(spec.seed, {kTagNoise, static_cast<std::uint64_t>(i)});
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> zt = matvec(spec.B, u);
        for (double& x : zt) x += s.true_sigma * normal(noise_rng);
        l2norm_inplace(zt);
        s.z_txt = std::move(zt);

        auto label_rng = make_stream(spec.seed, {kTagLabels, static_cast<std::uint64_t>(i)});
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const std::vector<double> logits = matvec(spec.W_y, u);
        s.labels.resize(spec.n_labels);
        for (std::size_t c = 0; c < spec.n_labels; ++c)
            s.labels[c] = unif(label_rng) < sigmoid(logits[c]) ? 1 : 0;
    }
    return out;
}

static std::size_t pseudo_class(const Sample& s, std::size_t n_labels) {
    for (std::size_t c = 0; c < s.labels.size(); ++c)
        if (s.labels[c]) return c;
    return n_labels;  // no positive label
}

std::vector<ClientDataset> dirichlet_partition(const std::vector<Sample>& samples, std::size_t K,
                                               double alpha_dir, std::uint64_t seed) {
    if (K < 2) throw ConfigError("partition requires K >= 2");
    if (alpha_dir <= 0.0) throw ConfigError("partition requires alpha_dir > 0");
    if (K > samples.size())
        throw DataError("infeasible partition: " + std::to_string(K) + " clients for " +
                        std::to_string(samples.size()) + " samples");
    const std::size_t n_labels = samples.empty() ? 0 : samples[0].labels.size();

    auto rng = make_stream(seed, {kTagPartition});
    std::gamma_distribution<double> gamma(alpha_dir, 1.0);

    // per-pseudo-class client proportions, classes 0..n_labels inclusive
    std::vector<std::vector<double>> props(n_labels + 1, std::vector<double>(K, 0.0));
    for (auto& p : props) {
        double total = 0.0;
        for (double& x : p) {
            x = gamma(rng);
            total += x;
        }
        if (total <= 0.0) {
            std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(K));
        } else {
            for (double& x : p) x /= total;
        }
    }

    std::vector<ClientDataset> out(K);
    for (std::size_t k = 0; k < K; ++k) out[k].client_id = static_cast<int>(k);

    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (const Sample& s : samples) {
        const std::vector<double>& p = props[pseudo_class(s, n_labels)];
        double r = unif(rng), acc = 0.0;
        std::size_t k = K - 1;
        for (std::size_t j = 0; j < K; ++j) {
            acc += p[j];
            if (r < acc) {
                k = j;
                break;
            }
        }
        out[k].samples.push_back(s);
    }

    // re-seed empty clients from the largest one
    for (std::size_t k = 0; k < K; ++k) {
        while (out[k].samples.empty()) {
            std::size_t big = 0;
            for (std::size_t j = 1; j < K; ++j)
                if (out[j].samples.size() > out[big].samples.size()) big = j;
            if (out[big].samples.size() <= 1)
                throw DataError("cannot re-seed empty client " + std::to_string(k));
            std::uniform_int_distribution<std::size_t> pick(0, out[big].samples.size() - 1);
            const std::size_t idx = pick(rng);
            out[k].samples.push_back(std::move(out[big].samples[idx]));
            out[big].samples.erase(out[big].samples.begin() + static_cast<std::ptrdiff_t>(idx));
        }
    }
    return out;
}

void assign_modalities(std::vector<ClientDataset>& datasets, std::size_t ratio_unimodal,
                       std::size_t ratio_multimodal, std::uint64_t seed, double unimodal_shift) {
    const std::size_t K = datasets.size();
    if (ratio_unimodal + ratio_multimodal != K)
        throw ConfigError("modality ratio " + std::to_string(ratio_unimodal) + ":" +
                          std::to_string(ratio_multimodal) + " does not sum to K=" +
                          std::to_string(K));
    if (ratio_multimodal == 0)
        throw ConfigError("at least one multimodal client is required to train imputation");

    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_stream(seed, {kTagModality});
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<double> shift_dir;
    if (unimodal_shift != 0.0 && !datasets.empty() && !datasets[0].samples.empty()) {
        const std::size_t d = datasets[0].samples[0].z_img.size();
        std::normal_distribution<double> normal(0.0, 1.0);
        shift_dir.resize(d);
        for (double& x : shift_dir) x = normal(rng);
        l2norm_inplace(shift_dir);
    }

    for (std::size_t pos = 0; pos < K; ++pos) {
        ClientDataset& ds = datasets[order[pos]];
        if (pos < ratio_multimodal) {
            ds.modality = Modality::Multimodal;
        } else {
            ds.modality = Modality::Unimodal;
            for (Sample& s : ds.samples) {
                s.z_txt.reset();  // true_sigma stays, visible to oracles only
                if (!shift_dir.empty()) {
                    for (std::size_t j = 0; j < s.z_img.size(); ++j)
                        s.z_img[j] += unimodal_shift * shift_dir[j];
                    l2norm_inplace(s.z_img);
                }
            }
        }
    }
}

void export_jsonl(const std::vector<ClientDataset>& datasets, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    for (const ClientDataset& ds : datasets) {
        for (const Sample& s : ds.samples) {
            nlohmann::json line;
            line["client_id"] = ds.client_id;
            line["modality"] = ds.modality == Modality::Multimodal ? "multimodal" : "unimodal";
            line["z_img"] = s.z_img;
            if (s.z_txt) line["z_txt"] = *s.z_txt;
            else line["z_txt"] = nullptr;
            line["labels"] = s.labels;
            line["true_sigma"] = s.true_sigma;
            line["difficulty"] = s.difficulty;
            f << line.dump() << "\n";
        }
    }
}

std::vector<ClientDataset> import_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::vector<ClientDataset> out;
    auto client_slot = [&out](int id, Modality m) -> ClientDataset& {
        for (ClientDataset& ds : out)
            if (ds.client_id == id) return ds;
        out.push_back(ClientDataset{id, m, {}});
        return out.back();
    };
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Sample s;
        s.z_img = j.at("z_img").get<std::vector<double>>();
        if (!j.at("z_txt").is_null()) s.z_txt = j.at("z_txt").get<std::vector<double>>();
        s.labels = j.at("labels").get<std::vector<std::uint8_t>>();
        s.true_sigma = j.at("true_sigma").get<double>();
        s.difficulty = j.at("difficulty").get<double>();
        const Modality m = j.at("modality").get<std::string>() == "multimodal"
                               ? Modality::Multimodal
                               : Modality::Unimodal;
        ClientDataset& ds = client_slot(j.at("client_id").get<int>(), m);
        ds.modality = m;
        ds.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace feduq::synth
