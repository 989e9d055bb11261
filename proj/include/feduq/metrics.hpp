#pragma once

#include <optional>
#include <string>
#include <vector>

#include "feduq/tensor.hpp"

namespace feduq::metrics {

using math::Tensor;

struct AucDetail {
    double mean_auc = 0.0;
    std::vector<double> per_class;      // NaN for skipped classes
    std::vector<std::size_t> skipped;   // classes lacking a positive or negative
};

// Rank-based (Mann-Whitney) AUC with average ranks for ties, averaged over
// classes that have at least one positive and one negative.
AucDetail mean_auc_detail(const Tensor& scores, const Tensor& labels);
double mean_auc(const Tensor& scores, const Tensor& labels);

struct ReliabilityCurve {
    std::vector<double> nominal;
    std::vector<double> observed;
    double ece = 0.0;  // unweighted mean |observed - nominal|
};

std::vector<double> default_levels();  // 0.1 .. 0.9 step 0.1

// Central-interval coverage of the predicted Gaussians, counted per
// (sample, dimension) pair.
ReliabilityCurve reliability(const Tensor& mu, const Tensor& log_var, const Tensor& target,
                             const std::vector<double>& levels = default_levels());

struct DecileBin {
    double mean_sigma_sq = 0.0;
    double mean_sq_err = 0.0;  // per-dimension MSE
    std::size_t count = 0;
};

struct DecileReport {
    std::vector<DecileBin> bins;  // 10 bins by predicted-uncertainty rank
};

DecileReport decile_analysis(const Tensor& mu, const Tensor& log_var, const Tensor& target);

// Rank correlation with average-rank ties; nullopt when either input is
// constant (undefined, deliberately not reported as 0).
std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// Phi^{-1}(p) to ~1e-13, via bisection + Newton on std::erfc.
double inverse_normal_cdf(double p);

void write_reliability_csv(const std::string& path, const ReliabilityCurve& curve);
void write_deciles_csv(const std::string& path, const DecileReport& report);

}  // namespace feduq::metrics
