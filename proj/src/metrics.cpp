#include "feduq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace feduq::metrics {

namespace {

// average ranks (1-based) with ties sharing the mean rank
std::vector<double> average_ranks(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

AucDetail mean_auc_detail(const Tensor& scores, const Tensor& labels) {
    if (!scores.same_shape(labels))
        throw DimensionError("auc shape mismatch: " + scores.shape_str() + " vs " +
                             labels.shape_str());
    const std::size_t n = scores.rows(), C = scores.cols();
    AucDetail out;
    out.per_class.assign(C, std::numeric_limits<double>::quiet_NaN());

    double total = 0.0;
    std::size_t valid = 0;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (long long cc = 0; cc < static_cast<long long>(C); ++cc) {
        const std::size_t c = static_cast<std::size_t>(cc);
        std::vector<double> col(n);
        std::size_t n_pos = 0;
        for (std::size_t r = 0; r < n; ++r) {
            col[r] = scores.at(r, c);
            if (labels.at(r, c) != 0.0) ++n_pos;
        }
        const std::size_t n_neg = n - n_pos;
        if (n_pos == 0 || n_neg == 0) continue;
        const std::vector<double> ranks = average_ranks(col);
        double rank_sum_pos = 0.0;
        for (std::size_t r = 0; r < n; ++r)
            if (labels.at(r, c) != 0.0) rank_sum_pos += ranks[r];
        const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                            static_cast<double>(n_pos + 1);
        out.per_class[c] = u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
    }
    for (std::size_t c = 0; c < C; ++c) {
        if (std::isnan(out.per_class[c])) {
            out.skipped.push_back(c);
        } else {
            total += out.per_class[c];
            ++valid;
        }
    }
    if (valid == 0) throw MetricError("AUC undefined: no class has both positives and negatives");
    out.mean_auc = total / static_cast<double>(valid);
    return out;
}

double mean_auc(const Tensor& scores, const Tensor& labels) {
    return mean_auc_detail(scores, labels).mean_auc;
}

std::vector<double> default_levels() {
    std::vector<double> v;
    for (int i = 1; i <= 9; ++i) v.push_back(0.1 * i);
    return v;
}

double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw MetricError("inverse_normal_cdf requires p in (0,1)");
    auto cdf = [](double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); };
    double lo = -12.0, hi = 12.0;
    for (int i = 0; i < 60; ++i) {
        const double mid = 0.5 * (lo + hi);
        (cdf(mid) < p ? lo : hi) = mid;
    }
    double z = 0.5 * (lo + hi);
    for (int i = 0; i < 3; ++i) {
        const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
        if (pdf <= 0.0) break;
        z -= (cdf(z) - p) / pdf;
    }
    return z;
}

ReliabilityCurve reliability(const Tensor& mu, const Tensor& log_var, const Tensor& target,
                             const std::vector<double>& levels) {
    if (!mu.same_shape(log_var) || !mu.same_shape(target))
        throw DimensionError("reliability shape mismatch: " + mu.shape_str() + " / " +
                             log_var.shape_str() + " / " + target.shape_str());
    ReliabilityCurve curve;
    curve.nominal = levels;
    curve.observed.resize(levels.size());
    const std::size_t n = mu.numel();
    double gap = 0.0;
    for (std::size_t li = 0; li < levels.size(); ++li) {
        const double z = inverse_normal_cdf(0.5 * (1.0 + levels[li]));
        long long covered = 0;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) reduction(+ : covered)
#endif
        for (long long i = 0; i < static_cast<long long>(n); ++i) {
            const double sigma = std::exp(0.5 * log_var.data[i]);
            if (std::abs(target.data[i] - mu.data[i]) <= z * sigma) ++covered;
        }
        curve.observed[li] = static_cast<double>(covered) / static_cast<double>(n);
        gap += std::abs(curve.observed[li] - levels[li]);
    }
    curve.ece = gap / static_cast<double>(levels.size());
    return curve;
}

DecileReport decile_analysis(const Tensor& mu, const Tensor& log_var, const Tensor& target) {
    if (!mu.same_shape(log_var) || !mu.same_shape(target))
        throw DimensionError("decile shape mismatch: " + mu.shape_str() + " / " +
                             log_var.shape_str() + " / " + target.shape_str());
    const std::size_t n = mu.rows(), d = mu.cols();
    if (n < 10)
        throw MetricError("decile analysis needs at least 10 samples, got " + std::to_string(n));

    std::vector<double> mean_sig(n), mean_err(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0, e = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            s += std::exp(log_var.at(r, j));
            const double diff = target.at(r, j) - mu.at(r, j);
            e += diff * diff;
        }
        mean_sig[r] = s / static_cast<double>(d);
        mean_err[r] = e / static_cast<double>(d);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // stable: ties keep input order, so reports are deterministic
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return mean_sig[a] < mean_sig[b]; });

    DecileReport report;
    report.bins.resize(10);
    for (std::size_t b = 0; b < 10; ++b) {
        const std::size_t lo = b * n / 10, hi = (b + 1) * n / 10;
        DecileBin& bin = report.bins[b];
        bin.count = hi - lo;
        for (std::size_t i = lo; i < hi; ++i) {
            bin.mean_sigma_sq += mean_sig[order[i]];
            bin.mean_sq_err += mean_err[order[i]];
        }
        if (bin.count > 0) {
            bin.mean_sigma_sq /= static_cast<double>(bin.count);
            bin.mean_sq_err /= static_cast<double>(bin.count);
        }
    }
    return report;
}

std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size())
        throw DimensionError("spearman requires equal lengths");
    if (xs.size() < 2) throw MetricError("spearman requires at least 2 points");
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

void write_reliability_csv(const std::string& path, const ReliabilityCurve& curve) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "level,observed\n";
    char buf[96];
    for (std::size_t i = 0; i < curve.nominal.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", curve.nominal[i], curve.observed[i]);
        f << buf;
    }
}

void write_deciles_csv(const std::string& path, const DecileReport& report) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "bin,mean_sigma,mean_err,count\n";
    char buf[128];
    for (std::size_t b = 0; b < report.bins.size(); ++b) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%zu\n", b, report.bins[b].mean_sigma_sq,
                      report.bins[b].mean_sq_err, report.bins[b].count);
        f << buf;
    }
}

}  // namespace feduq::metrics
