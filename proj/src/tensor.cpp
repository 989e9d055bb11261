#include "feduq/tensor.hpp"

#include <cmath>
#include <sstream>

namespace feduq::math {

static std::size_t product(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t v : s) n *= v;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (product(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str());
}

Tensor Tensor::zeros(std::vector<std::size_t> s) {
    std::size_t n = product(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
    std::size_t n = product(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
}

Tensor Tensor::randn(std::vector<std::size_t> s, std::mt19937_64& rng, double stddev) {
    std::size_t n = product(s);
    std::vector<double> d(n);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : d) x = dist(rng);
    return Tensor(std::move(s), std::move(d));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows() on tensor of shape " + shape_str());
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols() on tensor of shape " + shape_str());
    return shape[1];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const { return feduq::math::shape_str(shape); }

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

}  // namespace feduq::math
