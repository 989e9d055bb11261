#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "feduq/common.hpp"

namespace feduq::math {

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 cover everything the
// model needs; attention over the fixed-length token sequence is expressed as
// a list of rank-2 tensors (one per position).
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d);
    static Tensor zeros(std::vector<std::size_t> s);
    static Tensor full(std::vector<std::size_t> s, double v);
    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
    // iid N(0, stddev^2) entries
    static Tensor randn(std::vector<std::size_t> s, std::mt19937_64& rng, double stddev = 1.0);

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    std::string shape_str() const;
};

std::string shape_str(const std::vector<std::size_t>& s);

}  // namespace feduq::math
