#pragma once

#include <cmath>
#include <vector>

#include "feduq/params.hpp"

namespace feduq::fed {

// Adam with bias correction. State is indexed like the ParamSet it was built
// for; clients construct a fresh instance every round.
class Adam {
public:
    explicit Adam(const math::ParamSet& shape, double lr, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        m_.reserve(shape.size());
        v_.reserve(shape.size());
        for (std::size_t i = 0; i < shape.size(); ++i) {
            m_.push_back(math::Tensor::zeros(shape[i].shape));
            v_.push_back(math::Tensor::zeros(shape[i].shape));
        }
    }

    void step(math::ParamSet& params, const std::vector<math::Tensor>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].data;
            const auto& g = grads[i].data;
            auto& m = m_[i].data;
            auto& v = v_[i].data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
                v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
                p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<math::Tensor> m_, v_;
};

}  // namespace feduq::fed
