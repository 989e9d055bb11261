#pragma once

// Test-only oracles. These must stay independent of the implementation paths
// they check: finite differences for gradients, pair counting for AUC,
// Monte-Carlo replicas for generator statistics.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "feduq/graph.hpp"

namespace oracles {

using feduq::math::Graph;
using feduq::math::Tensor;

// builds the node under test from leaf inputs already on the graph
using BuildFn = std::function<Graph::NodeId(Graph&, const std::vector<Graph::NodeId>&)>;

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Checks d(sum(w * f(x)))/dx against central finite differences for every
// element of every input; returns the worst relative error.
inline double gradcheck(const BuildFn& build, std::vector<Tensor> inputs, std::mt19937_64& rng,
                        double h = 1e-5) {
    Tensor weights;  // fixed random projection to a scalar
    {
        Graph g;
        std::vector<Graph::NodeId> ids;
        for (const Tensor& t : inputs) ids.push_back(g.leaf(t));
        const Graph::NodeId out = build(g, ids);
        weights = Tensor::randn(g.value(out).shape, rng);
    }

    auto loss_of = [&](const std::vector<Tensor>& xs) {
        Graph g;
        std::vector<Graph::NodeId> ids;
        for (const Tensor& t : xs) ids.push_back(g.leaf(t));
        const Graph::NodeId out = build(g, ids);
        return g.scalar(g.sum_all(g.mul(out, g.leaf(weights))));
    };

    // analytic gradients
    Graph g;
    std::vector<Graph::NodeId> ids;
    for (const Tensor& t : inputs) ids.push_back(g.leaf(t));
    const Graph::NodeId out = build(g, ids);
    g.backward(g.sum_all(g.mul(out, g.leaf(weights))));

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor& analytic = g.grad(ids[i]);
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            std::vector<Tensor> xs = inputs;
            xs[i].data[j] += h;
            const double up = loss_of(xs);
            xs[i].data[j] -= 2.0 * h;
            const double down = loss_of(xs);
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, rel_err(analytic.data[j], numeric));
        }
    }
    return worst;
}

// Brute-force Mann-Whitney AUC for one class: fraction of (pos, neg) pairs
// won, ties counted half.
inline double auc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

}  // namespace oracles
