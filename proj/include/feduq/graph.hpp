#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "feduq/tensor.hpp"

namespace feduq::math {

// Reverse-mode tape over rank-2 tensors. Nodes are appended in evaluation
// order, so insertion order is a topological order and the backward pass is a
// single reverse sweep. Values are computed eagerly at node creation.
//
// A Graph is single-threaded; distinct Graphs may live on distinct threads.
class Graph {
public:
    using NodeId = std::int32_t;

    enum class Op : std::uint8_t {
        Leaf,
        Matmul,      // a[m,k] * b[k,n]
        MatmulNT,    // a[m,k] * b[n,k]^T
        Add,         // same shape
        Sub,
        Mul,         // elementwise
        AddBias,     // x[m,n] + b[1,n] broadcast over rows
        Scale,       // c0 * x
        Exp,
        Sigmoid,
        Square,
        Gelu,        // exact Gaussian-CDF form x * Phi(x)
        SoftmaxRows,
        LayerNormRows,  // parents: x, gain[1,d], bias[1,d]; c0 = eps
        L2NormRows,     // c0 = eps
        Clamp,          // c0 = lo, c1 = hi
        StopGrad,
        SliceCols,   // c0 = from, c1 = to
        SliceRows,
        ConcatCols,
        ConcatRows,
        ExpandRows,  // tile x[1,n] to [m,n]
        RowDot,      // [m,n],[m,n] -> [m,1]
        ColMul,      // x[m,n] * c[m,1] broadcast over cols
        SumAll,      // -> [1,1]
        MeanAll,     // -> [1,1]
        BceWithLogits,  // mean binary cross-entropy vs. aux targets -> [1,1]
    };

    NodeId leaf(Tensor v);
    NodeId param(const Tensor& v) { return leaf(v); }

    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId add_bias(NodeId x, NodeId b);
    NodeId scale(NodeId x, double c);
    NodeId neg(NodeId x) { return scale(x, -1.0); }
    NodeId exp(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId square(NodeId x);
    NodeId gelu(NodeId x);
    NodeId softmax(NodeId x);
    NodeId layernorm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
    NodeId l2_normalize(NodeId x, double eps = 1e-12);
    NodeId clamp(NodeId x, double lo, double hi);
    NodeId stop_gradient(NodeId x);
    NodeId slice_cols(NodeId x, std::size_t from, std::size_t to);
    NodeId slice_rows(NodeId x, std::size_t from, std::size_t to);
    NodeId concat_cols(std::span<const NodeId> xs);
    NodeId concat_rows(std::span<const NodeId> xs);
    NodeId expand_rows(NodeId x, std::size_t rows);
    NodeId row_dot(NodeId a, NodeId b);
    NodeId col_mul(NodeId x, NodeId c);
    NodeId sum_all(NodeId x);
    NodeId mean_all(NodeId x);
    NodeId bce_with_logits(NodeId logits, Tensor targets);

    // Reverse accumulation from a scalar loss node. Gradient slots for every
    // node reachable from the loss are (re-)populated; stop_gradient blocks
    // both traversal and contribution.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const Tensor& grad(NodeId id) const;
    double scalar(NodeId id) const { return nodes_[id].value.data[0]; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Op op;
        std::vector<NodeId> parents;
        Tensor value;
        Tensor grad;
        double c0 = 0.0;
        double c1 = 0.0;
        std::vector<double> scratch;  // layernorm mean/rstd, l2norm divisors
        Tensor aux;                   // bce targets
        bool reached = false;
    };

    NodeId push(Node n);
    void accumulate(const Node& n);

    std::vector<Node> nodes_;
    Tensor zero_grad_;  // returned for unreached nodes
};

// Multi-head scaled dot-product attention over a 2-D sequence (rows are
// positions). Weight/bias nodes must already live on the graph.
struct AttnWeights {
    Graph::NodeId wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MhaResult {
    Graph::NodeId out;
    std::vector<Graph::NodeId> attn;  // per-head softmax nodes, rows sum to 1
};

MhaResult multi_head_attention(Graph& g, Graph::NodeId q, Graph::NodeId k, Graph::NodeId v,
                               std::size_t heads, const AttnWeights& w);

}  // namespace feduq::math
