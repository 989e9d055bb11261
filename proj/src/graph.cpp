#include "feduq/graph.hpp"

#include <cmath>
#include <cstring>

#include "feduq/kernels.hpp"

namespace feduq::math {

Graph::NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

static void check2d(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " expects rank-2, got " + t.shape_str());
}

Graph::NodeId Graph::leaf(Tensor v) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    return push(std::move(n));
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    check2d(A, "matmul");
    check2d(B, "matmul");
    if (A.cols() != B.rows())
        throw DimensionError("matmul inner dimensions differ: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Matmul;
    n.parents = {a, b};
    n.value = Tensor::zeros({A.rows(), B.cols()});
    kern::matmul(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(), B.cols());
    return push(std::move(n));
}

Graph::NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    check2d(A, "matmul_nt");
    check2d(B, "matmul_nt");
    if (A.cols() != B.cols())
        throw DimensionError("matmul_nt inner dimensions differ: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::MatmulNT;
    n.parents = {a, b};
    n.value = Tensor::zeros({A.rows(), B.rows()});
    kern::matmul_nt(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(), B.rows());
    return push(std::move(n));
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B))
        throw DimensionError("add shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Add;
    n.parents = {a, b};
    n.value = A;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += B.data[i];
    return push(std::move(n));
}

Graph::NodeId Graph::sub(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B))
        throw DimensionError("sub shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Sub;
    n.parents = {a, b};
    n.value = A;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] -= B.data[i];
    return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B))
        throw DimensionError("mul shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
    Node n;
    n.op = Op::Mul;
    n.parents = {a, b};
    n.value = A;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= B.data[i];
    return push(std::move(n));
}

Graph::NodeId Graph::add_bias(NodeId x, NodeId b) {
    const Tensor& X = nodes_[x].value;
    const Tensor& B = nodes_[b].value;
    check2d(X, "add_bias");
    if (B.rank() != 2 || B.rows() != 1 || B.cols() != X.cols())
        throw DimensionError("add_bias expects bias [1x" + std::to_string(X.cols()) + "], got " + B.shape_str());
    Node n;
    n.op = Op::AddBias;
    n.parents = {x, b};
    n.value = X;
    const std::size_t cols = X.cols();
    for (std::size_t r = 0; r < X.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) n.value.data[r * cols + c] += B.data[c];
    return push(std::move(n));
}

Graph::NodeId Graph::scale(NodeId x, double c) {
    Node n;
    n.op = Op::Scale;
    n.parents = {x};
    n.c0 = c;
    n.value = nodes_[x].value;
    for (double& v : n.value.data) v *= c;
    return push(std::move(n));
}

Graph::NodeId Graph::exp(NodeId x) {
    Node n;
    n.op = Op::Exp;
    n.parents = {x};
    n.value = nodes_[x].value;
    kern::exp(nodes_[x].value.data.data(), n.value.data.data(), n.value.numel());
    return push(std::move(n));
}

Graph::NodeId Graph::sigmoid(NodeId x) {
    Node n;
    n.op = Op::Sigmoid;
    n.parents = {x};
    n.value = nodes_[x].value;
    kern::sigmoid(nodes_[x].value.data.data(), n.value.data.data(), n.value.numel());
    return push(std::move(n));
}

Graph::NodeId Graph::square(NodeId x) {
    Node n;
    n.op = Op::Square;
    n.parents = {x};
    n.value = nodes_[x].value;
    for (double& v : n.value.data) v *= v;
    return push(std::move(n));
}

Graph::NodeId Graph::gelu(NodeId x) {
    Node n;
    n.op = Op::Gelu;
    n.parents = {x};
    n.value = nodes_[x].value;
    kern::gelu(nodes_[x].value.data.data(), n.value.data.data(), n.value.numel());
    return push(std::move(n));
}

Graph::NodeId Graph::softmax(NodeId x) {
    const Tensor& X = nodes_[x].value;
    check2d(X, "softmax");
    Node n;
    n.op = Op::SoftmaxRows;
    n.parents = {x};
    n.value = Tensor::zeros(X.shape);
    kern::softmax_rows(X.data.data(), n.value.data.data(), X.rows(), X.cols());
    return push(std::move(n));
}

Graph::NodeId Graph::layernorm(NodeId x, NodeId gain, NodeId bias, double eps) {
    const Tensor& X = nodes_[x].value;
    const Tensor& G = nodes_[gain].value;
    const Tensor& B = nodes_[bias].value;
    check2d(X, "layernorm");
    if (X.cols() < 2)
        throw DimensionError("layernorm needs at least 2 features per row, got " + X.shape_str());
    if (G.numel() != X.cols() || B.numel() != X.cols())
        throw DimensionError("layernorm gain/bias must have " + std::to_string(X.cols()) + " entries");
    Node n;
    n.op = Op::LayerNormRows;
    n.parents = {x, gain, bias};
    n.c0 = eps;
    n.value = Tensor::zeros(X.shape);
    n.scratch.resize(2 * X.rows());
    kern::layernorm_rows(X.data.data(), G.data.data(), B.data.data(), eps, n.value.data.data(),
                         n.scratch.data(), n.scratch.data() + X.rows(), X.rows(), X.cols());
    return push(std::move(n));
}

Graph::NodeId Graph::l2_normalize(NodeId x, double eps) {
    const Tensor& X = nodes_[x].value;
    check2d(X, "l2_normalize");
    Node n;
    n.op = Op::L2NormRows;
    n.parents = {x};
    n.c0 = eps;
    n.value = Tensor::zeros(X.shape);
    n.scratch.resize(X.rows());
    kern::l2norm_rows(X.data.data(), eps, n.value.data.data(), n.scratch.data(), X.rows(), X.cols());
    return push(std::move(n));
}

Graph::NodeId Graph::clamp(NodeId x, double lo, double hi) {
    Node n;
    n.op = Op::Clamp;
    n.parents = {x};
    n.c0 = lo;
    n.c1 = hi;
    n.value = nodes_[x].value;
    for (double& v : n.value.data) v = std::min(std::max(v, lo), hi);
    return push(std::move(n));
}

Graph::NodeId Graph::stop_gradient(NodeId x) {
    Node n;
    n.op = Op::StopGrad;
    n.parents = {x};
    n.value = nodes_[x].value;
    return push(std::move(n));
}

Graph::NodeId Graph::slice_cols(NodeId x, std::size_t from, std::size_t to) {
    const Tensor& X = nodes_[x].value;
    check2d(X, "slice_cols");
    if (from >= to || to > X.cols())
        throw DimensionError("slice_cols [" + std::to_string(from) + "," + std::to_string(to) +
                             ") out of range for " + X.shape_str());
    Node n;
    n.op = Op::SliceCols;
    n.parents = {x};
    n.c0 = static_cast<double>(from);
    n.c1 = static_cast<double>(to);
    n.value = Tensor::zeros({X.rows(), to - from});
    for (std::size_t r = 0; r < X.rows(); ++r)
        std::memcpy(&n.value.data[r * (to - from)], &X.data[r * X.cols() + from],
                    (to - from) * sizeof(double));
    return push(std::move(n));
}

Graph::NodeId Graph::slice_rows(NodeId x, std::size_t from, std::size_t to) {
    const Tensor& X = nodes_[x].value;
    check2d(X, "slice_rows");
    if (from >= to || to > X.rows())
        throw DimensionError("slice_rows [" + std::to_string(from) + "," + std::to_string(to) +
                             ") out of range for " + X.shape_str());
    Node n;
    n.op = Op::SliceRows;
    n.parents = {x};
    n.c0 = static_cast<double>(from);
    n.c1 = static_cast<double>(to);
    n.value = Tensor::zeros({to - from, X.cols()});
    std::memcpy(n.value.data.data(), &X.data[from * X.cols()], (to - from) * X.cols() * sizeof(double));
    return push(std::move(n));
}

Graph::NodeId Graph::concat_cols(std::span<const NodeId> xs) {
    if (xs.empty()) throw DimensionError("concat_cols of zero tensors");
    std::size_t rows = nodes_[xs[0]].value.rows();
    std::size_t cols = 0;
    for (NodeId id : xs) {
        check2d(nodes_[id].value, "concat_cols");
        if (nodes_[id].value.rows() != rows)
            throw DimensionError("concat_cols row mismatch: " + nodes_[id].value.shape_str());
        cols += nodes_[id].value.cols();
    }
    Node n;
    n.op = Op::ConcatCols;
    n.parents.assign(xs.begin(), xs.end());
    n.value = Tensor::zeros({rows, cols});
    std::size_t off = 0;
    for (NodeId id : xs) {
        const Tensor& P = nodes_[id].value;
        for (std::size_t r = 0; r < rows; ++r)
            std::memcpy(&n.value.data[r * cols + off], &P.data[r * P.cols()], P.cols() * sizeof(double));
        off += P.cols();
    }
    return push(std::move(n));
}

Graph::NodeId Graph::concat_rows(std::span<const NodeId> xs) {
    if (xs.empty()) throw DimensionError("concat_rows of zero tensors");
    std::size_t cols = nodes_[xs[0]].value.cols();
    std::size_t rows = 0;
    for (NodeId id : xs) {
        check2d(nodes_[id].value, "concat_rows");
        if (nodes_[id].value.cols() != cols)
            throw DimensionError("concat_rows column mismatch: " + nodes_[id].value.shape_str());
        rows += nodes_[id].value.rows();
    }
    Node n;
    n.op = Op::ConcatRows;
    n.parents.assign(xs.begin(), xs.end());
    n.value = Tensor::zeros({rows, cols});
    std::size_t off = 0;
    for (NodeId id : xs) {
        const Tensor& P = nodes_[id].value;
        std::memcpy(&n.value.data[off * cols], P.data.data(), P.numel() * sizeof(double));
        off += P.rows();
    }
    return push(std::move(n));
}

Graph::NodeId Graph::expand_rows(NodeId x, std::size_t rows) {
    const Tensor& X = nodes_[x].value;
    check2d(X, "expand_rows");
    if (X.rows() != 1) throw DimensionError("expand_rows expects [1xn], got " + X.shape_str());
    Node n;
    n.op = Op::ExpandRows;
    n.parents = {x};
    n.value = Tensor::zeros({rows, X.cols()});
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(&n.value.data[r * X.cols()], X.data.data(), X.cols() * sizeof(double));
    return push(std::move(n));
}

Graph::NodeId Graph::row_dot(NodeId a, NodeId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B))
        throw DimensionError("row_dot shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
    check2d(A, "row_dot");
    Node n;
    n.op = Op::RowDot;
    n.parents = {a, b};
    n.value = Tensor::zeros({A.rows(), 1});
    for (std::size_t r = 0; r < A.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < A.cols(); ++c) s += A.at(r, c) * B.at(r, c);
        n.value.data[r] = s;
    }
    return push(std::move(n));
}

Graph::NodeId Graph::col_mul(NodeId x, NodeId c) {
    const Tensor& X = nodes_[x].value;
    const Tensor& C = nodes_[c].value;
    check2d(X, "col_mul");
    if (C.rank() != 2 || C.cols() != 1 || C.rows() != X.rows())
        throw DimensionError("col_mul expects [" + std::to_string(X.rows()) + "x1], got " + C.shape_str());
    Node n;
    n.op = Op::ColMul;
    n.parents = {x, c};
    n.value = X;
    for (std::size_t r = 0; r < X.rows(); ++r)
        for (std::size_t j = 0; j < X.cols(); ++j) n.value.data[r * X.cols() + j] *= C.data[r];
    return push(std::move(n));
}

Graph::NodeId Graph::sum_all(NodeId x) {
    Node n;
    n.op = Op::SumAll;
    n.parents = {x};
    double s = 0.0;
    for (double v : nodes_[x].value.data) s += v;
    n.value = Tensor::scalar(s);
    return push(std::move(n));
}

Graph::NodeId Graph::mean_all(NodeId x) {
    Node n;
    n.op = Op::MeanAll;
    n.parents = {x};
    double s = 0.0;
    for (double v : nodes_[x].value.data) s += v;
    n.value = Tensor::scalar(s / static_cast<double>(nodes_[x].value.numel()));
    return push(std::move(n));
}

Graph::NodeId Graph::bce_with_logits(NodeId logits, Tensor targets) {
    const Tensor& L = nodes_[logits].value;
    if (!L.same_shape(targets))
        throw DimensionError("bce_with_logits shape mismatch: " + L.shape_str() + " vs " +
                             targets.shape_str());
    Node n;
    n.op = Op::BceWithLogits;
    n.parents = {logits};
    n.aux = std::move(targets);
    double s = 0.0;
    for (std::size_t i = 0; i < L.numel(); ++i) {
        const double l = L.data[i], y = n.aux.data[i];
        s += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
    }
    n.value = Tensor::scalar(s / static_cast<double>(L.numel()));
    return push(std::move(n));
}

const Tensor& Graph::grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.grad.numel() == 0) {
        // unreached by the last backward pass: gradient is zero
        const_cast<Graph*>(this)->nodes_[id].grad = Tensor::zeros(n.value.shape);
    }
    return nodes_[id].grad;
}

void Graph::backward(NodeId loss) {
    if (nodes_[loss].value.numel() != 1)
        throw ContractError("backward requires a scalar loss node, got " +
                            nodes_[loss].value.shape_str());

    for (Node& n : nodes_) n.reached = false;
    // mark reachable, stopping at StopGrad boundaries
    std::vector<NodeId> stack{loss};
    nodes_[loss].reached = true;
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        if (nodes_[id].op == Op::StopGrad) continue;
        for (NodeId p : nodes_[id].parents)
            if (!nodes_[p].reached) {
                nodes_[p].reached = true;
                stack.push_back(p);
            }
    }
    for (Node& n : nodes_) {
        if (!n.reached) continue;
        if (n.grad.numel() != n.value.numel()) n.grad = Tensor::zeros(n.value.shape);
        else std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
    nodes_[loss].grad.data[0] = 1.0;

    for (NodeId id = loss; id >= 0; --id) {
        const Node& n = nodes_[id];
        if (!n.reached || n.parents.empty() || n.op == Op::StopGrad) continue;
        accumulate(n);
    }
}

void Graph::accumulate(const Node& n) {
    const Tensor& g = n.grad;
    auto& P = nodes_;
    auto pg = [&](int i) -> Tensor& { return P[n.parents[i]].grad; };
    auto pv = [&](int i) -> const Tensor& { return P[n.parents[i]].value; };

    switch (n.op) {
        case Op::Matmul: {
            const Tensor& A = pv(0);
            const Tensor& B = pv(1);
            Tensor da = Tensor::zeros(A.shape), db = Tensor::zeros(B.shape);
            kern::matmul_nt(g.data.data(), B.data.data(), da.data.data(), A.rows(), B.cols(), A.cols());
            kern::matmul_tn(A.data.data(), g.data.data(), db.data.data(), A.rows(), A.cols(), B.cols());
            for (std::size_t i = 0; i < da.numel(); ++i) pg(0).data[i] += da.data[i];
            for (std::size_t i = 0; i < db.numel(); ++i) pg(1).data[i] += db.data[i];
            break;
        }
        case Op::MatmulNT: {
            const Tensor& A = pv(0);
            const Tensor& B = pv(1);
            Tensor da = Tensor::zeros(A.shape), db = Tensor::zeros(B.shape);
            kern::matmul(g.data.data(), B.data.data(), da.data.data(), A.rows(), B.rows(), B.cols());
            kern::matmul_tn(g.data.data(), A.data.data(), db.data.data(), A.rows(), B.rows(), A.cols());
            for (std::size_t i = 0; i < da.numel(); ++i) pg(0).data[i] += da.data[i];
            for (std::size_t i = 0; i < db.numel(); ++i) pg(1).data[i] += db.data[i];
            break;
        }
        case Op::Add:
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += g.data[i];
            for (std::size_t i = 0; i < g.numel(); ++i) pg(1).data[i] += g.data[i];
            break;
        case Op::Sub:
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += g.data[i];
            for (std::size_t i = 0; i < g.numel(); ++i) pg(1).data[i] -= g.data[i];
            break;
        case Op::Mul:
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += g.data[i] * pv(1).data[i];
            for (std::size_t i = 0; i < g.numel(); ++i) pg(1).data[i] += g.data[i] * pv(0).data[i];
            break;
        case Op::AddBias: {
            const std::size_t rows = g.rows(), cols = g.cols();
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += g.data[i];
            for (std::size_t c = 0; c < cols; ++c) {
                double s = 0.0;
                for (std::size_t r = 0; r < rows; ++r) s += g.data[r * cols + c];
                pg(1).data[c] += s;
            }
            break;
        }
        case Op::Scale:
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += n.c0 * g.data[i];
            break;
        case Op::Exp:
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += g.data[i] * n.value.data[i];
            break;
        case Op::Sigmoid:
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const double y = n.value.data[i];
                pg(0).data[i] += g.data[i] * y * (1.0 - y);
            }
            break;
        case Op::Square:
            for (std::size_t i = 0; i < g.numel(); ++i)
                pg(0).data[i] += 2.0 * g.data[i] * pv(0).data[i];
            break;
        case Op::Gelu: {
            Tensor dx = Tensor::zeros(g.shape);
            kern::gelu_grad(pv(0).data.data(), g.data.data(), dx.data.data(), g.numel());
            for (std::size_t i = 0; i < g.numel(); ++i) pg(0).data[i] += dx.data[i];
            break;
        }
        case Op::SoftmaxRows: {
            const std::size_t rows = g.rows(), cols = g.cols();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* yr = &n.value.data[r * cols];
                const double* gr = &g.data[r * cols];
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < cols; ++j)
                    pg(0).data[r * cols + j] += yr[j] * (gr[j] - dot);
            }
            break;
        }
        case Op::LayerNormRows: {
            const Tensor& X = pv(0);
            const Tensor& gain = pv(1);
            const std::size_t rows = X.rows(), cols = X.cols();
            const double* mean = n.scratch.data();
            const double* rstd = n.scratch.data() + rows;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = &X.data[r * cols];
                const double* gr = &g.data[r * cols];
                double mgh = 0.0, mghx = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double xhat = (xr[j] - mean[r]) * rstd[r];
                    const double gh = gr[j] * gain.data[j];
                    mgh += gh;
                    mghx += gh * xhat;
                    pg(1).data[j] += gr[j] * xhat;  // gain
                    pg(2).data[j] += gr[j];         // bias
                }
                mgh /= static_cast<double>(cols);
                mghx /= static_cast<double>(cols);
                for (std::size_t j = 0; j < cols; ++j) {
                    const double xhat = (xr[j] - mean[r]) * rstd[r];
                    const double gh = gr[j] * gain.data[j];
                    pg(0).data[r * cols + j] += rstd[r] * (gh - mgh - xhat * mghx);
                }
            }
            break;
        }
        case Op::L2NormRows: {
            const Tensor& X = pv(0);
            const std::size_t rows = X.rows(), cols = X.cols();
            for (std::size_t r = 0; r < rows; ++r) {
                const double nrm = n.scratch[r];
                const double* gr = &g.data[r * cols];
                const double* yr = &n.value.data[r * cols];
                if (nrm > n.c0) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                    for (std::size_t j = 0; j < cols; ++j)
                        pg(0).data[r * cols + j] += (gr[j] - yr[j] * dot) / nrm;
                } else {
                    for (std::size_t j = 0; j < cols; ++j)
                        pg(0).data[r * cols + j] += gr[j] / nrm;
                }
            }
            break;
        }
        case Op::Clamp:
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const double x = pv(0).data[i];
                if (x >= n.c0 && x <= n.c1) pg(0).data[i] += g.data[i];
            }
            break;
        case Op::SliceCols: {
            const std::size_t from = static_cast<std::size_t>(n.c0);
            const std::size_t w = g.cols(), pcols = pv(0).cols();
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t j = 0; j < w; ++j)
                    pg(0).data[r * pcols + from + j] += g.data[r * w + j];
            break;
        }
        case Op::SliceRows: {
            const std::size_t from = static_cast<std::size_t>(n.c0);
            const std::size_t cols = g.cols();
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t j = 0; j < cols; ++j)
                    pg(0).data[(from + r) * cols + j] += g.data[r * cols + j];
            break;
        }
        case Op::ConcatCols: {
            std::size_t off = 0;
            const std::size_t cols = g.cols();
            for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                const std::size_t pc = pv(static_cast<int>(pi)).cols();
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t j = 0; j < pc; ++j)
                        pg(static_cast<int>(pi)).data[r * pc + j] += g.data[r * cols + off + j];
                off += pc;
            }
            break;
        }
        case Op::ConcatRows: {
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                const std::size_t nel = pv(static_cast<int>(pi)).numel();
                for (std::size_t i = 0; i < nel; ++i)
                    pg(static_cast<int>(pi)).data[i] += g.data[off + i];
                off += nel;
            }
            break;
        }
        case Op::ExpandRows: {
            const std::size_t cols = g.cols();
            for (std::size_t j = 0; j < cols; ++j) {
                double s = 0.0;
                for (std::size_t r = 0; r < g.rows(); ++r) s += g.data[r * cols + j];
                pg(0).data[j] += s;
            }
            break;
        }
        case Op::RowDot: {
            const Tensor& A = pv(0);
            const Tensor& B = pv(1);
            for (std::size_t r = 0; r < A.rows(); ++r) {
                const double gr = g.data[r];
                for (std::size_t j = 0; j < A.cols(); ++j) {
                    pg(0).data[r * A.cols() + j] += gr * B.data[r * A.cols() + j];
                    pg(1).data[r * A.cols() + j] += gr * A.data[r * A.cols() + j];
                }
            }
            break;
        }
        case Op::ColMul: {
            const Tensor& X = pv(0);
            const Tensor& C = pv(1);
            for (std::size_t r = 0; r < X.rows(); ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < X.cols(); ++j) {
                    pg(0).data[r * X.cols() + j] += g.data[r * X.cols() + j] * C.data[r];
                    s += g.data[r * X.cols() + j] * X.data[r * X.cols() + j];
                }
                pg(1).data[r] += s;
            }
            break;
        }
        case Op::SumAll: {
            const double gs = g.data[0];
            for (std::size_t i = 0; i < pv(0).numel(); ++i) pg(0).data[i] += gs;
            break;
        }
        case Op::MeanAll: {
            const double gs = g.data[0] / static_cast<double>(pv(0).numel());
            for (std::size_t i = 0; i < pv(0).numel(); ++i) pg(0).data[i] += gs;
            break;
        }
        case Op::BceWithLogits: {
            const Tensor& L = pv(0);
            const double gs = g.data[0] / static_cast<double>(L.numel());
            for (std::size_t i = 0; i < L.numel(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-L.data[i]));
                pg(0).data[i] += gs * (s - n.aux.data[i]);
            }
            break;
        }
        case Op::Leaf:
        case Op::StopGrad:
            break;
    }
}

MhaResult multi_head_attention(Graph& g, Graph::NodeId q, Graph::NodeId k, Graph::NodeId v,
                               std::size_t heads, const AttnWeights& w) {
    const std::size_t d = g.value(q).cols();
    if (heads == 0 || d % heads != 0)
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const std::size_t hd = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Graph::NodeId Q = g.add_bias(g.matmul(q, w.wq), w.bq);
    Graph::NodeId K = g.add_bias(g.matmul(k, w.wk), w.bk);
    Graph::NodeId V = g.add_bias(g.matmul(v, w.wv), w.bv);

    MhaResult res;
    std::vector<Graph::NodeId> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
        Graph::NodeId Qh = g.slice_cols(Q, h * hd, (h + 1) * hd);
        Graph::NodeId Kh = g.slice_cols(K, h * hd, (h + 1) * hd);
        Graph::NodeId Vh = g.slice_cols(V, h * hd, (h + 1) * hd);
        Graph::NodeId A = g.softmax(g.scale(g.matmul_nt(Qh, Kh), inv_scale));
        res.attn.push_back(A);
        head_out.push_back(g.matmul(A, Vh));
    }
    Graph::NodeId O = head_out.size() == 1 ? head_out[0] : g.concat_cols(head_out);
    res.out = g.add_bias(g.matmul(O, w.wo), w.bo);
    return res;
}

}  // namespace feduq::math
