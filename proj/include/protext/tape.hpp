#pragma once

// Tape-based reverse-mode differentiation over a fixed op vocabulary:
// matmul (plain and B-transposed), add/sub/mul/scale, row-broadcast add,
// layer norm, GELU, softmax (plain, causal, log-sum-exp), slice/concat,
// L2 normalize, and reductions. Gradients flow only into parameter leaves
// marked trainable; constants and frozen parameters are never touched.
//
// Every op validates shapes and checks its output for NaN/Inf.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "protext/common.hpp"
#include "protext/tensor.hpp"

namespace protext::num {

// Parameter id -> gradient tensor of identical shape; trainable params only.
using GradientMap = std::map<std::string, Tensor>;

struct Parameter {
    Tensor value;
    bool trainable = false;
};

// Named parameters with trainable/frozen flags; insertion into the map is
// ordered by name, which fixes the optimizer update order.
using ParameterSet = std::map<std::string, Parameter>;

enum class GeluKind { tanh_approx, exact };

class Tape {
public:
    using NodeId = std::uint32_t;

    // ---- leaves ----

    NodeId constant(Tensor t) {
        require_finite(t, "constant leaf");
        return push_leaf(std::move(t), /*requires_grad=*/false, "");
    }

    // Binds a named parameter. Re-binding the same id returns the original
    // node so a batch of forwards shares one leaf per parameter.
    NodeId parameter(const std::string& id, const Tensor& t, bool trainable) {
        auto it = param_nodes_.find(id);
        if (it != param_nodes_.end()) {
            return it->second;
        }
        require_finite(t, "parameter leaf");
        NodeId n = push_leaf(t, trainable, id);
        param_nodes_.emplace(id, n);
        return n;
    }

    // ---- elementwise ----

    NodeId add(NodeId a, NodeId b) {
        require_same_shape(a, b, "add");
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] += value(b).data[i];
        }
        return push(Op::add, {a, b}, std::move(out));
    }

    NodeId sub(NodeId a, NodeId b) {
        require_same_shape(a, b, "sub");
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] -= value(b).data[i];
        }
        return push(Op::sub, {a, b}, std::move(out));
    }

    NodeId mul(NodeId a, NodeId b) {
        require_same_shape(a, b, "mul");
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.data[i] *= value(b).data[i];
        }
        return push(Op::mul, {a, b}, std::move(out));
    }

    NodeId scale(NodeId a, double s) {
        Tensor out = value(a);
        for (double& v : out.data) {
            v *= s;
        }
        NodeId n = push(Op::scale, {a}, std::move(out));
        node(n).attr0 = s;
        return n;
    }

    NodeId abs(NodeId a) {
        Tensor out = value(a);
        for (double& v : out.data) {
            v = std::fabs(v);
        }
        return push(Op::abs, {a}, std::move(out));
    }

    NodeId gelu(NodeId a, GeluKind kind) {
        const Tensor& x = value(a);
        Tensor out = x;
        if (kind == GeluKind::tanh_approx) {
            for (double& v : out.data) {
                const double c = 0.7978845608028654;  // sqrt(2/pi)
                v = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
            }
        } else {
            for (double& v : out.data) {
                v = 0.5 * v * (1.0 + std::erf(v / 1.4142135623730951));
            }
        }
        NodeId n = push(Op::gelu, {a}, std::move(out));
        node(n).attr0 = kind == GeluKind::tanh_approx ? 0.0 : 1.0;
        return n;
    }

    // ---- linear algebra ----

    // [m,k] x [k,n] -> [m,n]
    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
            throw ValidationError("matmul shape mismatch: " + A.shape_str() + " x " + B.shape_str());
        }
        Tensor out = Tensor::zeros({A.rows(), B.cols()});
        matmul_accumulate(A.data.data(), B.data.data(), out.data.data(), A.rows(), A.cols(),
                          B.cols());
        return push(Op::matmul, {a, b}, std::move(out));
    }

    // [m,k] x [n,k]^T -> [m,n]
    NodeId matmul_nt(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols()) {
            throw ValidationError("matmul_nt shape mismatch: " + A.shape_str() + " x " +
                                  B.shape_str() + "^T");
        }
        const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
        Tensor out = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                out.data[i * n + j] = dot({&A.data[i * k], k}, {&B.data[j * k], k});
            }
        }
        return push(Op::matmul_nt, {a, b}, std::move(out));
    }

    NodeId transpose(NodeId a) {
        const Tensor& A = value(a);
        if (A.rank() != 2) {
            throw ValidationError("transpose expects rank-2, got " + A.shape_str());
        }
        Tensor out = Tensor::zeros({A.cols(), A.rows()});
        for (std::size_t i = 0; i < A.rows(); ++i) {
            for (std::size_t j = 0; j < A.cols(); ++j) {
                out.data[j * A.rows() + i] = A.data[i * A.cols() + j];
            }
        }
        return push(Op::transpose, {a}, std::move(out));
    }

    // Adds a [n] vector to every row of a [m,n] matrix.
    NodeId add_rowvec(NodeId m, NodeId v) {
        const Tensor& M = value(m);
        const Tensor& V = value(v);
        if (M.rank() != 2 || V.size() != M.cols()) {
            throw ValidationError("add_rowvec shape mismatch: " + M.shape_str() + " + " +
                                  V.shape_str());
        }
        Tensor out = M;
        for (std::size_t i = 0; i < M.rows(); ++i) {
            for (std::size_t j = 0; j < M.cols(); ++j) {
                out.data[i * M.cols() + j] += V.data[j];
            }
        }
        return push(Op::add_rowvec, {m, v}, std::move(out));
    }

    NodeId reshape(NodeId a, std::vector<std::size_t> shape) {
        const Tensor& A = value(a);
        if (Tensor::element_count(shape) != A.size()) {
            throw ValidationError("reshape element count mismatch");
        }
        Tensor out(std::move(shape), A.data);
        return push(Op::reshape, {a}, std::move(out));
    }

    // ---- slicing / concatenation ----

    NodeId slice_rows(NodeId a, std::size_t r0, std::size_t r1) {
        const Tensor& A = value(a);
        if (A.rank() != 2 || r0 > r1 || r1 > A.rows()) {
            throw ValidationError("slice_rows out of range on " + A.shape_str());
        }
        const std::size_t c = A.cols();
        Tensor out({r1 - r0, c},
                   std::vector<double>(A.data.begin() + r0 * c, A.data.begin() + r1 * c));
        NodeId n = push(Op::slice_rows, {a}, std::move(out));
        node(n).attr0 = static_cast<double>(r0);
        return n;
    }

    NodeId slice_cols(NodeId a, std::size_t c0, std::size_t c1) {
        const Tensor& A = value(a);
        if (A.rank() != 2 || c0 > c1 || c1 > A.cols()) {
            throw ValidationError("slice_cols out of range on " + A.shape_str());
        }
        Tensor out = Tensor::zeros({A.rows(), c1 - c0});
        for (std::size_t i = 0; i < A.rows(); ++i) {
            for (std::size_t j = c0; j < c1; ++j) {
                out.data[i * (c1 - c0) + (j - c0)] = A.data[i * A.cols() + j];
            }
        }
        NodeId n = push(Op::slice_cols, {a}, std::move(out));
        node(n).attr0 = static_cast<double>(c0);
        return n;
    }

    NodeId concat_rows(std::span<const NodeId> parts) {
        if (parts.empty()) {
            throw ValidationError("concat_rows of nothing");
        }
        const std::size_t c = value(parts[0]).cols();
        std::size_t rows = 0;
        for (NodeId p : parts) {
            const Tensor& t = value(p);
            if (t.rank() != 2 || t.cols() != c) {
                throw ValidationError("concat_rows column mismatch");
            }
            rows += t.rows();
        }
        Tensor out = Tensor::zeros({rows, c});
        std::size_t at = 0;
        for (NodeId p : parts) {
            const Tensor& t = value(p);
            std::copy(t.data.begin(), t.data.end(), out.data.begin() + at);
            at += t.size();
        }
        return push(Op::concat_rows, {parts.begin(), parts.end()}, std::move(out));
    }

    NodeId concat_cols(std::span<const NodeId> parts) {
        if (parts.empty()) {
            throw ValidationError("concat_cols of nothing");
        }
        const std::size_t r = value(parts[0]).rows();
        std::size_t cols = 0;
        for (NodeId p : parts) {
            const Tensor& t = value(p);
            if (t.rank() != 2 || t.rows() != r) {
                throw ValidationError("concat_cols row mismatch");
            }
            cols += t.cols();
        }
        Tensor out = Tensor::zeros({r, cols});
        std::size_t at = 0;
        for (NodeId p : parts) {
            const Tensor& t = value(p);
            for (std::size_t i = 0; i < r; ++i) {
                std::copy(t.data.begin() + i * t.cols(), t.data.begin() + (i + 1) * t.cols(),
                          out.data.begin() + i * cols + at);
            }
            at += t.cols();
        }
        return push(Op::concat_cols, {parts.begin(), parts.end()}, std::move(out));
    }

    // ---- normalization / softmax ----

    // Per-row layer norm with affine gain/bias.
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
        const Tensor& X = value(x);
        const std::size_t c = X.cols();
        if (X.rank() != 2 || value(gamma).size() != c || value(beta).size() != c) {
            throw ValidationError("layer_norm shape mismatch on " + X.shape_str());
        }
        Tensor out = Tensor::zeros(X.shape);
        NodeId n_pre = next_id();
        std::vector<double> saved(2 * X.rows());  // mean, rstd per row
        for (std::size_t i = 0; i < X.rows(); ++i) {
            const double* row = &X.data[i * c];
            double mean = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                mean += row[j];
            }
            mean /= static_cast<double>(c);
            double var = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = row[j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(c);
            const double rstd = 1.0 / std::sqrt(var + eps);
            saved[2 * i] = mean;
            saved[2 * i + 1] = rstd;
            for (std::size_t j = 0; j < c; ++j) {
                out.data[i * c + j] =
                    (row[j] - mean) * rstd * value(gamma).data[j] + value(beta).data[j];
            }
        }
        NodeId n = push(Op::layer_norm, {x, gamma, beta}, std::move(out));
        (void)n_pre;
        node(n).saved = std::move(saved);
        node(n).attr0 = eps;
        return n;
    }

    NodeId softmax_rows(NodeId a) {
        const Tensor& A = value(a);
        if (A.rank() != 2) {
            throw ValidationError("softmax_rows expects rank-2, got " + A.shape_str());
        }
        Tensor out = A;
        for (std::size_t i = 0; i < A.rows(); ++i) {
            softmax_inplace(&out.data[i * A.cols()], A.cols());
        }
        return push(Op::softmax_rows, {a}, std::move(out));
    }

    // Softmax over a square [L,L] score matrix restricted to j <= i; masked
    // entries are structurally exact zeros, so positions can never attend
    // forward regardless of score magnitudes.
    NodeId causal_softmax(NodeId a) {
        const Tensor& A = value(a);
        if (A.rank() != 2 || A.rows() != A.cols()) {
            throw ValidationError("causal_softmax expects square matrix, got " + A.shape_str());
        }
        const std::size_t L = A.rows();
        Tensor out = Tensor::zeros(A.shape);
        for (std::size_t i = 0; i < L; ++i) {
            std::copy(&A.data[i * L], &A.data[i * L + i + 1], &out.data[i * L]);
            softmax_inplace(&out.data[i * L], i + 1);
        }
        return push(Op::causal_softmax, {a}, std::move(out));
    }

    NodeId logsumexp_rows(NodeId a) {
        const Tensor& A = value(a);
        if (A.rank() != 2) {
            throw ValidationError("logsumexp_rows expects rank-2, got " + A.shape_str());
        }
        Tensor out = Tensor::zeros({A.rows()});
        for (std::size_t i = 0; i < A.rows(); ++i) {
            const double* row = &A.data[i * A.cols()];
            double mx = row[0];
            for (std::size_t j = 1; j < A.cols(); ++j) {
                mx = std::max(mx, row[j]);
            }
            double s = 0.0;
            for (std::size_t j = 0; j < A.cols(); ++j) {
                s += std::exp(row[j] - mx);
            }
            out.data[i] = mx + std::log(s);
        }
        return push(Op::logsumexp_rows, {a}, std::move(out));
    }

    NodeId diag_sum(NodeId a) {
        const Tensor& A = value(a);
        if (A.rank() != 2 || A.rows() != A.cols()) {
            throw ValidationError("diag_sum expects square matrix, got " + A.shape_str());
        }
        double s = 0.0;
        for (std::size_t i = 0; i < A.rows(); ++i) {
            s += A.data[i * A.cols() + i];
        }
        return push(Op::diag_sum, {a}, Tensor::scalar(s));
    }

    // Whole-tensor L2 normalization (features are flat vectors).
    NodeId l2_normalize(NodeId a) {
        const Tensor& A = value(a);
        const double norm = l2_norm(A.data);
        if (norm < 1e-300) {
            throw NumericError("l2_normalize of (near-)zero vector");
        }
        Tensor out = A;
        for (double& v : out.data) {
            v /= norm;
        }
        NodeId n = push(Op::l2_normalize, {a}, std::move(out));
        node(n).attr0 = norm;
        return n;
    }

    // ---- reductions ----

    NodeId sum(NodeId a) {
        double s = 0.0;
        for (double v : value(a).data) {
            s += v;
        }
        return push(Op::sum, {a}, Tensor::scalar(s));
    }

    NodeId mean(NodeId a) {
        const std::size_t n = value(a).size();
        double s = 0.0;
        for (double v : value(a).data) {
            s += v;
        }
        return push(Op::mean, {a}, Tensor::scalar(s / static_cast<double>(n)));
    }

    // ---- access ----

    const Tensor& value(NodeId n) const { return nodes_[n].value; }
    bool requires_grad(NodeId n) const { return nodes_[n].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // Gradient of the most recent backward() w.r.t. an arbitrary node
    // (zeros if the node did not participate). Mainly for tests.
    Tensor grad_of(NodeId n) const {
        if (n < grads_.size() && !grads_[n].empty()) {
            return Tensor(nodes_[n].value.shape, grads_[n]);
        }
        return Tensor::zeros(nodes_[n].value.shape);
    }

    // Reverse pass from a scalar loss, restricted to trainable parameters of
    // `params`. Trainables absent from the recorded computation get zero
    // gradients of the parameter's shape.
    GradientMap backward(NodeId loss, const ParameterSet& params) {
        if (!value(loss).is_scalar()) {
            throw ValidationError("backward: loss must be scalar, got " +
                                  value(loss).shape_str());
        }
        bool any_trainable = false;
        for (const auto& [id, p] : params) {
            any_trainable |= p.trainable;
        }
        if (!any_trainable) {
            throw ValidationError("backward: trainable set is empty");
        }

        grads_.assign(nodes_.size(), {});
        grads_[loss].assign(1, 1.0);

        // Nodes are created after their inputs, so reverse creation order is
        // a valid topological order; this also fixes the accumulation order
        // so batched runs are deterministic.
        for (NodeId n = loss + 1; n-- > 0;) {
            if (grads_[n].empty() || !nodes_[n].requires_grad) {
                continue;
            }
            propagate(n);
        }

        GradientMap out;
        for (const auto& [id, p] : params) {
            if (!p.trainable) {
                continue;
            }
            auto it = param_nodes_.find(id);
            if (it != param_nodes_.end() && it->second <= loss && !grads_[it->second].empty()) {
                Tensor g(p.value.shape, grads_[it->second]);
                if (!g.all_finite()) {
                    throw NumericError("NaN/Inf gradient for parameter " + id);
                }
                out.emplace(id, std::move(g));
            } else {
                out.emplace(id, Tensor::zeros(p.value.shape));
            }
        }
        return out;
    }

private:
    enum class Op : std::uint8_t {
        leaf,
        add,
        sub,
        mul,
        scale,
        abs,
        gelu,
        matmul,
        matmul_nt,
        transpose,
        add_rowvec,
        reshape,
        slice_rows,
        slice_cols,
        concat_rows,
        concat_cols,
        layer_norm,
        softmax_rows,
        causal_softmax,
        logsumexp_rows,
        diag_sum,
        l2_normalize,
        sum,
        mean,
    };

    struct Node {
        Op op = Op::leaf;
        Tensor value;
        std::vector<NodeId> inputs;
        bool requires_grad = false;
        double attr0 = 0.0;          // op-specific scalar (scale factor, offsets, eps, norm)
        std::vector<double> saved;   // op-specific saved context (layer-norm stats)
    };

    NodeId next_id() const { return static_cast<NodeId>(nodes_.size()); }

    NodeId push_leaf(Tensor t, bool requires_grad, const std::string&) {
        Node n;
        n.op = Op::leaf;
        n.value = std::move(t);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId push(Op op, std::vector<NodeId> inputs, Tensor out) {
        require_finite(out, op_name(op));
        Node n;
        n.op = op;
        n.value = std::move(out);
        n.requires_grad = false;
        for (NodeId i : inputs) {
            n.requires_grad |= nodes_[i].requires_grad;
        }
        n.inputs = std::move(inputs);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    Node& node(NodeId n) { return nodes_[n]; }

    void require_same_shape(NodeId a, NodeId b, const char* op) {
        if (!value(a).same_shape(value(b))) {
            throw ValidationError(std::string(op) + " shape mismatch: " + value(a).shape_str() +
                                  " vs " + value(b).shape_str());
        }
    }

    static void softmax_inplace(double* row, std::size_t n) {
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, row[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            row[j] /= s;
        }
    }

    static void matmul_accumulate(const double* A, const double* B, double* C, std::size_t m,
                                  std::size_t k, std::size_t n) {
        // ikj order keeps B traversal contiguous.
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double a = A[i * k + p];
                if (a == 0.0) {
                    continue;
                }
                const double* brow = &B[p * n];
                double* crow = &C[i * n];
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += a * brow[j];
                }
            }
        }
    }

    std::vector<double>& grad_buf(NodeId n) {
        if (grads_[n].empty()) {
            grads_[n].assign(nodes_[n].value.size(), 0.0);
        }
        return grads_[n];
    }

    // Accumulates into an input's gradient only when that input needs it.
    bool wants_grad(NodeId n) const { return nodes_[n].requires_grad; }

    void propagate(NodeId nid) {
        const Node& n = nodes_[nid];
        const std::vector<double>& g = grads_[nid];
        switch (n.op) {
            case Op::leaf:
                return;
            case Op::add: {
                for (int s = 0; s < 2; ++s) {
                    NodeId in = n.inputs[s];
                    if (!wants_grad(in)) continue;
                    auto& gi = grad_buf(in);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gi[i] += g[i];
                    }
                }
                return;
            }
            case Op::sub: {
                if (wants_grad(n.inputs[0])) {
                    auto& gi = grad_buf(n.inputs[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gi[i] += g[i];
                    }
                }
                if (wants_grad(n.inputs[1])) {
                    auto& gi = grad_buf(n.inputs[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gi[i] -= g[i];
                    }
                }
                return;
            }
            case Op::mul: {
                const Tensor& A = nodes_[n.inputs[0]].value;
                const Tensor& B = nodes_[n.inputs[1]].value;
                if (wants_grad(n.inputs[0])) {
                    auto& gi = grad_buf(n.inputs[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gi[i] += g[i] * B.data[i];
                    }
                }
                if (wants_grad(n.inputs[1])) {
                    auto& gi = grad_buf(n.inputs[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gi[i] += g[i] * A.data[i];
                    }
                }
                return;
            }
            case Op::scale: {
                if (!wants_grad(n.inputs[0])) return;
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gi[i] += g[i] * n.attr0;
                }
                return;
            }
            case Op::abs: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& X = nodes_[n.inputs[0]].value;
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    // subgradient 0 at x == 0
                    gi[i] += g[i] * (X.data[i] > 0.0 ? 1.0 : (X.data[i] < 0.0 ? -1.0 : 0.0));
                }
                return;
            }
            case Op::gelu: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& X = nodes_[n.inputs[0]].value;
                auto& gi = grad_buf(n.inputs[0]);
                const bool tanh_kind = n.attr0 == 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = X.data[i];
                    double d;
                    if (tanh_kind) {
                        const double c = 0.7978845608028654;
                        const double u = c * (x + 0.044715 * x * x * x);
                        const double t = std::tanh(u);
                        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
                        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    } else {
                        const double inv_sqrt2 = 0.7071067811865476;
                        const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                        const double pdf =
                            std::exp(-0.5 * x * x) * 0.3989422804014327;  // 1/sqrt(2*pi)
                        d = phi + x * pdf;
                    }
                    gi[i] += g[i] * d;
                }
                return;
            }
            case Op::matmul: {
                const Tensor& A = nodes_[n.inputs[0]].value;
                const Tensor& B = nodes_[n.inputs[1]].value;
                const std::size_t m = A.rows(), k = A.cols(), c = B.cols();
                if (wants_grad(n.inputs[0])) {
                    // dA = G B^T
                    auto& gi = grad_buf(n.inputs[0]);
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                            gi[i * k + p] += dot({&g[i * c], c}, {&B.data[p * c], c});
                        }
                    }
                }
                if (wants_grad(n.inputs[1])) {
                    // dB = A^T G
                    auto& gi = grad_buf(n.inputs[1]);
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t p = 0; p < k; ++p) {
                            const double a = A.data[i * k + p];
                            if (a == 0.0) continue;
                            for (std::size_t j = 0; j < c; ++j) {
                                gi[p * c + j] += a * g[i * c + j];
                            }
                        }
                    }
                }
                return;
            }
            case Op::matmul_nt: {
                const Tensor& A = nodes_[n.inputs[0]].value;
                const Tensor& B = nodes_[n.inputs[1]].value;
                const std::size_t m = A.rows(), k = A.cols(), c = B.rows();
                if (wants_grad(n.inputs[0])) {
                    // dA = G B
                    auto& gi = grad_buf(n.inputs[0]);
                    matmul_accumulate(g.data(), B.data.data(), gi.data(), m, c, k);
                }
                if (wants_grad(n.inputs[1])) {
                    // dB = G^T A
                    auto& gi = grad_buf(n.inputs[1]);
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < c; ++j) {
                            const double gv = g[i * c + j];
                            if (gv == 0.0) continue;
                            for (std::size_t p = 0; p < k; ++p) {
                                gi[j * k + p] += gv * A.data[i * k + p];
                            }
                        }
                    }
                }
                return;
            }
            case Op::transpose: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& X = nodes_[n.inputs[0]].value;
                auto& gi = grad_buf(n.inputs[0]);
                const std::size_t r = X.rows(), c = X.cols();
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) {
                        gi[i * c + j] += g[j * r + i];
                    }
                }
                return;
            }
            case Op::add_rowvec: {
                const Tensor& M = nodes_[n.inputs[0]].value;
                const std::size_t r = M.rows(), c = M.cols();
                if (wants_grad(n.inputs[0])) {
                    auto& gi = grad_buf(n.inputs[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        gi[i] += g[i];
                    }
                }
                if (wants_grad(n.inputs[1])) {
                    auto& gi = grad_buf(n.inputs[1]);
                    for (std::size_t i = 0; i < r; ++i) {
                        for (std::size_t j = 0; j < c; ++j) {
                            gi[j] += g[i * c + j];
                        }
                    }
                }
                return;
            }
            case Op::reshape: {
                if (!wants_grad(n.inputs[0])) return;
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gi[i] += g[i];
                }
                return;
            }
            case Op::slice_rows: {
                if (!wants_grad(n.inputs[0])) return;
                const std::size_t c = n.value.cols();
                const std::size_t r0 = static_cast<std::size_t>(n.attr0);
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gi[r0 * c + i] += g[i];
                }
                return;
            }
            case Op::slice_cols: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& X = nodes_[n.inputs[0]].value;
                const std::size_t c0 = static_cast<std::size_t>(n.attr0);
                const std::size_t w = n.value.cols();
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < n.value.rows(); ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        gi[i * X.cols() + c0 + j] += g[i * w + j];
                    }
                }
                return;
            }
            case Op::concat_rows: {
                std::size_t at = 0;
                for (NodeId in : n.inputs) {
                    const std::size_t sz = nodes_[in].value.size();
                    if (wants_grad(in)) {
                        auto& gi = grad_buf(in);
                        for (std::size_t i = 0; i < sz; ++i) {
                            gi[i] += g[at + i];
                        }
                    }
                    at += sz;
                }
                return;
            }
            case Op::concat_cols: {
                const std::size_t cols = n.value.cols();
                std::size_t at = 0;
                for (NodeId in : n.inputs) {
                    const Tensor& t = nodes_[in].value;
                    if (wants_grad(in)) {
                        auto& gi = grad_buf(in);
                        for (std::size_t i = 0; i < t.rows(); ++i) {
                            for (std::size_t j = 0; j < t.cols(); ++j) {
                                gi[i * t.cols() + j] += g[i * cols + at + j];
                            }
                        }
                    }
                    at += t.cols();
                }
                return;
            }
            case Op::layer_norm: {
                const Tensor& X = nodes_[n.inputs[0]].value;
                const Tensor& gamma = nodes_[n.inputs[1]].value;
                const std::size_t r = X.rows(), c = X.cols();
                const double cn = static_cast<double>(c);
                std::vector<double>* gx =
                    wants_grad(n.inputs[0]) ? &grad_buf(n.inputs[0]) : nullptr;
                std::vector<double>* gg =
                    wants_grad(n.inputs[1]) ? &grad_buf(n.inputs[1]) : nullptr;
                std::vector<double>* gb =
                    wants_grad(n.inputs[2]) ? &grad_buf(n.inputs[2]) : nullptr;
                for (std::size_t i = 0; i < r; ++i) {
                    const double mean = n.saved[2 * i];
                    const double rstd = n.saved[2 * i + 1];
                    const double* xrow = &X.data[i * c];
                    const double* grow = &g[i * c];
                    double sum_gy = 0.0, sum_gyx = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double xhat = (xrow[j] - mean) * rstd;
                        const double gy = grow[j] * gamma.data[j];
                        sum_gy += gy;
                        sum_gyx += gy * xhat;
                        if (gg) (*gg)[j] += grow[j] * xhat;
                        if (gb) (*gb)[j] += grow[j];
                    }
                    if (gx) {
                        for (std::size_t j = 0; j < c; ++j) {
                            const double xhat = (xrow[j] - mean) * rstd;
                            const double gy = grow[j] * gamma.data[j];
                            (*gx)[i * c + j] +=
                                rstd * (gy - sum_gy / cn - xhat * sum_gyx / cn);
                        }
                    }
                }
                return;
            }
            case Op::softmax_rows: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& Y = n.value;
                const std::size_t r = Y.rows(), c = Y.cols();
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < r; ++i) {
                    const double* yrow = &Y.data[i * c];
                    const double* grow = &g[i * c];
                    const double gy = dot({grow, c}, {yrow, c});
                    for (std::size_t j = 0; j < c; ++j) {
                        gi[i * c + j] += yrow[j] * (grow[j] - gy);
                    }
                }
                return;
            }
            case Op::causal_softmax: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& Y = n.value;
                const std::size_t L = Y.rows();
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < L; ++i) {
                    const double* yrow = &Y.data[i * L];
                    const double* grow = &g[i * L];
                    const double gy = dot({grow, i + 1}, {yrow, i + 1});
                    for (std::size_t j = 0; j <= i; ++j) {
                        gi[i * L + j] += yrow[j] * (grow[j] - gy);
                    }
                }
                return;
            }
            case Op::logsumexp_rows: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& X = nodes_[n.inputs[0]].value;
                const std::size_t r = X.rows(), c = X.cols();
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < r; ++i) {
                    const double lse = n.value.data[i];
                    for (std::size_t j = 0; j < c; ++j) {
                        gi[i * c + j] += g[i] * std::exp(X.data[i * c + j] - lse);
                    }
                }
                return;
            }
            case Op::diag_sum: {
                if (!wants_grad(n.inputs[0])) return;
                const std::size_t L = nodes_[n.inputs[0]].value.rows();
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < L; ++i) {
                    gi[i * L + i] += g[0];
                }
                return;
            }
            case Op::l2_normalize: {
                if (!wants_grad(n.inputs[0])) return;
                const Tensor& Y = n.value;
                const double norm = n.attr0;
                const double gy = dot(g, Y.data);
                auto& gi = grad_buf(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gi[i] += (g[i] - Y.data[i] * gy) / norm;
                }
                return;
            }
            case Op::sum: {
                if (!wants_grad(n.inputs[0])) return;
                auto& gi = grad_buf(n.inputs[0]);
                for (double& v : gi) {
                    v += g[0];
                }
                return;
            }
            case Op::mean: {
                if (!wants_grad(n.inputs[0])) return;
                auto& gi = grad_buf(n.inputs[0]);
                const double s = g[0] / static_cast<double>(gi.size());
                for (double& v : gi) {
                    v += s;
                }
                return;
            }
        }
    }

    static const char* op_name(Op op) {
        switch (op) {
            case Op::leaf: return "leaf";
            case Op::add: return "add";
            case Op::sub: return "sub";
            case Op::mul: return "mul";
            case Op::scale: return "scale";
            case Op::abs: return "abs";
            case Op::gelu: return "gelu";
            case Op::matmul: return "matmul";
            case Op::matmul_nt: return "matmul_nt";
            case Op::transpose: return "transpose";
            case Op::add_rowvec: return "add_rowvec";
            case Op::reshape: return "reshape";
            case Op::slice_rows: return "slice_rows";
            case Op::slice_cols: return "slice_cols";
            case Op::concat_rows: return "concat_rows";
            case Op::concat_cols: return "concat_cols";
            case Op::layer_norm: return "layer_norm";
            case Op::softmax_rows: return "softmax_rows";
            case Op::causal_softmax: return "causal_softmax";
            case Op::logsumexp_rows: return "logsumexp_rows";
            case Op::diag_sum: return "diag_sum";
            case Op::l2_normalize: return "l2_normalize";
            case Op::sum: return "sum";
            case Op::mean: return "mean";
        }
        return "?";
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::map<std::string, NodeId> param_nodes_;
};

}  // namespace protext::num
