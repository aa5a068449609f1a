// SPDX-License-Identifier: Apache-2.0
#include "magent/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "magent/kernels.hpp"
#include "magent/rng.hpp"

namespace magent {

namespace {

int rows_of(const Tensor& t) {
    if (t.rank() < 1) throw std::invalid_argument("op needs rank >= 1");
    return static_cast<int>(t.numel() / t.shape.back());
}

std::vector<int> apply_perm(const std::vector<int>& dims, const std::vector<int>& perm) {
    std::vector<int> out(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out[i] = dims[static_cast<size_t>(perm[i])];
    return out;
}

// Permute a rank <= 3 tensor: out coordinate d equals in coordinate perm[d].
void permute_copy(const Tensor& in, const std::vector<int>& perm, Tensor& out, bool accumulate) {
    const int r = in.rank();
    std::vector<int> id(in.shape), od(out.shape);
    if (r == 2) {
        for (int i = 0; i < od[0]; ++i)
            for (int j = 0; j < od[1]; ++j) {
                int c[2];
                c[perm[0]] = i;
                c[perm[1]] = j;
                const double v = in.at(c[0], c[1]);
                if (accumulate)
                    out.at(i, j) += v;
                else
                    out.at(i, j) = v;
            }
    } else {
        for (int i = 0; i < od[0]; ++i)
            for (int j = 0; j < od[1]; ++j)
                for (int k = 0; k < od[2]; ++k) {
                    int c[3];
                    c[perm[0]] = i;
                    c[perm[1]] = j;
                    c[perm[2]] = k;
                    const double v = in.at(c[0], c[1], c[2]);
                    if (accumulate)
                        out.at(i, j, k) += v;
                    else
                        out.at(i, j, k) = v;
                }
    }
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

inline int clip_rel(int delta, int clip) { return std::max(-clip, std::min(clip, delta)); }

}  // namespace

int Graph::push(Node n) {
    if (n.op != Op::Param && n.op != Op::Input) {
        for (int i : n.in) {
            if (i >= 0 && nodes_[static_cast<size_t>(i)].needs) {
                n.needs = true;
                break;
            }
        }
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Var Graph::param(Tensor& p) {
    Node n;
    n.op = Op::Param;
    n.val.shape = p.shape;  // data stays with the bound tensor
    n.bound = &p;
    n.needs = p.requires_grad;
    return {push(std::move(n))};
}

Var Graph::input(Tensor value) {
    Node n;
    n.op = Op::Input;
    n.val = std::move(value);
    return {push(std::move(n))};
}

Var Graph::add(Var a, Var b) {
    check_same_shape(value(a), value(b), "add");
    Node n;
    n.op = Op::Add;
    n.in = {a.id, b.id, -1};
    n.val = Tensor(value(a).shape);
    kernels::add(n.val.data.data(), value(a).data.data(), value(b).data.data(), n.val.numel(), false);
    return {push(std::move(n))};
}

Var Graph::add_rowvec(Var mat, Var row) {
    const Tensor& m = value(mat);
    const Tensor& r = value(row);
    if (r.rank() != 1 || r.dim(0) != m.shape.back())
        throw std::invalid_argument("add_rowvec: row length must match last axis");
    Node n;
    n.op = Op::AddRow;
    n.in = {mat.id, row.id, -1};
    n.val = Tensor(m.shape);
    const int rows = rows_of(m), cols = m.shape.back();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            n.val.data[static_cast<size_t>(i) * cols + j] =
                m.data[static_cast<size_t>(i) * cols + j] + r.data[static_cast<size_t>(j)];
    return {push(std::move(n))};
}

Var Graph::mul(Var a, Var b) {
    check_same_shape(value(a), value(b), "mul");
    Node n;
    n.op = Op::Mul;
    n.in = {a.id, b.id, -1};
    n.val = Tensor(value(a).shape);
    kernels::mul(n.val.data.data(), value(a).data.data(), value(b).data.data(), n.val.numel(), false);
    return {push(std::move(n))};
}

Var Graph::scale(Var a, double alpha) {
    Node n;
    n.op = Op::Scale;
    n.in = {a.id, -1, -1};
    n.alpha = alpha;
    n.val = Tensor(value(a).shape);
    kernels::scale(n.val.data.data(), value(a).data.data(), alpha, n.val.numel(), false);
    return {push(std::move(n))};
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    Node n;
    n.op = Op::MatMul;
    n.in = {a.id, b.id, -1};
    n.val = Tensor({A.dim(0), B.dim(1)});
    kernels::gemm_nn(n.val.data.data(), A.data.data(), B.data.data(), A.dim(0), A.dim(1), B.dim(1), false);
    return {push(std::move(n))};
}

Var Graph::bmm(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1))
        throw std::invalid_argument("bmm: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    Node n;
    n.op = Op::Bmm;
    n.in = {a.id, b.id, -1};
    n.val = Tensor({A.dim(0), A.dim(1), B.dim(2)});
    const int m = A.dim(1), k = A.dim(2), cols = B.dim(2);
    for (int s = 0; s < A.dim(0); ++s) {
        kernels::gemm_nn(n.val.data.data() + static_cast<int64_t>(s) * m * cols,
                         A.data.data() + static_cast<int64_t>(s) * m * k,
                         B.data.data() + static_cast<int64_t>(s) * k * cols, m, k, cols, false);
    }
    return {push(std::move(n))};
}

Var Graph::bmm_nt(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2))
        throw std::invalid_argument("bmm_nt: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
    Node n;
    n.op = Op::BmmNT;
    n.in = {a.id, b.id, -1};
    n.val = Tensor({A.dim(0), A.dim(1), B.dim(1)});
    const int m = A.dim(1), k = A.dim(2), rows_b = B.dim(1);
    for (int s = 0; s < A.dim(0); ++s) {
        kernels::gemm_nt(n.val.data.data() + static_cast<int64_t>(s) * m * rows_b,
                         A.data.data() + static_cast<int64_t>(s) * m * k,
                         B.data.data() + static_cast<int64_t>(s) * rows_b * k, m, k, rows_b, false);
    }
    return {push(std::move(n))};
}

Var Graph::linear(Var x, Var w, Var b) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(0) || B.numel() != W.dim(1))
        throw std::invalid_argument("linear: incompatible shapes " + X.shape_str() + " x " + W.shape_str());
    Node n;
    n.op = Op::Linear;
    n.in = {x.id, w.id, b.id};
    const int m = X.dim(0), k = X.dim(1), cols = W.dim(1);
    n.val = Tensor({m, cols});
    kernels::gemm_nn(n.val.data.data(), X.data.data(), W.data.data(), m, k, cols, false);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < cols; ++j)
            n.val.data[static_cast<size_t>(i) * cols + j] += B.data[static_cast<size_t>(j)];
    return {push(std::move(n))};
}

Var Graph::split_heads(Var x, int heads) {
    const Tensor& X = value(x);
    if (X.rank() != 2 || X.dim(1) % heads != 0)
        throw std::invalid_argument("split_heads: columns must divide by head count");
    const int rows = X.dim(0), dh = X.dim(1) / heads;
    Node n;
    n.op = Op::SplitHeads;
    n.in = {x.id, -1, -1};
    n.val = Tensor({heads, rows, dh});
    for (int h = 0; h < heads; ++h)
        for (int t = 0; t < rows; ++t)
            std::memcpy(n.val.data.data() + (static_cast<int64_t>(h) * rows + t) * dh,
                        X.data.data() + static_cast<int64_t>(t) * heads * dh + static_cast<int64_t>(h) * dh,
                        sizeof(double) * static_cast<size_t>(dh));
    return {push(std::move(n))};
}

Var Graph::merge_heads(Var x) {
    const Tensor& X = value(x);
    if (X.rank() != 3) throw std::invalid_argument("merge_heads: rank-3 input required");
    const int heads = X.dim(0), rows = X.dim(1), dh = X.dim(2);
    Node n;
    n.op = Op::MergeHeads;
    n.in = {x.id, -1, -1};
    n.val = Tensor({rows, heads * dh});
    for (int h = 0; h < heads; ++h)
        for (int t = 0; t < rows; ++t)
            std::memcpy(n.val.data.data() + static_cast<int64_t>(t) * heads * dh + static_cast<int64_t>(h) * dh,
                        X.data.data() + (static_cast<int64_t>(h) * rows + t) * dh,
                        sizeof(double) * static_cast<size_t>(dh));
    return {push(std::move(n))};
}

Var Graph::permute(Var a, const std::vector<int>& perm) {
    const Tensor& A = value(a);
    if (A.rank() != static_cast<int>(perm.size()) || A.rank() < 2 || A.rank() > 3)
        throw std::invalid_argument("permute: rank 2 or 3 with matching permutation required");
    Node n;
    n.op = Op::Permute;
    n.in = {a.id, -1, -1};
    n.ints = perm;
    n.val = Tensor(apply_perm(A.shape, perm));
    permute_copy(A, perm, n.val, false);
    return {push(std::move(n))};
}

Var Graph::reshape(Var a, const std::vector<int>& shape) {
    const Tensor& A = value(a);
    if (Tensor::count(shape) != A.numel()) throw std::invalid_argument("reshape: element count mismatch");
    Node n;
    n.op = Op::Reshape;
    n.in = {a.id, -1, -1};
    n.ints = A.shape;
    n.val = Tensor(shape, A.data);
    return {push(std::move(n))};
}

Var Graph::log(Var a) {
    Node n;
    n.op = Op::Log;
    n.in = {a.id, -1, -1};
    n.val = Tensor(value(a).shape);
    const Tensor& A = value(a);
    for (int64_t i = 0; i < A.numel(); ++i) n.val.data[static_cast<size_t>(i)] = std::log(A.data[static_cast<size_t>(i)]);
    return {push(std::move(n))};
}

Var Graph::relu(Var a) {
    Node n;
    n.op = Op::Relu;
    n.in = {a.id, -1, -1};
    n.val = Tensor(value(a).shape);
    kernels::relu(n.val.data.data(), value(a).data.data(), n.val.numel());
    return {push(std::move(n))};
}

Var Graph::softmax_rows(Var a) {
    Node n;
    n.op = Op::SoftmaxRows;
    n.in = {a.id, -1, -1};
    n.val = Tensor(value(a).shape);
    kernels::softmax_rows(value(a).data.data(), n.val.data.data(), rows_of(value(a)),
                          value(a).shape.back());
    return {push(std::move(n))};
}

Var Graph::log_softmax_rows(Var a) {
    Node n;
    n.op = Op::LogSoftmaxRows;
    n.in = {a.id, -1, -1};
    n.val = Tensor(value(a).shape);
    kernels::log_softmax_rows(value(a).data.data(), n.val.data.data(), rows_of(value(a)),
                              value(a).shape.back());
    return {push(std::move(n))};
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& X = value(x);
    const int cols = X.shape.back();
    if (value(gain).numel() != cols || value(bias).numel() != cols)
        throw std::invalid_argument("layer_norm: gain/bias must match last axis");
    const int rows = rows_of(X);
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x.id, gain.id, bias.id};
    n.alpha = eps;
    n.val = Tensor(X.shape);
    n.aux.resize(static_cast<size_t>(rows) * cols + rows);  // xhat then inv_std
    kernels::layer_norm_rows(X.data.data(), value(gain).data.data(), value(bias).data.data(),
                             n.val.data.data(), n.aux.data(),
                             n.aux.data() + static_cast<size_t>(rows) * cols, rows, cols, eps);
    return {push(std::move(n))};
}

Var Graph::embedding_lookup(Var table, const std::vector<int>& ids) {
    const Tensor& T = value(table);
    if (T.rank() != 2) throw std::invalid_argument("embedding_lookup: table must be [V,d]");
    Node n;
    n.op = Op::Embed;
    n.in = {table.id, -1, -1};
    n.ints = ids;
    n.val = Tensor({static_cast<int>(ids.size()), T.dim(1)});
    const int d = T.dim(1);
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= T.dim(0))
            throw std::out_of_range("embedding_lookup: id out of vocabulary");
        std::memcpy(n.val.data.data() + t * static_cast<size_t>(d),
                    T.data.data() + static_cast<size_t>(ids[t]) * d, sizeof(double) * static_cast<size_t>(d));
    }
    return {push(std::move(n))};
}

Var Graph::dropout(Var a, double rate, uint64_t key, bool train) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!train || rate == 0.0) return a;
    Node n;
    n.op = Op::Dropout;
    n.in = {a.id, -1, -1};
    n.alpha = 1.0 / (1.0 - rate);
    const Tensor& A = value(a);
    n.val = Tensor(A.shape);
    n.aux.resize(static_cast<size_t>(A.numel()));
    rng::Stream stream(key);
    for (int64_t i = 0; i < A.numel(); ++i) {
        const double keep = stream.u01(static_cast<uint64_t>(i)) >= rate ? 1.0 : 0.0;
        n.aux[static_cast<size_t>(i)] = keep;
        n.val.data[static_cast<size_t>(i)] = A.data[static_cast<size_t>(i)] * keep * n.alpha;
    }
    return {push(std::move(n))};
}

Var Graph::cross_entropy(Var logprobs, Var target_dist, Var mask) {
    const Tensor& L = value(logprobs);
    const Tensor& T = value(target_dist);
    const Tensor& M = value(mask);
    if (L.rank() != 2 || !L.same_shape(T)) throw std::invalid_argument("cross_entropy: logprobs/target shape mismatch");
    if (M.numel() != L.dim(0)) throw std::invalid_argument("cross_entropy: mask length mismatch");
    Node n;
    n.op = Op::CrossEntropy;
    n.in = {logprobs.id, target_dist.id, mask.id};
    double loss = 0.0;
    const int rows = L.dim(0), cols = L.dim(1);
    for (int t = 0; t < rows; ++t) {
        if (M.data[static_cast<size_t>(t)] == 0.0) continue;
        double row = 0.0;
        for (int k = 0; k < cols; ++k)
            row += T.data[static_cast<size_t>(t) * cols + k] * L.data[static_cast<size_t>(t) * cols + k];
        loss -= M.data[static_cast<size_t>(t)] * row;
    }
    n.val = Tensor({1}, {loss});
    return {push(std::move(n))};
}

Var Graph::nll(Var logprobs, const std::vector<int>& ids, const std::vector<double>& mask) {
    const Tensor& L = value(logprobs);
    if (L.rank() != 2 || ids.size() != static_cast<size_t>(L.dim(0)) || mask.size() != ids.size())
        throw std::invalid_argument("nll: shape mismatch");
    Node n;
    n.op = Op::Nll;
    n.in = {logprobs.id, -1, -1};
    n.ints = ids;
    n.aux = mask;
    double loss = 0.0;
    const int cols = L.dim(1);
    for (size_t t = 0; t < ids.size(); ++t) {
        if (mask[t] == 0.0) continue;
        if (ids[t] < 0 || ids[t] >= cols) throw std::out_of_range("nll: target id out of range");
        loss -= mask[t] * L.data[t * static_cast<size_t>(cols) + static_cast<size_t>(ids[t])];
    }
    n.val = Tensor({1}, {loss});
    return {push(std::move(n))};
}

Var Graph::rel_attention_logits(Var q, Var k, Var rel, int clip_dist) {
    const Tensor& Q = value(q);
    const Tensor& K = value(k);
    const Tensor& R = value(rel);
    if (clip_dist < 1) throw std::invalid_argument("rel_attention_logits: clip distance must be >= 1");
    if (Q.rank() != 3 || K.rank() != 3 || Q.dim(0) != K.dim(0) || Q.dim(2) != K.dim(2))
        throw std::invalid_argument("rel_attention_logits: q/k shape mismatch");
    if (R.rank() != 2 || R.dim(0) != 2 * clip_dist + 1 || R.dim(1) != Q.dim(2))
        throw std::invalid_argument("rel_attention_logits: rel table must be [2*clip+1, d_head]");
    const int H = Q.dim(0), Tq = Q.dim(1), Tk = K.dim(1), dh = Q.dim(2);
    const int nrel = 2 * clip_dist + 1;
    Node n;
    n.op = Op::RelAttn;
    n.in = {q.id, k.id, rel.id};
    n.ints = {clip_dist};
    n.val = Tensor({H, Tq, Tk});
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> qr(static_cast<size_t>(Tq) * nrel);
    for (int h = 0; h < H; ++h) {
        double* out = n.val.data.data() + static_cast<int64_t>(h) * Tq * Tk;
        const double* qh = Q.data.data() + static_cast<int64_t>(h) * Tq * dh;
        const double* kh = K.data.data() + static_cast<int64_t>(h) * Tk * dh;
        kernels::gemm_nt(out, qh, kh, Tq, dh, Tk, false);
        kernels::gemm_nt(qr.data(), qh, R.data.data(), Tq, dh, nrel, false);
        for (int i = 0; i < Tq; ++i)
            for (int j = 0; j < Tk; ++j)
                out[static_cast<int64_t>(i) * Tk + j] =
                    s * (out[static_cast<int64_t>(i) * Tk + j] +
                         qr[static_cast<size_t>(i) * nrel + (clip_rel(j - i, clip_dist) + clip_dist)]);
    }
    return {push(std::move(n))};
}

Var Graph::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.in = {a.id, -1, -1};
    double total = 0.0;
    for (double v : value(a).data) total += v;
    n.val = Tensor({1}, {total});
    return {push(std::move(n))};
}

void Graph::backward(Var loss) {
    Node& top = node(loss);
    if (top.val.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");

    grads_.resize(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.needs && n.bound) {
            // Parameter gradients accumulate in place across backward calls.
            n.bound->ensure_grad();
            grads_[i].clear();
        } else if (n.needs) {
            grads_[i].assign(n.val.data.size(), 0.0);
        } else {
            grads_[i].clear();
        }
    }
    if (!top.needs) return;
    grads_[static_cast<size_t>(loss.id)][0] = 1.0;

    auto g = [&](int id) -> std::vector<double>& {
        Node& n = nodes_[static_cast<size_t>(id)];
        return n.bound ? n.bound->grad : grads_[static_cast<size_t>(id)];
    };
    auto wants = [&](int id) { return id >= 0 && nodes_[static_cast<size_t>(id)].needs; };

    for (int idx = loss.id; idx >= 0; --idx) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        if (!n.needs || grads_[static_cast<size_t>(idx)].empty()) continue;
        const std::vector<double>& dy = grads_[static_cast<size_t>(idx)];
        const int64_t nel = n.val.numel();
        switch (n.op) {
            case Op::Param:
            case Op::Input:
                break;
            case Op::Add:
                if (wants(n.in[0])) kernels::axpy(g(n.in[0]).data(), 1.0, dy.data(), nel);
                if (wants(n.in[1])) kernels::axpy(g(n.in[1]).data(), 1.0, dy.data(), nel);
                break;
            case Op::AddRow: {
                const int cols = n.val.shape.back();
                const int rows = static_cast<int>(nel / cols);
                if (wants(n.in[0])) kernels::axpy(g(n.in[0]).data(), 1.0, dy.data(), nel);
                if (wants(n.in[1])) {
                    double* dr = g(n.in[1]).data();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < cols; ++j) dr[j] += dy[static_cast<size_t>(i) * cols + j];
                }
                break;
            }
            case Op::Mul:
                if (wants(n.in[0]))
                    kernels::mul(g(n.in[0]).data(), dy.data(), value(Var{n.in[1]}).data.data(), nel, true);
                if (wants(n.in[1]))
                    kernels::mul(g(n.in[1]).data(), dy.data(), value(Var{n.in[0]}).data.data(), nel, true);
                break;
            case Op::Scale:
                if (wants(n.in[0])) kernels::axpy(g(n.in[0]).data(), n.alpha, dy.data(), nel);
                break;
            case Op::MatMul: {
                const Tensor& A = value(Var{n.in[0]});
                const Tensor& B = value(Var{n.in[1]});
                const int m = A.dim(0), k = A.dim(1), c = B.dim(1);
                if (wants(n.in[0])) kernels::gemm_nt(g(n.in[0]).data(), dy.data(), B.data.data(), m, c, k, true);
                if (wants(n.in[1])) kernels::gemm_tn(g(n.in[1]).data(), A.data.data(), dy.data(), m, k, c, true);
                break;
            }
            case Op::Bmm: {
                const Tensor& A = value(Var{n.in[0]});
                const Tensor& B = value(Var{n.in[1]});
                const int batches = A.dim(0), m = A.dim(1), k = A.dim(2), c = B.dim(2);
                for (int sidx = 0; sidx < batches; ++sidx) {
                    const double* dyb = dy.data() + static_cast<int64_t>(sidx) * m * c;
                    if (wants(n.in[0]))
                        kernels::gemm_nt(g(n.in[0]).data() + static_cast<int64_t>(sidx) * m * k, dyb,
                                         B.data.data() + static_cast<int64_t>(sidx) * k * c, m, c, k, true);
                    if (wants(n.in[1]))
                        kernels::gemm_tn(g(n.in[1]).data() + static_cast<int64_t>(sidx) * k * c,
                                         A.data.data() + static_cast<int64_t>(sidx) * m * k, dyb, m, k, c, true);
                }
                break;
            }
            case Op::BmmNT: {
                const Tensor& A = value(Var{n.in[0]});
                const Tensor& B = value(Var{n.in[1]});
                const int batches = A.dim(0), m = A.dim(1), k = A.dim(2), rows_b = B.dim(1);
                for (int sidx = 0; sidx < batches; ++sidx) {
                    const double* dyb = dy.data() + static_cast<int64_t>(sidx) * m * rows_b;
                    if (wants(n.in[0]))
                        kernels::gemm_nn(g(n.in[0]).data() + static_cast<int64_t>(sidx) * m * k, dyb,
                                         B.data.data() + static_cast<int64_t>(sidx) * rows_b * k, m, rows_b, k, true);
                    if (wants(n.in[1]))
                        kernels::gemm_tn(g(n.in[1]).data() + static_cast<int64_t>(sidx) * rows_b * k, dyb,
                                         A.data.data() + static_cast<int64_t>(sidx) * m * k, m, rows_b, k, true);
                }
                break;
            }
            case Op::Linear: {
                const Tensor& X = value(Var{n.in[0]});
                const Tensor& W = value(Var{n.in[1]});
                const int m = X.dim(0), k = X.dim(1), cols = W.dim(1);
                if (wants(n.in[0])) kernels::gemm_nt(g(n.in[0]).data(), dy.data(), W.data.data(), m, cols, k, true);
                if (wants(n.in[1])) kernels::gemm_tn(g(n.in[1]).data(), X.data.data(), dy.data(), m, k, cols, true);
                if (wants(n.in[2])) {
                    double* db = g(n.in[2]).data();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < cols; ++j) db[j] += dy[static_cast<size_t>(i) * cols + j];
                }
                break;
            }
            case Op::SplitHeads: {
                if (wants(n.in[0])) {
                    const int heads = n.val.dim(0), rows = n.val.dim(1), dh = n.val.dim(2);
                    double* dx = g(n.in[0]).data();
                    for (int h = 0; h < heads; ++h)
                        for (int t = 0; t < rows; ++t)
                            kernels::axpy(dx + static_cast<int64_t>(t) * heads * dh + static_cast<int64_t>(h) * dh,
                                          1.0, dy.data() + (static_cast<int64_t>(h) * rows + t) * dh, dh);
                }
                break;
            }
            case Op::MergeHeads: {
                if (wants(n.in[0])) {
                    const Tensor& X = value(Var{n.in[0]});
                    const int heads = X.dim(0), rows = X.dim(1), dh = X.dim(2);
                    double* dx = g(n.in[0]).data();
                    for (int h = 0; h < heads; ++h)
                        for (int t = 0; t < rows; ++t)
                            kernels::axpy(dx + (static_cast<int64_t>(h) * rows + t) * dh, 1.0,
                                          dy.data() + static_cast<int64_t>(t) * heads * dh + static_cast<int64_t>(h) * dh,
                                          dh);
                }
                break;
            }
            case Op::Permute: {
                if (wants(n.in[0])) {
                    Tensor dyt(n.val.shape, dy);
                    Tensor din(value(Var{n.in[0]}).shape, g(n.in[0]));
                    permute_copy(dyt, inverse_perm(n.ints), din, true);
                    g(n.in[0]) = std::move(din.data);
                }
                break;
            }
            case Op::Reshape:
                if (wants(n.in[0])) kernels::axpy(g(n.in[0]).data(), 1.0, dy.data(), nel);
                break;
            case Op::Log: {
                if (wants(n.in[0])) {
                    const Tensor& X = value(Var{n.in[0]});
                    double* dx = g(n.in[0]).data();
                    for (int64_t i = 0; i < nel; ++i) dx[i] += dy[static_cast<size_t>(i)] / X.data[static_cast<size_t>(i)];
                }
                break;
            }
            case Op::Relu:
                if (wants(n.in[0]))
                    kernels::relu_backward(g(n.in[0]).data(), value(Var{n.in[0]}).data.data(), dy.data(), nel);
                break;
            case Op::SoftmaxRows: {
                if (wants(n.in[0])) {
                    const int cols = n.val.shape.back();
                    const int rows = static_cast<int>(nel / cols);
                    double* dx = g(n.in[0]).data();
                    const double* y = n.val.data.data();
                    for (int i = 0; i < rows; ++i) {
                        const double* yr = y + static_cast<int64_t>(i) * cols;
                        const double* dyr = dy.data() + static_cast<int64_t>(i) * cols;
                        double dot = 0.0;
                        for (int j = 0; j < cols; ++j) dot += yr[j] * dyr[j];
                        double* dxr = dx + static_cast<int64_t>(i) * cols;
                        for (int j = 0; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
                    }
                }
                break;
            }
            case Op::LogSoftmaxRows: {
                if (wants(n.in[0])) {
                    const int cols = n.val.shape.back();
                    const int rows = static_cast<int>(nel / cols);
                    double* dx = g(n.in[0]).data();
                    const double* y = n.val.data.data();
                    for (int i = 0; i < rows; ++i) {
                        const double* yr = y + static_cast<int64_t>(i) * cols;
                        const double* dyr = dy.data() + static_cast<int64_t>(i) * cols;
                        double dsum = 0.0;
                        for (int j = 0; j < cols; ++j) dsum += dyr[j];
                        double* dxr = dx + static_cast<int64_t>(i) * cols;
                        for (int j = 0; j < cols; ++j) dxr[j] += dyr[j] - std::exp(yr[j]) * dsum;
                    }
                }
                break;
            }
            case Op::LayerNorm: {
                const int cols = n.val.shape.back();
                const int rows = static_cast<int>(nel / cols);
                const double* xhat = n.aux.data();
                const double* inv_std = n.aux.data() + static_cast<size_t>(rows) * cols;
                std::vector<double> dgain(static_cast<size_t>(cols), 0.0), dbias(static_cast<size_t>(cols), 0.0);
                std::vector<double> dx_local;
                double* dx = nullptr;
                if (wants(n.in[0]))
                    dx = g(n.in[0]).data();
                else {
                    dx_local.assign(static_cast<size_t>(nel), 0.0);
                    dx = dx_local.data();
                }
                kernels::layer_norm_rows_backward(dy.data(), xhat, inv_std,
                                                  value(Var{n.in[1]}).data.data(), dx, dgain.data(),
                                                  dbias.data(), rows, cols);
                if (wants(n.in[1])) kernels::axpy(g(n.in[1]).data(), 1.0, dgain.data(), cols);
                if (wants(n.in[2])) kernels::axpy(g(n.in[2]).data(), 1.0, dbias.data(), cols);
                break;
            }
            case Op::Embed: {
                if (wants(n.in[0])) {
                    const int d = n.val.dim(1);
                    double* dt = g(n.in[0]).data();
                    for (size_t t = 0; t < n.ints.size(); ++t)
                        kernels::axpy(dt + static_cast<size_t>(n.ints[t]) * d, 1.0,
                                      dy.data() + t * static_cast<size_t>(d), d);
                }
                break;
            }
            case Op::Dropout: {
                if (wants(n.in[0])) {
                    double* dx = g(n.in[0]).data();
                    for (int64_t i = 0; i < nel; ++i)
                        dx[i] += dy[static_cast<size_t>(i)] * n.aux[static_cast<size_t>(i)] * n.alpha;
                }
                break;
            }
            case Op::CrossEntropy: {
                if (wants(n.in[0])) {
                    const Tensor& T = value(Var{n.in[1]});
                    const Tensor& M = value(Var{n.in[2]});
                    const int rows = T.dim(0), cols = T.dim(1);
                    double* dl = g(n.in[0]).data();
                    const double seed = dy[0];
                    for (int t = 0; t < rows; ++t) {
                        const double mt = M.data[static_cast<size_t>(t)];
                        if (mt == 0.0) continue;
                        for (int kk = 0; kk < cols; ++kk)
                            dl[static_cast<size_t>(t) * cols + kk] -=
                                seed * mt * T.data[static_cast<size_t>(t) * cols + kk];
                    }
                }
                break;
            }
            case Op::Nll: {
                if (wants(n.in[0])) {
                    const int cols = value(Var{n.in[0]}).dim(1);
                    double* dl = g(n.in[0]).data();
                    const double seed = dy[0];
                    for (size_t t = 0; t < n.ints.size(); ++t)
                        dl[t * static_cast<size_t>(cols) + static_cast<size_t>(n.ints[t])] -= seed * n.aux[t];
                }
                break;
            }
            case Op::RelAttn: {
                const Tensor& Q = value(Var{n.in[0]});
                const Tensor& K = value(Var{n.in[1]});
                const Tensor& R = value(Var{n.in[2]});
                const int clip = n.ints[0];
                const int H = Q.dim(0), Tq = Q.dim(1), Tk = K.dim(1), dh = Q.dim(2);
                const int nrel = 2 * clip + 1;
                const double s = 1.0 / std::sqrt(static_cast<double>(dh));
                std::vector<double> gs(static_cast<size_t>(Tq) * Tk);
                std::vector<double> prel(static_cast<size_t>(Tq) * nrel);
                for (int h = 0; h < H; ++h) {
                    const double* dyh = dy.data() + static_cast<int64_t>(h) * Tq * Tk;
                    for (int64_t i = 0; i < static_cast<int64_t>(Tq) * Tk; ++i) gs[static_cast<size_t>(i)] = s * dyh[i];
                    std::fill(prel.begin(), prel.end(), 0.0);
                    for (int i = 0; i < Tq; ++i)
                        for (int j = 0; j < Tk; ++j)
                            prel[static_cast<size_t>(i) * nrel + (clip_rel(j - i, clip) + clip)] +=
                                gs[static_cast<size_t>(i) * Tk + j];
                    const double* qh = Q.data.data() + static_cast<int64_t>(h) * Tq * dh;
                    const double* kh = K.data.data() + static_cast<int64_t>(h) * Tk * dh;
                    if (wants(n.in[0])) {
                        double* dq = g(n.in[0]).data() + static_cast<int64_t>(h) * Tq * dh;
                        kernels::gemm_nn(dq, gs.data(), kh, Tq, Tk, dh, true);
                        kernels::gemm_nn(dq, prel.data(), R.data.data(), Tq, nrel, dh, true);
                    }
                    if (wants(n.in[1]))
                        kernels::gemm_tn(g(n.in[1]).data() + static_cast<int64_t>(h) * Tk * dh, gs.data(),
                                         qh, Tq, Tk, dh, true);
                    if (wants(n.in[2]))
                        kernels::gemm_tn(g(n.in[2]).data(), prel.data(), qh, Tq, nrel, dh, true);
                }
                break;
            }
            case Op::Sum: {
                if (wants(n.in[0])) {
                    double* dx = g(n.in[0]).data();
                    const double seed = dy[0];
                    const int64_t m = value(Var{n.in[0]}).numel();
                    for (int64_t i = 0; i < m; ++i) dx[i] += seed;
                }
                break;
            }
        }
    }

}

}  // namespace magent
