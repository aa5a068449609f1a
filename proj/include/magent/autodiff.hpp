// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "magent/tensor.hpp"

namespace magent {

class Graph;

// Handle to a node on a Graph's tape.
struct Var {
    int id = -1;
};

// Record-and-replay reverse-mode autodiff over dense f64 tensors. A Graph is
// a tape: operations append nodes in topological order, backward() walks the
// tape in reverse. One Graph belongs to one thread; distinct graphs on
// distinct threads are independent.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf bound to an external parameter tensor. Gradients computed by
    // backward() are added into param.grad (allocated on demand), so repeated
    // backward passes accumulate until the caller zeroes them.
    Var param(Tensor& param);

    // Constant leaf; never receives gradient.
    Var input(Tensor value);

    Var add(Var a, Var b);             // same shape
    Var add_rowvec(Var mat, Var row);  // [r,c] + [c], broadcast over rows
    Var mul(Var a, Var b);             // elementwise
    Var scale(Var a, double alpha);
    Var matmul(Var a, Var b);  // [m,k] x [k,n]
    Var bmm(Var a, Var b);     // [B,m,k] x [B,k,n]
    Var bmm_nt(Var a, Var b);  // [B,m,k] x [B,n,k] -> [B,m,n]
    Var linear(Var x, Var w, Var b);         // x [m,k] * w [k,n] + b [n]
    Var split_heads(Var x, int heads);       // [T, H*dh] -> [H, T, dh]
    Var merge_heads(Var x);                  // [H, T, dh] -> [T, H*dh]
    Var permute(Var a, const std::vector<int>& perm);
    Var reshape(Var a, const std::vector<int>& shape);
    Var log(Var a);
    Var relu(Var a);
    Var softmax_rows(Var a);      // softmax over last axis
    Var log_softmax_rows(Var a);  // log softmax over last axis
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
    Var embedding_lookup(Var table, const std::vector<int>& ids);
    // Identity when train == false; otherwise zeroes elements with an
    // inverted-dropout mask drawn from the counter stream `key`.
    Var dropout(Var a, double rate, uint64_t key, bool train);
    // Soft-target cross entropy: -sum_t mask[t] * sum_k target[t,k] * logprobs[t,k].
    // target and mask are constants; gradient flows only into logprobs.
    Var cross_entropy(Var logprobs, Var target_dist, Var mask);
    // Hard-target NLL via gather: -sum_t mask[t] * logprobs[t, ids[t]].
    Var nll(Var logprobs, const std::vector<int>& ids, const std::vector<double>& mask);
    // Relative-position attention logits:
    //   out[h,i,j] = (q[h,i,:].k[h,j,:] + q[h,i,:].rel[clip(j-i)+clip_dist,:]) / sqrt(d_head)
    Var rel_attention_logits(Var q, Var k, Var rel, int clip_dist);
    Var sum(Var a);  // scalar [1]

    // Reverse pass from a scalar loss. Node-local gradients are rebuilt from
    // scratch on every call; parameter gradients accumulate across calls.
    void backward(Var loss);

    // Param nodes borrow the bound tensor instead of copying it.
    const Tensor& value(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        return n.bound ? *n.bound : n.val;
    }
    Tensor& value(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        return n.bound ? *n.bound : n.val;
    }
    size_t size() const { return nodes_.size(); }

private:
    enum class Op {
        Param,
        Input,
        Add,
        AddRow,
        Mul,
        Scale,
        MatMul,
        Bmm,
        BmmNT,
        Linear,
        SplitHeads,
        MergeHeads,
        Permute,
        Reshape,
        Log,
        Relu,
        SoftmaxRows,
        LogSoftmaxRows,
        LayerNorm,
        Embed,
        Dropout,
        CrossEntropy,
        Nll,
        RelAttn,
        Sum,
    };

    struct Node {
        Op op;
        std::array<int, 3> in{-1, -1, -1};
        Tensor val;
        Tensor* bound = nullptr;       // Param nodes: external parameter
        std::vector<int> ints;         // ids / permutation / original shape
        std::vector<double> aux;       // mask values, layer-norm caches
        double alpha = 0.0;            // Scale factor / dropout keep scale / eps
        bool needs = false;            // gradient reaches some bound parameter
    };

    int push(Node n);
    Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
    const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }
    bool needs(Var v) const { return node(v).needs; }

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;  // per-node grad buffers during backward
};

}  // namespace magent
