#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bridge/rng.hpp"
#include "bridge/tensor.hpp"

namespace bridge {

// One record in the computation graph. Parents are always created before
// children, so descending creation id is a valid reverse-topological order.
struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool grad_alloc = false;
    const char* op = "leaf";
    uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Invoked with *this during the reverse sweep; reads this->grad and
    // accumulates into parent grads. Captures parents by shared_ptr (never
    // itself, which would cycle).
    std::function<void(Node&)> backward_fn;

    void accum_grad(const Tensor& g);
    Tensor& ensure_grad();
};

// Handle to a graph node. Cheap to copy; the graph is reference-counted and
// dies with the last handle.
class Value {
public:
    Value() = default;
    explicit Value(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& data() const { return node_->value; }
    Tensor& mutable_data() { return node_->value; }
    const Tensor& grad() const;
    bool has_grad() const { return node_ && node_->grad_alloc; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad();
    std::shared_ptr<Node> node() const { return node_; }

    const std::vector<int>& shape() const { return node_->value.shape(); }
    double item() const { return node_->value.item(); }

private:
    std::shared_ptr<Node> node_;
};

// Scoped switch for graph recording. With recording off, ops compute values
// but build no graph (forward-only evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Leaf constructors.
Value make_param(Tensor t);                // requires_grad = true
Value make_input(Tensor t);                // requires_grad = false
Value make_scalar(double v);               // 1-element input
Value detach(const Value& a);              // same values, no history

// Elementwise / arithmetic.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value neg(const Value& a);
Value scale(const Value& a, double s);
Value mul_scalar(const Value& a, const Value& s);  // s is 1-element; broadcast
Value add_bias(const Value& x, const Value& b);    // x [N,d], b [1,d]
Value vlog(const Value& a);
Value vexp(const Value& a);
Value sigmoid(const Value& a);
Value softplus(const Value& a);
Value gelu(const Value& a);
Value clamp_min(const Value& a, double floor);

// Same data, new shape (numel must match); gradient passes through.
Value reshape(const Value& a, std::vector<int> shape);

// Matrix ops.
Value matmul(const Value& a, const Value& b);     // [M,K]x[K,N]
Value matmul_nt(const Value& a, const Value& b);  // [M,K]x[N,K]^T
Value transpose(const Value& a);
Value diag(const Value& a);  // [n,n] -> [n,1]

// Reductions.
Value sum(const Value& a);   // -> [1]
Value mean(const Value& a);  // -> [1]

// Fused multi-head attention pieces. Heads live in column blocks of width
// d/heads; probs stack the per-head softmax matrices as row blocks
// [heads*Nq, Nkv].
Value multihead_scores_softmax(const Value& q, const Value& k, int heads, double scale,
                               const std::vector<uint8_t>* kv_mask = nullptr);
Value multihead_apply(const Value& probs, const Value& v, int heads);  // -> [Nq, d]
Value head_mean(const Value& probs, int heads);                        // -> [Nq, Nkv]

// Structured ops.
Value softmax_rows(const Value& a, const std::vector<uint8_t>* key_mask = nullptr);
Value log_softmax_rows(const Value& a);
Value layer_norm_rows(const Value& x, const Value& gamma, const Value& beta, double eps = 1e-5);
Value l2_normalize_rows(const Value& x);
Value linear(const Value& x, const Value& w, const Value* b = nullptr);  // x[N,di] w[di,do]
Value slice_rows(const Value& a, int r0, int r1);
Value slice_cols(const Value& a, int c0, int c1);
Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value lookup_rows(const Value& table, const std::vector<int>& ids);
Value masked_mean_rows(const Value& x, const std::vector<uint8_t>& mask);
Value dropout(const Value& x, double rate, Rng& rng);

// Reverse-mode sweep from a scalar loss. Every op record reachable from
// `loss` is visited exactly once, in reverse creation order.
void backward(const Value& loss);

}  // namespace bridge
