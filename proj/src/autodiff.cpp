#include "bridge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace bridge {

namespace {

thread_local bool g_grad_enabled = true;
thread_local uint64_t g_next_node_id = 1;

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericalError(std::string("non-finite values produced by op '") + op + "'");
}

std::shared_ptr<Node> new_node(Tensor value, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    n->id = g_next_node_id++;
    return n;
}

// Creates the op node; records parents and the backward closure only when
// recording is on and some input needs gradients.
Value finish(Tensor out, const char* op, std::initializer_list<Value> inputs, std::function<void(Node&)> bwd) {
    check_finite(out, op);
    auto n = new_node(std::move(out), op);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& v : inputs)
            if (v.requires_grad()) needs = true;
    if (needs) {
        n->requires_grad = true;
        for (const auto& v : inputs) n->parents.push_back(v.node());
        n->backward_fn = std::move(bwd);
    }
    return Value(n);
}

void require_same_shape(const Value& a, const Value& b, const char* op) {
    if (!a.data().same_shape(b.data()))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.data().shape_str() + " vs " +
                         b.data().shape_str());
}

// Elementwise unary op with derivative expressed in terms of (x, y).
template <typename Fwd, typename Dfn>
Value unary_op(const Value& a, const char* op, Fwd f, Dfn dfn) {
    const Tensor& x = a.data();
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op_ = out.data();
    const size_t n = x.size();
    for (size_t i = 0; i < n; ++i) op_[i] = f(xp[i]);
    auto an = a.node();
    return finish(std::move(out), op, {a}, [an, dfn, n](Node& self) {
        double* pg = an->ensure_grad().data();
        const double* g = self.grad.data();
        const double* xv = an->value.data();
        const double* yv = self.value.data();
        for (size_t i = 0; i < n; ++i) pg[i] += g[i] * dfn(xv[i], yv[i]);
    });
}

}  // namespace

void Node::accum_grad(const Tensor& g) {
    ensure_grad();
    grad.add_inplace(g);
}

Tensor& Node::ensure_grad() {
    if (!grad_alloc) {
        grad = Tensor(value.shape());
        grad_alloc = true;
    }
    return grad;
}

const Tensor& Value::grad() const {
    if (!node_->grad_alloc) throw ContractError("grad accessed before backward populated it");
    return node_->grad;
}

void Value::zero_grad() {
    if (node_ && node_->grad_alloc) node_->grad.fill(0.0);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

Value make_param(Tensor t) {
    auto n = new_node(std::move(t), "param");
    n->requires_grad = true;
    return Value(n);
}

Value make_input(Tensor t) { return Value(new_node(std::move(t), "input")); }

Value make_scalar(double v) { return make_input(Tensor::scalar(v)); }

Value detach(const Value& a) { return Value(new_node(a.data(), "detach")); }

Value add(const Value& a, const Value& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.data();
    out.add_inplace(b.data());
    auto an = a.node(), bn = b.node();
    return finish(std::move(out), "add", {a, b}, [an, bn](Node& self) {
        if (an->requires_grad) an->accum_grad(self.grad);
        if (bn->requires_grad) bn->accum_grad(self.grad);
    });
}

Value sub(const Value& a, const Value& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.data();
    out.add_scaled_inplace(b.data(), -1.0);
    auto an = a.node(), bn = b.node();
    return finish(std::move(out), "sub", {a, b}, [an, bn](Node& self) {
        if (an->requires_grad) an->accum_grad(self.grad);
        if (bn->requires_grad) bn->ensure_grad().add_scaled_inplace(self.grad, -1.0);
    });
}

Value mul(const Value& a, const Value& b) {
    require_same_shape(a, b, "mul");
    const size_t n = a.data().size();
    Tensor out(a.shape());
    {
        double* o = out.data();
        const double* x = a.data().data();
        const double* y = b.data().data();
        for (size_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
    }
    auto an = a.node(), bn = b.node();
    return finish(std::move(out), "mul", {a, b}, [an, bn, n](Node& self) {
        const double* g = self.grad.data();
        if (an->requires_grad) {
            double* ag = an->ensure_grad().data();
            const double* y = bn->value.data();
            for (size_t i = 0; i < n; ++i) ag[i] += g[i] * y[i];
        }
        if (bn->requires_grad) {
            double* bg = bn->ensure_grad().data();
            const double* x = an->value.data();
            for (size_t i = 0; i < n; ++i) bg[i] += g[i] * x[i];
        }
    });
}

Value neg(const Value& a) {
    return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Value scale(const Value& a, double s) {
    const size_t n = a.data().size();
    Tensor out(a.shape());
    {
        double* o = out.data();
        const double* x = a.data().data();
        for (size_t i = 0; i < n; ++i) o[i] = x[i] * s;
    }
    auto an = a.node();
    return finish(std::move(out), "scale", {a},
                  [an, s](Node& self) { an->ensure_grad().add_scaled_inplace(self.grad, s); });
}

Value mul_scalar(const Value& a, const Value& s) {
    if (s.data().size() != 1) throw ShapeError("mul_scalar: scalar operand must have 1 element");
    const double sv = s.data().at(0);
    const size_t n = a.data().size();
    Tensor out(a.shape());
    {
        double* o = out.data();
        const double* x = a.data().data();
        for (size_t i = 0; i < n; ++i) o[i] = x[i] * sv;
    }
    auto an = a.node(), sn = s.node();
    return finish(std::move(out), "mul_scalar", {a, s}, [an, sn, n](Node& self) {
        const double svv = sn->value.at(0);
        const double* g = self.grad.data();
        if (an->requires_grad) an->ensure_grad().add_scaled_inplace(self.grad, svv);
        if (sn->requires_grad) {
            const double* x = an->value.data();
            double acc = 0.0;
            for (size_t i = 0; i < n; ++i) acc += g[i] * x[i];
            sn->ensure_grad().at(0) += acc;
        }
    });
}

Value add_bias(const Value& x, const Value& b) {
    const int N = x.data().rows(), d = x.data().cols();
    if (b.data().size() != static_cast<size_t>(d))
        throw ShapeError("add_bias: bias " + b.data().shape_str() + " vs row width " + std::to_string(d));
    Tensor out = x.data();
    {
        double* o = out.data();
        const double* bp = b.data().data();
        for (int i = 0; i < N; ++i) {
            double* row = o + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) row[j] += bp[j];
        }
    }
    auto xn = x.node(), bn = b.node();
    return finish(std::move(out), "add_bias", {x, b}, [xn, bn, N, d](Node& self) {
        if (xn->requires_grad) xn->accum_grad(self.grad);
        if (bn->requires_grad) {
            double* bg = bn->ensure_grad().data();
            const double* g = self.grad.data();
            for (int i = 0; i < N; ++i) {
                const double* row = g + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) bg[j] += row[j];
            }
        }
    });
}

Value vlog(const Value& a) {
    return unary_op(a, "log", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Value vexp(const Value& a) {
    return unary_op(a, "exp", [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Value sigmoid(const Value& a) {
    return unary_op(a, "sigmoid",
                    [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Value softplus(const Value& a) {
    // log(1 + e^x), computed as max(x,0) + log1p(e^-|x|)
    return unary_op(a, "softplus",
                    [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
                    [](double x, double) {
                        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                    });
}

Value gelu(const Value& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_op(a, "gelu",
                    [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                    [](double x, double) {
                        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                        return cdf + x * pdf;
                    });
}

Value clamp_min(const Value& a, double floor) {
    const size_t n = a.data().size();
    Tensor out(a.shape());
    {
        double* o = out.data();
        const double* x = a.data().data();
        for (size_t i = 0; i < n; ++i) o[i] = std::max(x[i], floor);
    }
    auto an = a.node();
    return finish(std::move(out), "clamp_min", {a}, [an, floor, n](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        const double* x = an->value.data();
        for (size_t i = 0; i < n; ++i)
            if (x[i] > floor) ag[i] += g[i];
    });
}

Value reshape(const Value& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.data().size())
        throw ShapeError("reshape: " + a.data().shape_str() + " to " + shape_to_string(shape));
    Tensor out(std::move(shape), a.data().vec());
    auto an = a.node();
    return finish(std::move(out), "reshape", {a}, [an](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) ag[i] += g[i];
    });
}

Value matmul(const Value& a, const Value& b) {
    const int M = a.data().rows(), K = a.data().cols();
    if (b.data().rows() != K)
        throw ShapeError("matmul: " + a.data().shape_str() + " x " + b.data().shape_str());
    const int N = b.data().cols();
    Tensor out({M, N});
    mat::matmul_acc(a.data().data(), b.data().data(), out.data(), M, K, N);
    auto an = a.node(), bn = b.node();
    return finish(std::move(out), "matmul", {a, b}, [an, bn, M, K, N](Node& self) {
        if (an->requires_grad)  // dA = g . B^T
            mat::matmul_nt_acc(self.grad.data(), bn->value.data(), an->ensure_grad().data(), M, N, K);
        if (bn->requires_grad)  // dB = A^T . g
            mat::matmul_tn_acc(an->value.data(), self.grad.data(), bn->ensure_grad().data(), K, M, N);
    });
}

Value matmul_nt(const Value& a, const Value& b) {
    const int M = a.data().rows(), K = a.data().cols();
    if (b.data().cols() != K)
        throw ShapeError("matmul_nt: " + a.data().shape_str() + " x " + b.data().shape_str() + "^T");
    const int N = b.data().rows();
    Tensor out({M, N});
    mat::matmul_nt_acc(a.data().data(), b.data().data(), out.data(), M, K, N);
    auto an = a.node(), bn = b.node();
    return finish(std::move(out), "matmul_nt", {a, b}, [an, bn, M, K, N](Node& self) {
        if (an->requires_grad)  // dA = g . B
            mat::matmul_acc(self.grad.data(), bn->value.data(), an->ensure_grad().data(), M, N, K);
        if (bn->requires_grad)  // dB = g^T . A
            mat::matmul_tn_acc(self.grad.data(), an->value.data(), bn->ensure_grad().data(), N, M, K);
    });
}

Value transpose(const Value& a) {
    const int M = a.data().rows(), N = a.data().cols();
    Tensor out({N, M});
    {
        double* o = out.data();
        const double* x = a.data().data();
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) o[static_cast<size_t>(j) * M + i] = x[static_cast<size_t>(i) * N + j];
    }
    auto an = a.node();
    return finish(std::move(out), "transpose", {a}, [an, M, N](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) ag[static_cast<size_t>(i) * N + j] += g[static_cast<size_t>(j) * M + i];
    });
}

Value diag(const Value& a) {
    const int n = a.data().rows();
    if (a.data().cols() != n) throw ShapeError("diag: non-square " + a.data().shape_str());
    Tensor out({n, 1});
    for (int i = 0; i < n; ++i) out.data()[i] = a.data().data()[static_cast<size_t>(i) * n + i];
    auto an = a.node();
    return finish(std::move(out), "diag", {a}, [an, n](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        for (int i = 0; i < n; ++i) ag[static_cast<size_t>(i) * n + i] += g[i];
    });
}

Value sum(const Value& a) {
    const double* x = a.data().data();
    double s = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) s += x[i];
    auto an = a.node();
    return finish(Tensor::scalar(s), "sum", {a}, [an](Node& self) {
        double* ag = an->ensure_grad().data();
        const double g = self.grad.at(0);
        for (size_t i = 0; i < an->value.size(); ++i) ag[i] += g;
    });
}

Value mean(const Value& a) {
    const double n = static_cast<double>(a.data().size());
    const double* x = a.data().data();
    double s = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) s += x[i];
    auto an = a.node();
    return finish(Tensor::scalar(s / n), "mean", {a}, [an, n](Node& self) {
        double* ag = an->ensure_grad().data();
        const double g = self.grad.at(0) / n;
        for (size_t i = 0; i < an->value.size(); ++i) ag[i] += g;
    });
}

Value multihead_scores_softmax(const Value& q, const Value& k, int heads, double scale,
                               const std::vector<uint8_t>* kv_mask) {
    const int nq = q.data().rows(), d = q.data().cols();
    const int nkv = k.data().rows();
    if (k.data().cols() != d) throw ShapeError("multihead_scores_softmax: q/k width mismatch");
    if (heads < 1 || d % heads != 0) throw ShapeError("multihead_scores_softmax: heads must divide width");
    const int dh = d / heads;
    const uint8_t* mask = nullptr;
    if (kv_mask) {
        if (static_cast<int>(kv_mask->size()) != nkv) throw ShapeError("multihead_scores_softmax: mask length");
        bool any = false;
        for (uint8_t m : *kv_mask) any = any || m;
        if (!any) throw DegenerateInputError("multihead_scores_softmax: all keys masked");
        mask = kv_mask->data();
    }
    check_finite(q.data(), "multihead_scores(q)");
    check_finite(k.data(), "multihead_scores(k)");

    Tensor out({heads * nq, nkv});
    {
        const double* qp = q.data().data();
        const double* kp = k.data().data();
        double* o = out.data();
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            for (int i = 0; i < nq; ++i) {
                const double* qr = qp + static_cast<size_t>(i) * d + c0;
                double* orow = o + (static_cast<size_t>(h) * nq + i) * nkv;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < nkv; ++j) {
                    if (mask && !mask[j]) continue;
                    const double* kr = kp + static_cast<size_t>(j) * d + c0;
                    double s = 0.0;
                    for (int t = 0; t < dh; ++t) s += qr[t] * kr[t];
                    orow[j] = s * scale;
                    mx = std::max(mx, orow[j]);
                }
                double z = 0.0;
                for (int j = 0; j < nkv; ++j) {
                    if (mask && !mask[j]) {
                        orow[j] = 0.0;
                        continue;
                    }
                    orow[j] = std::exp(orow[j] - mx);
                    z += orow[j];
                }
                const double inv = 1.0 / z;
                for (int j = 0; j < nkv; ++j) orow[j] *= inv;
            }
        }
    }
    auto qn = q.node(), kn = k.node();
    return finish(std::move(out), "multihead_scores_softmax", {q, k},
                  [qn, kn, heads, nq, nkv, d, dh, scale](Node& self) {
                      const double* g = self.grad.data();
                      const double* p = self.value.data();
                      const double* qp = qn->value.data();
                      const double* kp = kn->value.data();
                      double* qg = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
                      double* kg = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
                      std::vector<double> ds(static_cast<size_t>(nkv));
                      for (int h = 0; h < heads; ++h) {
                          const int c0 = h * dh;
                          for (int i = 0; i < nq; ++i) {
                              const size_t off = (static_cast<size_t>(h) * nq + i) * nkv;
                              double dot = 0.0;
                              for (int j = 0; j < nkv; ++j) dot += p[off + j] * g[off + j];
                              for (int j = 0; j < nkv; ++j)
                                  ds[static_cast<size_t>(j)] = p[off + j] * (g[off + j] - dot) * scale;
                              // dQ_h[i] += ds . K_h ; dK_h[j] += ds[j] * Q_h[i]
                              if (qg) {
                                  double* qr = qg + static_cast<size_t>(i) * d + c0;
                                  for (int j = 0; j < nkv; ++j) {
                                      const double dsj = ds[static_cast<size_t>(j)];
                                      if (dsj == 0.0) continue;
                                      const double* kr = kp + static_cast<size_t>(j) * d + c0;
                                      for (int t = 0; t < dh; ++t) qr[t] += dsj * kr[t];
                                  }
                              }
                              if (kg) {
                                  const double* qr = qp + static_cast<size_t>(i) * d + c0;
                                  for (int j = 0; j < nkv; ++j) {
                                      const double dsj = ds[static_cast<size_t>(j)];
                                      if (dsj == 0.0) continue;
                                      double* kr = kg + static_cast<size_t>(j) * d + c0;
                                      for (int t = 0; t < dh; ++t) kr[t] += dsj * qr[t];
                                  }
                              }
                          }
                      }
                  });
}

Value multihead_apply(const Value& probs, const Value& v, int heads) {
    const int nkv = probs.data().cols();
    const int total_rows = probs.data().rows();
    if (total_rows % heads != 0) throw ShapeError("multihead_apply: probs rows not divisible by heads");
    const int nq = total_rows / heads;
    const int d = v.data().cols();
    if (v.data().rows() != nkv) throw ShapeError("multihead_apply: v rows must equal key count");
    if (d % heads != 0) throw ShapeError("multihead_apply: heads must divide width");
    const int dh = d / heads;

    Tensor out({nq, d});
    for (int h = 0; h < heads; ++h)
        mat::gemm_nn_strided(probs.data().data() + static_cast<size_t>(h) * nq * nkv, nkv,
                             v.data().data() + h * dh, d, out.data() + h * dh, d, nq, nkv, dh);
    auto pn = probs.node(), vn = v.node();
    return finish(std::move(out), "multihead_apply", {probs, v}, [pn, vn, heads, nq, nkv, d, dh](Node& self) {
        const double* g = self.grad.data();
        for (int h = 0; h < heads; ++h) {
            if (pn->requires_grad)  // dP_h += g_h . V_h^T
                mat::gemm_nt_strided(g + h * dh, d, vn->value.data() + h * dh, d,
                                     pn->ensure_grad().data() + static_cast<size_t>(h) * nq * nkv, nkv, nq, dh, nkv);
            if (vn->requires_grad)  // dV_h += P_h^T . g_h
                mat::gemm_tn_strided(pn->value.data() + static_cast<size_t>(h) * nq * nkv, nkv, g + h * dh, d,
                                     vn->ensure_grad().data() + h * dh, d, nkv, nq, dh);
        }
    });
}

Value head_mean(const Value& probs, int heads) {
    const int nkv = probs.data().cols();
    const int total_rows = probs.data().rows();
    if (heads < 1 || total_rows % heads != 0) throw ShapeError("head_mean: probs rows not divisible by heads");
    const int nq = total_rows / heads;
    Tensor out({nq, nkv});
    {
        const double* p = probs.data().data();
        double* o = out.data();
        const double inv = 1.0 / heads;
        for (int h = 0; h < heads; ++h)
            for (size_t i = 0; i < static_cast<size_t>(nq) * nkv; ++i) o[i] += p[static_cast<size_t>(h) * nq * nkv + i];
        for (size_t i = 0; i < static_cast<size_t>(nq) * nkv; ++i) o[i] *= inv;
    }
    auto pn = probs.node();
    return finish(std::move(out), "head_mean", {probs}, [pn, heads, nq, nkv](Node& self) {
        double* pg = pn->ensure_grad().data();
        const double* g = self.grad.data();
        const double inv = 1.0 / heads;
        for (int h = 0; h < heads; ++h)
            for (size_t i = 0; i < static_cast<size_t>(nq) * nkv; ++i)
                pg[static_cast<size_t>(h) * nq * nkv + i] += g[i] * inv;
    });
}

Value softmax_rows(const Value& a, const std::vector<uint8_t>* key_mask) {
    check_finite(a.data(), "softmax(input)");
    const int N = a.data().rows(), d = a.data().cols();
    if (d < 1) throw ShapeError("softmax_rows: empty rows");
    if (key_mask) {
        if (static_cast<int>(key_mask->size()) != d)
            throw ShapeError("softmax_rows: mask length " + std::to_string(key_mask->size()) + " vs width " +
                             std::to_string(d));
        bool any = false;
        for (uint8_t m : *key_mask) any = any || m;
        if (!any) throw DegenerateInputError("softmax_rows: all keys masked");
    }
    Tensor out({N, d});
    const uint8_t* mask = key_mask ? key_mask->data() : nullptr;
    {
        const double* x = a.data().data();
        double* o = out.data();
        for (int i = 0; i < N; ++i) {
            const double* xr = x + static_cast<size_t>(i) * d;
            double* orow = o + static_cast<size_t>(i) * d;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < d; ++j)
                if (!mask || mask[j]) mx = std::max(mx, xr[j]);
            double z = 0.0;
            for (int j = 0; j < d; ++j) {
                const double e = (!mask || mask[j]) ? std::exp(xr[j] - mx) : 0.0;
                orow[j] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (int j = 0; j < d; ++j) orow[j] *= inv;
        }
    }
    auto an = a.node();
    return finish(std::move(out), "softmax_rows", {a}, [an, N, d](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int i = 0; i < N; ++i) {
            const size_t off = static_cast<size_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += y[off + j] * g[off + j];
            for (int j = 0; j < d; ++j) ag[off + j] += y[off + j] * (g[off + j] - dot);
        }
    });
}

Value log_softmax_rows(const Value& a) {
    check_finite(a.data(), "log_softmax(input)");
    const int N = a.data().rows(), d = a.data().cols();
    Tensor out({N, d});
    {
        const double* x = a.data().data();
        double* o = out.data();
        for (int i = 0; i < N; ++i) {
            const double* xr = x + static_cast<size_t>(i) * d;
            double* orow = o + static_cast<size_t>(i) * d;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < d; ++j) mx = std::max(mx, xr[j]);
            double z = 0.0;
            for (int j = 0; j < d; ++j) z += std::exp(xr[j] - mx);
            const double lse = mx + std::log(z);
            for (int j = 0; j < d; ++j) orow[j] = xr[j] - lse;
        }
    }
    auto an = a.node();
    return finish(std::move(out), "log_softmax_rows", {a}, [an, N, d](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int i = 0; i < N; ++i) {
            const size_t off = static_cast<size_t>(i) * d;
            double gsum = 0.0;
            for (int j = 0; j < d; ++j) gsum += g[off + j];
            for (int j = 0; j < d; ++j) ag[off + j] += g[off + j] - std::exp(y[off + j]) * gsum;
        }
    });
}

Value layer_norm_rows(const Value& x, const Value& gamma, const Value& beta, double eps) {
    const int N = x.data().rows(), d = x.data().cols();
    if (gamma.data().size() != static_cast<size_t>(d) || beta.data().size() != static_cast<size_t>(d))
        throw ShapeError("layer_norm_rows: gamma/beta width mismatch");
    Tensor out({N, d});
    Tensor xhat({N, d});
    std::vector<double> inv_std(static_cast<size_t>(N));
    {
        const double* xp = x.data().data();
        const double* gp = gamma.data().data();
        const double* bp = beta.data().data();
        double* o = out.data();
        double* xh = xhat.data();
        for (int i = 0; i < N; ++i) {
            const double* xr = xp + static_cast<size_t>(i) * d;
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += xr[j];
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double c = xr[j] - mu;
                var += c * c;
            }
            var /= d;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(i)] = is;
            const size_t off = static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) {
                const double h = (xr[j] - mu) * is;
                xh[off + j] = h;
                o[off + j] = gp[j] * h + bp[j];
            }
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return finish(std::move(out), "layer_norm_rows", {x, gamma, beta},
                  [xn, gn, bn, xhat, inv_std, N, d](Node& self) {
                      const double* g = self.grad.data();
                      const double* xh = xhat.data();
                      const double* gp = gn->value.data();
                      for (int i = 0; i < N; ++i) {
                          const size_t off = static_cast<size_t>(i) * d;
                          if (gn->requires_grad) {
                              double* gg = gn->ensure_grad().data();
                              for (int j = 0; j < d; ++j) gg[j] += g[off + j] * xh[off + j];
                          }
                          if (bn->requires_grad) {
                              double* bg = bn->ensure_grad().data();
                              for (int j = 0; j < d; ++j) bg[j] += g[off + j];
                          }
                          if (xn->requires_grad) {
                              double* xg = xn->ensure_grad().data();
                              double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                              for (int j = 0; j < d; ++j) {
                                  const double dxh = g[off + j] * gp[j];
                                  m1 += dxh;
                                  m2 += dxh * xh[off + j];
                              }
                              m1 /= d;
                              m2 /= d;
                              const double is = inv_std[static_cast<size_t>(i)];
                              for (int j = 0; j < d; ++j) {
                                  const double dxh = g[off + j] * gp[j];
                                  xg[off + j] += is * (dxh - m1 - xh[off + j] * m2);
                              }
                          }
                      }
                  });
}

Value l2_normalize_rows(const Value& x) {
    const int N = x.data().rows(), d = x.data().cols();
    Tensor out({N, d});
    std::vector<double> inv_norm(static_cast<size_t>(N));
    {
        const double* xp = x.data().data();
        double* o = out.data();
        for (int i = 0; i < N; ++i) {
            const double* xr = xp + static_cast<size_t>(i) * d;
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
            if (s <= 0.0) throw DegenerateEmbeddingError("l2_normalize_rows: zero row " + std::to_string(i));
            const double in = 1.0 / std::sqrt(s);
            inv_norm[static_cast<size_t>(i)] = in;
            double* orow = o + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) orow[j] = xr[j] * in;
        }
    }
    auto xn = x.node();
    return finish(std::move(out), "l2_normalize_rows", {x}, [xn, inv_norm, N, d](Node& self) {
        double* xg = xn->ensure_grad().data();
        const double* g = self.grad.data();
        const double* y = self.value.data();
        for (int i = 0; i < N; ++i) {
            const size_t off = static_cast<size_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += y[off + j] * g[off + j];
            const double in = inv_norm[static_cast<size_t>(i)];
            for (int j = 0; j < d; ++j) xg[off + j] += in * (g[off + j] - y[off + j] * dot);
        }
    });
}

Value linear(const Value& x, const Value& w, const Value* b) {
    if (!b) return matmul(x, w);
    const int M = x.data().rows(), K = x.data().cols();
    if (w.data().rows() != K) throw ShapeError("linear: " + x.data().shape_str() + " x " + w.data().shape_str());
    const int N = w.data().cols();
    if (b->data().size() != static_cast<size_t>(N)) throw ShapeError("linear: bias width mismatch");
    Tensor out({M, N});
    {
        double* o = out.data();
        const double* bp = b->data().data();
        for (int i = 0; i < M; ++i) {
            double* row = o + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) row[j] = bp[j];
        }
        mat::matmul_acc(x.data().data(), w.data().data(), o, M, K, N);
    }
    auto xn = x.node(), wn = w.node(), bn = b->node();
    return finish(std::move(out), "linear", {x, w, *b}, [xn, wn, bn, M, K, N](Node& self) {
        const double* g = self.grad.data();
        if (xn->requires_grad)  // dX = g . W^T
            mat::matmul_nt_acc(g, wn->value.data(), xn->ensure_grad().data(), M, N, K);
        if (wn->requires_grad)  // dW = X^T . g
            mat::matmul_tn_acc(xn->value.data(), g, wn->ensure_grad().data(), K, M, N);
        if (bn->requires_grad) {
            double* bg = bn->ensure_grad().data();
            for (int i = 0; i < M; ++i) {
                const double* row = g + static_cast<size_t>(i) * N;
                for (int j = 0; j < N; ++j) bg[j] += row[j];
            }
        }
    });
}

Value slice_rows(const Value& a, int r0, int r1) {
    const int M = a.data().rows(), N = a.data().cols();
    if (r0 < 0 || r1 > M || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Tensor out({r1 - r0, N});
    {
        const double* x = a.data().data() + static_cast<size_t>(r0) * N;
        double* o = out.data();
        std::copy(x, x + static_cast<size_t>(r1 - r0) * N, o);
    }
    auto an = a.node();
    return finish(std::move(out), "slice_rows", {a}, [an, r0, r1, N](Node& self) {
        double* ag = an->ensure_grad().data() + static_cast<size_t>(r0) * N;
        const double* g = self.grad.data();
        for (size_t i = 0; i < static_cast<size_t>(r1 - r0) * N; ++i) ag[i] += g[i];
    });
}

Value slice_cols(const Value& a, int c0, int c1) {
    const int M = a.data().rows(), N = a.data().cols();
    if (c0 < 0 || c1 > N || c0 >= c1) throw ShapeError("slice_cols: bad range");
    const int w = c1 - c0;
    Tensor out({M, w});
    {
        const double* x = a.data().data();
        double* o = out.data();
        for (int i = 0; i < M; ++i) {
            const double* xr = x + static_cast<size_t>(i) * N + c0;
            double* orow = o + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) orow[j] = xr[j];
        }
    }
    auto an = a.node();
    return finish(std::move(out), "slice_cols", {a}, [an, c0, M, N, w](Node& self) {
        double* ag = an->ensure_grad().data();
        const double* g = self.grad.data();
        for (int i = 0; i < M; ++i) {
            double* ar = ag + static_cast<size_t>(i) * N + c0;
            const double* gr = g + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) ar[j] += gr[j];
        }
    });
}

Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty list");
    const int N = parts[0].data().cols();
    int M = 0;
    for (const auto& p : parts) {
        if (p.data().cols() != N) throw ShapeError("concat_rows: column mismatch");
        M += p.data().rows();
    }
    Tensor out({M, N});
    {
        double* o = out.data();
        for (const auto& p : parts) {
            const size_t len = p.data().size();
            std::copy(p.data().data(), p.data().data() + len, o);
            o += len;
        }
    }
    std::vector<std::shared_ptr<Node>> pn;
    pn.reserve(parts.size());
    for (const auto& p : parts) pn.push_back(p.node());
    check_finite(out, "concat_rows");
    auto n = new_node(std::move(out), "concat_rows");
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& p : parts)
            if (p.requires_grad()) needs = true;
    if (needs) {
        n->requires_grad = true;
        n->parents = pn;
        n->backward_fn = [pn](Node& self) {
            const double* g = self.grad.data();
            for (const auto& p : pn) {
                const size_t len = p->value.size();
                if (p->requires_grad) {
                    double* pg = p->ensure_grad().data();
                    for (size_t i = 0; i < len; ++i) pg[i] += g[i];
                }
                g += len;
            }
        };
    }
    return Value(n);
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty list");
    const int M = parts[0].data().rows();
    int N = 0;
    for (const auto& p : parts) {
        if (p.data().rows() != M) throw ShapeError("concat_cols: row mismatch");
        N += p.data().cols();
    }
    Tensor out({M, N});
    {
        double* o = out.data();
        int c = 0;
        for (const auto& p : parts) {
            const int pc = p.data().cols();
            const double* x = p.data().data();
            for (int i = 0; i < M; ++i) {
                double* orow = o + static_cast<size_t>(i) * N + c;
                const double* xr = x + static_cast<size_t>(i) * pc;
                for (int j = 0; j < pc; ++j) orow[j] = xr[j];
            }
            c += pc;
        }
    }
    std::vector<std::shared_ptr<Node>> pn;
    pn.reserve(parts.size());
    for (const auto& p : parts) pn.push_back(p.node());
    check_finite(out, "concat_cols");
    auto n = new_node(std::move(out), "concat_cols");
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& p : parts)
            if (p.requires_grad()) needs = true;
    if (needs) {
        n->requires_grad = true;
        n->parents = pn;
        n->backward_fn = [pn, M, N](Node& self) {
            const double* g = self.grad.data();
            int c0 = 0;
            for (const auto& p : pn) {
                const int pc = p->value.cols();
                if (p->requires_grad) {
                    double* pg = p->ensure_grad().data();
                    for (int i = 0; i < M; ++i) {
                        const double* gr = g + static_cast<size_t>(i) * N + c0;
                        double* pr = pg + static_cast<size_t>(i) * pc;
                        for (int j = 0; j < pc; ++j) pr[j] += gr[j];
                    }
                }
                c0 += pc;
            }
        };
    }
    return Value(n);
}

Value lookup_rows(const Value& table, const std::vector<int>& ids) {
    const int V = table.data().rows(), d = table.data().cols();
    const int N = static_cast<int>(ids.size());
    if (N == 0) throw ContractError("lookup_rows: empty id list");
    for (int id : ids)
        if (id < 0 || id >= V) throw VocabError("lookup_rows: id " + std::to_string(id) + " out of range [0," +
                                                std::to_string(V) + ")");
    Tensor out({N, d});
    {
        const double* t = table.data().data();
        double* o = out.data();
        for (int i = 0; i < N; ++i) {
            const double* row = t + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d;
            std::copy(row, row + d, o + static_cast<size_t>(i) * d);
        }
    }
    auto tn = table.node();
    return finish(std::move(out), "lookup_rows", {table}, [tn, ids, N, d](Node& self) {
        double* tg = tn->ensure_grad().data();
        const double* g = self.grad.data();
        for (int i = 0; i < N; ++i) {
            double* row = tg + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d;
            const double* gr = g + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) row[j] += gr[j];
        }
    });
}

Value masked_mean_rows(const Value& x, const std::vector<uint8_t>& mask) {
    const int N = x.data().rows(), d = x.data().cols();
    if (static_cast<int>(mask.size()) != N) throw ShapeError("masked_mean_rows: mask length mismatch");
    int count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    if (count == 0) throw DegenerateInputError("masked_mean_rows: no valid rows");
    Tensor out({1, d});
    {
        const double* xp = x.data().data();
        double* o = out.data();
        for (int i = 0; i < N; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            const double* xr = xp + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) o[j] += xr[j];
        }
        const double inv = 1.0 / count;
        for (int j = 0; j < d; ++j) o[j] *= inv;
    }
    auto xn = x.node();
    return finish(std::move(out), "masked_mean_rows", {x}, [xn, mask, N, d, count](Node& self) {
        double* xg = xn->ensure_grad().data();
        const double* g = self.grad.data();
        const double inv = 1.0 / count;
        for (int i = 0; i < N; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            double* xr = xg + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) xr[j] += g[j] * inv;
        }
    });
}

Value dropout(const Value& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0,1)");
    if (rate == 0.0) return x;
    const double keep = 1.0 - rate;
    const size_t n = x.data().size();
    Tensor mask(x.shape());
    Tensor out(x.shape());
    {
        double* mp = mask.data();
        double* o = out.data();
        const double* xp = x.data().data();
        const double inv_keep = 1.0 / keep;
        for (size_t i = 0; i < n; ++i) {
            mp[i] = rng.bernoulli(keep) ? inv_keep : 0.0;
            o[i] = xp[i] * mp[i];
        }
    }
    auto xn = x.node();
    return finish(std::move(out), "dropout", {x}, [xn, mask, n](Node& self) {
        double* xg = xn->ensure_grad().data();
        const double* g = self.grad.data();
        const double* mp = mask.data();
        for (size_t i = 0; i < n; ++i) xg[i] += g[i] * mp[i];
    });
}

void backward(const Value& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined loss");
    if (loss.data().size() != 1) throw ContractError("backward: loss must be scalar, got " + loss.data().shape_str());
    if (!loss.requires_grad()) return;  // nothing upstream needs gradients

    // Collect reachable nodes. Parents precede children in creation order,
    // so sorting by descending id yields a reverse-topological order.
    std::vector<std::shared_ptr<Node>> reach;
    std::vector<std::shared_ptr<Node>> stack{loss.node()};
    std::unordered_set<const Node*> seen{loss.node().get()};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        reach.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back(p);
            }
        }
    }
    std::sort(reach.begin(), reach.end(),
              [](const std::shared_ptr<Node>& a, const std::shared_ptr<Node>& b) { return a->id > b->id; });

    loss.node()->ensure_grad().at(0) += 1.0;
    for (const auto& n : reach) {
        if (!n->backward_fn) continue;
        n->ensure_grad();
        n->backward_fn(*n);
    }
}

}  // namespace bridge
