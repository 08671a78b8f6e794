#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bridge/errors.hpp"

namespace bridge {

// Dense row-major tensor of doubles. Plain value container; autodiff lives
// in Node/Value (autodiff.hpp), which holds two of these (value and grad).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D accessors; most of the model works on [N, d] matrices.
    int rows() const;
    int cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& at(size_t i) { return data_[i]; }
    double at(size_t i) const { return data_[i]; }
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

    double item() const;  // value of a 1-element tensor

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    void fill(double v);
    void add_inplace(const Tensor& o);       // this += o
    void add_scaled_inplace(const Tensor& o, double s);  // this += s * o

    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Raw matrix kernels used by both forward and backward paths.
// All operate on row-major buffers and accumulate deterministically
// (fixed ikj order), so repeated runs are bitwise identical.
namespace mat {

// c[M,N] += a[M,K] * b[K,N]
void matmul_acc(const double* a, const double* b, double* c, int M, int K, int N);
// c[M,N] += a[M,K] * b[N,K]^T
void matmul_nt_acc(const double* a, const double* b, double* c, int M, int K, int N);
// c[M,N] += a[K,M]^T * b[K,N]
void matmul_tn_acc(const double* a, const double* b, double* c, int M, int K, int N);

// Strided variants over sub-blocks of larger row-major matrices (lda/ldb/ldc
// are the full row widths of the parent buffers). Used by the fused
// multi-head attention ops, whose per-head blocks are column slices.
void gemm_nn_strided(const double* a, int lda, const double* b, int ldb, double* c, int ldc, int M, int K, int N);
void gemm_nt_strided(const double* a, int lda, const double* b, int ldb, double* c, int ldc, int M, int K, int N);
void gemm_tn_strided(const double* a, int lda, const double* b, int ldb, double* c, int ldc, int M, int K, int N);

}  // namespace mat

}  // namespace bridge
