#include "bridge/tensor.hpp"

#include <cmath>
#include <sstream>

namespace bridge {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_to_string(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

int Tensor::rows() const {
    if (ndim() != 2) throw ShapeError("rows() on non-2D tensor " + shape_str());
    return shape_[0];
}

int Tensor::cols() const {
    if (ndim() != 2) throw ShapeError("cols() on non-2D tensor " + shape_str());
    return shape_[1];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor " + shape_str());
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) {
    for (double& x : data_) x = v;
}

void Tensor::add_inplace(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("add_inplace shape mismatch " + shape_str() + " vs " + o.shape_str());
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
}

void Tensor::add_scaled_inplace(const Tensor& o, double s) {
    if (!same_shape(o)) throw ShapeError("add_scaled_inplace shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

namespace mat {

void matmul_acc(const double* a, const double* b, double* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<size_t>(i) * K;
        double* ci = c + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const double aik = ai[k];
            const double* bk = b + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int M, int K, int N) {
    // b is [N, K]; dot rows of a with rows of b, 4 key rows at a time
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<size_t>(i) * K;
        double* ci = c + static_cast<size_t>(i) * N;
        int j = 0;
        for (; j + 4 <= N; j += 4) {
            const double* b0 = b + static_cast<size_t>(j) * K;
            const double* b1 = b0 + K;
            const double* b2 = b1 + K;
            const double* b3 = b2 + K;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (int k = 0; k < K; ++k) {
                const double av = ai[k];
                s0 += av * b0[k];
                s1 += av * b1[k];
                s2 += av * b2[k];
                s3 += av * b3[k];
            }
            ci[j] += s0;
            ci[j + 1] += s1;
            ci[j + 2] += s2;
            ci[j + 3] += s3;
        }
        for (; j < N; ++j) {
            const double* bj = b + static_cast<size_t>(j) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += ai[k] * bj[k];
            ci[j] += s;
        }
    }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int M, int K, int N) {
    // a is [K, M]; c[i,j] += sum_k a[k,i] * b[k,j]
    for (int k = 0; k < K; ++k) {
        const double* ak = a + static_cast<size_t>(k) * M;
        const double* bk = b + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const double aki = ak[i];
            double* ci = c + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) ci[j] += aki * bk[j];
        }
    }
}

void gemm_nn_strided(const double* a, int lda, const double* b, int ldb, double* c, int ldc, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<size_t>(i) * lda;
        double* ci = c + static_cast<size_t>(i) * ldc;
        for (int k = 0; k < K; ++k) {
            const double aik = ai[k];
            const double* bk = b + static_cast<size_t>(k) * ldb;
            for (int j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

void gemm_nt_strided(const double* a, int lda, const double* b, int ldb, double* c, int ldc, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<size_t>(i) * lda;
        double* ci = c + static_cast<size_t>(i) * ldc;
        for (int j = 0; j < N; ++j) {
            const double* bj = b + static_cast<size_t>(j) * ldb;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += ai[k] * bj[k];
            ci[j] += s;
        }
    }
}

void gemm_tn_strided(const double* a, int lda, const double* b, int ldb, double* c, int ldc, int M, int K, int N) {
    // a spans K rows of width >= M; c[i,j] += sum_k a[k,i] * b[k,j]
    for (int k = 0; k < K; ++k) {
        const double* ak = a + static_cast<size_t>(k) * lda;
        const double* bk = b + static_cast<size_t>(k) * ldb;
        for (int i = 0; i < M; ++i) {
            const double aki = ak[i];
            double* ci = c + static_cast<size_t>(i) * ldc;
            for (int j = 0; j < N; ++j) ci[j] += aki * bk[j];
        }
    }
}

}  // namespace mat

}  // namespace bridge
