#pragma once

// Dense row-major tensors over float or double, plus the BLAS glue everything
// compute-heavy runs through. Shapes are small vectors of int; numel uses
// int64 to stay safe in products.

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fsc/common.hpp"
#include "fsc/rng.hpp"

namespace fsc {

template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> sh) : shape(std::move(sh)) {
        v.assign(size_t(numel()), S(0));
    }
    Tensor(std::vector<int> sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
        FSC_CHECK(int64_t(v.size()) == numel(), "tensor data size mismatch");
    }

    static Tensor zeros(std::vector<int> sh) { return Tensor(std::move(sh)); }
    static Tensor full(std::vector<int> sh, S c) {
        Tensor t(std::move(sh));
        for (auto& x : t.v) x = c;
        return t;
    }
    static Tensor scalar(S c) { return full({1}, c); }

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
    // default-constructed tensors have shape {} (whose dim product is 1), so
    // emptiness must be asked of the storage, not of numel()
    bool empty() const { return v.empty(); }
    int dim(int i) const { return shape[size_t(i)]; }
    int ndim() const { return int(shape.size()); }
    S* data() { return v.data(); }
    const S* data() const { return v.data(); }
    S& operator[](int64_t i) { return v[size_t(i)]; }
    const S& operator[](int64_t i) const { return v[size_t(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    void fill_normal(Rng& rng, S stddev = S(1)) {
        for (auto& x : v) x = S(rng.normal()) * stddev;
    }
    void fill_uniform(Rng& rng, S lo, S hi) {
        for (auto& x : v) x = S(rng.uniform(double(lo), double(hi)));
    }

    Tensor<S> reshaped(std::vector<int> sh) const {
        Tensor<S> t;
        t.shape = std::move(sh);
        t.v = v;
        FSC_CHECK(t.numel() == numel(), "reshape numel mismatch");
        return t;
    }
};

// ---- reductions & elementwise helpers used across modules ----

template <typename S>
S tsum(const Tensor<S>& a) {
    S s = 0;
    for (S x : a.v) s += x;
    return s;
}

template <typename S>
S tmax_abs(const Tensor<S>& a) {
    S m = 0;
    for (S x : a.v) m = std::max(m, std::abs(x));
    return m;
}

template <typename S>
S tmax_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    FSC_CHECK(a.numel() == b.numel(), "max_abs_diff shape");
    S m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename S>
void taxpy(S alpha, const Tensor<S>& x, Tensor<S>& y) {
    FSC_CHECK(x.numel() == y.numel(), "axpy shape");
    for (int64_t i = 0; i < x.numel(); ++i) y[i] += alpha * x[i];
}

// ---- GEMM dispatch: C = alpha * op(A) op(B) + beta * C, row-major ----

inline void gemm_raw(bool ta, bool tb, int m, int n, int k, float alpha, const float* A, int lda,
                     const float* B, int ldb, float beta, float* C, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, A, lda, B, ldb, beta, C, ldc);
}
inline void gemm_raw(bool ta, bool tb, int m, int n, int k, double alpha, const double* A, int lda,
                     const double* B, int ldb, double beta, double* C, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, A, lda, B, ldb, beta, C, ldc);
}

// Natural leading dimensions: A is [m,k] (or [k,m] when transposed), etc.
template <typename S>
void gemm(bool ta, bool tb, int m, int n, int k, S alpha, const S* A, const S* B, S beta, S* C) {
    gemm_raw(ta, tb, m, n, k, alpha, A, ta ? m : k, B, tb ? k : n, beta, C, n);
}

}  // namespace fsc
