#pragma once

// Dense row-major float64 matrix plus the few BLAS-ish kernels the model needs.
// Everything in the artifact is rank <= 2; higher-rank data is flattened with
// the convention documented at the use site.

#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <vector>

#include "rpd/common.hpp"

namespace rpd {

struct Tensor {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int64_t r, int64_t c) : rows(r), cols(c) {
        RPD_CHECK(r >= 0 && c >= 0, "Tensor: negative shape ", r, "x", c);
        v.assign(size_t(r) * size_t(c), 0.0);
    }
    Tensor(int64_t r, int64_t c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
        RPD_CHECK(int64_t(v.size()) == r * c, "Tensor: data size ", v.size(),
                  " does not match shape ", r, "x", c);
    }

    static Tensor zeros(int64_t r, int64_t c) { return Tensor(r, c); }
    static Tensor full(int64_t r, int64_t c, double x) {
        Tensor t(r, c);
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }
    static Tensor scalar(double x) { return full(1, 1, x); }

    int64_t size() const { return rows * cols; }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double& operator()(int64_t r, int64_t c) { return v[size_t(r * cols + c)]; }
    double operator()(int64_t r, int64_t c) const { return v[size_t(r * cols + c)]; }
    double& at(int64_t r, int64_t c) {
        RPD_CHECK(r >= 0 && r < rows && c >= 0 && c < cols, "Tensor::at out of range (", r, ",", c,
                  ") in ", rows, "x", cols);
        return (*this)(r, c);
    }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    // FNV-1a over the raw bytes; used by determinism tests and checkpoints.
    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ull;
        const unsigned char* p = reinterpret_cast<const unsigned char*>(v.data());
        size_t n = v.size() * sizeof(double);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
        return h;
    }
};

namespace detail {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
}  // namespace detail

// out = op(a) * op(b) + beta * out, where op transposes when the flag is set.
inline void matmul_into(Tensor& out, const Tensor& a, const Tensor& b, bool ta, bool tb,
                        double beta = 0.0) {
    int64_t m = ta ? a.cols : a.rows;
    int64_t ka = ta ? a.rows : a.cols;
    int64_t kb = tb ? b.cols : b.rows;
    int64_t n = tb ? b.rows : b.cols;
    RPD_CHECK(ka == kb, "matmul: inner dims ", ka, " vs ", kb);
    RPD_CHECK(out.rows == m && out.cols == n, "matmul: out shape ", out.rows, "x", out.cols,
              " want ", m, "x", n);
    detail::ECMap A(a.data(), a.rows, a.cols);
    detail::ECMap B(b.data(), b.rows, b.cols);
    detail::EMap C(out.data(), out.rows, out.cols);
    if (beta == 0.0) {
        if (!ta && !tb)
            C.noalias() = A * B;
        else if (!ta && tb)
            C.noalias() = A * B.transpose();
        else if (ta && !tb)
            C.noalias() = A.transpose() * B;
        else
            C.noalias() = A.transpose() * B.transpose();
    } else {
        RPD_CHECK(beta == 1.0, "matmul: beta must be 0 or 1");
        if (!ta && !tb)
            C.noalias() += A * B;
        else if (!ta && tb)
            C.noalias() += A * B.transpose();
        else if (ta && !tb)
            C.noalias() += A.transpose() * B;
        else
            C.noalias() += A.transpose() * B.transpose();
    }
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    Tensor out(ta ? a.cols : a.rows, tb ? b.rows : b.cols);
    matmul_into(out, a, b, ta, tb);
    return out;
}

inline void axpy(Tensor& y, double alpha, const Tensor& x) {
    RPD_CHECK(y.same_shape(x), "axpy: shape mismatch");
    for (int64_t i = 0; i < x.size(); ++i) y.v[size_t(i)] += alpha * x.v[size_t(i)];
}

}  // namespace rpd
