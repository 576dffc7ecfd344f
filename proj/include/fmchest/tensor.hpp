#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "fmchest/error.hpp"
#include "fmchest/rng.hpp"

namespace fmchest {

using cplx = std::complex<double>;

/// Dense complex matrix, row-major, 64-bit components.
class ComplexMatrix {
public:
    ComplexMatrix() = default;
    ComplexMatrix(int rows, int cols)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols) {
        if (rows < 0 || cols < 0) throw InvalidParameter("ComplexMatrix: negative dimension");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    cplx& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const cplx& operator()(int r, int c) const {
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    cplx* data() { return data_.data(); }
    const cplx* data() const { return data_.data(); }

    bool same_shape(const ComplexMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool is_finite() const {
        for (const cplx& z : data_) {
            if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
        }
        return true;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<cplx> data_;
};

/// Dense real tensor of arbitrary rank, row-major, 64-bit.
class RealTensor {
public:
    RealTensor() = default;
    explicit RealTensor(std::vector<int> shape) : shape_(std::move(shape)) {
        std::size_t n = 1;
        for (int d : shape_) {
            if (d < 0) throw InvalidParameter("RealTensor: negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        data_.assign(n, 0.0);
    }

    static RealTensor zeros_like(const RealTensor& t) { return RealTensor(t.shape_); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return data_.size(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const RealTensor& other) const { return shape_ == other.shape_; }

    bool is_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void fill(double v) { data_.assign(data_.size(), v); }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// ---- random sampling -------------------------------------------------------

/// i.i.d. circularly-symmetric complex Gaussian entries, per-entry variance
/// sigma^2 (real and imaginary parts each carry sigma^2 / 2).
inline ComplexMatrix randn_complex(Rng& rng, int rows, int cols, double sigma) {
    if (!std::isfinite(sigma) || sigma < 0.0)
        throw InvalidParameter("randn_complex: sigma must be finite and >= 0");
    ComplexMatrix out(rows, cols);
    const double comp_std = sigma / std::sqrt(2.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double re = comp_std * rng.normal();
        const double im = comp_std * rng.normal();
        out.data()[i] = cplx(re, im);
    }
    return out;
}

/// i.i.d. real Gaussian entries with the given standard deviation.
inline RealTensor randn_real(Rng& rng, std::vector<int> shape, double stddev) {
    if (!std::isfinite(stddev) || stddev < 0.0)
        throw InvalidParameter("randn_real: stddev must be finite and >= 0");
    RealTensor out(std::move(shape));
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stddev * rng.normal();
    return out;
}

// ---- complex <-> dual-channel real ----------------------------------------

/// Stack real and imaginary parts into a [2, rows, cols] tensor
/// (channel 0 = real, channel 1 = imaginary).
inline RealTensor complex_to_tensor(const ComplexMatrix& h) {
    RealTensor out({2, h.rows(), h.cols()});
    const std::size_t plane = h.size();
    for (std::size_t i = 0; i < plane; ++i) {
        out[i] = h.data()[i].real();
        out[plane + i] = h.data()[i].imag();
    }
    return out;
}

inline ComplexMatrix tensor_to_complex(const RealTensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 2)
        throw DimensionError("tensor_to_complex: expected shape [2, M, N]");
    ComplexMatrix out(t.dim(1), t.dim(2));
    const std::size_t plane = out.size();
    for (std::size_t i = 0; i < plane; ++i) out.data()[i] = cplx(t[i], t[plane + i]);
    return out;
}

// ---- BLAS-level complex ops -------------------------------------------------

inline double frobenius_norm_sq(const ComplexMatrix& h) {
    double acc = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        const cplx& z = h.data()[i];
        acc += z.real() * z.real() + z.imag() * z.imag();
    }
    return acc;
}

inline ComplexMatrix matmul(const ComplexMatrix& a, const ComplexMatrix& b) {
    if (a.cols() != b.rows())
        throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
    ComplexMatrix out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int k = 0; k < a.cols(); ++k) {
            const cplx aik = a(i, k);
            if (aik == cplx(0.0, 0.0)) continue;
            for (int j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

/// Conjugate transpose.
inline ComplexMatrix hermitian(const ComplexMatrix& a) {
    ComplexMatrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out(j, i) = std::conj(a(i, j));
    return out;
}

inline ComplexMatrix scale(const ComplexMatrix& a, cplx factor) {
    ComplexMatrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= factor;
    return out;
}

inline ComplexMatrix add(const ComplexMatrix& a, const ComplexMatrix& b) {
    if (!a.same_shape(b)) throw DimensionError("add: shape mismatch");
    ComplexMatrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
    return out;
}

inline ComplexMatrix sub(const ComplexMatrix& a, const ComplexMatrix& b) {
    if (!a.same_shape(b)) throw DimensionError("sub: shape mismatch");
    ComplexMatrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
    return out;
}

inline ComplexMatrix identity(int n) {
    ComplexMatrix out(n, n);
    for (int i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
}

}  // namespace fmchest
