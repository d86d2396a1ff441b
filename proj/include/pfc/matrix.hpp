#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pfc/error.hpp"

namespace pfc {

// Dense row-major matrix of doubles. The whole simulator runs in 64-bit
// precision so gradient checks against finite differences stay tight.
class Matrix {
  public:
    Matrix() = default;
    Matrix(int64_t rows, int64_t cols)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols), 0.0) {
        if (rows < 0 || cols < 0) {
            throw ShapeError("Matrix: negative dimension " + shape_string());
        }
    }

    static Matrix identity(int64_t n) {
        Matrix m(n, n);
        for (int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    int64_t size() const { return rows_ * cols_; }

    double& operator()(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
    double operator()(int64_t r, int64_t c) const {
        return data_[static_cast<size_t>(r * cols_ + c)];
    }

    double* row_ptr(int64_t r) { return data_.data() + r * cols_; }
    const double* row_ptr(int64_t r) const { return data_.data() + r * cols_; }

    std::span<double> row(int64_t r) { return {row_ptr(r), static_cast<size_t>(cols_)}; }
    std::span<const double> row(int64_t r) const {
        return {row_ptr(r), static_cast<size_t>(cols_)};
    }

    std::span<double> flat() { return {data_.data(), data_.size()}; }
    std::span<const double> flat() const { return {data_.data(), data_.size()}; }

    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

  private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite()) {
        throw NumericalError(std::string(what) + ": non-finite entry in " + m.shape_string() +
                             " result");
    }
}

// Standard product. The inner loop runs k ascending, so each output cell
// accumulates its terms in a fixed left-to-right order independent of
// blocking or thread count.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + a.shape_string() + " * " +
                         b.shape_string());
    }
    Matrix out(a.rows(), b.cols());
    const int64_t n = b.cols();
    for (int64_t i = 0; i < a.rows(); ++i) {
        double* dst = out.row_ptr(i);
        for (int64_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const double* src = b.row_ptr(k);
            for (int64_t j = 0; j < n; ++j) {
                dst[j] += aik * src[j];
            }
        }
    }
    require_finite(out, "matmul");
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (int64_t i = 0; i < m.rows(); ++i) {
        for (int64_t j = 0; j < m.cols(); ++j) {
            out(j, i) = m(i, j);
        }
    }
    return out;
}

inline double column_norm(const Matrix& m, int64_t col) {
    double s = 0.0;
    for (int64_t i = 0; i < m.rows(); ++i) {
        const double x = m(i, col);
        s += x * x;
    }
    return std::sqrt(s);
}

// Scales every column to unit Euclidean norm. Columns with norm below eps
// (in particular exact zero columns) are left as-is after scaling by
// 1/eps-bounded factor, i.e. zero stays zero.
inline Matrix l2_normalize_columns(const Matrix& m, double eps = 1e-12) {
    if (!(eps > 0.0)) {
        throw ContractError("l2_normalize_columns: eps must be positive");
    }
    Matrix out = m;
    for (int64_t j = 0; j < m.cols(); ++j) {
        const double inv = 1.0 / std::max(column_norm(m, j), eps);
        for (int64_t i = 0; i < m.rows(); ++i) {
            out(i, j) = m(i, j) * inv;
        }
    }
    require_finite(out, "l2_normalize_columns");
    return out;
}

// log(sum_i exp(v_i)) via max subtraction; finite for inputs up to +-700.
inline double stable_logsumexp(std::span<const double> v) {
    if (v.empty()) {
        throw ContractError("stable_logsumexp: empty input");
    }
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace pfc
