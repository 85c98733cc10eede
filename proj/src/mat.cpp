#include "fedattn/mat.hpp"

#include <cmath>
#include <cstring>

#include "fedattn/error.hpp"

namespace fedattn {

Mat::Mat(std::initializer_list<std::initializer_list<double>> init) {
    rows = static_cast<long>(init.size());
    cols = rows > 0 ? static_cast<long>(init.begin()->size()) : 0;
    data.reserve(static_cast<std::size_t>(rows) * cols);
    for (const auto& r : init) {
        if (static_cast<long>(r.size()) != cols)
            throw ShapeError("Mat: ragged initializer");
        data.insert(data.end(), r.begin(), r.end());
    }
}

bool Mat::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Mat Mat::identity(long n) {
    Mat m(n, n);
    for (long i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

bool operator==(const Mat& a, const Mat& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           (a.data.empty() ||
            std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows)
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                         std::to_string(b.rows) + ")");
    Mat c(a.rows, b.cols);
    // i-k-j loop order: cache friendly, and each c(i,j) still accumulates its
    // terms in ascending k, which is the documented deterministic order.
    for (long i = 0; i < a.rows; ++i) {
        double* ci = c.data.data() + static_cast<std::size_t>(i) * c.cols;
        for (long k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            const double* bk = b.data.data() + static_cast<std::size_t>(k) * b.cols;
            for (long j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols)
        throw ShapeError("matmul_nt: inner dimensions differ (" + std::to_string(a.cols) +
                         " vs " + std::to_string(b.cols) + ")");
    Mat c(a.rows, b.rows);
    for (long i = 0; i < a.rows; ++i) {
        const double* ai = a.data.data() + static_cast<std::size_t>(i) * a.cols;
        for (long j = 0; j < b.rows; ++j) {
            const double* bj = b.data.data() + static_cast<std::size_t>(j) * b.cols;
            double s = 0.0;
            for (long k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
            c.at(i, j) = s;
        }
    }
    return c;
}

Mat add(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    Mat c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

Mat softmax_rows(const Mat& logits, const Mask* mask) {
    if (mask && (mask->rows != logits.rows || mask->cols != logits.cols))
        throw ShapeError("softmax_rows: mask shape mismatch");
    Mat out(logits.rows, logits.cols);
    for (long i = 0; i < logits.rows; ++i) {
        double mx = 0.0;
        bool any = false;
        for (long j = 0; j < logits.cols; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            const double v = logits.at(i, j);
            if (!any || v > mx) mx = v;
            any = true;
        }
        if (!any)
            throw DegenerateRowError("softmax_rows: all entries masked in row " +
                                     std::to_string(i));
        double z = 0.0;
        for (long j = 0; j < logits.cols; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            const double e = std::exp(logits.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (long j = 0; j < logits.cols; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            out.at(i, j) /= z;
        }
    }
    return out;
}

Mat layernorm(const Mat& x, std::span<const double> gamma, std::span<const double> beta,
              double eps) {
    if (static_cast<long>(gamma.size()) != x.cols || static_cast<long>(beta.size()) != x.cols)
        throw ShapeError("layernorm: gamma/beta length must equal cols");
    if (!(eps > 0.0)) throw ConfigError("layernorm: eps must be positive");
    Mat out(x.rows, x.cols);
    for (long i = 0; i < x.rows; ++i) {
        const auto xi = x.row(i);
        double mean = 0.0;
        for (double v : xi) mean += v;
        mean /= static_cast<double>(x.cols);
        double var = 0.0;
        for (double v : xi) {
            const double d = v - mean;
            var += d * d;
        }
        var /= static_cast<double>(x.cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (long j = 0; j < x.cols; ++j)
            out.at(i, j) = gamma[j] * (xi[j] - mean) * inv + beta[j];
    }
    return out;
}

double frob_dist(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ShapeError("frob_dist: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double frob_norm(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

}  // namespace fedattn
