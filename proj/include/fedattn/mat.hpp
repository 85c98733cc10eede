#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace fedattn {

// Dense row-major real64 matrix. The carrier for embeddings, hidden states,
// Q/K/V and weight blocks. Every kernel below uses a fixed accumulation
// order (ascending inner index) so results are bit-stable across runs and
// thread counts.
struct Mat {
    long rows = 0;
    long cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(long r, long c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
    Mat(std::initializer_list<std::initializer_list<double>> init);

    double& at(long r, long c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(long r, long c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    std::span<double> row(long r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(long r) const { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }

    bool same_shape(const Mat& other) const { return rows == other.rows && cols == other.cols; }
    bool all_finite() const;

    static Mat identity(long n);
};

bool operator==(const Mat& a, const Mat& b);

// Attention mask. Semantically additive 0 / -inf; stored as an allow flag per
// entry so every float the kernels hold stays finite. Masked entries are
// skipped outright in softmax accumulation.
struct Mask {
    long rows = 0;
    long cols = 0;
    std::vector<std::uint8_t> allow;

    Mask() = default;
    Mask(long r, long c, bool allowed = true)
        : rows(r), cols(c), allow(static_cast<std::size_t>(r) * c, allowed ? 1 : 0) {}

    bool allowed(long r, long c) const { return allow[static_cast<std::size_t>(r) * cols + c] != 0; }
    void set(long r, long c, bool v) { allow[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0; }
};

// c(i,j) = sum_k a(i,k) b(k,j), k ascending.
Mat matmul(const Mat& a, const Mat& b);

// c(i,j) = sum_k a(i,k) b(j,k), i.e. a * b^T without materializing b^T.
Mat matmul_nt(const Mat& a, const Mat& b);

Mat add(const Mat& a, const Mat& b);

// Row-wise softmax with numerical stabilization by row-max subtraction.
// Masked entries get exactly 0; a fully masked row throws DegenerateRowError.
Mat softmax_rows(const Mat& logits, const Mask* mask = nullptr);

// Per-row mean/variance normalization followed by the affine (gamma, beta).
Mat layernorm(const Mat& x, std::span<const double> gamma, std::span<const double> beta,
              double eps = 1e-5);

double frob_dist(const Mat& a, const Mat& b);
double frob_norm(const Mat& a);

}  // namespace fedattn
