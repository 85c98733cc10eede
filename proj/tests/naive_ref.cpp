#include "naive_ref.hpp"

#include <cmath>

namespace naive {

using fedattn::BlockParams;
using fedattn::ModelWeights;
using fedattn::Partition;

Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.cols);
    for (long i = 0; i < a.rows; ++i)
        for (long j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (long k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

Mat layernorm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta,
              double eps) {
    Mat out(x.rows, x.cols);
    for (long i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (long j = 0; j < x.cols; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(x.cols);
        double var = 0.0;
        for (long j = 0; j < x.cols; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
        var /= static_cast<double>(x.cols);
        for (long j = 0; j < x.cols; ++j)
            out.at(i, j) = gamma[j] * (x.at(i, j) - mean) / std::sqrt(var + eps) + beta[j];
    }
    return out;
}

double frob_dist(const Mat& a, const Mat& b) {
    double s = 0.0;
    for (long i = 0; i < a.rows; ++i)
        for (long j = 0; j < a.cols; ++j)
            s += (a.at(i, j) - b.at(i, j)) * (a.at(i, j) - b.at(i, j));
    return std::sqrt(s);
}

Mat attention(const Mat& q, const Mat& k, const Mat& v,
              const std::vector<std::vector<char>>& allowed) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    Mat out(q.rows, v.cols);
    for (long i = 0; i < q.rows; ++i) {
        std::vector<double> weights(k.rows, 0.0);
        double mx = -1e300;
        for (long j = 0; j < k.rows; ++j) {
            if (!allowed.empty() && !allowed[i][j]) continue;
            double s = 0.0;
            for (long c = 0; c < q.cols; ++c) s += q.at(i, c) * k.at(j, c);
            s *= scale;
            weights[j] = s;
            if (s > mx) mx = s;
        }
        double z = 0.0;
        for (long j = 0; j < k.rows; ++j) {
            if (!allowed.empty() && !allowed[i][j]) {
                weights[j] = 0.0;
                continue;
            }
            weights[j] = std::exp(weights[j] - mx);
            z += weights[j];
        }
        for (long j = 0; j < k.rows; ++j) weights[j] /= z;
        for (long c = 0; c < v.cols; ++c) {
            double s = 0.0;
            for (long j = 0; j < k.rows; ++j) s += weights[j] * v.at(j, c);
            out.at(i, c) = s;
        }
    }
    return out;
}

namespace {

std::vector<std::vector<char>> lower_triangular(long rows) {
    std::vector<std::vector<char>> allowed(rows, std::vector<char>(rows, 0));
    for (long i = 0; i < rows; ++i)
        for (long j = 0; j <= i; ++j) allowed[i][j] = 1;
    return allowed;
}

Mat mat_add(const Mat& a, const Mat& b) {
    Mat c(a.rows, a.cols);
    for (long i = 0; i < a.rows; ++i)
        for (long j = 0; j < a.cols; ++j) c.at(i, j) = a.at(i, j) + b.at(i, j);
    return c;
}

Mat ffn(const Mat& z, const BlockParams& block) {
    Mat normed = naive::layernorm(z, block.ln2_gamma, block.ln2_beta, fedattn::kLayerNormEps);
    Mat h = naive::matmul(normed, block.w_ffn1);
    for (long i = 0; i < h.rows; ++i)
        for (long j = 0; j < h.cols; ++j)
            if (h.at(i, j) < 0.0) h.at(i, j) = 0.0;
    return naive::matmul(h, block.w_ffn2);
}

}  // namespace

Mat block_forward(const Mat& x, const BlockParams& block, bool causal) {
    Mat normed = naive::layernorm(x, block.ln1_gamma, block.ln1_beta, fedattn::kLayerNormEps);
    Mat q = naive::matmul(normed, block.w_q);
    Mat k = naive::matmul(normed, block.w_k);
    Mat v = naive::matmul(normed, block.w_v);
    std::vector<std::vector<char>> allowed;
    if (causal) allowed = lower_triangular(x.rows);
    Mat o = naive::attention(q, k, v, allowed);
    Mat x_attn = mat_add(x, o);
    return mat_add(x_attn, ffn(x_attn, block));
}

Mat forward(const Mat& x, const ModelWeights& w) {
    Mat state = x;
    for (const auto& block : w.blocks) state = block_forward(state, block, true);
    return state;
}

std::vector<Mat> fed_states(const std::vector<Mat>& embeds, const ModelWeights& w,
                            const Partition& p, int H) {
    const long d = w.config.d;
    std::vector<Mat> x(embeds);
    std::vector<Mat> states;

    auto scatter_all = [&]() {
        Mat g(p.L, d);
        for (int n = 0; n < p.N; ++n)
            for (std::size_t i = 0; i < p.locals[n].size(); ++i)
                for (long c = 0; c < d; ++c)
                    g.at(p.locals[n][i], c) = x[n].at(static_cast<long>(i), c);
        return g;
    };
    states.push_back(scatter_all());

    for (long m = 1; m <= w.config.M; ++m) {
        const BlockParams& block = w.blocks[m - 1];
        std::vector<Mat> q(p.N), k(p.N), v(p.N);
        for (int n = 0; n < p.N; ++n) {
            Mat normed = naive::layernorm(x[n], block.ln1_gamma, block.ln1_beta, fedattn::kLayerNormEps);
            q[n] = naive::matmul(normed, block.w_q);
            k[n] = naive::matmul(normed, block.w_k);
            v[n] = naive::matmul(normed, block.w_v);
        }
        if (m % H == 0) {
            Mat kg(p.L, d), vg(p.L, d);
            for (int n = 0; n < p.N; ++n)
                for (std::size_t i = 0; i < p.locals[n].size(); ++i)
                    for (long c = 0; c < d; ++c) {
                        kg.at(p.locals[n][i], c) = k[n].at(static_cast<long>(i), c);
                        vg.at(p.locals[n][i], c) = v[n].at(static_cast<long>(i), c);
                    }
            for (int n = 0; n < p.N; ++n) {
                const long ln = static_cast<long>(p.locals[n].size());
                std::vector<std::vector<char>> allowed(ln, std::vector<char>(p.L, 0));
                for (long i = 0; i < ln; ++i)
                    for (long g = 0; g < p.L; ++g)
                        if (g <= p.locals[n][i]) allowed[i][g] = 1;
                Mat o = naive::attention(q[n], kg, vg, allowed);
                Mat x_attn = mat_add(x[n], o);
                x[n] = mat_add(x_attn, ffn(x_attn, block));
            }
        } else {
            for (int n = 0; n < p.N; ++n) {
                const long ln = static_cast<long>(p.locals[n].size());
                std::vector<std::vector<char>> allowed(ln, std::vector<char>(ln, 0));
                for (long i = 0; i < ln; ++i)
                    for (long j = 0; j <= i; ++j) allowed[i][j] = 1;
                Mat o = naive::attention(q[n], k[n], v[n], allowed);
                Mat x_attn = mat_add(x[n], o);
                x[n] = mat_add(x_attn, ffn(x_attn, block));
            }
        }
        states.push_back(scatter_all());
    }
    return states;
}

}  // namespace naive
