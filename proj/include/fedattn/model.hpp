#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "fedattn/mat.hpp"

namespace fedattn {

struct ModelConfig {
    long d = 32;
    long d_ff = 64;
    long M = 8;
    long vocab = 64;
    std::uint64_t seed = 0;

    void validate() const;
};

// One Pre-LN decoder block: QKV projections, two-layer ReLU FFN, and the two
// layer-norm parameter sets. No bias vectors.
struct BlockParams {
    Mat w_q, w_k, w_v;     // d x d
    Mat w_ffn1;            // d x d_ff
    Mat w_ffn2;            // d_ff x d
    std::vector<double> ln1_gamma, ln1_beta;  // d
    std::vector<double> ln2_gamma, ln2_beta;  // d
};

struct ModelWeights {
    ModelConfig config;
    std::vector<BlockParams> blocks;
    Mat embed;  // vocab x d; the output projection is tied to embed^T
};

constexpr double kLayerNormEps = 1e-5;

// Gaussian init (std 0.02) from the documented PRNG stream; identical seed
// gives bit-identical weights. Fill order: embed, then per block
// W_Q, W_K, W_V, W_ffn1, W_ffn2, each row-major.
ModelWeights init_weights(const ModelConfig& config);

// Sinusoidal encoding row for an absolute position.
std::vector<double> positional_row(long position, long d);

// Row i = embed[ids[i]] + positional_row(global_positions[i]). Positions are
// global indices so partitioned participants agree with the centralized run.
Mat embed_tokens(const std::vector<int>& ids, const std::vector<long>& global_positions,
                 const ModelWeights& w);

// Pre-LN projection: Q = LN(x) W_Q etc.
std::tuple<Mat, Mat, Mat> qkv_project(const Mat& x, const BlockParams& block);

// Softmax(q k^T / sqrt(d) + mask) v, single head. Masked score entries are
// excluded from the max/sum/output accumulation entirely, and each output
// row accumulates value rows in ascending key order, so the result for one
// query row depends only on that row, K, V and the mask row. That makes
// gathered-row evaluation bit-identical to full-matrix evaluation.
Mat attention(const Mat& q, const Mat& k, const Mat& v, const Mask* mask = nullptr);

// External KV override for the global-attention path; self() means use the
// block's own K, V computed from x_in.
struct KvSource {
    const Mat* k = nullptr;
    const Mat* v = nullptr;
    bool self() const { return k == nullptr; }
};

struct BlockOut {
    Mat x;     // block output
    Mat q, k, v;
    Mat attn;  // attention sub-layer output (pre-residual)
};

// x_attn = x_in + Attn(q, K_used, V_used); x_out = x_attn + FFN(LN(x_attn)),
// FFN(z) = relu(z W_ffn1) W_ffn2.
BlockOut block_forward(const Mat& x_in, const BlockParams& block, const KvSource& kv,
                       const Mask& mask);

// FFN operator including its layer norm: relu(LN2(z) W_ffn1) W_ffn2.
Mat ffn_op(const Mat& z, const BlockParams& block);

// Causal mask over explicit global index lists: query a may attend key b iff
// key_globals[b] <= query_globals[a]. Bidirectional mode allows everything.
Mask causal_mask(const std::vector<long>& query_globals, const std::vector<long>& key_globals,
                 bool bidirectional = false);

// Binary weight fixture. Little-endian, 16-byte header
// (magic 'FAWF', version u16, d u16, d_ff u16, M u16, vocab u32), then f64
// payload in init_weights fill order followed by the four LN vectors of each
// block.
void save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights(const std::string& path);

}  // namespace fedattn
