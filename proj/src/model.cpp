#include "fedattn/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fedattn/error.hpp"
#include "fedattn/rng.hpp"

namespace fedattn {

static_assert(std::endian::native == std::endian::little,
              "weight fixtures are little-endian; big-endian hosts need byte swaps");

void ModelConfig::validate() const {
    if (d < 1 || d_ff < 1 || M < 1 || vocab < 1)
        throw ConfigError("ModelConfig: d, d_ff, M, vocab must all be >= 1");
}

static Mat gaussian_mat(Rng& rng, long rows, long cols, double std) {
    Mat m(rows, cols);
    for (auto& v : m.data) v = std * rng.next_gaussian();
    return m;
}

ModelWeights init_weights(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    Rng rng(config.seed);
    const double std = 0.02;
    w.embed = gaussian_mat(rng, config.vocab, config.d, std);
    w.blocks.resize(config.M);
    for (auto& b : w.blocks) {
        b.w_q = gaussian_mat(rng, config.d, config.d, std);
        b.w_k = gaussian_mat(rng, config.d, config.d, std);
        b.w_v = gaussian_mat(rng, config.d, config.d, std);
        b.w_ffn1 = gaussian_mat(rng, config.d, config.d_ff, std);
        b.w_ffn2 = gaussian_mat(rng, config.d_ff, config.d, std);
        b.ln1_gamma.assign(config.d, 1.0);
        b.ln1_beta.assign(config.d, 0.0);
        b.ln2_gamma.assign(config.d, 1.0);
        b.ln2_beta.assign(config.d, 0.0);
    }
    return w;
}

std::vector<double> positional_row(long position, long d) {
    std::vector<double> row(d);
    for (long i = 0; i < d; ++i) {
        const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
        const double angle = static_cast<double>(position) / std::pow(10000.0, exponent);
        row[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return row;
}

Mat embed_tokens(const std::vector<int>& ids, const std::vector<long>& global_positions,
                 const ModelWeights& w) {
    if (ids.size() != global_positions.size())
        throw ShapeError("embed_tokens: ids and positions must have equal length");
    for (std::size_t i = 1; i < global_positions.size(); ++i)
        if (global_positions[i] <= global_positions[i - 1])
            throw ConfigError("embed_tokens: positions must be strictly increasing");
    Mat out(static_cast<long>(ids.size()), w.config.d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= w.config.vocab)
            throw ConfigError("embed_tokens: token id out of vocabulary");
        if (global_positions[i] < 0)
            throw ConfigError("embed_tokens: negative position");
        const auto e = w.embed.row(ids[i]);
        const auto p = positional_row(global_positions[i], w.config.d);
        for (long j = 0; j < w.config.d; ++j) out.at(static_cast<long>(i), j) = e[j] + p[j];
    }
    return out;
}

std::tuple<Mat, Mat, Mat> qkv_project(const Mat& x, const BlockParams& block) {
    if (x.cols != block.w_q.rows) throw ShapeError("qkv_project: x.cols must equal d");
    const Mat normed = layernorm(x, block.ln1_gamma, block.ln1_beta, kLayerNormEps);
    return {matmul(normed, block.w_q), matmul(normed, block.w_k), matmul(normed, block.w_v)};
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, const Mask* mask) {
    if (q.cols != k.cols) throw ShapeError("attention: q/k dims differ");
    if (v.rows != k.rows) throw ShapeError("attention: v rows must match k rows");
    if (mask && (mask->rows != q.rows || mask->cols != k.rows))
        throw ShapeError("attention: mask shape mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));
    Mat out(q.rows, v.cols);
    std::vector<double> weights(static_cast<std::size_t>(k.rows));
    for (long i = 0; i < q.rows; ++i) {
        const double* qi = q.data.data() + static_cast<std::size_t>(i) * q.cols;
        double mx = 0.0;
        bool any = false;
        for (long j = 0; j < k.rows; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            const double* kj = k.data.data() + static_cast<std::size_t>(j) * k.cols;
            double s = 0.0;
            for (long c = 0; c < q.cols; ++c) s += qi[c] * kj[c];
            s *= scale;
            weights[j] = s;
            if (!any || s > mx) mx = s;
            any = true;
        }
        if (!any)
            throw DegenerateRowError("attention: query row " + std::to_string(i) +
                                     " has every key masked");
        double z = 0.0;
        double* oi = out.data.data() + static_cast<std::size_t>(i) * out.cols;
        for (long j = 0; j < k.rows; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            const double e = std::exp(weights[j] - mx);
            z += e;
            const double* vj = v.data.data() + static_cast<std::size_t>(j) * v.cols;
            for (long c = 0; c < v.cols; ++c) oi[c] += e * vj[c];
        }
        for (long c = 0; c < v.cols; ++c) oi[c] /= z;
    }
    return out;
}

Mat ffn_op(const Mat& z, const BlockParams& block) {
    Mat h = matmul(layernorm(z, block.ln2_gamma, block.ln2_beta, kLayerNormEps), block.w_ffn1);
    for (auto& v : h.data) v = v > 0.0 ? v : 0.0;
    return matmul(h, block.w_ffn2);
}

BlockOut block_forward(const Mat& x_in, const BlockParams& block, const KvSource& kv,
                       const Mask& mask) {
    BlockOut out;
    auto [q, k, v] = qkv_project(x_in, block);
    const Mat& k_used = kv.self() ? k : *kv.k;
    const Mat& v_used = kv.self() ? v : *kv.v;
    out.attn = attention(q, k_used, v_used, &mask);
    Mat x_attn = add(x_in, out.attn);
    out.x = add(x_attn, ffn_op(x_attn, block));
    out.q = std::move(q);
    out.k = std::move(k);
    out.v = std::move(v);
    return out;
}

Mask causal_mask(const std::vector<long>& query_globals, const std::vector<long>& key_globals,
                 bool bidirectional) {
    Mask m(static_cast<long>(query_globals.size()), static_cast<long>(key_globals.size()),
           bidirectional);
    if (!bidirectional) {
        for (std::size_t a = 0; a < query_globals.size(); ++a)
            for (std::size_t b = 0; b < key_globals.size(); ++b)
                if (key_globals[b] <= query_globals[a])
                    m.set(static_cast<long>(a), static_cast<long>(b), true);
    }
    return m;
}

namespace {

constexpr std::uint32_t kWeightMagic = 0x46574146;  // "FAWF"
constexpr std::uint16_t kWeightVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void write_mat(std::ostream& os, const Mat& m) {
    os.write(reinterpret_cast<const char*>(m.data.data()),
             static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

void read_mat(std::istream& is, Mat& m) {
    is.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

void write_vec(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_vec(std::istream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void save_weights(const ModelWeights& w, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_weights: cannot open " + path);
    write_pod(os, kWeightMagic);
    write_pod(os, kWeightVersion);
    write_pod(os, static_cast<std::uint16_t>(w.config.d));
    write_pod(os, static_cast<std::uint16_t>(w.config.d_ff));
    write_pod(os, static_cast<std::uint16_t>(w.config.M));
    write_pod(os, static_cast<std::uint32_t>(w.config.vocab));
    write_mat(os, w.embed);
    for (const auto& b : w.blocks) {
        write_mat(os, b.w_q);
        write_mat(os, b.w_k);
        write_mat(os, b.w_v);
        write_mat(os, b.w_ffn1);
        write_mat(os, b.w_ffn2);
        write_vec(os, b.ln1_gamma);
        write_vec(os, b.ln1_beta);
        write_vec(os, b.ln2_gamma);
        write_vec(os, b.ln2_beta);
    }
    if (!os) throw IoError("save_weights: write failed for " + path);
}

ModelWeights load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_weights: cannot open " + path);
    if (read_pod<std::uint32_t>(is) != kWeightMagic)
        throw IoError("load_weights: bad magic in " + path);
    if (read_pod<std::uint16_t>(is) != kWeightVersion)
        throw IoError("load_weights: unsupported version in " + path);
    ModelWeights w;
    w.config.d = read_pod<std::uint16_t>(is);
    w.config.d_ff = read_pod<std::uint16_t>(is);
    w.config.M = read_pod<std::uint16_t>(is);
    w.config.vocab = read_pod<std::uint32_t>(is);
    w.config.validate();
    w.embed = Mat(w.config.vocab, w.config.d);
    read_mat(is, w.embed);
    w.blocks.resize(w.config.M);
    for (auto& b : w.blocks) {
        b.w_q = Mat(w.config.d, w.config.d);
        b.w_k = Mat(w.config.d, w.config.d);
        b.w_v = Mat(w.config.d, w.config.d);
        b.w_ffn1 = Mat(w.config.d, w.config.d_ff);
        b.w_ffn2 = Mat(w.config.d_ff, w.config.d);
        read_mat(is, b.w_q);
        read_mat(is, b.w_k);
        read_mat(is, b.w_v);
        read_mat(is, b.w_ffn1);
        read_mat(is, b.w_ffn2);
        b.ln1_gamma.resize(w.config.d);
        b.ln1_beta.resize(w.config.d);
        b.ln2_gamma.resize(w.config.d);
        b.ln2_beta.resize(w.config.d);
        read_vec(is, b.ln1_gamma);
        read_vec(is, b.ln1_beta);
        read_vec(is, b.ln2_gamma);
        read_vec(is, b.ln2_beta);
    }
    if (!is) throw IoError("load_weights: truncated file " + path);
    return w;
}

}  // namespace fedattn
