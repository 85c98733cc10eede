#include "fedattn/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "fedattn/error.hpp"

namespace fedattn {

namespace {

Mask full_causal(long rows, bool bidirectional) {
    Mask m(rows, rows, bidirectional);
    if (!bidirectional) {
        for (long a = 0; a < rows; ++a)
            for (long b = 0; b <= a; ++b) m.set(a, b, true);
    }
    return m;
}

Mat centralized_attn(const BlockParams& block, const Mat& x, const Mask& mask) {
    auto [q, k, v] = qkv_project(x, block);
    return attention(q, k, v, &mask);
}

double ratio_or_zero(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

double GainTable::sigma_sum(int m) const {
    double s = 0.0;
    for (double v : sigma[m - 1]) s += v;
    return s;
}

double GainTable::injection(int m) const {
    const double amplifier = 1.0 + theta[m - 1];
    return is_sync[m - 1] ? amplifier * sync_extra[m - 1] : amplifier * sigma_sum(m);
}

std::pair<double, double> realized_gains(const ModelWeights& weights, int block, const Mat& x_fed,
                                         const Mat& x_cen) {
    if (block < 1 || block > static_cast<int>(weights.blocks.size()))
        throw ConfigError("realized_gains: block index out of range");
    if (!x_fed.same_shape(x_cen)) throw ShapeError("realized_gains: input shapes differ");
    const BlockParams& bp = weights.blocks[block - 1];
    const Mask mask = full_causal(x_fed.rows, false);
    const Mat a_fed = centralized_attn(bp, x_fed, mask);
    const Mat a_cen = centralized_attn(bp, x_cen, mask);
    const double rho = ratio_or_zero(frob_dist(a_fed, a_cen), frob_dist(x_fed, x_cen));
    const Mat z_fed = add(x_fed, a_fed);
    const Mat z_cen = add(x_cen, a_cen);
    const double theta =
        ratio_or_zero(frob_dist(ffn_op(z_fed, bp), ffn_op(z_cen, bp)), frob_dist(z_fed, z_cen));
    return {rho, theta};
}

GainTable build_gain_table(const ModelWeights& weights, const RunTrace& trace,
                           const CenTrace& cen) {
    if (cen.states.size() != trace.states.size())
        throw ShapeError("build_gain_table: traces cover different block counts");
    GainTable g;
    g.M = trace.M;
    g.N = trace.partition.N;
    g.rho.resize(g.M);
    g.theta.resize(g.M);
    g.sigma.assign(g.M, std::vector<double>(g.N, 0.0));
    g.sync_extra.assign(g.M, 0.0);
    g.is_sync.assign(g.M, 0);
    for (int b : trace.union_sync_blocks) g.is_sync[b - 1] = 1;

    const long l_eff = trace.eff_len();
    std::vector<int> owner(l_eff, 0);
    for (int n = 0; n < g.N; ++n)
        for (long pos : trace.eff_positions[n]) owner[pos] = n;
    Mask global_mask = full_causal(l_eff, trace.options.bidirectional);
    if (trace.options.block_diagonal) {
        for (long a = 0; a < l_eff; ++a)
            for (long b = 0; b < l_eff; ++b)
                if (owner[a] != owner[b]) global_mask.set(a, b, false);
    }

    for (int m = 1; m <= g.M; ++m) {
        const BlockParams& bp = weights.blocks[m - 1];
        const Mat& x_fed = trace.states[m - 1];
        const Mat& x_cen = cen.states[m - 1];

        // Centralized attention operator evaluated at the fed trajectory.
        const Mat a_at_fed = centralized_attn(bp, x_fed, global_mask);
        g.rho[m - 1] =
            ratio_or_zero(frob_dist(a_at_fed, cen.attn_outs[m - 1]), frob_dist(x_fed, x_cen));

        // FFN ratio at the two realized sub-layer inputs. F(z) is recovered
        // from the stored states: x_out = z + F(z).
        const Mat z_fed = add(x_fed, trace.attn_outs[m - 1]);
        const Mat z_cen = add(x_cen, cen.attn_outs[m - 1]);
        double df = 0.0;
        double dz = 0.0;
        for (std::size_t i = 0; i < z_fed.data.size(); ++i) {
            const double fz =
                (trace.states[m].data[i] - z_fed.data[i]) - (cen.states[m].data[i] - z_cen.data[i]);
            const double zz = z_fed.data[i] - z_cen.data[i];
            df += fz * fz;
            dz += zz * zz;
        }
        g.theta[m - 1] = ratio_or_zero(std::sqrt(df), std::sqrt(dz));

        if (g.is_sync[m - 1]) {
            g.sync_extra[m - 1] = frob_dist(trace.attn_outs[m - 1], a_at_fed);
        } else {
            for (int n = 0; n < g.N; ++n) {
                const Mat x_local = gather_rows(x_fed, trace.eff_positions[n]);
                auto [lq, lk, lv] = qkv_project(x_local, bp);
                const Mask lmask = full_causal(x_local.rows, trace.options.bidirectional);
                const Mat o_local = attention(lq, lk, lv, &lmask);
                g.sigma[m - 1][n] =
                    frob_dist(o_local, gather_rows(a_at_fed, trace.eff_positions[n]));
            }
        }
    }
    return g;
}

std::vector<StepVerdict> check_recursion(const RunTrace& trace, const CenTrace& cen,
                                         const GainTable& gains) {
    if (gains.M != trace.M) throw ConfigError("check_recursion: gain table block count mismatch");
    std::vector<StepVerdict> out;
    out.reserve(trace.M);
    int t = 0;
    int last_sync = 0;
    std::size_t next = 0;
    for (int m = 1; m <= trace.M; ++m) {
        StepVerdict v;
        v.m = m;
        v.t = t;
        v.h = m - last_sync;
        v.sync = gains.is_sync[m - 1] != 0;
        const double d_prev = frob_dist(trace.states[m - 1], cen.states[m - 1]);
        v.lhs = frob_dist(trace.states[m], cen.states[m]);
        v.rhs = gains.gamma(m) * d_prev + gains.injection(m);
        v.slack = v.rhs - v.lhs;
        out.push_back(v);
        if (next < trace.union_sync_blocks.size() && trace.union_sync_blocks[next] == m) {
            ++t;
            last_sync = m;
            ++next;
        }
    }
    return out;
}

double chained_bound(const GainTable& gains) {
    double bound = 0.0;
    for (int m = 1; m <= gains.M; ++m) bound = gains.gamma(m) * bound + gains.injection(m);
    return bound;
}

double theorem1_bound(const GainTable& gains, int H, int T) {
    if (H < 1 || T < 1 || gains.M != H * T)
        throw ConfigError("theorem1_bound: gains must cover M = H*T blocks");
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
        for (int h = 1; h <= H - 1; ++h) {
            const int m = H * t + h;
            const double inject = (1.0 + gains.theta[m - 1]) * gains.sigma_sum(m);
            double intra = 1.0;
            for (int i = h + 1; i <= H; ++i) intra *= gains.gamma(H * t + i);
            double inter = 1.0;
            for (int j = t + 1; j < T; ++j)
                for (int i = 1; i <= H; ++i) inter *= gains.gamma(H * j + i);
            total += inject * intra * inter;
        }
    }
    return total;
}

double corollary1_term_d(double gamma, int M) {
    if (gamma == 1.0) return static_cast<double>(M);
    return (std::pow(gamma, M) - 1.0) / (gamma - 1.0);
}

double corollary1_term_e(double gamma, int H) {
    if (gamma == 1.0) return 1.0 - 1.0 / static_cast<double>(H);
    return 1.0 - (gamma - 1.0) / (std::pow(gamma, H) - 1.0);
}

double corollary1_bound(double theta, double rho, double sigma_sum, int H, int M) {
    if (theta < 0.0 || rho < 0.0 || sigma_sum < 0.0)
        throw ConfigError("corollary1_bound: constants must be nonnegative");
    if (H < 1 || M < 1 || M % H != 0)
        throw ConfigError("corollary1_bound: H must divide M");
    const double gamma = (1.0 + theta) * (1.0 + rho);
    return (1.0 + theta) * sigma_sum * corollary1_term_d(gamma, M) * corollary1_term_e(gamma, H);
}

double gamma_reduction(const GainTable& gains, int m) {
    if (m < 1 || m > gains.M) throw ConfigError("gamma_reduction: block index out of range");
    double amp = 1.0;
    for (int i = m + 1; i <= gains.M; ++i) amp *= gains.gamma(i);
    return (1.0 + gains.theta[m - 1]) * gains.sigma_sum(m) * amp;
}

double theorem3_bound(const GainTable& gains, const SyncSchedule& sched) {
    if (sched.M != gains.M) throw ConfigError("theorem3_bound: schedule block count mismatch");
    double total = 0.0;
    for (int m = 1; m <= gains.M; ++m) total += gamma_reduction(gains, m);
    for (int s : sched.sync_blocks) total -= gamma_reduction(gains, s);
    return total;
}

std::pair<double, double> marginal_comm(int H) {
    if (H < 1) throw ConfigError("marginal_comm: H must be >= 1");
    const double reduction = 1.0 / static_cast<double>(static_cast<long long>(H) * (H + 1));
    const double error_level = static_cast<double>(H) / static_cast<double>(H + 1);
    return {reduction, error_level};
}

UniformMaxima uniform_maxima(const GainTable& gains) {
    UniformMaxima u;
    for (int m = 1; m <= gains.M; ++m) {
        u.theta = std::max(u.theta, gains.theta[m - 1]);
        u.rho = std::max(u.rho, gains.rho[m - 1]);
    }
    for (int n = 0; n < gains.N; ++n) {
        double best = 0.0;
        for (int m = 1; m <= gains.M; ++m) best = std::max(best, gains.sigma[m - 1][n]);
        u.sigma_sum += best;
    }
    return u;
}

std::string GainTable::to_csv() const {
    std::ostringstream os;
    os << "m,sigma_sum,theta,rho,gamma_m,Gamma_m,cumulative_bound\n";
    double bound = 0.0;
    for (int m = 1; m <= M; ++m) {
        bound = gamma(m) * bound + injection(m);
        os << m << ',' << format_double(sigma_sum(m)) << ',' << format_double(theta[m - 1]) << ','
           << format_double(rho[m - 1]) << ',' << format_double(gamma(m)) << ','
           << format_double(gamma_reduction(*this, m)) << ',' << format_double(bound) << '\n';
    }
    return os.str();
}

}  // namespace fedattn
