#include "fedattn/oracle.hpp"

#include <charconv>
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

void apply_block_diagonal(Mask& m, const std::vector<int>& owner) {
    for (long a = 0; a < m.rows; ++a)
        for (long b = 0; b < m.cols; ++b)
            if (owner[a] != owner[b]) m.set(a, b, false);
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

CenTrace run_cenattn(const Mat& global_embeds, const ModelWeights& weights,
                     const CenOptions& opts) {
    if (global_embeds.cols != weights.config.d && global_embeds.rows > 0)
        throw ShapeError("run_cenattn: embedding width must equal d");
    if (opts.block_diagonal &&
        (!opts.row_owner ||
         static_cast<long>(opts.row_owner->size()) != global_embeds.rows))
        throw ConfigError("run_cenattn: block_diagonal needs a row_owner vector");

    Mask mask = full_causal(global_embeds.rows, opts.bidirectional);
    if (opts.block_diagonal) apply_block_diagonal(mask, *opts.row_owner);

    CenTrace tr;
    tr.states.push_back(global_embeds);
    Mat x = global_embeds;
    for (const auto& block : weights.blocks) {
        BlockOut bo = block_forward(x, block, KvSource{}, mask);
        x = std::move(bo.x);
        if (!x.all_finite()) throw NumericError("run_cenattn: non-finite state");
        tr.attn_outs.push_back(std::move(bo.attn));
        tr.states.push_back(x);
    }
    return tr;
}

LocTrace run_locattn(const std::vector<Mat>& embeds, const ModelWeights& weights,
                     const Partition& p, bool bidirectional) {
    if (static_cast<int>(embeds.size()) != p.N)
        throw ShapeError("run_locattn: one embedding matrix per participant required");
    LocTrace tr;
    tr.states.resize(p.N);
    tr.final_locals.resize(p.N);
    for (int n = 0; n < p.N; ++n) {
        if (embeds[n].rows != static_cast<long>(p.locals[n].size()))
            throw ShapeError("run_locattn: embedding rows mismatch for participant " +
                             std::to_string(n));
        const Mask mask = full_causal(embeds[n].rows, bidirectional);
        Mat x = embeds[n];
        tr.states[n].push_back(x);
        for (const auto& block : weights.blocks) {
            x = block_forward(x, block, KvSource{}, mask).x;
            tr.states[n].push_back(x);
        }
        tr.final_locals[n] = std::move(x);
    }
    return tr;
}

DeviationReport measure_sigma(const ModelWeights& weights, const RunTrace& trace,
                              const CenTrace* cen) {
    DeviationReport rep;
    rep.M = trace.M;
    rep.N = trace.partition.N;
    rep.sigma.assign(trace.M, std::vector<double>(rep.N, 0.0));
    rep.round_of_block.resize(trace.M);
    rep.forward_of_block.resize(trace.M);

    const long l_eff = trace.eff_len();
    std::vector<int> owner(l_eff, 0);
    for (int n = 0; n < rep.N; ++n)
        for (long pos : trace.eff_positions[n]) owner[pos] = n;

    const bool bidir = trace.options.bidirectional;
    Mask global_mask = full_causal(l_eff, bidir);
    if (trace.options.block_diagonal) apply_block_diagonal(global_mask, owner);

    // t = completed sync rounds before the block, h = offset past the last
    // sync block (matches m = Ht + h for uniform schedules).
    {
        int t = 0;
        int last_sync = 0;
        std::size_t next = 0;
        for (int m = 1; m <= trace.M; ++m) {
            rep.round_of_block[m - 1] = t;
            rep.forward_of_block[m - 1] = m - last_sync;
            if (next < trace.union_sync_blocks.size() && trace.union_sync_blocks[next] == m) {
                ++t;
                last_sync = m;
                ++next;
            }
        }
    }

    for (int m = 1; m <= trace.M; ++m) {
        const BlockParams& block = weights.blocks[m - 1];
        const Mat& x_global = trace.states[m - 1];
        auto [gq, gk, gv] = qkv_project(x_global, block);
        const Mat o_global = attention(gq, gk, gv, &global_mask);
        for (int n = 0; n < rep.N; ++n) {
            const Mat x_local = gather_rows(x_global, trace.eff_positions[n]);
            auto [lq, lk, lv] = qkv_project(x_local, block);
            const Mask lmask = full_causal(x_local.rows, bidir);
            const Mat o_local = attention(lq, lk, lv, &lmask);
            const Mat o_global_n = gather_rows(o_global, trace.eff_positions[n]);
            rep.sigma[m - 1][n] = frob_dist(o_local, o_global_n);
        }
    }

    if (cen) {
        if (cen->states.size() != trace.states.size())
            throw ShapeError("measure_sigma: centralized trace has a different block count");
        rep.state_dev.resize(trace.states.size());
        for (std::size_t i = 0; i < trace.states.size(); ++i)
            rep.state_dev[i] = frob_dist(trace.states[i], cen->states[i]);
        rep.attn_dev.resize(trace.attn_outs.size());
        for (std::size_t i = 0; i < trace.attn_outs.size(); ++i)
            rep.attn_dev[i] = frob_dist(trace.attn_outs[i], cen->attn_outs[i]);
    }
    return rep;
}

std::string DeviationReport::to_csv() const {
    std::ostringstream os;
    os << "t,h,m,n,sigma,state_dev,attn_dev\n";
    for (int m = 1; m <= M; ++m) {
        for (int n = 0; n < N; ++n) {
            os << round_of_block[m - 1] << ',' << forward_of_block[m - 1] << ',' << m << ',' << n
               << ',' << format_double(sigma[m - 1][n]) << ',';
            if (!state_dev.empty()) os << format_double(state_dev[m]);
            os << ',';
            if (!attn_dev.empty()) os << format_double(attn_dev[m - 1]);
            os << '\n';
        }
    }
    return os.str();
}

}  // namespace fedattn
