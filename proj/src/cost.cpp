#include "fedattn/cost.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "fedattn/error.hpp"

namespace fedattn {

std::uint64_t attn_score_flops(long lq, long lk, long d) {
    return 2ULL * lq * lk * d;
}

std::uint64_t prefill_block_flops(long lq, long lk, long d, long d_ff) {
    const std::uint64_t qkv = 3ULL * 2 * lq * d * d;
    const std::uint64_t scores = attn_score_flops(lq, lk, d);
    const std::uint64_t softmax = 5ULL * lq * lk;
    const std::uint64_t values = 2ULL * lq * lk * d;
    const std::uint64_t ffn = 2ULL * 2 * lq * d * d_ff;
    const std::uint64_t ln = 2ULL * 8 * lq * d;
    return qkv + scores + softmax + values + ffn + ln;
}

std::uint64_t decode_block_flops(long cache_len, long d, long d_ff) {
    return prefill_block_flops(1, cache_len, d, d_ff);
}

std::uint64_t flops_prefill(long l_eff, long d, long d_ff, long blocks,
                            std::optional<long> global_len) {
    if (l_eff < 0 || d < 1 || d_ff < 1 || blocks < 0)
        throw ConfigError("flops_prefill: bad dimensions");
    const long lk = global_len.value_or(l_eff);
    return static_cast<std::uint64_t>(blocks) * prefill_block_flops(l_eff, lk, d, d_ff);
}

std::uint64_t decode_step_flops(long cache_len, long d, long d_ff, long blocks) {
    if (cache_len < 0 || d < 1 || d_ff < 1 || blocks < 0)
        throw ConfigError("decode_step_flops: bad dimensions");
    return static_cast<std::uint64_t>(blocks) * decode_block_flops(cache_len, d, d_ff);
}

namespace {

long sample_size(long owned, double ratio) {
    if (ratio >= 1.0) return owned;
    return std::max<long>(1, static_cast<long>(std::ceil(ratio * static_cast<double>(owned))));
}

struct RunShape {
    std::vector<long> eff;                      // surviving tokens per participant
    std::vector<long> tx;                       // transmitted rows per sync message
    std::vector<int> union_blocks;              // sorted sync blocks
    std::vector<std::vector<std::uint8_t>> transmits;  // [n][union ordinal]
    long view(int n, std::size_t round) const {
        long v = eff[n];
        for (std::size_t k = 0; k < transmits.size(); ++k)
            if (static_cast<int>(k) != n && transmits[k][round]) v += tx[k];
        return v;
    }
};

// The deterministic size skeleton of a run: who transmits how many rows at
// which block. Mirrors the engine's sizing rules exactly.
RunShape run_shape(const Partition& p, const SyncSchedule& sched, const FedOptions& opts) {
    RunShape s;
    s.eff.resize(p.N);
    s.tx.resize(p.N);
    for (int n = 0; n < p.N; ++n) {
        s.eff[n] = sample_size(static_cast<long>(p.locals[n].size()), opts.local_token_ratio);
        s.tx[n] = sample_size(s.eff[n], opts.kv_exchange_ratio);
    }
    std::vector<const SyncSchedule*> sched_of(p.N, &sched);
    for (const auto& [n, sc] : opts.per_participant_schedules) sched_of[n] = &sc;
    std::set<int> union_blocks(sched.sync_blocks.begin(), sched.sync_blocks.end());
    if (!opts.per_participant_schedules.empty()) {
        union_blocks.clear();
        for (int n = 0; n < p.N; ++n)
            union_blocks.insert(sched_of[n]->sync_blocks.begin(), sched_of[n]->sync_blocks.end());
    }
    s.union_blocks.assign(union_blocks.begin(), union_blocks.end());
    s.transmits.assign(p.N, std::vector<std::uint8_t>(s.union_blocks.size(), 0));
    for (int n = 0; n < p.N; ++n)
        for (std::size_t r = 0; r < s.union_blocks.size(); ++r)
            s.transmits[n][r] = sched_of[n]->is_sync(s.union_blocks[r]) ? 1 : 0;
    return s;
}

}  // namespace

CommBits comm_bits(const Partition& p, const SyncSchedule& sched, const FedOptions& opts,
                   long d) {
    opts.validate();
    const RunShape s = run_shape(p, sched, opts);
    CommBits out;
    out.sent.assign(p.N, 0);
    out.received.assign(p.N, 0);
    const std::uint64_t copies =
        opts.topology == Topology::AllToAll ? static_cast<std::uint64_t>(p.N - 1) : 1;
    for (std::size_t r = 0; r < s.union_blocks.size(); ++r) {
        for (int n = 0; n < p.N; ++n) {
            if (!s.transmits[n][r]) continue;
            const std::uint64_t payload =
                2ULL * s.tx[n] * d * static_cast<std::uint64_t>(opts.wire_bits);
            out.sent[n] += copies * payload;
            for (int n2 = 0; n2 < p.N; ++n2)
                if (n2 != n) out.received[n2] += payload;
        }
    }
    return out;
}

std::vector<std::uint64_t> predict_prefill_flops(const Partition& p, const SyncSchedule& sched,
                                                 const FedOptions& opts, long d, long d_ff) {
    const RunShape s = run_shape(p, sched, opts);
    std::vector<std::uint64_t> out(p.N, 0);
    const long n_local_blocks = sched.M - static_cast<long>(s.union_blocks.size());
    for (int n = 0; n < p.N; ++n) {
        out[n] += flops_prefill(s.eff[n], d, d_ff, n_local_blocks);
        for (std::size_t r = 0; r < s.union_blocks.size(); ++r)
            out[n] += prefill_block_flops(s.eff[n], s.view(n, r), d, d_ff);
    }
    return out;
}

std::vector<std::uint64_t> peak_memory(const Partition& p, const SyncSchedule& sched,
                                       const FedOptions& opts, const ModelConfig& config) {
    const RunShape s = run_shape(p, sched, opts);
    const long d = config.d, d_ff = config.d_ff;
    const std::uint64_t weight_scalars =
        static_cast<std::uint64_t>(config.vocab) * d +
        static_cast<std::uint64_t>(config.M) * (3ULL * d * d + 2ULL * d * d_ff + 4ULL * d);
    std::vector<std::uint64_t> out(p.N, 0);
    for (int n = 0; n < p.N; ++n) {
        const long lq = s.eff[n];
        std::uint64_t act_peak = 0;
        std::uint64_t cache_scalars = 0;
        std::size_t r = 0;
        for (int m = 1; m <= config.M; ++m) {
            long lk = lq;
            if (r < s.union_blocks.size() && s.union_blocks[r] == m) {
                lk = s.view(n, r);
                ++r;
            }
            // x_in, ln1(x), q, o, x_attn, ln2, x_out (7 lq*d), k+v (2 lk*d),
            // score map, ffn hidden
            const std::uint64_t act = 7ULL * lq * d + 2ULL * lk * d +
                                      static_cast<std::uint64_t>(lq) * lk +
                                      static_cast<std::uint64_t>(lq) * d_ff;
            act_peak = std::max(act_peak, act);
            cache_scalars += 2ULL * lk * d;
        }
        out[n] = weight_scalars + act_peak + cache_scalars;
    }
    return out;
}

std::uint64_t scalars_to_bytes(std::uint64_t scalars, int storage_bits) {
    if (storage_bits < 1 || storage_bits % 8 != 0)
        throw ConfigError("scalars_to_bytes: storage width must be a positive byte multiple");
    return scalars * (static_cast<std::uint64_t>(storage_bits) / 8);
}

CostReport cost_report(const Partition& p, const SyncSchedule& sched, const FedOptions& opts,
                       const ModelConfig& config) {
    CostReport rep;
    const CommBits cb = comm_bits(p, sched, opts, config.d);
    rep.bits_sent = cb.sent;
    rep.bits_received = cb.received;
    rep.prefill_flops = predict_prefill_flops(p, sched, opts, config.d, config.d_ff);
    rep.peak_memory_scalars = peak_memory(p, sched, opts, config);
    const RunShape s = run_shape(p, sched, opts);
    rep.decode_flops_per_step.assign(p.N, 0);
    for (int n = 0; n < p.N; ++n) {
        std::size_t r = 0;
        std::uint64_t step = 0;
        for (int m = 1; m <= config.M; ++m) {
            long rows = s.eff[n];
            if (r < s.union_blocks.size() && s.union_blocks[r] == m) {
                rows = s.view(n, r);
                ++r;
            }
            // first generated token: the cache plus its own fresh KV row
            step += decode_block_flops(rows + 1, config.d, config.d_ff);
        }
        rep.decode_flops_per_step[n] = step;
    }
    return rep;
}

std::string CostReport::to_csv() const {
    std::ostringstream os;
    os << "participant,bits_sent,bits_received,prefill_flops,decode_flops_per_step,peak_scalars\n";
    for (std::size_t n = 0; n < bits_sent.size(); ++n) {
        os << n << ',' << bits_sent[n] << ',' << bits_received[n] << ',' << prefill_flops[n]
           << ',' << decode_flops_per_step[n] << ',' << peak_memory_scalars[n] << '\n';
    }
    return os.str();
}

}  // namespace fedattn
