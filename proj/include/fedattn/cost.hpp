#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedattn/protocol.hpp"

namespace fedattn {

// FLOP counting conventions, used identically by these analytical formulas
// and by the engine's instrumented counters:
//   multiply-add = 2 FLOPs; softmax = 5 ops per score entry; layer norm = 8
//   ops per element, applied twice per block; ReLU uncounted.
// Per block with query length lq and key length lk:
//   QKV projections 3*2*lq*d^2, scores 2*lq*lk*d, softmax 5*lq*lk,
//   value aggregation 2*lq*lk*d, FFN 2*2*lq*d*d_ff, LN 2*8*lq*d.
std::uint64_t prefill_block_flops(long lq, long lk, long d, long d_ff);
std::uint64_t attn_score_flops(long lq, long lk, long d);
// Single-query block with cache_len keys (projection and FFN terms included).
std::uint64_t decode_block_flops(long cache_len, long d, long d_ff);

// `blocks` blocks at query length l_eff; key length is l_eff for local
// blocks, or the supplied global length for global-attention blocks.
std::uint64_t flops_prefill(long l_eff, long d, long d_ff, long blocks,
                            std::optional<long> global_len = std::nullopt);
std::uint64_t decode_step_flops(long cache_len, long d, long d_ff, long blocks);

struct CostReport {
    std::vector<std::uint64_t> bits_sent;
    std::vector<std::uint64_t> bits_received;
    std::vector<std::uint64_t> prefill_flops;
    std::vector<std::uint64_t> decode_flops_per_step;  // first decode step
    std::vector<std::uint64_t> peak_memory_scalars;

    std::string to_csv() const;
};

struct CommBits {
    std::vector<std::uint64_t> sent;
    std::vector<std::uint64_t> received;
};

// Analytical per-participant communication bits for a run with these
// parameters. Matches the engine's message log exactly: subset sizes are
// deterministic (max(1, ceil(ratio * owned))) even though their contents are
// random. All-to-all counts N-1 unicast copies per message; star counts the
// single uplink transmission.
CommBits comm_bits(const Partition& p, const SyncSchedule& sched, const FedOptions& opts,
                   long d);

// Analytical per-participant prefill FLOPs under the same conventions and
// sizing rules as the engine's counters.
std::vector<std::uint64_t> predict_prefill_flops(const Partition& p, const SyncSchedule& sched,
                                                 const FedOptions& opts, long d, long d_ff);

// Resident scalar counts per participant: weights + the largest
// simultaneously-live per-block activation set + all per-block KV caches
// (local length at local blocks, view length at sync blocks).
std::vector<std::uint64_t> peak_memory(const Partition& p, const SyncSchedule& sched,
                                       const FedOptions& opts, const ModelConfig& config);

std::uint64_t scalars_to_bytes(std::uint64_t scalars, int storage_bits);

CostReport cost_report(const Partition& p, const SyncSchedule& sched, const FedOptions& opts,
                       const ModelConfig& config);

}  // namespace fedattn
