#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedattn/mat.hpp"
#include "fedattn/model.hpp"
#include "fedattn/partition.hpp"
#include "fedattn/schedule.hpp"

namespace fedattn {

enum class Topology { AllToAll, Star };

const char* topology_name(Topology t);
Topology topology_from_name(const std::string& name);

struct FedOptions {
    // Sparse local attention: fraction of each participant's tokens kept for
    // the entire run (sampled once, before inference).
    double local_token_ratio = 1.0;
    // Sparse KV exchange: fraction of tokens whose KV rows are transmitted at
    // each sync round (fresh sample per round). Owners always see their own
    // full KV; sampling restricts only what crosses the wire.
    double kv_exchange_ratio = 1.0;
    // Adaptive aggregation: per-participant schedule overrides. A block
    // syncs if any participant's schedule contains it; only participants
    // whose schedule contains the block transmit there, everyone consumes.
    std::map<int, SyncSchedule> per_participant_schedules;
    int wire_bits = 16;  // accounting width per transmitted scalar
    std::uint64_t seed = 0;
    Topology topology = Topology::AllToAll;
    bool bidirectional = false;    // disable causal masking (encoder-style runs)
    bool block_diagonal = false;   // mask all inter-participant attention
    int threads = 1;

    void validate() const;
};

struct KVMessage {
    int sender = 0;
    int round = 0;
    int block = 0;                    // 1-based block index
    std::vector<long> token_globals;  // global ids of the transmitted rows
    Mat k_payload, v_payload;
    std::uint64_t payload_bits = 0;   // 2 * rows * d * wire_bits
};

struct SyncRound {
    int round = 0;
    int block = 0;
    std::vector<KVMessage> messages;
    // Union of transmitted rows across senders, sorted by global id.
    std::vector<long> agg_globals;
    Mat agg_k, agg_v;
};

struct BlockCache {
    std::vector<long> globals;
    Mat k, v;
};

struct RunTrace {
    Partition partition;  // original ownership
    // Effective (surviving) token ids after local sampling, per participant
    // and as the sorted global union; positions map local rows into the
    // effective sequence.
    std::vector<std::vector<long>> eff_locals;
    std::vector<long> eff_globals;
    std::vector<std::vector<long>> eff_positions;
    std::vector<int> union_sync_blocks;

    std::vector<Mat> states;     // M+1 scattered hidden states over eff rows
    std::vector<Mat> attn_outs;  // M scattered attention sub-layer outputs
    std::vector<SyncRound> rounds;
    std::vector<BlockCache> caches;  // per block, the publisher's KV view
    std::vector<Mat> final_locals;

    std::vector<std::uint64_t> bits_sent, bits_received;
    std::vector<std::uint64_t> prefill_flops;

    FedOptions options;
    int M = 0;
    long d = 0;

    long eff_len() const { return static_cast<long>(eff_globals.size()); }
    bool identical_to(const RunTrace& other) const;
    std::string summary_json() const;
};

// Token subset kept for the whole run: max(1, ceil(ratio * |owned|)) ids
// drawn uniformly from `owned`, in ascending order.
std::vector<long> sparse_sample_local(const Partition& p, int n, double ratio,
                                      std::uint64_t seed);

// Fresh per-round transmit subset of the owned (effective) ids.
std::vector<long> sparse_sample_kv(const std::vector<long>& owned, int round, int n, double ratio,
                                   std::uint64_t seed);

// One full prefill of the protocol: per block either local self-attention or
// KV exchange plus global self-attention, with byte and FLOP accounting.
// Deterministic for a given seed regardless of opts.threads.
RunTrace run_fedattn(const std::vector<Mat>& embeds, const ModelWeights& weights,
                     const Partition& p, const SyncSchedule& sched, const FedOptions& opts);

struct DecodeResult {
    std::vector<int> tokens;
    std::uint64_t flops = 0;
    std::uint64_t first_step_flops = 0;
};

// Publisher-side autoregressive greedy decoding over the trace's per-block
// KV caches; ties broken toward the lowest token id. Generated KVs are
// appended to every block's cache.
DecodeResult decode_greedy(const RunTrace& trace, const ModelWeights& weights,
                           const Partition& p, int max_new);

// Binary KV message log. Per message: sender u16, round u16, block u16,
// count u32, d u32, wire_bits u8, then count u32 token ids, then K rows and
// V rows as little-endian real32.
void dump_messages(const RunTrace& trace, const std::string& path);

struct KVMessageLite {
    int sender = 0, round = 0, block = 0;
    int wire_bits = 0;
    std::vector<long> token_globals;
    Mat k_payload, v_payload;  // real32 precision
};
std::vector<KVMessageLite> load_messages(const std::string& path);

// Per-participant local embeddings for a corpus under a partition.
std::vector<Mat> make_local_embeds(const SyntheticCorpus& corpus, const Partition& p,
                                   const ModelWeights& w);

}  // namespace fedattn
