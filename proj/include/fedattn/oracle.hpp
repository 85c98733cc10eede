#pragma once

#include <string>
#include <vector>

#include "fedattn/mat.hpp"
#include "fedattn/model.hpp"
#include "fedattn/partition.hpp"
#include "fedattn/protocol.hpp"

namespace fedattn {

// Centralized reference forward: every block attends over the full sequence.
struct CenTrace {
    std::vector<Mat> states;     // M+1 entries, block inputs plus final state
    std::vector<Mat> attn_outs;  // M entries, attention sub-layer outputs
};

struct CenOptions {
    bool bidirectional = false;
    // When set, inter-participant attention is masked out (the operational
    // form of a perfectly block-diagonal attention pattern). row_owner gives
    // the owning participant of each input row.
    bool block_diagonal = false;
    const std::vector<int>* row_owner = nullptr;
};

// Rows of global_embeds must be in ascending global-position order; the
// causal mask is then lower-triangular.
CenTrace run_cenattn(const Mat& global_embeds, const ModelWeights& weights,
                     const CenOptions& opts = {});

// Fully local execution: every block local, nothing exchanged. Written as a
// straight per-participant loop, independent of the protocol engine's
// schedule machinery.
struct LocTrace {
    std::vector<std::vector<Mat>> states;  // [participant][0..M]
    std::vector<Mat> final_locals;
    std::uint64_t bits_sent = 0;  // always zero; kept for symmetry
};

LocTrace run_locattn(const std::vector<Mat>& embeds, const ModelWeights& weights,
                     const Partition& p, bool bidirectional = false);

// Realized deviations along a protocol trace. sigma[m-1][n] is participant
// n's local-vs-global attention gap at block m, both branches evaluated at
// the trace's own state entering that block. When a centralized trace is
// supplied, per-block state and attention-output deviations are also filled.
struct DeviationReport {
    int M = 0;
    int N = 0;
    std::vector<std::vector<double>> sigma;  // [m-1][n]
    std::vector<double> state_dev;           // M+1 entries (index 0 is the shared init)
    std::vector<double> attn_dev;            // M entries
    std::vector<int> round_of_block;         // t label per block
    std::vector<int> forward_of_block;       // h label per block

    // columns: t,h,m,n,sigma,state_dev,attn_dev
    std::string to_csv() const;
};

DeviationReport measure_sigma(const ModelWeights& weights, const RunTrace& trace,
                              const CenTrace* cen = nullptr);

}  // namespace fedattn
