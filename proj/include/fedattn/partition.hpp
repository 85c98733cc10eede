#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedattn/mat.hpp"

namespace fedattn {

// Disjoint split of the global token indices 0..L-1 across N participants.
// Index lists play the role of the binary indicator maps: gather/scatter are
// exact row moves, never materialized 0/1 matrices.
struct Partition {
    long L = 0;
    int N = 0;
    int publisher = 0;                      // participant id, 0-based
    std::vector<std::vector<long>> locals;  // per participant, strictly increasing global ids
    std::vector<int> assign;                // per global index, owning participant

    void validate() const;
    std::string to_json() const;
    static Partition from_json(const std::string& text);
};

// Few-shot style synthetic prompt: `shots` example units followed by one
// question unit, tiling 0..L-1.
struct SyntheticCorpus {
    std::vector<int> tokens;
    std::vector<std::pair<long, long>> units;  // [begin, end) spans in order
    std::size_t question_unit = 0;             // index into units
    int shots = 0;

    long length() const { return static_cast<long>(tokens.size()); }
    std::pair<long, long> question_span() const { return units[question_unit]; }
};

enum class SegStrategy {
    TokSegQAg,   // uniform token split across all participants
    TokSegQEx,   // question to the last participant, rest token-uniform
    SemSegQAg,   // whole units balanced across all participants
    SemSegQEx,   // question unit to the last participant, rest whole units
};

const char* strategy_name(SegStrategy s);
SegStrategy strategy_from_name(const std::string& name);

// Deterministic partitioning per the strategy rules; the publisher is always
// the last participant. The seed parameter is reserved for randomized
// strategies and is unused by the four deterministic ones.
Partition make_partition(const SyntheticCorpus& corpus, int n_participants, SegStrategy strategy,
                         std::uint64_t seed = 0);

// Rows of `global` at participant n's indices, in order.
Mat gather(const Mat& global, const Partition& p, int n);
Mat gather_rows(const Mat& global, const std::vector<long>& row_ids);

// Inverse of gather over all participants: every global row written once.
Mat scatter(const std::vector<Mat>& locals, const Partition& p);
// Scatter with explicit index lists (used for sampled-token runs). `rows` is
// the dense row count of the output; `global_of` maps each output row to its
// original global id only implicitly via ordering, so callers pass positions
// within the effective sequence.
Mat scatter_rows(const std::vector<Mat>& locals, const std::vector<std::vector<long>>& positions,
                 long rows, long cols);

SyntheticCorpus gen_corpus(int shots, long unit_len_min, long unit_len_max, long vocab,
                           std::uint64_t seed);

}  // namespace fedattn
