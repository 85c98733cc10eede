#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedattn/model.hpp"
#include "fedattn/partition.hpp"
#include "fedattn/protocol.hpp"
#include "fedattn/schedule.hpp"

namespace fedattn {

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::Uniform;
    int H = 0;  // uniform interval
    int T = 0;  // round count for the named schemes
    std::string label() const;
};

// A reproducible sweep: every (grid point, seed) pair runs the protocol and
// its centralized reference, recording deviation, decode agreement and cost
// metrics. Identical spec + seeds give byte-identical CSV output for any
// thread count.
struct ExperimentSpec {
    ModelConfig model;  // seed field ignored; per-run seeds are derived
    int shots = 3;
    long unit_len_min = 32;
    long unit_len_max = 32;
    std::vector<SegStrategy> strategies;
    std::vector<ScheduleSpec> schedules;
    std::vector<int> participants;
    std::vector<double> local_token_ratios{1.0};
    std::vector<double> kv_exchange_ratios{1.0};
    std::vector<int> publisher_H{0};  // 0 = no publisher override
    int wire_bits = 16;
    Topology topology = Topology::AllToAll;
    int max_new = 16;
    std::vector<std::uint64_t> seeds;
    std::string out_dir = "results";
    bool metric_decode = true;
    bool metric_sigma = true;

    static ExperimentSpec from_json(const std::string& text);
    static ExperimentSpec from_json_file(const std::string& path);
    void validate() const;
};

struct GridPoint {
    SegStrategy strategy;
    ScheduleSpec schedule;
    int n_participants = 0;
    double local_token_ratio = 1.0;
    double kv_exchange_ratio = 1.0;
    int publisher_H = 0;
};

std::vector<GridPoint> expand_grid(const ExperimentSpec& spec);

struct ExperimentResult {
    std::string results_csv;
    std::string summary_csv;
    long data_rows = 0;
    long summary_rows = 0;
};

ExperimentResult run_experiment(const ExperimentSpec& spec, int threads = 1);

struct BoundsResult {
    std::string bounds_csv;
    long rows = 0;
};

// Bound-vs-measurement table. Runs are forced to dense exchange
// (both sparsity ratios 1): the deviation recursion accounts for local
// attention injections only, so sparse-exchange runs sit outside it.
BoundsResult emit_bounds(const ExperimentSpec& spec, int threads = 1);

// Locale-independent shortest round-trip formatting used for all CSV output.
std::string csv_double(double v);

}  // namespace fedattn
