#include "fedattn/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedattn/analysis.hpp"
#include "fedattn/cost.hpp"
#include "fedattn/error.hpp"
#include "fedattn/oracle.hpp"
#include "fedattn/rng.hpp"
#include "parallel.hpp"

namespace fedattn {

using nlohmann::json;

namespace {

constexpr std::uint64_t kWeightsTag = 0x77656967ULL;   // "weig"
constexpr std::uint64_t kProtocolTag = 0x70726f74ULL;  // "prot"

const json* find_path(const json& root, const std::string& path) {
    const json* cur = &root;
    std::size_t start = 0;
    while (start < path.size()) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!cur->is_object() || !cur->contains(key)) return nullptr;
        cur = &(*cur)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    return cur;
}

template <typename T>
T require_field(const json& root, const std::string& path) {
    const json* node = find_path(root, path);
    if (!node) throw ConfigError(path + ": missing required field");
    try {
        return node->get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + ": wrong type");
    }
}

template <typename T>
T optional_field(const json& root, const std::string& path, T fallback) {
    const json* node = find_path(root, path);
    if (!node) return fallback;
    try {
        return node->get<T>();
    } catch (const json::exception&) {
        throw ConfigError(path + ": wrong type");
    }
}

}  // namespace

std::string csv_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string ScheduleSpec::label() const {
    if (kind == ScheduleKind::Uniform) return std::string("uniform_h") + std::to_string(H);
    return std::string(schedule_kind_name(kind)) + "_t" + std::to_string(T);
}

ExperimentSpec ExperimentSpec::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open experiment spec: " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return from_json(buf.str());
}

ExperimentSpec ExperimentSpec::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("spec: invalid JSON: ") + e.what());
    }
    ExperimentSpec spec;
    spec.model.d = require_field<long>(j, "model.d");
    spec.model.d_ff = require_field<long>(j, "model.d_ff");
    spec.model.M = require_field<long>(j, "model.M");
    spec.model.vocab = require_field<long>(j, "model.vocab");
    spec.shots = require_field<int>(j, "corpus.shots");
    spec.unit_len_min = require_field<long>(j, "corpus.unit_len_min");
    spec.unit_len_max = require_field<long>(j, "corpus.unit_len_max");

    spec.strategies.clear();
    for (const auto& name : require_field<std::vector<std::string>>(j, "strategies")) {
        try {
            spec.strategies.push_back(strategy_from_name(name));
        } catch (const ConfigError&) {
            throw ConfigError("strategies: unknown strategy '" + name + "'");
        }
    }

    const auto kinds = optional_field<std::vector<std::string>>(j, "sweep.schedules", {"uniform"});
    const int T = optional_field<int>(j, "sweep.T", 0);
    spec.schedules.clear();
    for (const auto& name : kinds) {
        ScheduleKind kind;
        try {
            kind = schedule_kind_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError("sweep.schedules: unknown kind '" + name + "'");
        }
        if (kind == ScheduleKind::Uniform) {
            const auto hs = require_field<std::vector<int>>(j, "sweep.H");
            for (int h : hs) spec.schedules.push_back({kind, h, 0});
        } else {
            if (T < 1) throw ConfigError("sweep.T: required (>= 1) for named schedules");
            spec.schedules.push_back({kind, 0, T});
        }
    }

    spec.participants = require_field<std::vector<int>>(j, "sweep.N");
    spec.local_token_ratios =
        optional_field<std::vector<double>>(j, "sweep.local_token_ratio", {1.0});
    spec.kv_exchange_ratios =
        optional_field<std::vector<double>>(j, "sweep.kv_exchange_ratio", {1.0});
    spec.publisher_H = optional_field<std::vector<int>>(j, "sweep.publisher_H", {0});
    spec.wire_bits = optional_field<int>(j, "wire_bits", 16);
    spec.topology = topology_from_name(optional_field<std::string>(j, "topology", "all_to_all"));
    spec.max_new = optional_field<int>(j, "max_new", 16);
    spec.seeds = require_field<std::vector<std::uint64_t>>(j, "seeds");
    spec.out_dir = optional_field<std::string>(j, "out", "results");
    const auto metrics = optional_field<std::vector<std::string>>(
        j, "metrics", {"deviation", "decode", "cost", "sigma"});
    spec.metric_decode = std::find(metrics.begin(), metrics.end(), "decode") != metrics.end();
    spec.metric_sigma = std::find(metrics.begin(), metrics.end(), "sigma") != metrics.end();
    spec.validate();
    return spec;
}

void ExperimentSpec::validate() const {
    model.validate();
    if (shots < 1) throw ConfigError("corpus.shots: must be >= 1");
    if (unit_len_min < 1 || unit_len_max < unit_len_min)
        throw ConfigError("corpus.unit_len_min/max: bad range");
    if (strategies.empty()) throw ConfigError("strategies: must be nonempty");
    if (schedules.empty()) throw ConfigError("sweep.schedules: must be nonempty");
    if (participants.empty()) throw ConfigError("sweep.N: must be nonempty");
    for (int n : participants)
        if (n < 1) throw ConfigError("sweep.N: participant counts must be >= 1");
    if (local_token_ratios.empty()) throw ConfigError("sweep.local_token_ratio: must be nonempty");
    if (kv_exchange_ratios.empty()) throw ConfigError("sweep.kv_exchange_ratio: must be nonempty");
    for (double r : local_token_ratios)
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sweep.local_token_ratio: values in (0,1]");
    for (double r : kv_exchange_ratios)
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sweep.kv_exchange_ratio: values in (0,1]");
    if (publisher_H.empty()) throw ConfigError("sweep.publisher_H: must be nonempty");
    for (const auto& s : schedules) {
        if (s.kind == ScheduleKind::Uniform) {
            if (s.H < 1 || model.M % s.H != 0)
                throw ConfigError("sweep.H: every H must divide model.M");
        }
    }
    for (int ph : publisher_H) {
        if (ph < 0 || (ph > 0 && model.M % ph != 0))
            throw ConfigError("sweep.publisher_H: values must be 0 or divide model.M");
    }
    if (max_new < 0) throw ConfigError("max_new: must be >= 0");
    if (wire_bits < 1) throw ConfigError("wire_bits: must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds: must be nonempty");
}

std::vector<GridPoint> expand_grid(const ExperimentSpec& spec) {
    std::vector<GridPoint> grid;
    for (const auto& strategy : spec.strategies)
        for (const auto& sched : spec.schedules)
            for (int n : spec.participants)
                for (double ltr : spec.local_token_ratios)
                    for (double kvr : spec.kv_exchange_ratios)
                        for (int ph : spec.publisher_H)
                            grid.push_back({strategy, sched, n, ltr, kvr, ph});
    return grid;
}

namespace {

struct RunOutput {
    RunTrace fed;
    CenTrace cen;          // centralized states over the full token sequence
    RunTrace cen_run;      // the engine run the centralized trace came from
    Partition partition;   // the fed run's partition
    Partition cen_partition;
    ModelWeights weights;
    SyncSchedule sched;
    FedOptions opts;
    SyntheticCorpus corpus;
};

Partition trivial_partition(long L) {
    Partition p;
    p.L = L;
    p.N = 1;
    p.publisher = 0;
    p.locals.resize(1);
    p.locals[0].resize(L);
    std::iota(p.locals[0].begin(), p.locals[0].end(), 0L);
    p.assign.assign(L, 0);
    return p;
}

CenTrace cen_from_run(const RunTrace& run) {
    CenTrace c;
    c.states = run.states;
    c.attn_outs = run.attn_outs;
    return c;
}

SyncSchedule make_schedule(const ScheduleSpec& s, int M) {
    if (s.kind == ScheduleKind::Uniform) return uniform_schedule(M, s.H);
    return named_schedule(s.kind, M, s.T);
}

RunOutput execute_point(const ExperimentSpec& spec, const GridPoint& g, std::uint64_t seed) {
    RunOutput out;
    out.corpus = gen_corpus(spec.shots, spec.unit_len_min, spec.unit_len_max, spec.model.vocab,
                            seed);
    out.partition = make_partition(out.corpus, g.n_participants, g.strategy, seed);
    ModelConfig cfg = spec.model;
    cfg.seed = derive_seed(seed, kWeightsTag);
    out.weights = init_weights(cfg);
    out.sched = make_schedule(g.schedule, static_cast<int>(cfg.M));

    out.opts.local_token_ratio = g.local_token_ratio;
    out.opts.kv_exchange_ratio = g.kv_exchange_ratio;
    out.opts.wire_bits = spec.wire_bits;
    out.opts.topology = spec.topology;
    out.opts.seed = derive_seed(seed, kProtocolTag);
    if (g.publisher_H > 0)
        out.opts.per_participant_schedules[out.partition.publisher] =
            uniform_schedule(static_cast<int>(cfg.M), g.publisher_H);

    const auto embeds = make_local_embeds(out.corpus, out.partition, out.weights);
    out.fed = run_fedattn(embeds, out.weights, out.partition, out.sched, out.opts);

    out.cen_partition = trivial_partition(out.corpus.length());
    const auto cen_embeds = make_local_embeds(out.corpus, out.cen_partition, out.weights);
    FedOptions cen_opts;
    cen_opts.wire_bits = spec.wire_bits;
    out.cen_run = run_fedattn(cen_embeds, out.weights, out.cen_partition,
                              uniform_schedule(static_cast<int>(cfg.M), 1), cen_opts);
    out.cen = cen_from_run(out.cen_run);
    return out;
}

struct DeviationStats {
    double global = 0.0;
    double part_mean = 0.0, part_min = 0.0, part_max = 0.0;
};

DeviationStats deviation_stats(const RunOutput& r) {
    DeviationStats s;
    const Mat cen_at_eff = gather_rows(r.cen.states.back(), r.fed.eff_globals);
    s.global = frob_dist(r.fed.states.back(), cen_at_eff);
    std::vector<double> per;
    for (int n = 0; n < r.partition.N; ++n) {
        const Mat fed_n = gather_rows(r.fed.states.back(), r.fed.eff_positions[n]);
        const Mat cen_n = gather_rows(cen_at_eff, r.fed.eff_positions[n]);
        per.push_back(frob_dist(fed_n, cen_n));
    }
    s.part_min = *std::min_element(per.begin(), per.end());
    s.part_max = *std::max_element(per.begin(), per.end());
    s.part_mean = std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
    return s;
}

double mean_u64(const std::vector<std::uint64_t>& v) {
    if (v.empty()) return 0.0;
    long double s = 0.0;
    for (auto x : v) s += static_cast<long double>(x);
    return static_cast<double>(s / v.size());
}

std::string grid_prefix(const ExperimentSpec& spec, const GridPoint& g, std::size_t grid_id) {
    std::ostringstream os;
    os << grid_id << ',' << strategy_name(g.strategy) << ',' << g.schedule.label() << ','
       << g.schedule.H << ',' << g.schedule.T << ',' << g.publisher_H << ',' << g.n_participants
       << ',' << csv_double(g.local_token_ratio) << ',' << csv_double(g.kv_exchange_ratio) << ','
       << spec.wire_bits << ',' << topology_name(spec.topology);
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open output file: " + path);
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, int threads) {
    spec.validate();
    const auto grid = expand_grid(spec);
    const std::size_t jobs = grid.size() * spec.seeds.size();
    std::vector<std::string> rows(jobs);
    // Per (grid, seed) deviation and agreement, for the summary table.
    std::vector<double> devs(jobs, 0.0), agrees(jobs, 0.0);

    parallel_for(static_cast<int>(jobs), threads, [&](int job) {
        const std::size_t gi = static_cast<std::size_t>(job) / spec.seeds.size();
        const std::size_t si = static_cast<std::size_t>(job) % spec.seeds.size();
        const GridPoint& g = grid[gi];
        const std::uint64_t seed = spec.seeds[si];
        RunOutput r = execute_point(spec, g, seed);
        const DeviationStats dev = deviation_stats(r);

        double agree = 0.0;
        if (spec.metric_decode && spec.max_new > 0) {
            const DecodeResult fed_dec = decode_greedy(r.fed, r.weights, r.partition, spec.max_new);
            const DecodeResult cen_dec =
                decode_greedy(r.cen_run, r.weights, r.cen_partition, spec.max_new);
            int same = 0;
            for (int i = 0; i < spec.max_new; ++i)
                if (fed_dec.tokens[i] == cen_dec.tokens[i]) ++same;
            agree = static_cast<double>(same) / static_cast<double>(spec.max_new);
        } else if (spec.metric_decode) {
            agree = 1.0;
        }

        const CostReport cost = cost_report(r.partition, r.sched, r.opts, r.weights.config);

        std::string sigma_profile;
        if (spec.metric_sigma) {
            const DeviationReport rep = measure_sigma(r.weights, r.fed);
            std::ostringstream sp;
            for (int m = 1; m <= rep.M; ++m) {
                if (m > 1) sp << ';';
                double s = 0.0;
                for (double v : rep.sigma[m - 1]) s += v;
                sp << csv_double(s);
            }
            sigma_profile = sp.str();
        }

        std::ostringstream os;
        os << grid_prefix(spec, g, gi) << ',' << seed << ',' << r.partition.L << ','
           << r.fed.eff_len() << ',' << csv_double(dev.global) << ',' << csv_double(dev.part_mean)
           << ',' << csv_double(dev.part_min) << ',' << csv_double(dev.part_max) << ','
           << (spec.metric_decode ? csv_double(agree) : std::string()) << ','
           << csv_double(mean_u64(r.fed.bits_sent)) << ','
           << csv_double(mean_u64(r.fed.bits_received)) << ','
           << csv_double(mean_u64(r.fed.prefill_flops)) << ','
           << csv_double(mean_u64(cost.decode_flops_per_step)) << ','
           << csv_double(mean_u64(cost.peak_memory_scalars)) << ',' << sigma_profile << '\n';
        rows[job] = os.str();
        devs[job] = dev.global;
        agrees[job] = agree;
    });

    std::ostringstream results;
    results << "grid_id,strategy,schedule,H,T,publisher_H,N,local_token_ratio,kv_exchange_ratio,"
               "wire_bits,topology,seed,L,L_eff,dev_global,dev_part_mean,dev_part_min,"
               "dev_part_max,decode_agree,bits_sent_mean,bits_received_mean,prefill_flops_mean,"
               "decode_step_flops_mean,peak_scalars_mean,sigma_by_block\n";
    for (const auto& r : rows) results << r;

    std::ostringstream summary;
    summary << "grid_id,strategy,schedule,H,T,publisher_H,N,local_token_ratio,kv_exchange_ratio,"
               "wire_bits,topology,seeds,dev_mean,dev_min,dev_max,agree_mean,agree_min,agree_max\n";
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        double dmin = 0.0, dmax = 0.0, dsum = 0.0, amin = 0.0, amax = 0.0, asum = 0.0;
        for (std::size_t si = 0; si < spec.seeds.size(); ++si) {
            const std::size_t job = gi * spec.seeds.size() + si;
            if (si == 0) {
                dmin = dmax = devs[job];
                amin = amax = agrees[job];
            } else {
                dmin = std::min(dmin, devs[job]);
                dmax = std::max(dmax, devs[job]);
                amin = std::min(amin, agrees[job]);
                amax = std::max(amax, agrees[job]);
            }
            dsum += devs[job];
            asum += agrees[job];
        }
        const double count = static_cast<double>(spec.seeds.size());
        summary << grid_prefix(spec, grid[gi], gi) << ',' << spec.seeds.size() << ','
                << csv_double(dsum / count) << ',' << csv_double(dmin) << ',' << csv_double(dmax)
                << ',' << csv_double(asum / count) << ',' << csv_double(amin) << ','
                << csv_double(amax) << '\n';
    }

    std::filesystem::create_directories(spec.out_dir);
    ExperimentResult out;
    out.results_csv = (std::filesystem::path(spec.out_dir) / "results.csv").string();
    out.summary_csv = (std::filesystem::path(spec.out_dir) / "summary.csv").string();
    write_file(out.results_csv, results.str());
    write_file(out.summary_csv, summary.str());
    out.data_rows = static_cast<long>(jobs);
    out.summary_rows = static_cast<long>(grid.size());
    return out;
}

BoundsResult emit_bounds(const ExperimentSpec& spec, int threads) {
    spec.validate();
    ExperimentSpec dense = spec;
    dense.local_token_ratios = {1.0};
    dense.kv_exchange_ratios = {1.0};
    const auto grid = expand_grid(dense);
    const std::size_t jobs = grid.size() * dense.seeds.size();
    std::vector<std::string> rows(jobs);

    parallel_for(static_cast<int>(jobs), threads, [&](int job) {
        const std::size_t gi = static_cast<std::size_t>(job) / dense.seeds.size();
        const std::size_t si = static_cast<std::size_t>(job) % dense.seeds.size();
        const GridPoint& g = grid[gi];
        const std::uint64_t seed = dense.seeds[si];
        RunOutput r = execute_point(dense, g, seed);

        const GainTable gains = build_gain_table(r.weights, r.fed, r.cen);
        const auto verdicts = check_recursion(r.fed, r.cen, gains);
        double min_slack = 0.0;
        long violations = 0;
        for (std::size_t i = 0; i < verdicts.size(); ++i) {
            if (i == 0 || verdicts[i].slack < min_slack) min_slack = verdicts[i].slack;
            if (verdicts[i].slack < -1e-9) ++violations;
        }
        const double measured = frob_dist(r.fed.states.back(), r.cen.states.back());
        const double chained = chained_bound(gains);
        const double t3 = theorem3_bound(gains, r.sched);

        std::string t1, c1;
        if (g.schedule.kind == ScheduleKind::Uniform) {
            const int H = g.schedule.H;
            const int T = static_cast<int>(r.weights.config.M) / H;
            t1 = csv_double(theorem1_bound(gains, H, T));
            const UniformMaxima u = uniform_maxima(gains);
            c1 = csv_double(corollary1_bound(u.theta, u.rho, u.sigma_sum, H,
                                             static_cast<int>(r.weights.config.M)));
        }

        std::ostringstream gp;
        for (int m = 1; m <= gains.M; ++m) {
            if (m > 1) gp << ';';
            gp << csv_double(gamma_reduction(gains, m));
        }

        std::ostringstream os;
        os << grid_prefix(dense, g, gi) << ',' << seed << ',' << r.partition.L << ','
           << csv_double(measured) << ',' << csv_double(chained) << ',' << t1 << ',' << c1 << ','
           << csv_double(t3) << ',' << csv_double(min_slack) << ',' << violations << ','
           << gp.str() << '\n';
        rows[job] = os.str();
    });

    std::ostringstream bounds;
    bounds << "grid_id,strategy,schedule,H,T,publisher_H,N,local_token_ratio,kv_exchange_ratio,"
              "wire_bits,topology,seed,L,measured_dev,chained_bound,theorem1,corollary1,theorem3,"
              "min_slack,violations,gamma_by_block\n";
    for (const auto& r : rows) bounds << r;

    std::filesystem::create_directories(dense.out_dir);
    BoundsResult out;
    out.bounds_csv = (std::filesystem::path(dense.out_dir) / "bounds.csv").string();
    write_file(out.bounds_csv, bounds.str());
    out.rows = static_cast<long>(jobs);
    return out;
}

}  // namespace fedattn
