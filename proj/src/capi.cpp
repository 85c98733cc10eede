#include "fedattn/fedattn.h"

#include <cstring>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fedattn/analysis.hpp"
#include "fedattn/error.hpp"
#include "fedattn/experiment.hpp"
#include "fedattn/model.hpp"
#include "fedattn/oracle.hpp"
#include "fedattn/partition.hpp"
#include "fedattn/protocol.hpp"
#include "fedattn/rng.hpp"

using nlohmann::json;

namespace {

thread_local std::string g_last_error;

struct FaTraceImpl {
    fedattn::RunTrace trace;
    fedattn::Partition partition;
};

int classify(const std::exception& e) {
    if (dynamic_cast<const fedattn::ConfigError*>(&e)) return FA_ERR_CONFIG;
    if (dynamic_cast<const fedattn::NumericError*>(&e)) return FA_ERR_NUMERIC;
    if (dynamic_cast<const fedattn::ShapeError*>(&e)) return FA_ERR_SHAPE;
    if (dynamic_cast<const fedattn::IoError*>(&e)) return FA_ERR_IO;
    return FA_ERR;
}

template <typename F>
int guarded(F&& fn) {
    try {
        fn();
        g_last_error.clear();
        return FA_OK;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return classify(e);
    } catch (...) {
        g_last_error = "unknown error";
        return FA_ERR;
    }
}

int fill_buffer(const std::string& text, char* buf, size_t cap, size_t* out_needed) {
    if (out_needed) *out_needed = text.size() + 1;
    if (!buf || cap < text.size() + 1) {
        g_last_error = "buffer too small";
        return FA_ERR_CONFIG;
    }
    std::memcpy(buf, text.c_str(), text.size() + 1);
    return FA_OK;
}

std::vector<std::uint64_t> parse_seed_csv(const char* seeds_csv) {
    std::vector<std::uint64_t> out;
    if (!seeds_csv || !*seeds_csv) return out;
    std::stringstream ss(seeds_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoull(item));
    }
    return out;
}

fedattn::ExperimentSpec load_spec(const char* spec_path, const char* out_dir,
                                  const char* seeds_csv) {
    if (!spec_path) throw fedattn::ConfigError("spec path is null");
    auto spec = fedattn::ExperimentSpec::from_json_file(spec_path);
    if (out_dir && *out_dir) spec.out_dir = out_dir;
    const auto seeds = parse_seed_csv(seeds_csv);
    if (!seeds.empty()) spec.seeds = seeds;
    return spec;
}

}  // namespace

struct fa_model {
    fedattn::ModelWeights weights;
};
struct fa_corpus {
    fedattn::SyntheticCorpus corpus;
};
struct fa_partition {
    fedattn::Partition partition;
};
struct fa_trace {
    FaTraceImpl impl;
};

extern "C" {

const char* fa_version(void) { return "fedattn 1.0.0"; }

const char* fa_last_error(void) { return g_last_error.c_str(); }

int fa_model_create(const char* config_json, fa_model** out) {
    return guarded([&] {
        if (!config_json || !out) throw fedattn::ConfigError("null argument");
        json j = json::parse(config_json, nullptr, false);
        if (j.is_discarded()) throw fedattn::ConfigError("config: invalid JSON");
        fedattn::ModelConfig cfg;
        cfg.d = j.value("d", cfg.d);
        cfg.d_ff = j.value("d_ff", cfg.d_ff);
        cfg.M = j.value("M", cfg.M);
        cfg.vocab = j.value("vocab", cfg.vocab);
        cfg.seed = j.value("seed", cfg.seed);
        *out = new fa_model{fedattn::init_weights(cfg)};
    });
}

int fa_model_save(const fa_model* model, const char* path) {
    return guarded([&] {
        if (!model || !path) throw fedattn::ConfigError("null argument");
        fedattn::save_weights(model->weights, path);
    });
}

int fa_model_load(const char* path, fa_model** out) {
    return guarded([&] {
        if (!path || !out) throw fedattn::ConfigError("null argument");
        *out = new fa_model{fedattn::load_weights(path)};
    });
}

void fa_model_free(fa_model* model) { delete model; }

int fa_corpus_generate(const char* corpus_json, fa_corpus** out) {
    return guarded([&] {
        if (!corpus_json || !out) throw fedattn::ConfigError("null argument");
        json j = json::parse(corpus_json, nullptr, false);
        if (j.is_discarded()) throw fedattn::ConfigError("corpus: invalid JSON");
        const int shots = j.value("shots", 3);
        const long lo = j.value("unit_len_min", 32L);
        const long hi = j.value("unit_len_max", 32L);
        const long vocab = j.value("vocab", 64L);
        const std::uint64_t seed = j.value("seed", 0ULL);
        *out = new fa_corpus{fedattn::gen_corpus(shots, lo, hi, vocab, seed)};
    });
}

int fa_corpus_length(const fa_corpus* corpus, int64_t* out_length) {
    return guarded([&] {
        if (!corpus || !out_length) throw fedattn::ConfigError("null argument");
        *out_length = corpus->corpus.length();
    });
}

void fa_corpus_free(fa_corpus* corpus) { delete corpus; }

int fa_partition_create(const fa_corpus* corpus, int n_participants, const char* strategy,
                        uint64_t seed, fa_partition** out) {
    return guarded([&] {
        if (!corpus || !strategy || !out) throw fedattn::ConfigError("null argument");
        *out = new fa_partition{fedattn::make_partition(
            corpus->corpus, n_participants, fedattn::strategy_from_name(strategy), seed)};
    });
}

int fa_partition_from_json(const char* json_text, fa_partition** out) {
    return guarded([&] {
        if (!json_text || !out) throw fedattn::ConfigError("null argument");
        *out = new fa_partition{fedattn::Partition::from_json(json_text)};
    });
}

int fa_partition_to_json(const fa_partition* partition, char* buf, size_t cap,
                         size_t* out_needed) {
    if (!partition) {
        g_last_error = "null argument";
        return FA_ERR_CONFIG;
    }
    return fill_buffer(partition->partition.to_json(), buf, cap, out_needed);
}

void fa_partition_free(fa_partition* partition) { delete partition; }

int fa_run(const fa_model* model, const fa_corpus* corpus, const fa_partition* partition,
           const char* run_json, fa_trace** out) {
    return guarded([&] {
        if (!model || !corpus || !partition || !out)
            throw fedattn::ConfigError("null argument");
        json j = run_json && *run_json ? json::parse(run_json, nullptr, false) : json::object();
        if (j.is_discarded()) throw fedattn::ConfigError("run: invalid JSON");

        const int M = static_cast<int>(model->weights.config.M);
        fedattn::SyncSchedule sched;
        if (j.contains("schedule")) {
            const auto& s = j["schedule"];
            sched = fedattn::named_schedule(
                fedattn::schedule_kind_from_name(s.value("kind", "uniform")), M,
                s.value("T", 1));
        } else {
            sched = fedattn::uniform_schedule(M, j.value("H", 1));
        }

        fedattn::FedOptions opts;
        opts.local_token_ratio = j.value("local_token_ratio", 1.0);
        opts.kv_exchange_ratio = j.value("kv_exchange_ratio", 1.0);
        opts.wire_bits = j.value("wire_bits", 16);
        opts.seed = j.value("seed", 0ULL);
        opts.threads = j.value("threads", 1);
        if (j.contains("topology"))
            opts.topology = fedattn::topology_from_name(j["topology"].get<std::string>());
        const int publisher_h = j.value("publisher_H", 0);
        if (publisher_h > 0)
            opts.per_participant_schedules[partition->partition.publisher] =
                fedattn::uniform_schedule(M, publisher_h);

        const auto embeds =
            fedattn::make_local_embeds(corpus->corpus, partition->partition, model->weights);
        auto* t = new fa_trace;
        t->impl.partition = partition->partition;
        t->impl.trace = fedattn::run_fedattn(embeds, model->weights, partition->partition, sched,
                                             opts);
        *out = t;
    });
}

int fa_trace_summary_json(const fa_trace* trace, char* buf, size_t cap, size_t* out_needed) {
    if (!trace) {
        g_last_error = "null argument";
        return FA_ERR_CONFIG;
    }
    return fill_buffer(trace->impl.trace.summary_json(), buf, cap, out_needed);
}

int fa_trace_final_deviation(const fa_trace* trace, const fa_model* model, double* out) {
    return guarded([&] {
        if (!trace || !model || !out) throw fedattn::ConfigError("null argument");
        const auto& tr = trace->impl.trace;
        // The centralized reference runs over the surviving token set; its
        // inputs are exactly the trace's initial state rows.
        const fedattn::CenTrace cen = fedattn::run_cenattn(
            tr.states.front(), model->weights, {tr.options.bidirectional, false, nullptr});
        *out = fedattn::frob_dist(tr.states.back(), cen.states.back());
    });
}

int fa_trace_dump_messages(const fa_trace* trace, const char* path) {
    return guarded([&] {
        if (!trace || !path) throw fedattn::ConfigError("null argument");
        fedattn::dump_messages(trace->impl.trace, path);
    });
}

int fa_decode_greedy(const fa_trace* trace, const fa_model* model, int max_new, int* out_ids,
                     size_t cap, size_t* out_count) {
    return guarded([&] {
        if (!trace || !model || !out_count) throw fedattn::ConfigError("null argument");
        const auto result = fedattn::decode_greedy(trace->impl.trace, model->weights,
                                                   trace->impl.partition, max_new);
        *out_count = result.tokens.size();
        if (result.tokens.empty()) return;
        if (!out_ids || cap < result.tokens.size())
            throw fedattn::ConfigError("output buffer too small");
        std::memcpy(out_ids, result.tokens.data(), result.tokens.size() * sizeof(int));
    });
}

void fa_trace_free(fa_trace* trace) { delete trace; }

int fa_run_experiment(const char* spec_path, const char* out_dir, const char* seeds_csv,
                      int threads) {
    return guarded([&] {
        const auto spec = load_spec(spec_path, out_dir, seeds_csv);
        fedattn::run_experiment(spec, threads < 1 ? 1 : threads);
    });
}

int fa_emit_bounds(const char* spec_path, const char* out_dir, const char* seeds_csv,
                   int threads) {
    return guarded([&] {
        const auto spec = load_spec(spec_path, out_dir, seeds_csv);
        fedattn::emit_bounds(spec, threads < 1 ? 1 : threads);
    });
}

int fa_marginal_comm(int H, double* out_reduction, double* out_error_level) {
    return guarded([&] {
        if (!out_reduction || !out_error_level) throw fedattn::ConfigError("null argument");
        const auto [reduction, error_level] = fedattn::marginal_comm(H);
        *out_reduction = reduction;
        *out_error_level = error_level;
    });
}

}  // extern "C"
