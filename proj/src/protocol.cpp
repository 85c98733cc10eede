#include "fedattn/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "fedattn/cost.hpp"
#include "fedattn/error.hpp"
#include "fedattn/rng.hpp"
#include "parallel.hpp"

namespace fedattn {

const char* topology_name(Topology t) {
    return t == Topology::AllToAll ? "all_to_all" : "star";
}

Topology topology_from_name(const std::string& name) {
    if (name == "all_to_all") return Topology::AllToAll;
    if (name == "star") return Topology::Star;
    throw ConfigError("unknown topology: " + name);
}

void FedOptions::validate() const {
    if (!(local_token_ratio > 0.0 && local_token_ratio <= 1.0))
        throw ConfigError("FedOptions: local_token_ratio must be in (0,1]");
    if (!(kv_exchange_ratio > 0.0 && kv_exchange_ratio <= 1.0))
        throw ConfigError("FedOptions: kv_exchange_ratio must be in (0,1]");
    // The message-log format stores the width as a u8.
    if (wire_bits < 1 || wire_bits > 255)
        throw ConfigError("FedOptions: wire_bits must be in 1..255");
    if (threads < 1) throw ConfigError("FedOptions: threads must be >= 1");
}

namespace {

constexpr std::uint64_t kLocalSampleTag = 0x6c6f63616cULL;  // "local"
constexpr std::uint64_t kKvSampleTag = 0x6b767378ULL;       // "kvsx"

long sample_size(long owned, double ratio) {
    if (ratio >= 1.0) return owned;
    const long k = static_cast<long>(std::ceil(ratio * static_cast<double>(owned)));
    return std::max<long>(1, k);
}

void append_row(Mat& m, std::span<const double> row) {
    m.data.insert(m.data.end(), row.begin(), row.end());
    ++m.rows;
}

}  // namespace

std::vector<long> sparse_sample_local(const Partition& p, int n, double ratio,
                                      std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw ConfigError("sparse_sample_local: ratio must be in (0,1]");
    const auto& owned = p.locals.at(n);
    const long k = sample_size(static_cast<long>(owned.size()), ratio);
    Rng rng(derive_seed(derive_seed(seed, kLocalSampleTag), static_cast<std::uint64_t>(n)));
    return rng.sample_subset(owned, static_cast<std::size_t>(k));
}

std::vector<long> sparse_sample_kv(const std::vector<long>& owned, int round, int n, double ratio,
                                   std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw ConfigError("sparse_sample_kv: ratio must be in (0,1]");
    const long k = sample_size(static_cast<long>(owned.size()), ratio);
    Rng rng(derive_seed(derive_seed(derive_seed(seed, kKvSampleTag),
                                    static_cast<std::uint64_t>(n)),
                        static_cast<std::uint64_t>(round)));
    return rng.sample_subset(owned, static_cast<std::size_t>(k));
}

namespace {

struct ViewEntry {
    long global;
    int owner;
    const double* k_row;
    const double* v_row;
};

// Per-recipient aggregate: the recipient's own full KV rows plus every other
// sender's transmitted rows, sorted by global token id.
void build_view(int n, const std::vector<long>& own_globals, const Mat& own_k, const Mat& own_v,
                const std::vector<KVMessage>& messages, long d, std::vector<long>& view_globals,
                std::vector<int>& view_owner, Mat& k_view, Mat& v_view) {
    std::vector<ViewEntry> entries;
    entries.reserve(own_globals.size() + 64);
    for (std::size_t i = 0; i < own_globals.size(); ++i)
        entries.push_back({own_globals[i], n, own_k.row(static_cast<long>(i)).data(),
                           own_v.row(static_cast<long>(i)).data()});
    for (const auto& msg : messages) {
        if (msg.sender == n) continue;
        for (std::size_t i = 0; i < msg.token_globals.size(); ++i)
            entries.push_back({msg.token_globals[i], msg.sender,
                               msg.k_payload.row(static_cast<long>(i)).data(),
                               msg.v_payload.row(static_cast<long>(i)).data()});
    }
    std::sort(entries.begin(), entries.end(),
              [](const ViewEntry& a, const ViewEntry& b) { return a.global < b.global; });
    const long rows = static_cast<long>(entries.size());
    view_globals.resize(rows);
    view_owner.resize(rows);
    k_view = Mat(rows, d);
    v_view = Mat(rows, d);
    for (long i = 0; i < rows; ++i) {
        view_globals[i] = entries[i].global;
        view_owner[i] = entries[i].owner;
        std::copy(entries[i].k_row, entries[i].k_row + d, k_view.row(i).begin());
        std::copy(entries[i].v_row, entries[i].v_row + d, v_view.row(i).begin());
    }
}

void restrict_to_owner(Mask& mask, const std::vector<int>& key_owner, int n) {
    for (long a = 0; a < mask.rows; ++a)
        for (long b = 0; b < mask.cols; ++b)
            if (key_owner[b] != n) mask.set(a, b, false);
}

std::vector<long> rows_of_subset(const std::vector<long>& owned, const std::vector<long>& subset) {
    std::vector<long> rows;
    rows.reserve(subset.size());
    std::size_t j = 0;
    for (long id : subset) {
        while (j < owned.size() && owned[j] < id) ++j;
        if (j >= owned.size() || owned[j] != id)
            throw ConfigError("sparse subset contains a token the participant does not own");
        rows.push_back(static_cast<long>(j));
    }
    return rows;
}

}  // namespace

RunTrace run_fedattn(const std::vector<Mat>& embeds, const ModelWeights& weights,
                     const Partition& p, const SyncSchedule& sched, const FedOptions& opts) {
    const ModelConfig& cfg = weights.config;
    opts.validate();
    p.validate();
    sched.validate();
    if (sched.M != cfg.M)
        throw ConfigError("run_fedattn: schedule block count does not match the model");
    if (static_cast<int>(embeds.size()) != p.N)
        throw ShapeError("run_fedattn: one embedding matrix per participant required");
    for (int n = 0; n < p.N; ++n) {
        if (embeds[n].rows != static_cast<long>(p.locals[n].size()) || embeds[n].cols != cfg.d)
            throw ShapeError("run_fedattn: embedding shape mismatch for participant " +
                             std::to_string(n));
    }
    for (const auto& [n, s] : opts.per_participant_schedules) {
        if (n < 0 || n >= p.N)
            throw ConfigError("run_fedattn: schedule override for unknown participant");
        s.validate();
        if (s.M != cfg.M)
            throw ConfigError("run_fedattn: schedule override block count mismatch");
    }

    RunTrace tr;
    tr.partition = p;
    tr.options = opts;
    tr.M = static_cast<int>(cfg.M);
    tr.d = cfg.d;

    // Surviving tokens (sparse local attention drops the rest up front).
    tr.eff_locals.resize(p.N);
    std::vector<Mat> x(p.N);
    for (int n = 0; n < p.N; ++n) {
        if (opts.local_token_ratio < 1.0) {
            tr.eff_locals[n] = sparse_sample_local(p, n, opts.local_token_ratio, opts.seed);
            x[n] = gather_rows(embeds[n], rows_of_subset(p.locals[n], tr.eff_locals[n]));
        } else {
            tr.eff_locals[n] = p.locals[n];
            x[n] = embeds[n];
        }
    }
    for (const auto& ids : tr.eff_locals)
        tr.eff_globals.insert(tr.eff_globals.end(), ids.begin(), ids.end());
    std::sort(tr.eff_globals.begin(), tr.eff_globals.end());
    std::vector<long> pos_of_global(p.L, -1);
    for (std::size_t i = 0; i < tr.eff_globals.size(); ++i)
        pos_of_global[tr.eff_globals[i]] = static_cast<long>(i);
    tr.eff_positions.resize(p.N);
    for (int n = 0; n < p.N; ++n) {
        tr.eff_positions[n].reserve(tr.eff_locals[n].size());
        for (long g : tr.eff_locals[n]) tr.eff_positions[n].push_back(pos_of_global[g]);
    }
    const long l_eff = tr.eff_len();

    // Union schedule and per-block transmitter sets.
    std::set<int> union_blocks(sched.sync_blocks.begin(), sched.sync_blocks.end());
    std::vector<const SyncSchedule*> sched_of(p.N, &sched);
    for (const auto& [n, s] : tr.options.per_participant_schedules) sched_of[n] = &s;
    if (!tr.options.per_participant_schedules.empty()) {
        union_blocks.clear();
        for (int n = 0; n < p.N; ++n)
            union_blocks.insert(sched_of[n]->sync_blocks.begin(),
                                sched_of[n]->sync_blocks.end());
    }
    tr.union_sync_blocks.assign(union_blocks.begin(), union_blocks.end());

    std::vector<Mask> local_mask(p.N);
    for (int n = 0; n < p.N; ++n)
        local_mask[n] = causal_mask(tr.eff_locals[n], tr.eff_locals[n], opts.bidirectional);

    const int threads = opts.threads;
    tr.bits_sent.assign(p.N, 0);
    tr.bits_received.assign(p.N, 0);
    tr.prefill_flops.assign(p.N, 0);
    tr.caches.resize(cfg.M);
    tr.states.reserve(cfg.M + 1);
    tr.attn_outs.reserve(cfg.M);
    tr.states.push_back(scatter_rows(x, tr.eff_positions, l_eff, cfg.d));

    std::vector<Mat> attn(p.N);
    int round_ordinal = 0;
    for (int m = 1; m <= cfg.M; ++m) {
        const BlockParams& bp = weights.blocks[m - 1];
        if (union_blocks.count(m)) {
            // Phase A: everyone projects.
            std::vector<Mat> q(p.N), k(p.N), v(p.N);
            parallel_for(p.N, threads, [&](int n) {
                std::tie(q[n], k[n], v[n]) = qkv_project(x[n], bp);
            });

            // Scheduled participants transmit (a sampled subset of) their KVs.
            SyncRound round;
            round.round = round_ordinal;
            round.block = m;
            for (int n = 0; n < p.N; ++n) {
                if (!sched_of[n]->is_sync(m)) continue;
                std::vector<long> ids = opts.kv_exchange_ratio < 1.0
                                            ? sparse_sample_kv(tr.eff_locals[n], round_ordinal, n,
                                                               opts.kv_exchange_ratio, opts.seed)
                                            : tr.eff_locals[n];
                const auto rows = rows_of_subset(tr.eff_locals[n], ids);
                KVMessage msg;
                msg.sender = n;
                msg.round = round_ordinal;
                msg.block = m;
                msg.token_globals = std::move(ids);
                msg.k_payload = gather_rows(k[n], rows);
                msg.v_payload = gather_rows(v[n], rows);
                msg.payload_bits = 2ULL * msg.token_globals.size() * cfg.d *
                                   static_cast<std::uint64_t>(opts.wire_bits);
                round.messages.push_back(std::move(msg));
            }
            for (const auto& msg : round.messages) {
                const std::uint64_t copies =
                    opts.topology == Topology::AllToAll ? static_cast<std::uint64_t>(p.N - 1) : 1;
                tr.bits_sent[msg.sender] += copies * msg.payload_bits;
                for (int n = 0; n < p.N; ++n)
                    if (n != msg.sender) tr.bits_received[n] += msg.payload_bits;
            }
            {
                // Transmitted union, for the trace record.
                std::vector<ViewEntry> entries;
                for (const auto& msg : round.messages)
                    for (std::size_t i = 0; i < msg.token_globals.size(); ++i)
                        entries.push_back({msg.token_globals[i], msg.sender,
                                           msg.k_payload.row(static_cast<long>(i)).data(),
                                           msg.v_payload.row(static_cast<long>(i)).data()});
                std::sort(entries.begin(), entries.end(),
                          [](const ViewEntry& a, const ViewEntry& b) {
                              return a.global < b.global;
                          });
                round.agg_globals.resize(entries.size());
                round.agg_k = Mat(static_cast<long>(entries.size()), cfg.d);
                round.agg_v = Mat(static_cast<long>(entries.size()), cfg.d);
                for (std::size_t i = 0; i < entries.size(); ++i) {
                    round.agg_globals[i] = entries[i].global;
                    std::copy(entries[i].k_row, entries[i].k_row + cfg.d,
                              round.agg_k.row(static_cast<long>(i)).begin());
                    std::copy(entries[i].v_row, entries[i].v_row + cfg.d,
                              round.agg_v.row(static_cast<long>(i)).begin());
                }
            }

            // Phase B: everyone consumes its view of the aggregate.
            parallel_for(p.N, threads, [&](int n) {
                std::vector<long> view_globals;
                std::vector<int> view_owner;
                Mat k_view, v_view;
                build_view(n, tr.eff_locals[n], k[n], v[n], round.messages, cfg.d, view_globals,
                           view_owner, k_view, v_view);
                Mask mask = causal_mask(tr.eff_locals[n], view_globals, opts.bidirectional);
                if (opts.block_diagonal) restrict_to_owner(mask, view_owner, n);
                KvSource src{&k_view, &v_view};
                BlockOut bo = block_forward(x[n], bp, src, mask);
                x[n] = std::move(bo.x);
                attn[n] = std::move(bo.attn);
                tr.prefill_flops[n] += prefill_block_flops(
                    static_cast<long>(tr.eff_locals[n].size()), k_view.rows, cfg.d, cfg.d_ff);
                if (n == p.publisher)
                    tr.caches[m - 1] = BlockCache{std::move(view_globals), std::move(k_view),
                                                  std::move(v_view)};
            });
            tr.rounds.push_back(std::move(round));
            ++round_ordinal;
        } else {
            parallel_for(p.N, threads, [&](int n) {
                BlockOut bo = block_forward(x[n], bp, KvSource{}, local_mask[n]);
                x[n] = std::move(bo.x);
                attn[n] = std::move(bo.attn);
                const long ln = static_cast<long>(tr.eff_locals[n].size());
                tr.prefill_flops[n] += prefill_block_flops(ln, ln, cfg.d, cfg.d_ff);
                if (n == p.publisher)
                    tr.caches[m - 1] =
                        BlockCache{tr.eff_locals[n], std::move(bo.k), std::move(bo.v)};
            });
        }
        for (int n = 0; n < p.N; ++n)
            if (!x[n].all_finite())
                throw NumericError("run_fedattn: non-finite state at block " + std::to_string(m));
        tr.states.push_back(scatter_rows(x, tr.eff_positions, l_eff, cfg.d));
        tr.attn_outs.push_back(scatter_rows(attn, tr.eff_positions, l_eff, cfg.d));
    }
    tr.final_locals = std::move(x);
    return tr;
}

DecodeResult decode_greedy(const RunTrace& trace, const ModelWeights& weights,
                           const Partition& p, int max_new) {
    DecodeResult result;
    if (max_new < 0) throw ConfigError("decode_greedy: max_new must be >= 0");
    if (max_new == 0) return result;
    if (static_cast<int>(trace.caches.size()) != trace.M || trace.M == 0)
        throw ConfigError("decode_greedy: trace has no complete KV caches");
    for (const auto& c : trace.caches)
        if (c.k.rows == 0) throw ConfigError("decode_greedy: empty KV cache");

    const ModelConfig& cfg = weights.config;
    std::vector<BlockCache> cache = trace.caches;

    // Decoding starts from the final surviving token of the global sequence.
    const long g_last = trace.eff_globals.back();
    const int owner = p.assign[g_last];
    const long last_row = static_cast<long>(trace.eff_locals[owner].size()) - 1;
    Mat state(1, cfg.d);
    {
        const auto src = trace.final_locals[owner].row(last_row);
        std::copy(src.begin(), src.end(), state.row(0).begin());
    }

    for (int step = 0; step < max_new; ++step) {
        const Mat logits = matmul_nt(state, weights.embed);
        int best = 0;
        for (long j = 1; j < logits.cols; ++j)
            if (logits.at(0, j) > logits.at(0, best)) best = static_cast<int>(j);
        result.tokens.push_back(best);
        if (step + 1 == max_new) break;

        const long pos = p.L + step;
        Mat xrow(1, cfg.d);
        {
            const auto e = weights.embed.row(best);
            const auto pr = positional_row(pos, cfg.d);
            for (long j = 0; j < cfg.d; ++j) xrow.at(0, j) = e[j] + pr[j];
        }
        std::uint64_t step_flops = 0;
        for (int m = 1; m <= trace.M; ++m) {
            const BlockParams& bp = weights.blocks[m - 1];
            auto [q, k, v] = qkv_project(xrow, bp);
            BlockCache& c = cache[m - 1];
            c.globals.push_back(pos);
            append_row(c.k, k.row(0));
            append_row(c.v, v.row(0));
            // Every cached key precedes (or is) the current position, so no
            // mask is needed.
            const Mat o = attention(q, c.k, c.v, nullptr);
            Mat z = add(xrow, o);
            xrow = add(z, ffn_op(z, bp));
            step_flops += decode_block_flops(c.k.rows, cfg.d, cfg.d_ff);
        }
        if (!xrow.all_finite())
            throw NumericError("decode_greedy: non-finite state at step " + std::to_string(step));
        if (step == 0) result.first_step_flops = step_flops;
        result.flops += step_flops;
        state = std::move(xrow);
    }
    return result;
}

bool RunTrace::identical_to(const RunTrace& other) const {
    if (eff_globals != other.eff_globals || union_sync_blocks != other.union_sync_blocks)
        return false;
    if (bits_sent != other.bits_sent || bits_received != other.bits_received ||
        prefill_flops != other.prefill_flops)
        return false;
    if (states.size() != other.states.size() || attn_outs.size() != other.attn_outs.size() ||
        final_locals.size() != other.final_locals.size() || rounds.size() != other.rounds.size())
        return false;
    for (std::size_t i = 0; i < states.size(); ++i)
        if (!(states[i] == other.states[i])) return false;
    for (std::size_t i = 0; i < attn_outs.size(); ++i)
        if (!(attn_outs[i] == other.attn_outs[i])) return false;
    for (std::size_t i = 0; i < final_locals.size(); ++i)
        if (!(final_locals[i] == other.final_locals[i])) return false;
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        const auto& a = rounds[i];
        const auto& b = other.rounds[i];
        if (a.round != b.round || a.block != b.block || a.agg_globals != b.agg_globals ||
            a.messages.size() != b.messages.size())
            return false;
        if (!(a.agg_k == b.agg_k) || !(a.agg_v == b.agg_v)) return false;
        for (std::size_t j = 0; j < a.messages.size(); ++j) {
            const auto& ma = a.messages[j];
            const auto& mb = b.messages[j];
            if (ma.sender != mb.sender || ma.token_globals != mb.token_globals ||
                ma.payload_bits != mb.payload_bits || !(ma.k_payload == mb.k_payload) ||
                !(ma.v_payload == mb.v_payload))
                return false;
        }
    }
    for (std::size_t i = 0; i < caches.size(); ++i) {
        if (caches[i].globals != other.caches[i].globals ||
            !(caches[i].k == other.caches[i].k) || !(caches[i].v == other.caches[i].v))
            return false;
    }
    return true;
}

std::string RunTrace::summary_json() const {
    nlohmann::json j;
    j["L"] = partition.L;
    j["L_eff"] = eff_len();
    j["N"] = partition.N;
    j["M"] = M;
    j["d"] = d;
    j["publisher"] = partition.publisher;
    j["sync_blocks"] = union_sync_blocks;
    j["rounds"] = rounds.size();
    std::size_t messages = 0;
    for (const auto& r : rounds) messages += r.messages.size();
    j["messages"] = messages;
    j["bits_sent"] = bits_sent;
    j["bits_received"] = bits_received;
    j["prefill_flops"] = prefill_flops;
    j["local_token_ratio"] = options.local_token_ratio;
    j["kv_exchange_ratio"] = options.kv_exchange_ratio;
    j["wire_bits"] = options.wire_bits;
    j["topology"] = topology_name(options.topology);
    return j.dump();
}

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void dump_messages(const RunTrace& trace, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("dump_messages: cannot open " + path);
    for (const auto& round : trace.rounds) {
        for (const auto& msg : round.messages) {
            write_pod(os, static_cast<std::uint16_t>(msg.sender));
            write_pod(os, static_cast<std::uint16_t>(msg.round));
            write_pod(os, static_cast<std::uint16_t>(msg.block));
            write_pod(os, static_cast<std::uint32_t>(msg.token_globals.size()));
            write_pod(os, static_cast<std::uint32_t>(trace.d));
            write_pod(os, static_cast<std::uint8_t>(trace.options.wire_bits));
            for (long g : msg.token_globals) write_pod(os, static_cast<std::uint32_t>(g));
            for (double v : msg.k_payload.data) write_pod(os, static_cast<float>(v));
            for (double v : msg.v_payload.data) write_pod(os, static_cast<float>(v));
        }
    }
    if (!os) throw IoError("dump_messages: write failed for " + path);
}

std::vector<KVMessageLite> load_messages(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_messages: cannot open " + path);
    std::vector<KVMessageLite> out;
    while (true) {
        KVMessageLite m;
        m.sender = read_pod<std::uint16_t>(is);
        if (!is) break;  // clean EOF boundary
        m.round = read_pod<std::uint16_t>(is);
        m.block = read_pod<std::uint16_t>(is);
        const auto count = read_pod<std::uint32_t>(is);
        const auto d = read_pod<std::uint32_t>(is);
        m.wire_bits = read_pod<std::uint8_t>(is);
        m.token_globals.resize(count);
        for (auto& g : m.token_globals) g = read_pod<std::uint32_t>(is);
        m.k_payload = Mat(count, d);
        m.v_payload = Mat(count, d);
        for (auto& v : m.k_payload.data) v = read_pod<float>(is);
        for (auto& v : m.v_payload.data) v = read_pod<float>(is);
        if (!is) throw IoError("load_messages: truncated message in " + path);
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<Mat> make_local_embeds(const SyntheticCorpus& corpus, const Partition& p,
                                   const ModelWeights& w) {
    std::vector<Mat> out;
    out.reserve(p.N);
    for (int n = 0; n < p.N; ++n) {
        std::vector<int> ids;
        ids.reserve(p.locals[n].size());
        for (long g : p.locals[n]) ids.push_back(corpus.tokens[g]);
        out.push_back(embed_tokens(ids, p.locals[n], w));
    }
    return out;
}

}  // namespace fedattn
