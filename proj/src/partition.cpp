#include "fedattn/partition.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fedattn/error.hpp"
#include "fedattn/rng.hpp"

namespace fedattn {

using nlohmann::json;

void Partition::validate() const {
    if (N < 1 || static_cast<int>(locals.size()) != N)
        throw ConfigError("Partition: participant count mismatch");
    if (publisher < 0 || publisher >= N) throw ConfigError("Partition: bad publisher id");
    std::vector<int> seen(L, -1);
    long total = 0;
    for (int n = 0; n < N; ++n) {
        long prev = -1;
        for (long g : locals[n]) {
            if (g < 0 || g >= L) throw ConfigError("Partition: index out of range");
            if (g <= prev) throw ConfigError("Partition: indices not strictly increasing");
            if (seen[g] != -1) throw ConfigError("Partition: overlapping assignment");
            seen[g] = n;
            prev = g;
            ++total;
        }
    }
    if (total != L) throw ConfigError("Partition: assignment does not cover 0..L-1");
    if (assign != seen) throw ConfigError("Partition: assign map inconsistent with locals");
}

std::string Partition::to_json() const {
    json j;
    j["L"] = L;
    j["N"] = N;
    j["publisher"] = publisher;
    j["locals"] = locals;
    return j.dump();
}

Partition Partition::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("Partition: invalid JSON: ") + e.what());
    }
    Partition p;
    try {
        p.L = j.at("L").get<long>();
        p.N = j.at("N").get<int>();
        p.publisher = j.at("publisher").get<int>();
        p.locals = j.at("locals").get<std::vector<std::vector<long>>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("Partition: missing or mistyped field: ") + e.what());
    }
    p.assign.assign(p.L, -1);
    for (int n = 0; n < p.N; ++n)
        for (long g : p.locals[n])
            if (g >= 0 && g < p.L) p.assign[g] = n;
    p.validate();
    return p;
}

const char* strategy_name(SegStrategy s) {
    switch (s) {
        case SegStrategy::TokSegQAg: return "tokseg_qag";
        case SegStrategy::TokSegQEx: return "tokseg_qex";
        case SegStrategy::SemSegQAg: return "semseg_qag";
        case SegStrategy::SemSegQEx: return "semseg_qex";
    }
    throw ConfigError("strategy_name: unknown strategy");
}

SegStrategy strategy_from_name(const std::string& name) {
    if (name == "tokseg_qag") return SegStrategy::TokSegQAg;
    if (name == "tokseg_qex") return SegStrategy::TokSegQEx;
    if (name == "semseg_qag") return SegStrategy::SemSegQAg;
    if (name == "semseg_qex") return SegStrategy::SemSegQEx;
    throw ConfigError("unknown segmentation strategy: " + name);
}

namespace {

// Contiguous near-equal chunks; the remainder goes to the lowest-indexed
// participants.
std::vector<std::vector<long>> split_contiguous(const std::vector<long>& ids, int parts) {
    std::vector<std::vector<long>> out(parts);
    const long total = static_cast<long>(ids.size());
    const long base = total / parts;
    const long rem = total % parts;
    long pos = 0;
    for (int n = 0; n < parts; ++n) {
        const long take = base + (n < rem ? 1 : 0);
        out[n].assign(ids.begin() + pos, ids.begin() + pos + take);
        pos += take;
    }
    return out;
}

// Greedy longest-unit-first to the least-loaded participant; ties go to the
// lower participant id. Units keep their token order inside each participant.
void assign_units_balanced(const SyntheticCorpus& corpus, const std::vector<std::size_t>& units,
                           std::vector<std::vector<std::size_t>>& unit_sets,
                           std::vector<long>& load) {
    std::vector<std::size_t> order(units);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const long la = corpus.units[a].second - corpus.units[a].first;
        const long lb = corpus.units[b].second - corpus.units[b].first;
        return la > lb;
    });
    for (std::size_t u : order) {
        int best = 0;
        for (int n = 1; n < static_cast<int>(load.size()); ++n)
            if (load[n] < load[best]) best = n;
        unit_sets[best].push_back(u);
        load[best] += corpus.units[u].second - corpus.units[u].first;
    }
}

std::vector<long> unit_tokens(const SyntheticCorpus& corpus,
                              const std::vector<std::size_t>& unit_set) {
    std::vector<std::size_t> sorted(unit_set);
    std::sort(sorted.begin(), sorted.end());
    std::vector<long> ids;
    for (std::size_t u : sorted)
        for (long g = corpus.units[u].first; g < corpus.units[u].second; ++g) ids.push_back(g);
    return ids;
}

}  // namespace

Partition make_partition(const SyntheticCorpus& corpus, int n_participants, SegStrategy strategy,
                         std::uint64_t /*seed*/) {
    const long L = corpus.length();
    const int N = n_participants;
    if (N < 1) throw ConfigError("make_partition: need at least one participant");
    if (L < N) throw ConfigError("make_partition: fewer tokens than participants");

    Partition p;
    p.L = L;
    p.N = N;
    p.publisher = N - 1;
    p.locals.resize(N);

    const bool q_exclusive =
        strategy == SegStrategy::TokSegQEx || strategy == SegStrategy::SemSegQEx;
    if (q_exclusive && N < 2)
        throw ConfigError("make_partition: question-exclusive strategies need N >= 2");

    switch (strategy) {
        case SegStrategy::TokSegQAg: {
            std::vector<long> all(L);
            std::iota(all.begin(), all.end(), 0);
            p.locals = split_contiguous(all, N);
            break;
        }
        case SegStrategy::TokSegQEx: {
            const auto [qb, qe] = corpus.question_span();
            std::vector<long> rest;
            for (long g = 0; g < L; ++g)
                if (g < qb || g >= qe) rest.push_back(g);
            if (static_cast<long>(rest.size()) < N - 1)
                throw ConfigError("make_partition: not enough non-question tokens for N-1 participants");
            auto chunks = split_contiguous(rest, N - 1);
            for (int n = 0; n < N - 1; ++n) p.locals[n] = std::move(chunks[n]);
            for (long g = qb; g < qe; ++g) p.locals[N - 1].push_back(g);
            break;
        }
        case SegStrategy::SemSegQAg: {
            if (static_cast<long>(corpus.units.size()) < N)
                throw ConfigError("make_partition: fewer semantic units than participants");
            std::vector<std::size_t> units(corpus.units.size());
            std::iota(units.begin(), units.end(), std::size_t{0});
            std::vector<std::vector<std::size_t>> unit_sets(N);
            std::vector<long> load(N, 0);
            assign_units_balanced(corpus, units, unit_sets, load);
            for (int n = 0; n < N; ++n) p.locals[n] = unit_tokens(corpus, unit_sets[n]);
            break;
        }
        case SegStrategy::SemSegQEx: {
            if (static_cast<long>(corpus.units.size()) < N)
                throw ConfigError("make_partition: fewer semantic units than participants");
            std::vector<std::size_t> rest;
            for (std::size_t u = 0; u < corpus.units.size(); ++u)
                if (u != corpus.question_unit) rest.push_back(u);
            std::vector<std::vector<std::size_t>> unit_sets(N - 1);
            std::vector<long> load(N - 1, 0);
            assign_units_balanced(corpus, rest, unit_sets, load);
            for (int n = 0; n < N - 1; ++n) p.locals[n] = unit_tokens(corpus, unit_sets[n]);
            p.locals[N - 1] = unit_tokens(corpus, {corpus.question_unit});
            break;
        }
    }

    for (int n = 0; n < N; ++n)
        if (p.locals[n].empty())
            throw ConfigError("make_partition: strategy left participant " + std::to_string(n) +
                              " without tokens");

    p.assign.assign(L, -1);
    for (int n = 0; n < N; ++n)
        for (long g : p.locals[n]) p.assign[g] = n;
    p.validate();
    return p;
}

Mat gather(const Mat& global, const Partition& p, int n) {
    if (n < 0 || n >= p.N) throw ConfigError("gather: bad participant id");
    if (global.rows != p.L) throw ShapeError("gather: row count must equal L");
    return gather_rows(global, p.locals[n]);
}

Mat gather_rows(const Mat& global, const std::vector<long>& row_ids) {
    Mat out(static_cast<long>(row_ids.size()), global.cols);
    for (std::size_t i = 0; i < row_ids.size(); ++i) {
        const auto src = global.row(row_ids[i]);
        std::copy(src.begin(), src.end(), out.row(static_cast<long>(i)).begin());
    }
    return out;
}

Mat scatter(const std::vector<Mat>& locals, const Partition& p) {
    if (static_cast<int>(locals.size()) != p.N)
        throw ShapeError("scatter: one local matrix per participant required");
    long cols = 0;
    for (const auto& m : locals)
        if (m.rows > 0) cols = m.cols;
    Mat out(p.L, cols);
    long written = 0;
    for (int n = 0; n < p.N; ++n) {
        if (locals[n].rows != static_cast<long>(p.locals[n].size()))
            throw ShapeError("scatter: participant " + std::to_string(n) +
                             " row count does not match its index list");
        for (std::size_t i = 0; i < p.locals[n].size(); ++i) {
            const auto src = locals[n].row(static_cast<long>(i));
            std::copy(src.begin(), src.end(), out.row(p.locals[n][i]).begin());
            ++written;
        }
    }
    if (written != p.L) throw ShapeError("scatter: rows do not cover the global sequence");
    return out;
}

Mat scatter_rows(const std::vector<Mat>& locals, const std::vector<std::vector<long>>& positions,
                 long rows, long cols) {
    Mat out(rows, cols);
    for (std::size_t n = 0; n < locals.size(); ++n) {
        if (locals[n].rows != static_cast<long>(positions[n].size()))
            throw ShapeError("scatter_rows: row count mismatch");
        for (std::size_t i = 0; i < positions[n].size(); ++i) {
            const auto src = locals[n].row(static_cast<long>(i));
            std::copy(src.begin(), src.end(), out.row(positions[n][i]).begin());
        }
    }
    return out;
}

SyntheticCorpus gen_corpus(int shots, long unit_len_min, long unit_len_max, long vocab,
                           std::uint64_t seed) {
    if (shots < 1) throw ConfigError("gen_corpus: shots must be >= 1");
    if (unit_len_min < 1 || unit_len_max < unit_len_min)
        throw ConfigError("gen_corpus: bad unit length range");
    if (vocab < 1) throw ConfigError("gen_corpus: vocab must be >= 1");
    SyntheticCorpus c;
    c.shots = shots;
    Rng rng(derive_seed(seed, 0x636f7270ULL));  // "corp"
    long pos = 0;
    const int n_units = shots + 1;
    for (int u = 0; u < n_units; ++u) {
        const long span = unit_len_max == unit_len_min
                              ? unit_len_min
                              : unit_len_min + static_cast<long>(rng.next_below(
                                                    unit_len_max - unit_len_min + 1));
        c.units.emplace_back(pos, pos + span);
        for (long i = 0; i < span; ++i)
            c.tokens.push_back(static_cast<int>(rng.next_below(vocab)));
        pos += span;
    }
    c.question_unit = static_cast<std::size_t>(n_units - 1);
    return c;
}

}  // namespace fedattn
