#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "fedattn/cost.hpp"
#include "fedattn/error.hpp"
#include "fedattn/oracle.hpp"
#include "fedattn/protocol.hpp"
#include "fedattn/rng.hpp"
#include "naive_ref.hpp"

using namespace fedattn;

namespace {

struct Setup {
    ModelWeights weights;
    SyntheticCorpus corpus;
    Partition partition;
    std::vector<Mat> embeds;
};

Setup make_setup(long d, long d_ff, long M, int shots, long unit_len, int N,
                 SegStrategy strategy, std::uint64_t seed) {
    Setup s;
    ModelConfig cfg;
    cfg.d = d;
    cfg.d_ff = d_ff;
    cfg.M = M;
    cfg.vocab = 32;
    cfg.seed = derive_seed(seed, 1);
    s.weights = init_weights(cfg);
    s.corpus = gen_corpus(shots, unit_len, unit_len, cfg.vocab, seed);
    s.partition = make_partition(s.corpus, N, strategy);
    s.embeds = make_local_embeds(s.corpus, s.partition, s.weights);
    return s;
}

Mat global_embeds(const Setup& s) {
    std::vector<long> all(s.corpus.length());
    std::iota(all.begin(), all.end(), 0L);
    return embed_tokens(s.corpus.tokens, all, s.weights);
}

Partition single_owner(long L) {
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

}  // namespace

TEST_CASE("every-block sync reproduces the centralized forward exactly") {
    for (std::uint64_t seed : {3u, 4u, 5u}) {
        const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, seed);
        const RunTrace tr = run_fedattn(s.embeds, s.weights, s.partition,
                                        uniform_schedule(4, 1), FedOptions{});
        const CenTrace cen = run_cenattn(global_embeds(s), s.weights);
        CHECK(frob_dist(tr.states.back(), cen.states.back()) <= 1e-9);
        // The kernels are row-local, so the equality is exact, not just close.
        CHECK(tr.states.back() == cen.states.back());
    }
}

TEST_CASE("single participant equals centralized for any schedule") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 1, SegStrategy::TokSegQAg, 11);
    const CenTrace cen = run_cenattn(global_embeds(s), s.weights);
    for (int H : {1, 2, 4}) {
        const RunTrace tr = run_fedattn(s.embeds, s.weights, s.partition,
                                        uniform_schedule(4, H), FedOptions{});
        CHECK(tr.states.back() == cen.states.back());
    }
}

TEST_CASE("per-block states match the straight-line federated reference") {
    const Setup s = make_setup(4, 8, 4, 1, 3, 2, SegStrategy::TokSegQAg, 7);
    REQUIRE(s.corpus.length() == 6);
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), FedOptions{});
    const auto ref = naive::fed_states(s.embeds, s.weights, s.partition, 2);
    REQUIRE(tr.states.size() == ref.size());
    for (std::size_t m = 0; m < ref.size(); ++m)
        CHECK(frob_dist(tr.states[m], ref[m]) < 1e-9);
}

TEST_CASE("sparse local sampling obeys the size rule and is reproducible") {
    const Setup s = make_setup(4, 8, 2, 3, 8, 2, SegStrategy::TokSegQAg, 21);
    const auto full = sparse_sample_local(s.partition, 0, 1.0, 55);
    CHECK(full == s.partition.locals[0]);

    const auto one = sparse_sample_local(s.partition, 0, 1e-9, 55);
    CHECK(one.size() == 1);

    const auto half_a = sparse_sample_local(s.partition, 0, 0.5, 55);
    const auto half_b = sparse_sample_local(s.partition, 0, 0.5, 55);
    CHECK(half_a == half_b);
    CHECK(half_a.size() == 8);  // ceil(0.5 * 16)
    CHECK(std::is_sorted(half_a.begin(), half_a.end()));
    for (long g : half_a)
        CHECK(std::binary_search(s.partition.locals[0].begin(), s.partition.locals[0].end(), g));
}

TEST_CASE("sparse kv sampling is fresh per round but deterministic") {
    std::vector<long> owned(12);
    std::iota(owned.begin(), owned.end(), 100L);
    const auto r0 = sparse_sample_kv(owned, 0, 1, 0.5, 77);
    const auto r1 = sparse_sample_kv(owned, 1, 1, 0.5, 77);
    const auto r2 = sparse_sample_kv(owned, 2, 1, 0.5, 77);
    CHECK(r0.size() == 6);
    CHECK(r1.size() == 6);
    CHECK(r0 == sparse_sample_kv(owned, 0, 1, 0.5, 77));
    const bool all_same = r0 == r1 && r1 == r2;
    CHECK_FALSE(all_same);
}

TEST_CASE("dense kv ratio is bit-identical to the default run") {
    const Setup s = make_setup(8, 16, 4, 2, 5, 3, SegStrategy::SemSegQAg, 31);
    FedOptions dense;
    dense.seed = 9;
    FedOptions explicit_ratio = dense;
    explicit_ratio.kv_exchange_ratio = 1.0;
    explicit_ratio.local_token_ratio = 1.0;
    const RunTrace a =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), dense);
    const RunTrace b =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), explicit_ratio);
    CHECK(a.identical_to(b));
}

TEST_CASE("message accounting: broadcast conservation and all-to-all copies") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 41);

    FedOptions star;
    star.topology = Topology::Star;
    const RunTrace st =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), star);
    for (int n = 0; n < 3; ++n) {
        std::uint64_t others = 0;
        for (int n2 = 0; n2 < 3; ++n2)
            if (n2 != n) others += st.bits_sent[n2];
        CHECK(st.bits_received[n] == others);
    }

    FedOptions a2a;
    const RunTrace at = run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), a2a);
    for (int n = 0; n < 3; ++n) CHECK(at.bits_sent[n] == 2 * st.bits_sent[n]);
    CHECK(at.bits_received == st.bits_received);

    std::uint64_t log_bits = 0;
    for (const auto& round : at.rounds)
        for (const auto& msg : round.messages) log_bits += msg.payload_bits;
    std::uint64_t sent_total = 0;
    for (auto b : st.bits_sent) sent_total += b;
    CHECK(log_bits == sent_total);
}

TEST_CASE("trace is identical across engine thread counts") {
    const Setup s = make_setup(8, 16, 4, 3, 4, 4, SegStrategy::TokSegQEx, 51);
    FedOptions opts;
    opts.seed = 13;
    opts.kv_exchange_ratio = 0.5;
    FedOptions threaded = opts;
    threaded.threads = 4;
    const RunTrace a = run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), opts);
    const RunTrace b =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), threaded);
    CHECK(a.identical_to(b));
}

TEST_CASE("forced block-diagonal attention matches the cross-masked centralized run") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 61);
    FedOptions opts;
    opts.block_diagonal = true;
    for (int H : {1, 2, 4}) {
        const RunTrace tr =
            run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, H), opts);
        std::vector<int> owner(s.partition.L);
        for (long g = 0; g < s.partition.L; ++g) owner[g] = s.partition.assign[g];
        CenOptions co;
        co.block_diagonal = true;
        co.row_owner = &owner;
        const CenTrace cen = run_cenattn(global_embeds(s), s.weights, co);
        CHECK(frob_dist(tr.states.back(), cen.states.back()) <= 1e-9);
    }
}

TEST_CASE("empty schedule matches the local oracle bit-exactly") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::SemSegQEx, 71);
    SyncSchedule none;
    none.M = 4;
    const RunTrace tr = run_fedattn(s.embeds, s.weights, s.partition, none, FedOptions{});
    const LocTrace loc = run_locattn(s.embeds, s.weights, s.partition);
    for (int n = 0; n < s.partition.N; ++n) CHECK(tr.final_locals[n] == loc.final_locals[n]);
    std::uint64_t total = 0;
    for (auto b : tr.bits_sent) total += b;
    CHECK(total == 0);
    CHECK(tr.rounds.empty());
}

TEST_CASE("single final sync differs from local execution only at the last block") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 81);
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 4), FedOptions{});
    const LocTrace loc = run_locattn(s.embeds, s.weights, s.partition);
    for (int m = 0; m < 4; ++m) {  // states up to the input of block M match exactly
        std::vector<Mat> locals;
        for (int n = 0; n < s.partition.N; ++n) locals.push_back(loc.states[n][m]);
        CHECK(tr.states[m] == scatter(locals, s.partition));
    }
    std::vector<Mat> loc_final;
    for (int n = 0; n < s.partition.N; ++n) loc_final.push_back(loc.states[n][4]);
    CHECK(frob_dist(tr.states[4], scatter(loc_final, s.partition)) > 0.0);

    // With one participant the final global attention sees only local KVs,
    // so the two runs coincide.
    const Setup solo = make_setup(8, 16, 4, 2, 4, 1, SegStrategy::TokSegQAg, 82);
    const RunTrace tr1 = run_fedattn(solo.embeds, solo.weights, solo.partition,
                                     uniform_schedule(4, 4), FedOptions{});
    const LocTrace loc1 = run_locattn(solo.embeds, solo.weights, solo.partition);
    CHECK(tr1.final_locals[0] == loc1.final_locals[0]);
}

TEST_CASE("publisher schedule override: denser sync for one participant") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 91);
    FedOptions opts;
    opts.per_participant_schedules[s.partition.publisher] = uniform_schedule(4, 1);
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 4), opts);
    CHECK(tr.union_sync_blocks == std::vector<int>{1, 2, 3, 4});
    for (const auto& round : tr.rounds) {
        std::set<int> senders;
        for (const auto& msg : round.messages) senders.insert(msg.sender);
        if (round.block == 4) {
            CHECK(senders.size() == 3);  // everyone's own schedule includes block M
        } else {
            CHECK(senders == std::set<int>{s.partition.publisher});
        }
    }
    // Blocks where only the publisher transmits still leave everyone
    // consuming an aggregate; the publisher's cache there covers its own
    // tokens only, while block 4 holds the global view.
    CHECK(tr.caches[0].globals == tr.eff_locals[s.partition.publisher]);
    CHECK(tr.caches[3].globals == tr.eff_globals);

    // With the publisher holding the trailing tokens, causal masking hides
    // its extra transmissions from everyone, so the trajectory matches the
    // base run until the full sync at block 4.
    const RunTrace base =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 4), FedOptions{});
    CHECK(tr.states[3] == base.states[3]);
}

TEST_CASE("publisher override is visible when the publisher holds early tokens") {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.d_ff = 16;
    cfg.M = 4;
    cfg.vocab = 32;
    cfg.seed = 92;
    const ModelWeights w = init_weights(cfg);
    // Hand-built layout: the publisher (participant 1) owns the FIRST half
    // of the sequence, so its transmissions are causally visible to the
    // other participant.
    Partition p;
    p.L = 12;
    p.N = 2;
    p.publisher = 1;
    p.locals = {{6, 7, 8, 9, 10, 11}, {0, 1, 2, 3, 4, 5}};
    p.assign = {1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    p.validate();
    const SyntheticCorpus corpus = gen_corpus(2, 4, 4, cfg.vocab, 93);
    REQUIRE(corpus.length() == 12);
    const auto embeds = make_local_embeds(corpus, p, w);

    FedOptions opts;
    opts.per_participant_schedules[1] = uniform_schedule(4, 1);
    const RunTrace tr = run_fedattn(embeds, w, p, uniform_schedule(4, 4), opts);
    const RunTrace base = run_fedattn(embeds, w, p, uniform_schedule(4, 4), FedOptions{});
    // Participant 0's rows change right after the first publisher-only sync.
    const Mat with_override = gather_rows(tr.states[1], tr.eff_positions[0]);
    const Mat without = gather_rows(base.states[1], base.eff_positions[0]);
    CHECK(frob_dist(with_override, without) > 0.0);
}

TEST_CASE("participants absent from a round are excluded from the aggregate") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 101);
    FedOptions opts;
    // Participant 0 never transmits: its schedule is empty.
    SyncSchedule empty;
    empty.M = 4;
    opts.per_participant_schedules[0] = empty;
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), opts);
    for (const auto& round : tr.rounds) {
        for (const auto& msg : round.messages) CHECK(msg.sender != 0);
        for (long g : round.agg_globals) CHECK(s.partition.assign[g] != 0);
    }
    // The publisher's cached view at sync blocks misses participant 0's rows.
    for (long g : tr.caches[1].globals)
        CHECK((s.partition.assign[g] != 0 || s.partition.publisher == 0));
}

TEST_CASE("decode basics and centralized agreement at H=1") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 111);
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 1), FedOptions{});
    CHECK(decode_greedy(tr, s.weights, s.partition, 0).tokens.empty());

    const Partition solo = single_owner(s.corpus.length());
    const auto cen_embeds = make_local_embeds(s.corpus, solo, s.weights);
    const RunTrace cen =
        run_fedattn(cen_embeds, s.weights, solo, uniform_schedule(4, 1), FedOptions{});

    const DecodeResult fed_dec = decode_greedy(tr, s.weights, s.partition, 8);
    const DecodeResult cen_dec = decode_greedy(cen, s.weights, solo, 8);
    CHECK(fed_dec.tokens == cen_dec.tokens);
}

TEST_CASE("cached decoding matches the no-cache recompute oracle") {
    const Setup s = make_setup(4, 8, 2, 1, 2, 1, SegStrategy::TokSegQAg, 121);
    REQUIRE(s.corpus.length() == 4);
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(2, 1), FedOptions{});
    const int steps = 6;
    const DecodeResult dec = decode_greedy(tr, s.weights, s.partition, steps);

    // Recompute each step without caches: full forward over prompt plus all
    // generated tokens so far, then unembed the last row.
    std::vector<int> ids = s.corpus.tokens;
    for (int step = 0; step < steps; ++step) {
        std::vector<long> pos(ids.size());
        std::iota(pos.begin(), pos.end(), 0L);
        const Mat full = embed_tokens(ids, pos, s.weights);
        const Mat final_state = naive::forward(full, s.weights);
        Mat last(1, 4);
        for (long j = 0; j < 4; ++j) last.at(0, j) = final_state.at(full.rows - 1, j);
        const Mat logits = matmul_nt(last, s.weights.embed);
        int best = 0;
        double best_gap = 1e300;
        for (long j = 1; j < logits.cols; ++j) {
            if (logits.at(0, j) > logits.at(0, best)) best = static_cast<int>(j);
        }
        for (long j = 0; j < logits.cols; ++j)
            if (j != best)
                best_gap = std::min(best_gap, logits.at(0, best) - logits.at(0, j));
        // Avoid flaking on a near-tie between the two evaluation paths.
        REQUIRE(best_gap > 1e-7);
        CHECK(best == dec.tokens[step]);
        ids.push_back(dec.tokens[step]);
    }
}

TEST_CASE("kv message dump round trip") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 3, SegStrategy::TokSegQAg, 131);
    FedOptions opts;
    opts.kv_exchange_ratio = 0.5;
    opts.seed = 3;
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), opts);
    const auto path = std::filesystem::temp_directory_path() / "fedattn_msgs.bin";
    dump_messages(tr, path.string());
    const auto msgs = load_messages(path.string());
    std::size_t expected = 0;
    for (const auto& round : tr.rounds) expected += round.messages.size();
    REQUIRE(msgs.size() == expected);
    std::size_t idx = 0;
    for (const auto& round : tr.rounds) {
        for (const auto& msg : round.messages) {
            CHECK(msgs[idx].sender == msg.sender);
            CHECK(msgs[idx].round == msg.round);
            CHECK(msgs[idx].block == msg.block);
            CHECK(msgs[idx].wire_bits == tr.options.wire_bits);
            CHECK(msgs[idx].token_globals == msg.token_globals);
            REQUIRE(msgs[idx].k_payload.same_shape(msg.k_payload));
            for (std::size_t i = 0; i < msg.k_payload.data.size(); ++i)
                CHECK(msgs[idx].k_payload.data[i] ==
                      doctest::Approx(msg.k_payload.data[i]).epsilon(1e-6));
            ++idx;
        }
    }
    std::filesystem::remove(path);
}

TEST_CASE("trace summary json carries the accounting fields") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 2, SegStrategy::TokSegQAg, 141);
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), FedOptions{});
    const auto j = nlohmann::json::parse(tr.summary_json());
    CHECK(j["L"] == s.corpus.length());
    CHECK(j["N"] == 2);
    CHECK(j["rounds"] == 2);
    CHECK(j["bits_sent"].size() == 2);
    CHECK(j["sync_blocks"] == std::vector<int>{2, 4});
}

TEST_CASE("bidirectional mode lets information flow backwards") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 2, SegStrategy::TokSegQAg, 161);
    FedOptions opts;
    opts.bidirectional = true;
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 1), opts);
    CenOptions co;
    co.bidirectional = true;
    const CenTrace cen = run_cenattn(global_embeds(s), s.weights, co);
    CHECK(tr.states.back() == cen.states.back());

    // Perturbing the last token now changes the first row's output, which
    // the causal mode forbids. The perturbation must not be a constant row
    // shift, or layer norm would swallow it.
    Mat perturbed = global_embeds(s);
    perturbed.at(perturbed.rows - 1, 0) += 0.5;
    perturbed.at(perturbed.rows - 1, 1) -= 0.5;
    const CenTrace cen2 = run_cenattn(perturbed, s.weights, co);
    double first_row_gap = 0.0;
    for (long j = 0; j < 8; ++j)
        first_row_gap += std::abs(cen.states.back().at(0, j) - cen2.states.back().at(0, j));
    CHECK(first_row_gap > 0.0);
}

TEST_CASE("sparse local sampling drops tokens for the whole run") {
    const Setup s = make_setup(8, 16, 4, 2, 6, 2, SegStrategy::TokSegQAg, 171);
    FedOptions opts;
    opts.local_token_ratio = 0.5;
    opts.seed = 23;
    const RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), opts);
    CHECK(tr.eff_len() == 10);  // ceil(0.5 * 9) survivors per participant
    for (int n = 0; n < 2; ++n) {
        CHECK(tr.eff_locals[n] == sparse_sample_local(s.partition, n, 0.5, 23));
        CHECK(tr.eff_locals[n].size() < s.partition.locals[n].size());
    }
    // Surviving rows line up with the original embeddings.
    for (int n = 0; n < 2; ++n) {
        const auto& owned = s.partition.locals[n];
        for (std::size_t i = 0; i < tr.eff_locals[n].size(); ++i) {
            const long g = tr.eff_locals[n][i];
            const long src = std::lower_bound(owned.begin(), owned.end(), g) - owned.begin();
            for (long c = 0; c < 8; ++c)
                CHECK(tr.states[0].at(tr.eff_positions[n][i], c) ==
                      s.embeds[n].at(src, c));
        }
    }
}

TEST_CASE("engine rejects inconsistent inputs") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 2, SegStrategy::TokSegQAg, 151);
    CHECK_THROWS_AS(run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(8, 2),
                                FedOptions{}),
                    ConfigError);
    auto bad = s.embeds;
    bad[0] = Mat(1, 8);
    CHECK_THROWS_AS(run_fedattn(bad, s.weights, s.partition, uniform_schedule(4, 2), FedOptions{}),
                    ShapeError);
    FedOptions opts;
    opts.local_token_ratio = 0.0;
    CHECK_THROWS_AS(
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), opts),
        ConfigError);
    FedOptions bad_wire;
    bad_wire.wire_bits = 0;
    CHECK_THROWS_AS(
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), bad_wire),
        ConfigError);
}

TEST_CASE("decode rejects a trace without caches") {
    const Setup s = make_setup(8, 16, 4, 2, 4, 2, SegStrategy::TokSegQAg, 181);
    RunTrace tr =
        run_fedattn(s.embeds, s.weights, s.partition, uniform_schedule(4, 2), FedOptions{});
    tr.caches.clear();
    CHECK_THROWS_AS(decode_greedy(tr, s.weights, s.partition, 4), ConfigError);
}
