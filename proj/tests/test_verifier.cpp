#include "oracles.hpp"
#include "stress.hpp"
#include "pipeinfer/verifier.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace pipeinfer;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 16;
    c.embed_dim = 8;
    c.n_layers = 2;
    c.max_context = 64;
    c.seed = 4;
    return c;
}

// Run [context.back(), drafts...] evaluated on top of context[0..n-1).
struct Evaluated {
    RunRecord record;
    LogitsSet logits;
};

Evaluated evaluate_run(const LayeredModel& m, const KVCache& base, const std::vector<Token>& context,
                       const std::vector<Token>& drafts) {
    std::vector<Token> ids = {context.back()};
    ids.insert(ids.end(), drafts.begin(), drafts.end());
    Batch b = make_chain_batch(ids, static_cast<Pos>(context.size() - 1), SeqSet{1}, RunKind::speculative, 9);
    KVCache cache = base;
    Activations a = eval_layers(m, 0, m.n_layers(), nullptr, b, cache);
    return {make_record(b, 1), logits(m, a, b)};
}

struct Recorder : CacheCommandSink {
    std::vector<std::string> log;
    void cache_copy(SeqId src, SeqSet dst, Pos end) override {
        log.push_back("copy " + std::to_string(src) + "->" + std::to_string(dst.bits()) + " <" + std::to_string(end));
    }
    void cache_remove(SeqId seq, Pos from) override {
        log.push_back("remove " + std::to_string(seq) + " >=" + std::to_string(from));
    }
    void release_sequence(SeqId seq) override { log.push_back("release " + std::to_string(seq)); }
};

RunRecord record_at(Pos min_pos, std::vector<Token> tokens, SeqId seq = 1) {
    Batch b = make_chain_batch(tokens, min_pos, SeqSet{seq}, RunKind::speculative, 1);
    return make_record(b, seq);
}

} // namespace

TEST(VerifyRun, ExhaustiveAgainstSerialGreedy) {
    LayeredModel m(tiny_config());
    std::mt19937_64 rng(3);
    for (int ctx_trial = 0; ctx_trial < 3; ++ctx_trial) {
        std::vector<Token> context(3 + rng() % 4);
        for (auto& t : context) {
            t = static_cast<Token>(rng() % 16);
        }
        KVCache base(0, m.n_layers(), m.dim(), 64);
        std::vector<Token> head(context.begin(), context.end() - 1);
        eval_layers(m, 0, m.n_layers(), nullptr,
                    make_chain_batch(head, 0, SeqSet{0, 1}, RunKind::non_speculative, 0, false), base);
        const std::vector<Token> g = oracle::serial_greedy(m, context, 4);

        std::size_t checked = 0;
        for (std::size_t depth = 0; depth <= 3; ++depth) {
            std::size_t total = 1;
            for (std::size_t i = 0; i < depth; ++i) {
                total *= 16;
            }
            for (std::size_t code = 0; code < total; ++code) {
                std::vector<Token> d(depth);
                std::size_t c = code;
                for (auto& t : d) {
                    t = static_cast<Token>(c % 16);
                    c /= 16;
                }
                const Evaluated e = evaluate_run(m, base, context, d);
                const VerifyResult r = verify_run(e.record, e.logits, context);
                std::size_t k = 0;
                while (k < depth && d[k] == g[k]) {
                    ++k;
                }
                ASSERT_EQ(r.n_accepted, k);
                ASSERT_EQ(r.accepted, std::vector<Token>(d.begin(), d.begin() + static_cast<long>(k)));
                ASSERT_EQ(r.next_token, g[k]);
                ASSERT_EQ(r.next_pos, static_cast<Pos>(context.size() + k));
                ASSERT_EQ(r.n_matched, k + 1);
                ++checked;
            }
        }
        EXPECT_EQ(checked, 1U + 16U + 256U + 4096U);
    }
}

TEST(VerifyRun, FullAcceptanceYieldsLeafArgmax) {
    LayeredModel m(tiny_config());
    const std::vector<Token> context = {1, 2, 3};
    KVCache base(0, m.n_layers(), m.dim(), 64);
    eval_layers(m, 0, m.n_layers(), nullptr, make_chain_batch({1, 2}, 0, SeqSet{1}, RunKind::non_speculative, 0),
                base);
    const auto g = oracle::serial_greedy(m, context, 4);
    const Evaluated e = evaluate_run(m, base, context, {g[0], g[1], g[2]});
    const VerifyResult r = verify_run(e.record, e.logits, context);
    EXPECT_EQ(r.n_accepted, 3U);
    EXPECT_EQ(r.next_token, g[3]);
}

TEST(VerifyRun, FirstMismatchGivesBaseArgmax) {
    LayeredModel m(tiny_config());
    const std::vector<Token> context = {1, 2, 3};
    KVCache base(0, m.n_layers(), m.dim(), 64);
    eval_layers(m, 0, m.n_layers(), nullptr, make_chain_batch({1, 2}, 0, SeqSet{1}, RunKind::non_speculative, 0),
                base);
    const auto g = oracle::serial_greedy(m, context, 1);
    const Evaluated e = evaluate_run(m, base, context, {static_cast<Token>((g[0] + 1) % 16), 4});
    const VerifyResult r = verify_run(e.record, e.logits, context);
    EXPECT_EQ(r.n_accepted, 0U);
    EXPECT_EQ(r.next_token, g[0]);
}

TEST(VerifyRun, IndexMapMismatchThrows) {
    RunRecord r = record_at(0, {1, 2});
    LogitsSet l;
    l.token_index = {0};
    l.rows = {std::vector<double>(16, 0.0)};
    EXPECT_THROW(verify_run(r, l, std::vector<Token>{1}), ProtocolError);
}

TEST(VerifyRun, InvalidatedRunThrows) {
    RunRecord r = record_at(0, {1, 2});
    LogitsSet l;
    l.token_index = {0, 1};
    l.rows = {std::vector<double>(16, 0.0), std::vector<double>(16, 0.0)};
    EXPECT_THROW(verify_run(r, l, std::vector<Token>{5}), ProtocolError);
}

TEST(DetectStaleRuns, Superfluous) {
    RunRecord r = record_at(3, {1, 2, 3});
    ASSERT_EQ(r.max_pos, 5);
    const std::vector<Token> accepted(7, 0);
    EXPECT_EQ(classify_run(r, accepted), StaleReason::superfluous);
}

TEST(DetectStaleRuns, Invalidated) {
    RunRecord r = record_at(2, {9, 1});
    const std::vector<Token> accepted = {0, 0, 4};
    EXPECT_EQ(classify_run(r, accepted), StaleReason::invalidated);
}

TEST(DetectStaleRuns, InvalidatedThroughSpeculativePrefix) {
    RunRecord r = record_at(4, {7});
    r.prefix_start = 3;
    r.prefix = {5};
    EXPECT_EQ(classify_run(r, std::vector<Token>{0, 0, 0, 6}), StaleReason::invalidated);
    EXPECT_EQ(classify_run(r, std::vector<Token>{0, 0, 0, 5}), StaleReason::none);
}

TEST(DetectStaleRuns, RunExtendingTheTailIsKept) {
    const std::vector<Token> accepted = {0, 1, 2};
    EXPECT_EQ(classify_run(record_at(2, {2, 8, 9}), accepted), StaleReason::none);
    EXPECT_EQ(classify_run(record_at(3, {8, 9}), accepted), StaleReason::none);
}

TEST(DetectStaleRuns, SkipsFinishedRecords) {
    std::vector<RunRecord> fifo = {record_at(0, {9}), record_at(0, {9})};
    fifo[0].run_id = 1;
    fifo[1].run_id = 2;
    fifo[1].status = RunStatus::cancelled;
    const auto stale = detect_stale_runs(fifo, std::vector<Token>{0, 1, 2});
    ASSERT_EQ(stale.size(), 1U);
    EXPECT_EQ(stale[0].run_id, 1U);
}

TEST(ApplyAcceptance, FullAcceptanceCopiesWholeRunAndFrees) {
    Recorder rec;
    RunRecord r = record_at(10, {1, 2, 3, 4}, 3);
    VerifyResult v;
    v.n_matched = 4;
    bool rolled = false;
    apply_acceptance(v, r, SeqSet{3, 5}, rec, [&] { rolled = true; });
    EXPECT_EQ(rec.log, (std::vector<std::string>{"copy 3->" + std::to_string(SeqSet{0, 5}.bits()) + " <14",
                                                 "release 3"}));
    EXPECT_TRUE(rolled);
}

TEST(ApplyAcceptance, NothingAcceptedRemovesAndFrees) {
    Recorder rec;
    RunRecord r = record_at(10, {1, 2}, 3);
    VerifyResult v;
    apply_acceptance(v, r, SeqSet{3}, rec);
    EXPECT_EQ(rec.log, (std::vector<std::string>{"remove 3 >=10", "release 3"}));
}

TEST(ApplyAcceptance, CanonicalRunOnlyDropsRejected) {
    Recorder rec;
    RunRecord r = record_at(10, {1, 2, 3}, 0);
    VerifyResult v;
    v.n_matched = 2;
    apply_acceptance(v, r, SeqSet{}, rec);
    EXPECT_EQ(rec.log, (std::vector<std::string>{"remove 0 >=12"}));
}

TEST(ApplyAcceptance, CanonicalCacheMatchesRebuild) {
    LayeredModel m(tiny_config());
    const std::vector<Token> context = {3, 1, 4, 1, 5};
    const auto g = oracle::serial_greedy(m, context, 3);

    struct Apply : CacheCommandSink {
        KVCache* cache;
        SequenceAllocator* alloc;
        void cache_copy(SeqId src, SeqSet dst, Pos end) override { cache->copy(src, dst, end); }
        void cache_remove(SeqId seq, Pos from) override { cache->remove(seq, from); }
        void release_sequence(SeqId seq) override { free_sequence(*alloc, *cache, seq); }
    };
    KVCache cache(0, m.n_layers(), m.dim(), 64);
    SequenceAllocator alloc(4);
    const SeqId s = alloc.alloc();
    std::vector<Token> head(context.begin(), context.end() - 1);
    eval_layers(m, 0, m.n_layers(), nullptr, make_chain_batch(head, 0, SeqSet{0}, RunKind::non_speculative, 0, false),
                cache);
    cache.copy(0, SeqSet{s}, static_cast<Pos>(head.size()));
    std::vector<Token> ids = {context.back(), g[0], g[1], static_cast<Token>((g[2] + 1) % 16)};
    Batch b = make_chain_batch(ids, static_cast<Pos>(head.size()), SeqSet{s}, RunKind::speculative, 1);
    Activations a = eval_layers(m, 0, m.n_layers(), nullptr, b, cache);
    RunRecord r = make_record(b, s);
    VerifyResult v = verify_run(r, logits(m, a, b), context);
    ASSERT_EQ(v.n_accepted, 2U);
    Apply sink;
    sink.cache = &cache;
    sink.alloc = &alloc;
    apply_acceptance(v, r, alloc.live(), sink);

    std::vector<Token> accepted = context;
    accepted.insert(accepted.end(), v.accepted.begin(), v.accepted.end());
    EXPECT_EQ(cache.contiguous_end(0), static_cast<Pos>(accepted.size()));
    KVCache probe = cache;
    Batch q = make_chain_batch({7}, static_cast<Pos>(accepted.size()), SeqSet{0}, RunKind::non_speculative, 0);
    EXPECT_EQ(eval_layers(m, 0, m.n_layers(), nullptr, q, probe).data, oracle::fresh_attention(m, accepted, 7));
    EXPECT_FALSE(alloc.is_allocated(s));
}

TEST(VerifierStress, CancellationsAreProvablyStale) {
    std::size_t cancels = 0;
    for (std::uint64_t s = 0; s < 25; ++s) {
        const auto r = oracle::run_stress_case(500 + s);
        ASSERT_EQ(r.violations, 0U) << r.first_violation;
        cancels += r.cancels;
    }
    EXPECT_GT(cancels, 0U);
}
