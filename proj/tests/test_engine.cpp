#include "oracles.hpp"
#include "pipeinfer/engine.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace pipeinfer;

namespace {

constexpr Mode kModes[] = {Mode::iterative, Mode::pipeline_iterative, Mode::sync_speculative, Mode::pipeinfer};

EngineConfig base_config() {
    EngineConfig c;
    c.generate = 48;
    c.link.latency = 10e-6;
    return c;
}

const LayeredModel& target() {
    static const LayeredModel m(base_config().target);
    return m;
}

EngineConfig synthetic(double alpha, Mode mode = Mode::pipeinfer) {
    EngineConfig c = base_config();
    c.mode = mode;
    c.draft_kind = DraftKind::synthetic;
    c.alpha = alpha;
    return c;
}

} // namespace

TEST(Engine, AllModesMatchSerialGreedyDecode) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto prompt = make_prompt(seed, 32, 256);
        const auto expected = oracle::serial_greedy(target(), prompt, 48);
        for (Mode m : kModes) {
            EngineConfig c = base_config();
            c.draft_seed = seed;
            EXPECT_EQ(run_baseline(m, target(), c, prompt).tokens, expected) << to_string(m) << " seed " << seed;
        }
    }
}

TEST(Engine, SyntheticDraftModesMatchSerialGreedyDecode) {
    const auto prompt = make_prompt(9, 24, 256);
    const auto expected = oracle::serial_greedy(target(), prompt, 48);
    for (double a : {0.3, 0.8}) {
        for (Mode m : {Mode::sync_speculative, Mode::pipeinfer}) {
            EXPECT_EQ(run_engine(target(), synthetic(a, m), prompt).tokens, expected) << to_string(m) << " " << a;
        }
    }
}

TEST(Engine, AlphaZeroEqualsIterative) {
    const auto prompt = make_prompt(4, 24, 256);
    EngineConfig c = synthetic(0.0);
    c.spec.tau = 0.0;
    const auto r = run_engine(target(), c, prompt);
    EXPECT_EQ(r.tokens, run_baseline(Mode::iterative, target(), c, prompt).tokens);
    EXPECT_EQ(r.metrics.spec_accepted, 0U);
    EXPECT_GT(r.metrics.spec_runs, 0U);
}

TEST(Engine, PerfectDraftHasNoRejectionsOrCancellations) {
    const auto prompt = make_prompt(5, 24, 256);
    EngineConfig c = synthetic(1.0);
    c.spec.tau = 0.0;
    const auto r = run_engine(target(), c, prompt);
    EXPECT_EQ(r.tokens, run_baseline(Mode::iterative, target(), c, prompt).tokens);
    EXPECT_DOUBLE_EQ(r.metrics.acceptance_rate, 1.0);
    EXPECT_EQ(r.metrics.spec_compared, r.metrics.spec_accepted);
    // Bonus-token runs can be overtaken by verified speculation and become
    // superfluous; no speculative run is ever cancelled before the end.
    EXPECT_EQ(r.metrics.cancelled_invalid, 0U);
    for (const auto& ce : r.cancels) {
        if (ce.reason != StaleReason::finished) {
            EXPECT_EQ(ce.record.kind, RunKind::non_speculative);
        }
    }
}

TEST(Engine, FirstRunIsNonSpeculativeOnCanonicalSequence) {
    const auto prompt = make_prompt(6, 16, 256);
    const auto r = run_engine(target(), synthetic(0.8), prompt);
    ASSERT_FALSE(r.verifications.empty());
    const auto& first = r.verifications.front().record;
    EXPECT_EQ(first.kind, RunKind::non_speculative);
    EXPECT_EQ(first.seq, kCanonicalSeq);
    EXPECT_EQ(first.tokens.size(), 1U);
    EXPECT_EQ(first.min_pos, static_cast<Pos>(prompt.size()));
    bool saw_spec = false;
    for (const auto& v : r.verifications) {
        if (v.record.kind == RunKind::speculative) {
            saw_spec = true;
            EXPECT_NE(v.record.seq, kCanonicalSeq);
            EXPECT_LE(v.record.tokens.size(), 4U);
        }
    }
    EXPECT_TRUE(saw_spec);
}

TEST(Engine, RunsFinishInStartOrderAndExactlyOnce) {
    const auto prompt = make_prompt(7, 16, 256);
    const auto r = run_engine(target(), synthetic(0.6), prompt);
    RunId last = 0;
    std::set<RunId> done;
    for (const auto& v : r.verifications) {
        EXPECT_GT(v.record.run_id, last);
        last = v.record.run_id;
        EXPECT_TRUE(done.insert(v.record.run_id).second);
    }
    for (const auto& ce : r.cancels) {
        EXPECT_TRUE(done.insert(ce.record.run_id).second);
    }
    EXPECT_EQ(done.size(), r.runs_started);
    EXPECT_EQ(r.metrics.runs_started, r.runs_started);
}

TEST(Engine, EveryStageSeesEveryRunIncludingPlaceholders) {
    const auto prompt = make_prompt(8, 16, 256);
    const auto r = run_engine(target(), synthetic(0.5), prompt);
    ASSERT_EQ(r.activations_seen.size(), 7U);
    for (auto n : r.activations_seen) {
        EXPECT_EQ(n, r.runs_started);
    }
    EXPECT_GT(r.metrics.cancelled_runs, 0U);
}

TEST(Engine, EarlyCancellationSkipsLayers) {
    const auto prompt = make_prompt(8, 16, 256);
    const auto on = run_engine(target(), synthetic(0.5), prompt);
    EngineConfig off_cfg = synthetic(0.5);
    off_cfg.early_cancel = false;
    const auto off = run_engine(target(), off_cfg, prompt);
    EXPECT_GT(on.metrics.layers_skipped, 0U);
    EXPECT_EQ(off.metrics.layers_skipped, 0U);
    EXPECT_EQ(on.tokens, off.tokens);
    EXPECT_EQ(on.metrics.traffic.messages_of(Tag::Cancel) > 0, true);
    EXPECT_EQ(off.metrics.traffic.messages_of(Tag::Cancel), 0U);
}

TEST(Engine, NonSpeculativeRunsAreNeverSkipped) {
    const auto prompt = make_prompt(3, 16, 256);
    const auto r = run_engine(target(), synthetic(0.5), prompt);
    for (const auto& ce : r.cancels) {
        if (ce.record.kind == RunKind::non_speculative) {
            SUCCEED();
        }
    }
    std::size_t nonspec = 0;
    for (const auto& v : r.verifications) {
        nonspec += v.record.kind == RunKind::non_speculative ? 1 : 0;
    }
    EXPECT_GT(nonspec, 0U);
}

TEST(Engine, PartitionExhaustionStallsSpeculation) {
    const auto prompt = make_prompt(2, 16, 256);
    EngineConfig c = synthetic(1.0);
    c.partitions = 2;
    const auto r = run_engine(target(), c, prompt);
    EXPECT_GT(r.metrics.partition_stalls, 0U);
    EXPECT_EQ(r.tokens, oracle::serial_greedy(target(), prompt, 48));
}

TEST(Engine, EndOfGenerationTokenStopsEveryMode) {
    const auto prompt = make_prompt(1, 16, 256);
    const auto full = oracle::serial_greedy(target(), prompt, 48);
    const Token eos = full[20];
    std::size_t first = 0;
    while (full[first] != eos) {
        ++first;
    }
    const std::vector<Token> expected(full.begin(), full.begin() + static_cast<long>(first) + 1);
    for (Mode m : kModes) {
        EngineConfig c = synthetic(0.7, m);
        c.eos = eos;
        EXPECT_EQ(run_engine(target(), c, prompt).tokens, expected) << to_string(m);
    }
}

TEST(Engine, SyncSpeculationDelaysFirstToken) {
    const auto prompt = make_prompt(1, 16, 256);
    const auto it = run_engine(target(), synthetic(0.8, Mode::iterative), prompt);
    const auto sync = run_engine(target(), synthetic(0.8, Mode::sync_speculative), prompt);
    EXPECT_GT(sync.metrics.ttft, it.metrics.ttft);
}

TEST(Engine, PipeInferKeepsMoreRunsInFlightThanSync) {
    const auto prompt = make_prompt(1, 32, 256);
    const auto pi = run_engine(target(), synthetic(0.8), prompt);
    const auto sync = run_engine(target(), synthetic(0.8, Mode::sync_speculative), prompt);
    EXPECT_GT(pi.metrics.inflight_mean, sync.metrics.inflight_mean);
}

TEST(Engine, HeterogeneousNodesKeepOutput) {
    const auto prompt = make_prompt(2, 16, 256);
    EngineConfig c = synthetic(0.8);
    c.timing.node_speed = {2.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.5, 1.0};
    EXPECT_EQ(run_engine(target(), c, prompt).tokens, oracle::serial_greedy(target(), prompt, 48));
}

TEST(Engine, JitteredLinksKeepOutput) {
    const auto prompt = make_prompt(2, 16, 256);
    EngineConfig c = synthetic(0.6);
    c.link.jitter = 200e-6;
    c.link.jitter_seed = 77;
    c.link.per_byte = 1e-8;
    EXPECT_EQ(run_engine(target(), c, prompt).tokens, oracle::serial_greedy(target(), prompt, 48));
}

TEST(Engine, DeterministicTrace) {
    const auto prompt = make_prompt(2, 16, 256);
    EngineConfig c = synthetic(0.6);
    c.link.jitter = 50e-6;
    const auto a = run_engine(target(), c, prompt);
    const auto b = run_engine(target(), c, prompt);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.accept_times, b.accept_times);
    EXPECT_EQ(a.events, b.events);
    EXPECT_EQ(a.metrics.cancelled_runs, b.metrics.cancelled_runs);
}

TEST(Engine, MetricsFollowAcceptTimes) {
    const auto prompt = make_prompt(2, 16, 256);
    const auto r = run_engine(target(), synthetic(0.8), prompt);
    ASSERT_EQ(r.accept_times.size(), 48U);
    EXPECT_DOUBLE_EQ(r.metrics.ttft, r.accept_times[1] - r.accept_times[0]);
    EXPECT_NEAR(r.metrics.generation_speed, 47.0 / (r.accept_times.back() - r.accept_times.front()), 1e-9);
    EXPECT_EQ(r.metrics.checksum, token_checksum(r.tokens));
}

TEST(Engine, ConfigValidation) {
    const auto prompt = make_prompt(2, 16, 256);
    EngineConfig c = base_config();
    c.n_nodes = 1;
    EXPECT_THROW(run_engine(target(), c, prompt), ConfigError);
    c = base_config();
    c.timing.node_speed = {1.0, 2.0};
    EXPECT_THROW(run_engine(target(), c, prompt), ConfigError);
    c = base_config();
    c.generate = 2000;
    EXPECT_THROW(run_engine(target(), c, prompt), ConfigError);
    c = base_config();
    c.target.n_layers = 6;
    EXPECT_THROW(run_engine(target(), c, prompt), ConfigError);
    EXPECT_EQ(parse_mode("pipeline-iterative"), Mode::pipeline_iterative);
    EXPECT_THROW(parse_mode("fast"), ConfigError);
}
