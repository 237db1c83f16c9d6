#pragma once

// Pipeline orchestration on a virtual clock.
//
// Target-model stages run on nodes 0..S-1; node 0 is the head and also owns
// the first layer range. In PipeInfer mode one extra node runs the draft model
// and nothing else. Every stage keeps its own KVCache and receives cache
// commands as pipelined transactions, so a command executes at each node
// exactly between the runs it was issued between.
//
// Four modes share the same stages:
//   iterative            one node, one token per pass
//   pipeline_iterative   one token per full pipeline pass
//   sync_speculative     draft a chain of up to four tokens, verify, repeat
//   pipeinfer            continuous asynchronous speculation with KV-cache
//                        multibuffering and early inference cancellation

#include "pipeinfer/batch.hpp"
#include "pipeinfer/kv_cache.hpp"
#include "pipeinfer/model.hpp"
#include "pipeinfer/plan.hpp"
#include "pipeinfer/run_record.hpp"
#include "pipeinfer/sim.hpp"
#include "pipeinfer/speculation.hpp"
#include "pipeinfer/transport.hpp"
#include "pipeinfer/verifier.hpp"

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace pipeinfer {

enum class Mode { iterative, pipeline_iterative, sync_speculative, pipeinfer };

inline const char* to_string(Mode m) {
    switch (m) {
    case Mode::iterative:
        return "iterative";
    case Mode::pipeline_iterative:
        return "pipeline-iterative";
    case Mode::sync_speculative:
        return "sync-speculative";
    case Mode::pipeinfer:
        return "pipeinfer";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    for (Mode m : {Mode::iterative, Mode::pipeline_iterative, Mode::sync_speculative, Mode::pipeinfer}) {
        if (s == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown mode: " + s);
}

enum class DraftKind { toy, synthetic };

struct TimingProfile {
    double layer_delay = 1e-3;       // seconds per layer for a one-token batch
    double batch_token_cost = 0.25;  // each extra batch token adds this fraction
    double draft_delay = 0.5e-3;     // seconds per draft token evaluated
    std::vector<double> node_speed;  // per-node compute multipliers, empty = 1
    int sync_points = 8;             // cancellation probes per layer

    void validate() const {
        if (!(layer_delay >= 0.0) || !(batch_token_cost >= 0.0) || !(draft_delay >= 0.0)) {
            throw ConfigError("timing delays must be >= 0");
        }
        if (sync_points < 1) {
            throw ConfigError("sync_points must be >= 1");
        }
        for (double s : node_speed) {
            if (!(s > 0.0)) {
                throw ConfigError("node speeds must be positive");
            }
        }
    }
};

struct EngineConfig {
    Mode mode = Mode::pipeinfer;
    int n_nodes = 8;
    ModelConfig target{256, 64, 12, 1, 1024, 1, 4.0};
    ModelConfig draft{256, 32, 2, 1, 1024, 2, 4.0};
    DraftKind draft_kind = DraftKind::toy;
    double alpha = 0.8;
    std::uint64_t draft_seed = 3;
    SpeculationParams spec;
    bool continuous = true;
    bool early_cancel = true;
    int partitions = 8;
    LinkProfile link;
    TimingProfile timing;
    std::size_t generate = 512;
    Token eos = -1;
    bool wall_clock_metrics = false;

    int target_stages() const {
        switch (mode) {
        case Mode::iterative:
            return 1;
        case Mode::pipeinfer:
            return n_nodes - 1;
        default:
            return n_nodes;
        }
    }

    void validate(std::size_t prompt_len) const {
        target.validate();
        spec.validate();
        link.validate();
        timing.validate();
        if (draft_kind == DraftKind::toy) {
            draft.validate();
            if (draft.vocab_size != target.vocab_size) {
                throw ConfigError("draft and target vocabularies differ");
            }
        }
        if (mode == Mode::pipeinfer && n_nodes < 2) {
            throw ConfigError("pipeinfer needs at least two nodes (one is the draft node)");
        }
        if (n_nodes < 1) {
            throw ConfigError("need at least one node");
        }
        if (!timing.node_speed.empty() && timing.node_speed.size() != static_cast<std::size_t>(n_nodes)) {
            throw ConfigError("node_speed needs one entry per node");
        }
        if (partitions < 2 || partitions > kMaxSequences) {
            throw ConfigError("partitions must be in [2, 64]");
        }
        if (generate < 1) {
            throw ConfigError("generation length must be >= 1");
        }
        if (prompt_len < 1) {
            throw ConfigError("prompt must not be empty");
        }
        const std::size_t lookahead = static_cast<std::size_t>(partitions) * 4 + 2;
        const auto ctx = static_cast<std::size_t>(std::min(target.max_context, draft.max_context));
        if (prompt_len + generate + lookahead > ctx) {
            throw ConfigError("prompt + generation exceeds max_context");
        }
    }
};

struct CancelEvent {
    RunRecord record;
    StaleReason reason = StaleReason::none;
    std::size_t accepted_len = 0; // accepted tokens (prompt included) at detection
};

struct VerifyEvent {
    RunRecord record;
    VerifyResult result;
    std::size_t accepted_len = 0; // before this verification
};

struct EngineMetrics {
    double generation_speed = 0.0; // accepted tokens per second after the first
    double ttft = 0.0;
    double itl = 0.0;
    double total_time = 0.0;
    double acceptance_rate = 0.0;
    std::size_t spec_compared = 0;
    std::size_t spec_accepted = 0;
    std::size_t runs_started = 0;
    std::size_t spec_runs = 0;
    std::size_t cancelled_runs = 0;
    std::size_t cancelled_invalid = 0;
    std::size_t cancelled_superfluous = 0;
    std::size_t partition_stalls = 0;
    std::size_t layers_skipped = 0;
    double inflight_mean = 0.0;
    TagCounters traffic;
    std::uint64_t checksum = 0;
};

struct EngineResult {
    std::vector<Token> tokens; // generated tokens, prompt excluded
    std::vector<double> accept_times; // per generated token
    EngineMetrics metrics;
    std::vector<CancelEvent> cancels;
    std::vector<VerifyEvent> verifications;
    std::vector<std::uint64_t> activations_seen; // per target stage, full + placeholder
    std::size_t runs_started = 0;
    std::uint64_t events = 0;
};

class Engine : private CacheCommandSink {
public:
    Engine(const LayeredModel& target, EngineConfig config) : target_(target), cfg_(std::move(config)) {}

    EngineResult run(const std::vector<Token>& prompt) {
        cfg_.validate(prompt.size());
        if (target_.config().vocab_size != cfg_.target.vocab_size || target_.n_layers() != cfg_.target.n_layers) {
            throw ConfigError("engine config does not match the target model");
        }
        setup(prompt);
        prefill(prompt);
        wall_start_ = std::chrono::steady_clock::now();
        events_.at(0.0, [this] { head_wake(); });
        events_.run();
        if (!finished_) {
            throw ProtocolError("simulation stalled before generation finished");
        }
        return collect(prompt.size());
    }

private:
    struct Stage {
        LayerRange layers;
        std::unique_ptr<KVCache> cache;
        std::map<RunId, Batch> configs;
        std::set<RunId> cancelled;
        std::optional<std::pair<NodeId, Tag>> pending; // started transaction awaiting its body
        std::deque<Message> local; // head stage only: transactions from the control context
        bool busy = false;
        bool shut = false;
        std::uint64_t activations = 0;
    };

    struct DraftJob {
        Speculation spec;
        std::vector<Token> based_on;
        double ready_at = 0.0;
    };

    // ---- setup -----------------------------------------------------------

    void setup(const std::vector<Token>& prompt) {
        const int stages = cfg_.target_stages();
        std::vector<double> weights;
        if (!cfg_.timing.node_speed.empty()) {
            weights.assign(cfg_.timing.node_speed.begin(), cfg_.timing.node_speed.begin() + stages);
        }
        plan_ = plan_layer_split(target_.n_layers(), stages, weights);
        plan_.dedicated_draft_node = cfg_.mode == Mode::pipeinfer;

        stages_.clear();
        for (const auto& r : plan_.stages) {
            Stage s;
            s.layers = r;
            s.cache = std::make_unique<KVCache>(r.begin, r.size(), target_.dim(), target_.config().max_context);
            stages_.push_back(std::move(s));
        }
        transport_ = std::make_unique<VirtualTransport>(events_, plan_.n_nodes(), cfg_.link, [this](NodeId n) {
            if (n == 0) {
                head_wake();
            } else if (n < plan_.n_stages()) {
                stage_wake(n);
            }
        });
        alloc_ = std::make_unique<SequenceAllocator>(cfg_.partitions);

        if (cfg_.mode == Mode::pipeinfer || cfg_.mode == Mode::sync_speculative) {
            if (cfg_.draft_kind == DraftKind::toy) {
                draft_model_ = std::make_unique<LayeredModel>(cfg_.draft);
                draft_ = std::make_unique<ToyDraft>(*draft_model_);
            } else {
                draft_ = std::make_unique<SyntheticDraft>(target_, cfg_.alpha, cfg_.draft_seed);
            }
            spec_ = std::make_unique<SpeculationState>(*draft_, cfg_.spec);
        }
        limit_ = prompt.size() + cfg_.generate;
    }

    // Prompt processing happens before the clock starts and is not timed.
    void prefill(const std::vector<Token>& prompt) {
        Batch b = make_chain_batch(prompt, 0, SeqSet{kCanonicalSeq}, RunKind::non_speculative, 0, false);
        Activations act;
        for (auto& s : stages_) {
            act = eval_layers(target_, s.layers.begin, s.layers.end, s.layers.begin == 0 ? nullptr : &act, b,
                              *s.cache);
        }
        const LogitsSet l = logits(target_, act, b);
        accepted_ = prompt;
        accept(greedy_sample(l.rows.back()));
        if (draft_) {
            draft_->set_context(prompt);
            draft_->propose();
            rollback_draft(*spec_, accepted_);
        }
    }

    // ---- helpers ---------------------------------------------------------

    double now() const { return events_.now(); }

    double metric_now() const {
        if (cfg_.wall_clock_metrics) {
            return std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start_).count();
        }
        return now();
    }

    double layer_cost(NodeId node, std::size_t n_tokens) const {
        double speed = 1.0;
        if (!cfg_.timing.node_speed.empty()) {
            speed = cfg_.timing.node_speed[static_cast<std::size_t>(node)];
        }
        return cfg_.timing.layer_delay / speed *
               (1.0 + cfg_.timing.batch_token_cost * static_cast<double>(n_tokens - 1));
    }

    NodeId last_stage() const { return plan_.n_stages() - 1; }
    bool has_workers() const { return plan_.n_stages() > 1; }

    void accept(Token t) {
        if (accepted_.size() >= limit_ || finished_generation_) {
            return;
        }
        if (spec_ && accepted_.size() < spec_->frontier.size()) {
            ++spec_compared_;
            spec_accepted_ += spec_->frontier[accepted_.size()] == t ? 1 : 0;
        }
        accepted_.push_back(t);
        accept_times_.push_back(metric_now());
        if (accepted_.size() >= limit_ || (cfg_.eos >= 0 && t == cfg_.eos)) {
            finished_generation_ = true;
        }
    }

    void track_inflight() {
        inflight_area_ += static_cast<double>(fifo_.size()) * (now() - inflight_last_);
        inflight_last_ = now();
    }

    // ---- cache command sink (head side) ------------------------------------

    // The head's control context feeds its own stage through an in-order
    // queue, the same way upstream nodes feed workers.
    void submit(Tag tag, RunId run, Payload p) {
        Message m;
        m.source = 0;
        m.destination = 0;
        m.tag = tag;
        m.run_id = run;
        m.payload = std::move(p);
        m.sent_at = m.deliver_at = now();
        stages_[0].local.push_back(std::move(m));
        events_.at(now(), [this] { stage_wake(0); });
    }

    bool head_stage_idle() const { return !stages_[0].busy && stages_[0].local.empty(); }

    void cache_copy(SeqId src, SeqSet dst, Pos end) override {
        if (!dst.empty()) {
            submit(Tag::CacheCopy, 0, CacheCopyBody{src, dst, end});
        }
    }

    void cache_remove(SeqId seq, Pos from) override { submit(Tag::CacheRemove, 0, CacheRemoveBody{seq, from}); }

    void release_sequence(SeqId seq) override {
        alloc_->free(seq);
        submit(Tag::CacheRemove, 0, CacheRemoveBody{seq, 0});
    }

    // ---- runs ------------------------------------------------------------

    void start_run(RunRecord record, const Batch& batch) {
        track_inflight();
        fifo_.push_back(std::move(record));
        ++runs_started_;
        if (batch.kind == RunKind::speculative) {
            ++spec_runs_;
        }
        submit(Tag::RunConfig, batch.run_id, batch);
        submit(Tag::ActivationTransfer, batch.run_id, batch);
    }

    void start_nonspec_run() {
        const Pos pos = static_cast<Pos>(accepted_.size()) - 1;
        Batch b = make_chain_batch({accepted_.back()}, pos, SeqSet{kCanonicalSeq}, RunKind::non_speculative,
                                   next_run_id_++);
        RunRecord r = make_record(b, kCanonicalSeq);
        r.prefix_start = static_cast<Pos>(accepted_.size());
        start_run(std::move(r), b);
        if (cfg_.mode == Mode::pipeinfer) {
            // Canonical entries up to this token become visible to every live
            // partition right behind the run itself.
            cache_copy(kCanonicalSeq, alloc_->live(), pos + 1);
        }
    }

    // ---- head ------------------------------------------------------------

    void head_wake() {
        if (head_busy_ || finished_) {
            return;
        }
        if (auto m = transport_->recv(0, last_stage(), Tag::LogitsTransfer)) {
            on_logits(std::move(*m));
            events_.at(now(), [this] { head_wake(); });
            return;
        }
        if (finished_generation_) {
            if (fifo_.empty()) {
                shutdown();
            }
            return;
        }
        switch (cfg_.mode) {
        case Mode::iterative:
        case Mode::pipeline_iterative:
            if (fifo_.empty()) {
                start_nonspec_run();
            }
            break;
        case Mode::sync_speculative:
            if (fifo_.empty()) {
                sync_round();
            }
            break;
        case Mode::pipeinfer:
            pipeinfer_step();
            break;
        }
    }

    void on_logits(Message m) {
        if (fifo_.empty() || fifo_.front().run_id != m.run_id) {
            throw ProtocolError("logits for run " + std::to_string(m.run_id) + " arrived out of FIFO order");
        }
        track_inflight();
        RunRecord rec = std::move(fifo_.front());
        fifo_.pop_front();

        if (rec.status == RunStatus::cancelled || m.is_placeholder()) {
            if (m.is_placeholder() && rec.status != RunStatus::cancelled) {
                throw ProtocolError("placeholder for a live run");
            }
            if (rec.seq != kCanonicalSeq) {
                release_sequence(rec.seq);
            }
            return;
        }

        const auto& l = std::get<LogitsSet>(m.payload);
        const std::size_t before = accepted_.size();
        VerifyResult res = verify_run(rec, l, accepted_);
        rec.status = RunStatus::completed;
        apply_acceptance(res, rec, alloc_->live(), *this);
        for (Token t : res.accepted) {
            accept(t);
        }
        accept(res.next_token);
        res.terminal = finished_generation_;
        verifications_.push_back({rec, res, before});

        if (spec_) {
            on_run_accepted(*spec_);
        }
        switch (cfg_.mode) {
        case Mode::iterative:
        case Mode::pipeline_iterative:
            if (!finished_generation_) {
                start_nonspec_run();
            }
            break;
        case Mode::sync_speculative:
            rollback_draft(*spec_, accepted_);
            break;
        case Mode::pipeinfer:
            after_pipeinfer_verification();
            break;
        }
    }

    void shutdown() {
        if (finished_) {
            return;
        }
        finished_ = true;
        end_time_ = now();
        track_inflight();
        submit(Tag::Shutdown, 0, {});
    }

    // ---- sync speculative --------------------------------------------------

    void sync_round() {
        Speculation sp = speculate_microbatch(*spec_, 4);
        const double draft_time = static_cast<double>(sp.draft_evals) * cfg_.timing.draft_delay;
        head_busy_ = true;
        events_.after(draft_time, [this, sp] {
            head_busy_ = false;
            std::vector<Token> ids{accepted_.back()};
            ids.insert(ids.end(), sp.tokens.begin(), sp.tokens.end());
            const Pos base = static_cast<Pos>(accepted_.size()) - 1;
            const RunKind kind = sp.empty() ? RunKind::non_speculative : RunKind::speculative;
            Batch b = make_chain_batch(ids, base, SeqSet{kCanonicalSeq}, kind, next_run_id_++);
            RunRecord r = make_record(b, kCanonicalSeq);
            r.prefix_start = static_cast<Pos>(accepted_.size());
            start_run(std::move(r), b);
        });
    }

    // ---- pipeinfer ---------------------------------------------------------

    bool round_speculated_ = false;

    std::size_t live_spec_runs() const {
        std::size_t n = 0;
        for (const auto& r : fifo_) {
            n += (r.kind == RunKind::speculative && r.status == RunStatus::in_flight) ? 1 : 0;
        }
        return n;
    }

    void pipeinfer_step() {
        if (runs_started_ == 0) {
            // The token sampled at prefill is not in any cache yet.
            start_nonspec_run();
        }
        if (job_ && job_->ready_at <= now() && head_stage_idle()) {
            DraftJob job = std::move(*job_);
            job_.reset();
            if (job.based_on != spec_->frontier) {
                // Speculation built on a frontier that has since changed.
            } else if (job.spec.empty()) {
                on_speculation_idle(*spec_);
            } else if (alloc_->free_count() == 0) {
                ++partition_stalls_;
                job_ = std::move(job);
                return;
            } else {
                start_spec_run(job.spec);
                return;
            }
        }
        request_speculation();
    }

    void request_speculation() {
        if (job_ || draft_busy_ || finished_generation_) {
            return;
        }
        if (alloc_->free_count() == 0) {
            // Counted once per episode of exhausted partitions.
            partition_stalls_ += stalled_ ? 0 : 1;
            stalled_ = true;
            return;
        }
        stalled_ = false;
        if (!cfg_.continuous && (round_speculated_ || live_spec_runs() > 0)) {
            return;
        }
        round_speculated_ = true;
        const std::vector<Token> base = spec_->frontier;
        Speculation sp = speculate_microbatch(*spec_);
        spec_->frontier = base; // committed only when the run starts
        const double ready = now() + 2.0 * cfg_.link.latency +
                             static_cast<double>(sp.draft_evals) * cfg_.timing.draft_delay;
        draft_busy_ = true;
        job_ = DraftJob{std::move(sp), base, ready};
        events_.at(ready, [this] {
            draft_busy_ = false;
            head_wake();
        });
    }

    void start_spec_run(const Speculation& sp) {
        const SeqId seq = alloc_->alloc();
        const Pos f = sp.start;

        SeqId parent = kCanonicalSeq;
        for (const auto& r : fifo_) {
            if (r.kind == RunKind::speculative && r.status == RunStatus::in_flight && r.min_pos <= f - 1 &&
                f - 1 <= r.max_pos) {
                parent = r.seq;
            }
        }
        cache_copy(parent, SeqSet{seq}, f);

        Batch b = make_chain_batch(sp.tokens, f, SeqSet{seq}, RunKind::speculative, next_run_id_++);
        RunRecord r = make_record(b, seq);
        r.prefix_start = static_cast<Pos>(accepted_.size());
        r.prefix.assign(spec_->frontier.begin() + r.prefix_start, spec_->frontier.begin() + f);
        spec_->frontier.insert(spec_->frontier.end(), sp.tokens.begin(), sp.tokens.end());
        if (cfg_.continuous) {
            on_speculation_success(*spec_);
        }
        start_run(std::move(r), b);
        request_speculation();
    }

    void after_pipeinfer_verification() {
        round_speculated_ = false;
        for (const auto& stale : detect_stale_runs(fifo_, accepted_)) {
            cancel_run(stale);
        }
        if (finished_generation_) {
            for (auto& r : fifo_) {
                if (r.status == RunStatus::in_flight) {
                    cancel_run({r.run_id, StaleReason::finished});
                }
            }
            return;
        }

        std::vector<Token> frontier = accepted_;
        for (const auto& r : fifo_) {
            if (r.kind != RunKind::speculative || r.status != RunStatus::in_flight) {
                continue;
            }
            if (r.min_pos > static_cast<Pos>(frontier.size())) {
                throw ProtocolError("speculative chain has a gap");
            }
            for (Pos p = static_cast<Pos>(frontier.size()); p <= r.max_pos; ++p) {
                frontier.push_back(r.tokens[static_cast<std::size_t>(p - r.min_pos)]);
            }
        }
        rollback_draft(*spec_, frontier);
        start_nonspec_run();
    }

    void cancel_run(const StaleRun& stale) {
        for (auto& r : fifo_) {
            if (r.run_id != stale.run_id || r.status != RunStatus::in_flight) {
                continue;
            }
            r.status = RunStatus::cancelled;
            r.cancel_reason = stale.reason;
            ++cancelled_runs_;
            if (stale.reason == StaleReason::invalidated) {
                ++cancelled_invalid_;
            } else if (stale.reason == StaleReason::superfluous) {
                ++cancelled_superfluous_;
            }
            cancels_.push_back({r, stale.reason, accepted_.size()});
            // Non-speculative runs always finish; only their sampling is skipped.
            if (cfg_.early_cancel && r.kind == RunKind::speculative) {
                stages_[0].cancelled.insert(r.run_id);
                transport_->send_cancel(0, r.run_id);
            }
        }
    }

    // ---- worker stages -------------------------------------------------------

    void stage_wake(NodeId k) {
        Stage& s = stages_[static_cast<std::size_t>(k)];
        for (RunId id : transport_->poll_cancel(k)) {
            s.cancelled.insert(id);
        }
        if (k == 0) {
            while (!s.busy && !s.shut && !s.local.empty()) {
                Message m = std::move(s.local.front());
                s.local.pop_front();
                handle_transaction(0, std::move(m));
            }
            return;
        }
        while (!s.busy && !s.shut) {
            if (!s.pending) {
                auto start = transport_->recv_any(k, Tag::TransactionStart);
                if (!start) {
                    return;
                }
                s.pending = std::make_pair(start->source, std::get<Tag>(start->payload));
            }
            auto body = transport_->recv(k, s.pending->first, s.pending->second);
            if (!body) {
                return;
            }
            s.pending.reset();
            handle_transaction(k, std::move(*body));
        }
    }

    void forward(NodeId k, Tag tag, RunId run, Payload p) {
        if (k < last_stage()) {
            transport_->begin_transaction(k, k + 1, tag, run, std::move(p));
        }
    }

    void handle_transaction(NodeId k, Message m) {
        Stage& s = stages_[static_cast<std::size_t>(k)];
        switch (m.tag) {
        case Tag::RunConfig: {
            const auto& b = std::get<Batch>(m.payload);
            s.configs[b.run_id] = b;
            forward(k, Tag::RunConfig, m.run_id, std::move(m.payload));
            break;
        }
        case Tag::CacheCopy: {
            const auto& c = std::get<CacheCopyBody>(m.payload);
            s.cache->copy(c.src, c.dst, c.end);
            forward(k, Tag::CacheCopy, 0, std::move(m.payload));
            break;
        }
        case Tag::CacheRemove: {
            const auto& c = std::get<CacheRemoveBody>(m.payload);
            s.cache->remove(c.seq, c.from);
            forward(k, Tag::CacheRemove, 0, std::move(m.payload));
            break;
        }
        case Tag::ActivationTransfer:
            begin_activation(k, std::move(m));
            break;
        case Tag::Shutdown:
            forward(k, Tag::Shutdown, 0, {});
            s.shut = true;
            transport_->shutdown(k);
            break;
        default:
            throw ProtocolError(std::string("unexpected transaction ") + to_string(m.tag));
        }
    }

    bool cancelled_here(Stage& s, NodeId k, const Batch& b) {
        for (RunId id : transport_->poll_cancel(k)) {
            s.cancelled.insert(id);
        }
        return cfg_.early_cancel && b.kind == RunKind::speculative && s.cancelled.contains(b.run_id);
    }

    void begin_activation(NodeId k, Message m) {
        Stage& s = stages_[static_cast<std::size_t>(k)];
        auto it = s.configs.find(m.run_id);
        if (it == s.configs.end()) {
            throw ProtocolError("activations for unknown run " + std::to_string(m.run_id));
        }
        ++s.activations;
        Batch batch = std::move(it->second);
        s.configs.erase(it);
        if (m.is_placeholder()) {
            finish_activation(k, batch, std::nullopt);
            return;
        }
        if (cancelled_here(s, k, batch)) {
            skip_run(k, batch, s.layers.size());
            return;
        }
        s.busy = true;
        std::optional<Activations> input;
        if (auto* a = std::get_if<Activations>(&m.payload)) {
            input = std::move(*a);
        }
        step_layer(k, std::move(batch), std::move(input), s.layers.begin);
    }

    // A layer's cost is spread over `sync_points` slices; cancellations are
    // observed at every slice boundary. The math runs with the last slice.
    void step_layer(NodeId k, Batch batch, std::optional<Activations> act, std::size_t layer, int slice = 0) {
        const int slices = cfg_.timing.sync_points;
        const double cost = layer_cost(k, batch.size()) / slices;
        events_.after(cost, [this, k, batch = std::move(batch), act = std::move(act), layer, slice,
                             slices]() mutable {
            Stage& s = stages_[static_cast<std::size_t>(k)];
            if (slice + 1 < slices) {
                if (cancelled_here(s, k, batch)) {
                    skip_run(k, batch, s.layers.end - layer);
                } else {
                    step_layer(k, std::move(batch), std::move(act), layer, slice + 1);
                }
                return;
            }
            Activations out = eval_layers(target_, layer, layer + 1, act ? &*act : nullptr, batch, *s.cache);
            const std::size_t next = layer + 1;
            if (next == s.layers.end) {
                finish_activation(k, batch, std::move(out));
            } else if (cancelled_here(s, k, batch)) {
                skip_run(k, batch, s.layers.end - next);
            } else {
                step_layer(k, std::move(batch), std::move(out), next);
            }
        });
    }

    void skip_run(NodeId k, const Batch& batch, std::size_t layers_left) {
        Stage& s = stages_[static_cast<std::size_t>(k)];
        layers_skipped_ += layers_left;
        for (SeqId id : batch.tokens.front().seqs.ids()) {
            if (id != kCanonicalSeq) {
                s.cache->remove(id, 0);
            }
        }
        finish_activation(k, batch, std::nullopt);
    }

    void finish_activation(NodeId k, const Batch& batch, std::optional<Activations> act) {
        Stage& s = stages_[static_cast<std::size_t>(k)];
        s.cancelled.erase(batch.run_id);
        if (k == last_stage()) {
            Payload p;
            if (act) {
                p = logits(target_, *act, batch);
            }
            transport_->send(k, 0, Tag::LogitsTransfer, batch.run_id, std::move(p));
        } else {
            Payload p;
            if (act) {
                p = std::move(*act);
            }
            transport_->begin_transaction(k, k + 1, Tag::ActivationTransfer, batch.run_id, std::move(p));
        }
        s.busy = false;
        events_.at(now(), [this, k] {
            stage_wake(k);
            if (k == 0) {
                head_wake();
            }
        });
    }

    // ---- results -----------------------------------------------------------

    EngineResult collect(std::size_t prompt_len) {
        EngineResult out;
        out.tokens.assign(accepted_.begin() + static_cast<std::ptrdiff_t>(prompt_len), accepted_.end());
        out.accept_times = accept_times_;
        out.cancels = std::move(cancels_);
        out.verifications = std::move(verifications_);
        out.runs_started = runs_started_;
        out.events = events_.processed();
        for (const auto& s : stages_) {
            out.activations_seen.push_back(s.activations);
        }

        EngineMetrics& m = out.metrics;
        const std::size_t g = out.tokens.size();
        if (g >= 2) {
            // The token sampled right after prefill is not counted.
            m.ttft = out.accept_times[1] - out.accept_times[0];
            m.total_time = out.accept_times.back() - out.accept_times[0];
            m.itl = g >= 3 ? (out.accept_times.back() - out.accept_times[1]) / static_cast<double>(g - 2) : 0.0;
            m.generation_speed = m.total_time > 0.0 ? static_cast<double>(g - 1) / m.total_time : 0.0;
        }
        m.spec_compared = spec_compared_;
        m.spec_accepted = spec_accepted_;
        m.acceptance_rate =
            spec_compared_ > 0 ? static_cast<double>(spec_accepted_) / static_cast<double>(spec_compared_) : 0.0;
        m.runs_started = runs_started_;
        m.spec_runs = spec_runs_;
        m.cancelled_runs = cancelled_runs_;
        m.cancelled_invalid = cancelled_invalid_;
        m.cancelled_superfluous = cancelled_superfluous_;
        m.partition_stalls = partition_stalls_;
        m.layers_skipped = layers_skipped_;
        m.inflight_mean = end_time_ > 0.0 ? inflight_area_ / end_time_ : 0.0;
        m.traffic = transport_->totals();
        m.checksum = token_checksum(out.tokens);
        return out;
    }

    const LayeredModel& target_;
    EngineConfig cfg_;
    PipelinePlan plan_;
    EventQueue events_;
    std::unique_ptr<VirtualTransport> transport_;
    std::vector<Stage> stages_;
    std::unique_ptr<SequenceAllocator> alloc_;
    std::unique_ptr<LayeredModel> draft_model_;
    std::unique_ptr<DraftBackend> draft_;
    std::unique_ptr<SpeculationState> spec_;

    std::vector<Token> accepted_;
    std::vector<double> accept_times_;
    std::size_t limit_ = 0;
    std::deque<RunRecord> fifo_;
    RunId next_run_id_ = 1;
    bool head_busy_ = false;
    bool draft_busy_ = false;
    std::optional<DraftJob> job_;
    bool finished_generation_ = false;
    bool finished_ = false;
    double end_time_ = 0.0;
    std::chrono::steady_clock::time_point wall_start_;

    double inflight_area_ = 0.0;
    double inflight_last_ = 0.0;
    std::size_t runs_started_ = 0;
    std::size_t spec_runs_ = 0;
    bool stalled_ = false;
    std::size_t spec_compared_ = 0;
    std::size_t spec_accepted_ = 0;
    std::size_t cancelled_runs_ = 0;
    std::size_t cancelled_invalid_ = 0;
    std::size_t cancelled_superfluous_ = 0;
    std::size_t partition_stalls_ = 0;
    std::size_t layers_skipped_ = 0;
    std::vector<CancelEvent> cancels_;
    std::vector<VerifyEvent> verifications_;
};

inline EngineResult run_engine(const LayeredModel& target, const EngineConfig& cfg, const std::vector<Token>& prompt) {
    Engine e(target, cfg);
    return e.run(prompt);
}

// Baseline modes share the engine; this wrapper only pins the mode.
inline EngineResult run_baseline(Mode mode, const LayeredModel& target, EngineConfig cfg,
                                 const std::vector<Token>& prompt) {
    cfg.mode = mode;
    return run_engine(target, cfg, prompt);
}

// Deterministic prompt of `len` tokens.
inline std::vector<Token> make_prompt(std::uint64_t seed, std::size_t len, std::size_t vocab) {
    std::vector<Token> p(len);
    for (std::size_t i = 0; i < len; ++i) {
        p[i] = static_cast<Token>(mix64(seed * 0x100000001b3ULL + i) % vocab);
    }
    return p;
}

} // namespace pipeinfer
