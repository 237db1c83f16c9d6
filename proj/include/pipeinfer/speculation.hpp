#pragma once

// Draft-side speculation: draft backends, micro-batch emission under a
// confidence cutoff, and the reactive cutoff (recovery / decay) rules.

#include "pipeinfer/batch.hpp"
#include "pipeinfer/kv_cache.hpp"
#include "pipeinfer/model.hpp"
#include "pipeinfer/types.hpp"

#include <algorithm>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

namespace pipeinfer {

struct DraftProposal {
    Token token = 0;
    double confidence = 0.0;
};

// A draft model bound to a private single-sequence cache. The context is the
// token list the next proposal continues; already-evaluated prefixes are kept
// across set_context calls.
class DraftBackend {
public:
    explicit DraftBackend(const LayeredModel& model)
        : model_(model), cache_(0, model.n_layers(), model.dim(), model.config().max_context) {}
    virtual ~DraftBackend() = default;

    DraftBackend(const DraftBackend&) = delete;
    DraftBackend& operator=(const DraftBackend&) = delete;

    void set_context(std::span<const Token> ctx) {
        std::size_t lcp = 0;
        while (lcp < ctx.size() && lcp < context_.size() && ctx[lcp] == context_[lcp]) {
            ++lcp;
        }
        if (lcp < evaluated_) {
            // Back off one extra token so the next proposal recomputes logits
            // for the new context tail.
            evaluated_ = lcp > 0 ? lcp - 1 : 0;
            cache_.remove(kCanonicalSeq, static_cast<Pos>(evaluated_));
        }
        context_.assign(ctx.begin(), ctx.end());
    }

    void push(Token t) { context_.push_back(t); }

    // Proposal for position context().size().
    DraftProposal propose() {
        if (context_.empty()) {
            throw ConfigError("draft proposal needs a non-empty context");
        }
        if (evaluated_ < context_.size()) {
            std::vector<Token> pending(context_.begin() + static_cast<std::ptrdiff_t>(evaluated_), context_.end());
            Batch b = make_chain_batch(pending, static_cast<Pos>(evaluated_), SeqSet{kCanonicalSeq},
                                       RunKind::non_speculative, 0, false);
            Activations a = eval_layers(model_, 0, model_.n_layers(), nullptr, b, cache_);
            last_logits_ = std::move(logits(model_, a, b).rows.back());
            evaluated_tokens_ += pending.size();
            evaluated_ = context_.size();
        }
        return choose(last_logits_, static_cast<Pos>(context_.size()));
    }

    const std::vector<Token>& context() const { return context_; }
    std::size_t evaluated_tokens() const { return evaluated_tokens_; }
    const KVCache& cache() const { return cache_; }

protected:
    virtual DraftProposal choose(std::span<const double> logits, Pos pos) const = 0;

private:
    const LayeredModel& model_;
    KVCache cache_;
    std::vector<Token> context_;
    std::size_t evaluated_ = 0;
    std::size_t evaluated_tokens_ = 0;
    std::vector<double> last_logits_;
};

// Small model of the same architecture. Confidence is the largest softmax
// probability of its own logits.
class ToyDraft final : public DraftBackend {
public:
    using DraftBackend::DraftBackend;

protected:
    DraftProposal choose(std::span<const double> logits, Pos) const override {
        return {greedy_sample(logits), max_probability(logits)};
    }
};

// Evaluates the target model and, per position, emits the target's greedy
// token with probability alpha, else the runner-up. Confidence is alpha.
class SyntheticDraft final : public DraftBackend {
public:
    SyntheticDraft(const LayeredModel& target, double alpha, std::uint64_t seed)
        : DraftBackend(target), alpha_(alpha), seed_(seed) {
        if (!(alpha >= 0.0 && alpha <= 1.0)) {
            throw ConfigError("synthetic draft alpha must be in [0, 1]");
        }
    }

    double alpha() const { return alpha_; }

protected:
    DraftProposal choose(std::span<const double> logits, Pos pos) const override {
        const double u = unit_double(mix64(seed_ ^ mix64(static_cast<std::uint64_t>(pos))));
        return {u < alpha_ ? greedy_sample(logits) : second_best(logits), alpha_};
    }

private:
    double alpha_;
    std::uint64_t seed_;
};

struct SpeculationParams {
    double tau = 0.4;   // base confidence cutoff
    double rho = 0.05;  // recovery factor
    double delta = 0.05; // decay factor
    int max_batch = 4;

    void validate() const {
        if (!(tau >= 0.0 && tau <= 1.0)) {
            throw ConfigError("tau must be in [0, 1]");
        }
        if (!(rho >= 0.0) || !(delta >= 0.0)) {
            throw ConfigError("rho and delta must be >= 0");
        }
        if (max_batch < 1 || max_batch > 4) {
            throw ConfigError("micro-batch cap must be in [1, 4]");
        }
    }
};

struct SpeculationState {
    SpeculationState(DraftBackend& backend, const SpeculationParams& params)
        : draft(&backend), tau(params.tau), tau_cur(params.tau), rho(params.rho), delta(params.delta),
          max_batch(params.max_batch) {
        params.validate();
    }

    DraftBackend* draft;
    std::vector<Token> frontier; // accepted tokens plus un-invalidated speculation
    double tau;
    double tau_cur;
    double rho;
    double delta;
    int max_batch;
};

struct Speculation {
    Pos start = 0;
    std::vector<Token> tokens;
    std::size_t draft_evals = 0; // draft forward cost, at least one token

    bool empty() const { return tokens.empty(); }
};

// Extends the frontier by up to max_batch greedy draft tokens while the draft
// confidence stays at or above the current cutoff.
inline Speculation speculate_microbatch(SpeculationState& s, int cap = 0) {
    const int limit = cap > 0 ? std::min(cap, s.max_batch) : s.max_batch;
    DraftBackend& d = *s.draft;
    d.set_context(s.frontier);
    const std::size_t before = d.evaluated_tokens();
    const Pos max_ctx = d.cache().max_context();

    Speculation out;
    out.start = static_cast<Pos>(s.frontier.size());
    for (int i = 0; i < limit; ++i) {
        const DraftProposal p = d.propose();
        if (p.confidence < s.tau_cur) {
            break;
        }
        if (static_cast<Pos>(s.frontier.size() + out.tokens.size()) >= max_ctx) {
            throw CacheError("context overflow during speculation");
        }
        out.tokens.push_back(p.token);
        d.push(p.token);
    }
    out.draft_evals = std::max<std::size_t>(1, d.evaluated_tokens() - before);
    s.frontier.insert(s.frontier.end(), out.tokens.begin(), out.tokens.end());
    return out;
}

// One successful continuous-speculation iteration raises the cutoff.
inline void on_speculation_success(SpeculationState& s) { s.tau_cur = std::clamp(s.tau_cur + s.rho, 0.0, 1.0); }

inline void on_run_accepted(SpeculationState& s) { s.tau_cur = std::clamp(s.tau, 0.0, 1.0); }

// Speculation came back empty with no logits waiting.
inline void on_speculation_idle(SpeculationState& s) { s.tau_cur = std::clamp(s.tau_cur - s.delta, 0.0, 1.0); }

// Rebases speculation onto `context` (accepted tokens plus any surviving
// in-flight speculation). Draft cache cells past the shared prefix are dropped.
inline void rollback_draft(SpeculationState& s, std::span<const Token> context) {
    s.frontier.assign(context.begin(), context.end());
    s.draft->set_context(context);
}

} // namespace pipeinfer
