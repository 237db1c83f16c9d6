#pragma once

// Greedy token verification, stale-run detection and acceptance bookkeeping.

#include "pipeinfer/model.hpp"
#include "pipeinfer/run_record.hpp"
#include "pipeinfer/types.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace pipeinfer {

struct VerifyResult {
    std::vector<Token> accepted; // newly accepted run tokens, in position order
    std::size_t n_accepted = 0;
    std::size_t n_matched = 0;  // leading run tokens that agree with the target
    std::size_t n_compared = 0; // newly decided tokens that were compared
    Token next_token = 0;       // correction on mismatch, bonus on full match
    Pos next_pos = 0;
    bool terminal = false;
};

// Walks the run in position order. A token at position p must equal the
// accepted token at p when p is already decided, otherwise the greedy sample
// of the run's logits at p - 1. The first disagreement ends the walk.
inline VerifyResult verify_run(const RunRecord& record, const LogitsSet& logits, std::span<const Token> accepted) {
    std::size_t n_slots = 0;
    for (std::size_t i = 0; i < record.logit_slot.size(); ++i) {
        const int s = record.logit_slot[i];
        if (s < 0) {
            continue;
        }
        ++n_slots;
        if (static_cast<std::size_t>(s) >= logits.size() || logits.token_index[static_cast<std::size_t>(s)] != i) {
            throw ProtocolError("logit index map mismatch for run " + std::to_string(record.run_id));
        }
    }
    if (n_slots != logits.size() || record.tokens.size() != record.logit_slot.size()) {
        throw ProtocolError("logit index map mismatch for run " + std::to_string(record.run_id));
    }

    auto prediction_after = [&](std::size_t i) -> Token {
        const int s = record.logit_slot[i];
        if (s < 0) {
            throw ProtocolError("no logits for token " + std::to_string(i) + " of run " +
                                std::to_string(record.run_id));
        }
        return greedy_sample(logits.rows[static_cast<std::size_t>(s)]);
    };

    const auto n = static_cast<Pos>(accepted.size());
    VerifyResult res;
    for (std::size_t i = 0; i < record.tokens.size(); ++i) {
        const Pos p = record.min_pos + static_cast<Pos>(i);
        Token expected;
        if (p < n) {
            expected = accepted[static_cast<std::size_t>(p)];
        } else if (i == 0) {
            throw ProtocolError("run " + std::to_string(record.run_id) + " starts past the accepted tail");
        } else {
            expected = prediction_after(i - 1);
            ++res.n_compared;
        }
        if (record.tokens[i] != expected) {
            if (p < n) {
                throw ProtocolError("run " + std::to_string(record.run_id) + " is invalidated");
            }
            res.next_token = expected;
            res.next_pos = p;
            res.n_accepted = res.accepted.size();
            return res;
        }
        ++res.n_matched;
        if (p >= n) {
            res.accepted.push_back(record.tokens[i]);
        }
    }
    if (record.max_pos + 1 < n) {
        throw ProtocolError("run " + std::to_string(record.run_id) + " is superfluous");
    }
    res.next_token = prediction_after(record.tokens.size() - 1);
    res.next_pos = record.max_pos + 1;
    res.n_accepted = res.accepted.size();
    return res;
}

struct StaleRun {
    RunId run_id = 0;
    StaleReason reason = StaleReason::none;
};

// Classifies one run against the accepted tokens.
inline StaleReason classify_run(const RunRecord& r, std::span<const Token> accepted) {
    const auto n = static_cast<Pos>(accepted.size());
    // Its last logits predict max_pos + 1, which is already decided.
    if (r.max_pos + 1 < n) {
        return StaleReason::superfluous;
    }
    const Pos lo = std::min(r.prefix_start, r.min_pos);
    for (Pos p = lo; p < n && p <= r.max_pos; ++p) {
        Token t;
        if (r.token_at(p, t) && t != accepted[static_cast<std::size_t>(p)]) {
            return StaleReason::invalidated;
        }
    }
    return StaleReason::none;
}

// Runs still in flight that can no longer contribute a token.
template <class Records>
std::vector<StaleRun> detect_stale_runs(const Records& fifo, std::span<const Token> accepted) {
    std::vector<StaleRun> out;
    for (const auto& r : fifo) {
        if (r.status != RunStatus::in_flight) {
            continue;
        }
        const StaleReason why = classify_run(r, accepted);
        if (why != StaleReason::none) {
            out.push_back({r.run_id, why});
        }
    }
    return out;
}

// Cache commands produced by an acceptance. The engine pipelines them through
// the target nodes in emission order.
class CacheCommandSink {
public:
    virtual ~CacheCommandSink() = default;
    virtual void cache_copy(SeqId src, SeqSet dst, Pos end) = 0;
    virtual void cache_remove(SeqId seq, Pos from) = 0;
    virtual void release_sequence(SeqId seq) = 0;
};

// Matched entries of the run's partition become visible to the canonical
// sequence and every other live partition; rejected entries are dropped and
// the partition is released. Runs on the canonical sequence only drop their
// rejected entries.
inline void apply_acceptance(const VerifyResult& result, const RunRecord& record, SeqSet live,
                             CacheCommandSink& sink, const std::function<void()>& on_rollback = {}) {
    const Pos end = record.min_pos + static_cast<Pos>(result.n_matched);
    const bool rejected_some = result.n_matched < record.tokens.size();
    if (record.seq == kCanonicalSeq) {
        if (rejected_some) {
            sink.cache_remove(kCanonicalSeq, end);
        }
    } else {
        if (result.n_matched > 0) {
            SeqSet dst = live;
            dst.insert(kCanonicalSeq);
            dst.erase(record.seq);
            sink.cache_copy(record.seq, dst, end);
        }
        if (rejected_some) {
            sink.cache_remove(record.seq, end);
        }
        sink.release_sequence(record.seq);
    }
    if (on_rollback) {
        on_rollback();
    }
}

} // namespace pipeinfer
