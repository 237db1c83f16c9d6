#pragma once

#include "pipeinfer/batch.hpp"
#include "pipeinfer/types.hpp"

#include <cstddef>
#include <vector>

namespace pipeinfer {

enum class RunStatus { in_flight, cancelled, completed };

// `finished`: drained because generation ended.
enum class StaleReason { none, superfluous, invalidated, finished };

inline const char* to_string(StaleReason r) {
    switch (r) {
    case StaleReason::superfluous:
        return "superfluous";
    case StaleReason::invalidated:
        return "invalidated";
    case StaleReason::finished:
        return "finished";
    default:
        return "none";
    }
}

// Head-side bookkeeping for one pipeline run, kept in a FIFO in start order.
struct RunRecord {
    RunId run_id = 0;
    RunKind kind = RunKind::non_speculative;
    std::vector<Token> tokens; // positions min_pos..max_pos
    Pos min_pos = 0;
    Pos max_pos = 0;
    SeqId seq = kCanonicalSeq;
    std::vector<int> logit_slot; // per token, row in the LogitsSet or -1
    RunStatus status = RunStatus::in_flight;
    StaleReason cancel_reason = StaleReason::none;

    // Speculated-but-unaccepted tokens this run builds on, starting at
    // prefix_start. Empty for runs that extend the accepted tail directly.
    Pos prefix_start = 0;
    std::vector<Token> prefix;

    // Token at absolute position p, from the prefix or the run itself.
    bool token_at(Pos p, Token& out) const {
        if (p >= min_pos && p <= max_pos) {
            out = tokens[static_cast<std::size_t>(p - min_pos)];
            return true;
        }
        if (p >= prefix_start && p < prefix_start + static_cast<Pos>(prefix.size())) {
            out = prefix[static_cast<std::size_t>(p - prefix_start)];
            return true;
        }
        return false;
    }
};

inline RunRecord make_record(const Batch& b, SeqId seq) {
    RunRecord r;
    r.run_id = b.run_id;
    r.kind = b.kind;
    r.seq = seq;
    r.min_pos = b.tokens.front().pos;
    r.max_pos = b.tokens.back().pos;
    int slot = 0;
    for (const auto& t : b.tokens) {
        r.tokens.push_back(t.id);
        r.logit_slot.push_back(t.logits ? slot++ : -1);
    }
    r.prefix_start = r.min_pos;
    return r;
}

} // namespace pipeinfer
