#pragma once

#include "pipeinfer/types.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace pipeinfer {

enum class RunKind { speculative, non_speculative };

inline const char* to_string(RunKind k) {
    return k == RunKind::speculative ? "speculative" : "non_speculative";
}

struct BatchToken {
    Token id = 0;
    Pos pos = 0;
    SeqSet seqs;
    bool logits = false;
};

// The unit fed into one pipeline run.
struct Batch {
    std::vector<BatchToken> tokens;
    RunKind kind = RunKind::non_speculative;
    RunId run_id = 0;

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }

    std::size_t n_logits() const {
        std::size_t n = 0;
        for (const auto& t : tokens) {
            n += t.logits ? 1 : 0;
        }
        return n;
    }

    // Batch indices of tokens that requested logits, in batch order.
    std::vector<std::size_t> logit_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i].logits) {
                out.push_back(i);
            }
        }
        return out;
    }
};

// Contiguous chain of tokens on one sequence set.
inline Batch make_chain_batch(const std::vector<Token>& ids, Pos start, SeqSet seqs, RunKind kind,
                              RunId run_id, bool all_logits = true) {
    Batch b;
    b.kind = kind;
    b.run_id = run_id;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        b.tokens.push_back({ids[i], start + static_cast<Pos>(i), seqs, all_logits || i + 1 == ids.size()});
    }
    return b;
}

// Throws ConfigError on an empty batch, a token without sequences, a negative
// position, or two tokens sharing a position within one sequence.
inline void validate_batch(const Batch& b) {
    if (b.empty()) {
        throw ConfigError("empty batch");
    }
    for (std::size_t i = 0; i < b.tokens.size(); ++i) {
        const auto& t = b.tokens[i];
        if (t.seqs.empty()) {
            throw ConfigError("batch token without sequence membership");
        }
        if (t.pos < 0) {
            throw ConfigError("negative token position");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (b.tokens[j].pos == t.pos && b.tokens[j].seqs.intersects(t.seqs)) {
                throw ConfigError("two batch tokens share position " + std::to_string(t.pos) + " in one sequence");
            }
        }
    }
}

} // namespace pipeinfer
