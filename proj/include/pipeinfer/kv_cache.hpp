#pragma once

// Metadata-tagged KV cache with sequence partitions.
//
// Every cell carries a position and a set of sequence ids. Copying between
// sequences only edits that set, so K/V storage is never duplicated; a cell is
// dropped once its set becomes empty. Sequence 0 is the canonical sequence and
// holds accepted tokens only. Speculative runs write into partitions handed
// out FIFO by SequenceAllocator.

#include "pipeinfer/types.hpp"

#include <algorithm>
#include <cstddef>
#include <deque>
#include <limits>
#include <string>
#include <vector>

namespace pipeinfer {

struct KVCell {
    Pos pos = 0;
    SeqSet seqs;
    std::vector<double> key;
    std::vector<double> value;
};

class KVCache {
public:
    static constexpr Pos kEnd = std::numeric_limits<Pos>::max();

    // Holds layers [first_layer, first_layer + n_layers).
    KVCache(std::size_t first_layer, std::size_t n_layers, std::size_t dim, Pos max_context)
        : first_layer_(first_layer), dim_(dim), max_context_(max_context), layers_(n_layers) {}

    std::size_t first_layer() const { return first_layer_; }
    std::size_t n_layers() const { return layers_.size(); }
    std::size_t dim() const { return dim_; }
    Pos max_context() const { return max_context_; }

    void insert(std::size_t layer, Pos pos, SeqSet seqs, std::vector<double> key, std::vector<double> value) {
        auto& cells = at(layer);
        if (pos < 0 || pos >= max_context_) {
            throw CacheError("context overflow: position " + std::to_string(pos));
        }
        if (seqs.empty()) {
            throw CacheError("cell inserted without sequences");
        }
        if (key.size() != dim_ || value.size() != dim_) {
            throw CacheError("cell dimension mismatch");
        }
        auto first = lower(cells, pos);
        for (auto it = first; it != cells.end() && it->pos == pos; ++it) {
            if (it->seqs.intersects(seqs)) {
                throw CacheError("duplicate cell at position " + std::to_string(pos));
            }
        }
        auto it = std::upper_bound(cells.begin(), cells.end(), pos,
                                   [](Pos p, const KVCell& c) { return p < c.pos; });
        cells.insert(it, KVCell{pos, seqs, std::move(key), std::move(value)});
    }

    // Every cell of `src` below `end` joins each sequence in `dst`, unless that
    // sequence already owns a cell at the same position.
    void copy(SeqId src, SeqSet dst, Pos end) {
        const SeqSet src_set{src};
        const std::uint64_t want = dst.bits() & ~src_set.bits();
        if (want == 0) {
            return;
        }
        for (auto& cells : layers_) {
            // Cells sharing a position are visited as one group; a destination
            // is added only if no cell of the group already carries it.
            for (std::size_t i = 0; i < cells.size() && cells[i].pos < end;) {
                std::size_t j = i;
                std::uint64_t owned = 0;
                KVCell* carrier = nullptr;
                for (; j < cells.size() && cells[j].pos == cells[i].pos; ++j) {
                    owned |= cells[j].seqs.bits();
                    if (cells[j].seqs.contains(src)) {
                        carrier = &cells[j];
                    }
                }
                if (carrier != nullptr) {
                    carrier->seqs = SeqSet::from_bits(carrier->seqs.bits() | (want & ~owned));
                }
                i = j;
            }
        }
    }

    // Drops `seq` from cells with position in [from, to); empty cells are freed.
    void remove(SeqId seq, Pos from, Pos to = kEnd) {
        for (auto& cells : layers_) {
            for (auto& c : cells) {
                if (c.pos >= from && c.pos < to) {
                    c.seqs.erase(seq);
                }
            }
            std::erase_if(cells, [](const KVCell& c) { return c.seqs.empty(); });
        }
    }

    void clear() {
        for (auto& cells : layers_) {
            cells.clear();
        }
    }

    // Cells of `layer` visible to `seq` below `query_pos`, ordered by position.
    std::vector<const KVCell*> visible_cells(SeqId seq, Pos query_pos, std::size_t layer) const {
        std::vector<const KVCell*> out;
        for (const auto& c : at(layer)) {
            if (c.pos >= query_pos) {
                break;
            }
            if (c.seqs.contains(seq)) {
                out.push_back(&c);
            }
        }
        return out;
    }

    const std::vector<KVCell>& cells(std::size_t layer) const { return at(layer); }

    bool has_cell(std::size_t layer, SeqId seq, Pos pos) const { return owns_position(at(layer), seq, pos); }

    std::size_t cell_count() const {
        std::size_t n = 0;
        for (const auto& cells : layers_) {
            n += cells.size();
        }
        return n;
    }

    // Length of the gap-free prefix [0, e) that `seq` owns in every layer.
    Pos contiguous_end(SeqId seq) const {
        Pos best = kEnd;
        for (const auto& cells : layers_) {
            Pos e = 0;
            for (const auto& c : cells) {
                if (!c.seqs.contains(seq)) {
                    continue;
                }
                if (c.pos != e) {
                    break;
                }
                ++e;
            }
            best = std::min(best, e);
        }
        return layers_.empty() ? 0 : best;
    }

    // Highest position + 1 owned by `seq` in any layer, 0 if none.
    Pos extent(SeqId seq) const {
        Pos e = 0;
        for (const auto& cells : layers_) {
            for (const auto& c : cells) {
                if (c.seqs.contains(seq)) {
                    e = std::max(e, c.pos + 1);
                }
            }
        }
        return e;
    }

private:
    using Cells = std::vector<KVCell>;

    static Cells::iterator lower(Cells& cells, Pos pos) {
        return std::lower_bound(cells.begin(), cells.end(), pos, [](const KVCell& c, Pos p) { return c.pos < p; });
    }

    static bool owns_position(const Cells& cells, SeqId seq, Pos pos) {
        auto it = std::lower_bound(cells.begin(), cells.end(), pos, [](const KVCell& c, Pos p) { return c.pos < p; });
        for (; it != cells.end() && it->pos == pos; ++it) {
            if (it->seqs.contains(seq)) {
                return true;
            }
        }
        return false;
    }

    Cells& at(std::size_t layer) {
        if (layer < first_layer_ || layer - first_layer_ >= layers_.size()) {
            throw CacheError("layer " + std::to_string(layer) + " not held by this cache");
        }
        return layers_[layer - first_layer_];
    }
    const Cells& at(std::size_t layer) const { return const_cast<KVCache*>(this)->at(layer); }

    std::size_t first_layer_;
    std::size_t dim_;
    Pos max_context_;
    std::vector<Cells> layers_;
};

// FIFO pool of speculative sequence ids. Id 0 is reserved for the canonical
// sequence and never handed out.
class SequenceAllocator {
public:
    explicit SequenceAllocator(int partitions = 8) : partitions_(partitions), allocated_(partitions, false) {
        if (partitions < 2 || partitions > kMaxSequences) {
            throw ConfigError("partition count must be in [2, " + std::to_string(kMaxSequences) + "]");
        }
        for (SeqId id = 1; id < partitions; ++id) {
            free_.push_back(id);
        }
    }

    SeqId alloc() {
        if (free_.empty()) {
            throw AllocationExhausted();
        }
        SeqId id = free_.front();
        free_.pop_front();
        allocated_[id] = true;
        return id;
    }

    void free(SeqId id) {
        if (id == kCanonicalSeq) {
            throw CacheError("cannot free the canonical sequence");
        }
        if (id < 0 || id >= partitions_ || !allocated_[id]) {
            throw CacheError("sequence " + std::to_string(id) + " is not allocated");
        }
        allocated_[id] = false;
        free_.push_back(id);
    }

    bool is_allocated(SeqId id) const { return id > 0 && id < partitions_ && allocated_[id]; }
    std::size_t free_count() const { return free_.size(); }
    int partitions() const { return partitions_; }

    SeqSet live() const {
        SeqSet s;
        for (SeqId id = 1; id < partitions_; ++id) {
            if (allocated_[id]) {
                s.insert(id);
            }
        }
        return s;
    }

private:
    int partitions_;
    std::vector<bool> allocated_;
    std::deque<SeqId> free_;
};

// Releases a partition: its membership leaves every cell, then the id goes to
// the back of the free queue.
inline void free_sequence(SequenceAllocator& alloc, KVCache& cache, SeqId id) {
    if (id == kCanonicalSeq || !alloc.is_allocated(id)) {
        alloc.free(id); // throws with the precise reason
    }
    cache.remove(id, 0);
    alloc.free(id);
}

} // namespace pipeinfer
