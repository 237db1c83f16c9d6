#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pipeinfer {

using Token = std::int32_t;
using Pos = std::int32_t;
using SeqId = std::int32_t;
using RunId = std::uint64_t;
using NodeId = std::int32_t;

inline constexpr SeqId kCanonicalSeq = 0;
inline constexpr int kMaxSequences = 64;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class CacheError : public Error {
public:
    using Error::Error;
};

// Raised when every sequence partition is in use. The head treats it as a
// stall signal, not a failure.
class AllocationExhausted : public Error {
public:
    AllocationExhausted() : Error("sequence partitions exhausted") {}
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class ShutdownError : public Error {
public:
    ShutdownError() : Error("transport shut down") {}
};

// Set of sequence ids, at most kMaxSequences of them.
class SeqSet {
public:
    constexpr SeqSet() = default;
    constexpr SeqSet(std::initializer_list<SeqId> ids) {
        for (SeqId id : ids) {
            insert(id);
        }
    }

    static constexpr SeqSet from_bits(std::uint64_t bits) {
        SeqSet s;
        s.bits_ = bits;
        return s;
    }

    constexpr void insert(SeqId id) { bits_ |= bit(id); }
    constexpr void erase(SeqId id) { bits_ &= ~bit(id); }
    constexpr bool contains(SeqId id) const { return (bits_ & bit(id)) != 0; }
    constexpr bool intersects(SeqSet other) const { return (bits_ & other.bits_) != 0; }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr int size() const { return std::popcount(bits_); }
    constexpr std::uint64_t bits() const { return bits_; }

    constexpr SeqSet operator|(SeqSet o) const { return from_bits(bits_ | o.bits_); }
    constexpr SeqSet operator&(SeqSet o) const { return from_bits(bits_ & o.bits_); }
    constexpr bool operator==(const SeqSet&) const = default;

    std::vector<SeqId> ids() const {
        std::vector<SeqId> out;
        for (SeqId i = 0; i < kMaxSequences; ++i) {
            if (contains(i)) {
                out.push_back(i);
            }
        }
        return out;
    }

private:
    static constexpr std::uint64_t bit(SeqId id) {
        if (id < 0 || id >= kMaxSequences) {
            throw CacheError("sequence id out of range: " + std::to_string(id));
        }
        return std::uint64_t{1} << id;
    }

    std::uint64_t bits_ = 0;
};

// splitmix64 finalizer, used wherever a stateless seeded hash is needed.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Uniform double in [0, 1) from 53 high bits.
constexpr double unit_double(std::uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// FNV-1a over token ids.
inline std::uint64_t token_checksum(const std::vector<Token>& tokens) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Token t : tokens) {
        auto v = static_cast<std::uint32_t>(t);
        for (int i = 0; i < 4; ++i) {
            h ^= (v >> (8 * i)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

} // namespace pipeinfer
