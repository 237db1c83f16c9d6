#pragma once

// Simulated cluster messaging with MPI-like point-to-point semantics.
//
// Sends are buffered and return immediately. Messages sharing (source,
// destination, tag) are never reordered: a message's delivery time is clamped
// to be no earlier than the previous one on the same triple. A transaction is
// a start message on the TransactionStart channel naming the transaction tag,
// followed by a body message carrying that tag. Cancellation signals use a
// separate control channel and skip the data queues entirely.
//
// VirtualTransport runs on an EventQueue (deterministic virtual seconds).
// ThreadTransport is the same contract over real threads and a steady clock.

#include "pipeinfer/batch.hpp"
#include "pipeinfer/model.hpp"
#include "pipeinfer/sim.hpp"
#include "pipeinfer/types.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace pipeinfer {

enum class Tag : std::uint8_t {
    TransactionStart,
    RunConfig,
    ActivationTransfer,
    LogitsTransfer,
    CacheCopy,
    CacheRemove,
    Cancel,
    Shutdown,
};

inline constexpr std::size_t kTagCount = 8;

inline constexpr std::array<Tag, kTagCount> kAllTags = {
    Tag::TransactionStart, Tag::RunConfig,   Tag::ActivationTransfer, Tag::LogitsTransfer,
    Tag::CacheCopy,        Tag::CacheRemove, Tag::Cancel,             Tag::Shutdown,
};

inline const char* to_string(Tag t) {
    switch (t) {
    case Tag::TransactionStart:
        return "TransactionStart";
    case Tag::RunConfig:
        return "RunConfig";
    case Tag::ActivationTransfer:
        return "ActivationTransfer";
    case Tag::LogitsTransfer:
        return "LogitsTransfer";
    case Tag::CacheCopy:
        return "CacheCopy";
    case Tag::CacheRemove:
        return "CacheRemove";
    case Tag::Cancel:
        return "Cancel";
    case Tag::Shutdown:
        return "Shutdown";
    }
    return "?";
}

struct CacheCopyBody {
    SeqId src = 0;
    SeqSet dst;
    Pos end = 0;
};

struct CacheRemoveBody {
    SeqId seq = 0;
    Pos from = 0;
};

// monostate doubles as the empty placeholder payload of a cancelled run.
using Payload = std::variant<std::monostate, Tag, Batch, Activations, LogitsSet, CacheCopyBody, CacheRemoveBody>;

inline std::size_t payload_bytes(const Payload& p) {
    struct Size {
        std::size_t operator()(std::monostate) const { return 0; }
        std::size_t operator()(Tag) const { return 1; }
        std::size_t operator()(const Batch& b) const { return 16 + b.size() * 16; }
        std::size_t operator()(const Activations& a) const { return a.bytes(); }
        std::size_t operator()(const LogitsSet& l) const { return l.bytes() + l.token_index.size() * 4; }
        std::size_t operator()(const CacheCopyBody&) const { return 16; }
        std::size_t operator()(const CacheRemoveBody&) const { return 8; }
    };
    return std::visit(Size{}, p);
}

// Bytes every message pays on top of its payload: run id and tag.
inline constexpr std::size_t kHeaderBytes = 9;

struct Message {
    NodeId source = 0;
    NodeId destination = 0;
    Tag tag = Tag::RunConfig;
    RunId run_id = 0;
    Payload payload;
    std::size_t bytes = 0;
    double sent_at = 0.0;
    double deliver_at = 0.0;
    std::uint64_t seq = 0; // global send order

    bool is_placeholder() const { return std::holds_alternative<std::monostate>(payload); }
};

struct LinkProfile {
    double per_byte = 0.0; // seconds per byte
    double latency = 0.0;  // seconds per message
    double jitter = 0.0;   // max extra seconds, uniform, seeded
    std::uint64_t jitter_seed = 0;

    void validate() const {
        if (!(per_byte >= 0.0) || !(latency >= 0.0) || !(jitter >= 0.0)) {
            throw ConfigError("link profile delays must be >= 0");
        }
    }
};

struct TagCounters {
    std::array<std::uint64_t, kTagCount> messages{};
    std::array<std::uint64_t, kTagCount> bytes{};

    void add(Tag t, std::size_t b) {
        messages[static_cast<std::size_t>(t)] += 1;
        bytes[static_cast<std::size_t>(t)] += b;
    }
    std::uint64_t messages_of(Tag t) const { return messages[static_cast<std::size_t>(t)]; }
    std::uint64_t bytes_of(Tag t) const { return bytes[static_cast<std::size_t>(t)]; }
};

namespace detail {

// Per-destination queues keyed by (source, tag); shared by both transports.
class ChannelTable {
public:
    explicit ChannelTable(int n_nodes, const LinkProfile& link)
        : n_nodes_(n_nodes), link_(link), inboxes_(n_nodes), cancels_(n_nodes), sent_(n_nodes), received_(n_nodes),
          shut_(n_nodes, false) {
        link_.validate();
        if (n_nodes < 1) {
            throw ConfigError("transport needs at least one node");
        }
    }

    int n_nodes() const { return n_nodes_; }

    void check_node(NodeId n) const {
        if (n < 0 || n >= n_nodes_) {
            throw ProtocolError("unknown node " + std::to_string(n));
        }
    }

    // Stamps and enqueues; returns the delivery time.
    double enqueue(Message& m, double now) {
        check_node(m.source);
        check_node(m.destination);
        if (shut_[m.destination]) {
            throw ShutdownError();
        }
        m.bytes = payload_bytes(m.payload) + kHeaderBytes;
        m.sent_at = now;
        m.seq = next_seq_++;
        double t = now;
        if (m.source != m.destination) {
            t += link_.latency + static_cast<double>(m.bytes) * link_.per_byte;
            if (link_.jitter > 0.0) {
                t += link_.jitter * unit_double(mix64(link_.jitter_seed ^ mix64(m.seq)));
            }
        }
        const auto key = std::make_tuple(m.source, m.destination, m.tag);
        auto it = last_delivery_.find(key);
        if (it != last_delivery_.end()) {
            t = std::max(t, it->second);
        }
        last_delivery_[key] = t;
        m.deliver_at = t;
        sent_[m.destination].add(m.tag, m.bytes);
        total_.add(m.tag, m.bytes);
        inboxes_[m.destination][{m.source, m.tag}].push_back(m);
        return t;
    }

    double enqueue_cancel(NodeId from, NodeId to, RunId run, double now) {
        check_node(to);
        const double t = now + (from == to ? 0.0 : link_.latency + 8.0 * link_.per_byte);
        cancels_[to].push_back({t, run});
        total_.add(Tag::Cancel, 8 + kHeaderBytes);
        return t;
    }

    bool probe(NodeId node, Tag tag, double now) const {
        check_node(node);
        for (const auto& [key, q] : inboxes_[node]) {
            if (key.second == tag && !q.empty() && q.front().deliver_at <= now) {
                return true;
            }
        }
        return false;
    }

    std::optional<Message> take(NodeId node, NodeId source, Tag tag, double now) {
        check_node(node);
        auto it = inboxes_[node].find({source, tag});
        if (it == inboxes_[node].end() || it->second.empty() || it->second.front().deliver_at > now) {
            return std::nullopt;
        }
        Message m = std::move(it->second.front());
        it->second.pop_front();
        received_[node].add(m.tag, m.bytes);
        return m;
    }

    // Earliest delivered message with `tag` from any source.
    std::optional<Message> take_any(NodeId node, Tag tag, double now) {
        check_node(node);
        std::deque<Message>* best = nullptr;
        for (auto& [key, q] : inboxes_[node]) {
            if (key.second != tag || q.empty() || q.front().deliver_at > now) {
                continue;
            }
            if (best == nullptr || std::make_pair(q.front().deliver_at, q.front().seq) <
                                       std::make_pair(best->front().deliver_at, best->front().seq)) {
                best = &q;
            }
        }
        if (best == nullptr) {
            return std::nullopt;
        }
        Message m = std::move(best->front());
        best->pop_front();
        received_[node].add(m.tag, m.bytes);
        return m;
    }

    std::vector<RunId> poll_cancel(NodeId node, double now) {
        check_node(node);
        std::vector<RunId> out;
        auto& q = cancels_[node];
        std::erase_if(q, [&](const std::pair<double, RunId>& c) {
            if (c.first <= now) {
                out.push_back(c.second);
                return true;
            }
            return false;
        });
        return out;
    }

    // Earliest pending delivery time for `node`, if any message is queued.
    std::optional<double> next_delivery(NodeId node) const {
        std::optional<double> t;
        for (const auto& [key, q] : inboxes_[node]) {
            if (!q.empty() && (!t || q.front().deliver_at < *t)) {
                t = q.front().deliver_at;
            }
        }
        for (const auto& c : cancels_[node]) {
            if (!t || c.first < *t) {
                t = c.first;
            }
        }
        return t;
    }

    void shut(NodeId node) { shut_[node] = true; }
    bool is_shut(NodeId node) const { return shut_[node]; }

    const TagCounters& sent_to(NodeId node) const { return sent_[node]; }
    const TagCounters& received_by(NodeId node) const { return received_[node]; }
    const TagCounters& totals() const { return total_; }
    const LinkProfile& link() const { return link_; }

private:
    int n_nodes_;
    LinkProfile link_;
    std::vector<std::map<std::pair<NodeId, Tag>, std::deque<Message>>> inboxes_;
    std::vector<std::vector<std::pair<double, RunId>>> cancels_;
    std::map<std::tuple<NodeId, NodeId, Tag>, double> last_delivery_;
    std::vector<TagCounters> sent_;
    std::vector<TagCounters> received_;
    TagCounters total_;
    std::vector<bool> shut_;
    std::uint64_t next_seq_ = 0;
};

} // namespace detail

// Deterministic transport on a virtual clock. `on_delivery(node)` is invoked
// through the event queue whenever something lands in a node's inbox.
class VirtualTransport {
public:
    VirtualTransport(EventQueue& events, int n_nodes, const LinkProfile& link,
                     std::function<void(NodeId)> on_delivery = {})
        : events_(events), table_(n_nodes, link), on_delivery_(std::move(on_delivery)) {}

    int n_nodes() const { return table_.n_nodes(); }
    double now() const { return events_.now(); }

    void send(Message msg) {
        const double t = table_.enqueue(msg, events_.now());
        notify(msg.destination, t);
    }

    void send(NodeId from, NodeId to, Tag tag, RunId run, Payload payload = {}) {
        Message m;
        m.source = from;
        m.destination = to;
        m.tag = tag;
        m.run_id = run;
        m.payload = std::move(payload);
        send(std::move(m));
    }

    // Start message on the transaction channel, then the body under `tag`.
    void begin_transaction(NodeId from, NodeId to, Tag tag, RunId run, Payload body = {}) {
        if (tag == Tag::TransactionStart || tag == Tag::Cancel) {
            throw ProtocolError(std::string("not a transaction tag: ") + to_string(tag));
        }
        send(from, to, Tag::TransactionStart, run, tag);
        send(from, to, tag, run, std::move(body));
    }

    bool probe(NodeId node, Tag tag) const { return table_.probe(node, tag, events_.now()); }

    // Non-blocking in virtual time: nullopt means "not yet delivered"; the
    // caller resumes on the next delivery callback.
    std::optional<Message> recv(NodeId node, NodeId source, Tag tag) {
        return table_.take(node, source, tag, events_.now());
    }
    std::optional<Message> recv_any(NodeId node, Tag tag) { return table_.take_any(node, tag, events_.now()); }

    void send_cancel(NodeId from, RunId run) {
        for (NodeId n = 0; n < table_.n_nodes(); ++n) {
            if (n == from || table_.is_shut(n)) {
                continue;
            }
            notify(n, table_.enqueue_cancel(from, n, run, events_.now()));
        }
    }

    std::vector<RunId> poll_cancel(NodeId node) { return table_.poll_cancel(node, events_.now()); }

    void shutdown(NodeId node) { table_.shut(node); }

    const TagCounters& sent_to(NodeId node) const { return table_.sent_to(node); }
    const TagCounters& received_by(NodeId node) const { return table_.received_by(node); }
    const TagCounters& totals() const { return table_.totals(); }

private:
    void notify(NodeId node, double t) {
        if (on_delivery_) {
            events_.at(t, [this, node] { on_delivery_(node); });
        }
    }

    EventQueue& events_;
    detail::ChannelTable table_;
    std::function<void(NodeId)> on_delivery_;
};

// Same contract over real threads. recv blocks until a matching message is
// deliverable; shutdown wakes blocked receivers with ShutdownError.
class ThreadTransport {
public:
    ThreadTransport(int n_nodes, const LinkProfile& link) : table_(n_nodes, link), start_(Clock::now()) {}

    int n_nodes() const { return table_.n_nodes(); }

    double now() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }

    void send(Message msg) {
        {
            std::lock_guard lock(mu_);
            table_.enqueue(msg, now());
        }
        cv_.notify_all();
    }

    void send(NodeId from, NodeId to, Tag tag, RunId run, Payload payload = {}) {
        Message m;
        m.source = from;
        m.destination = to;
        m.tag = tag;
        m.run_id = run;
        m.payload = std::move(payload);
        send(std::move(m));
    }

    void begin_transaction(NodeId from, NodeId to, Tag tag, RunId run, Payload body = {}) {
        if (tag == Tag::TransactionStart || tag == Tag::Cancel) {
            throw ProtocolError(std::string("not a transaction tag: ") + to_string(tag));
        }
        std::lock_guard lock(mu_);
        Message start{from, to, Tag::TransactionStart, run, tag};
        table_.enqueue(start, now());
        Message m{from, to, tag, run, std::move(body)};
        table_.enqueue(m, now());
        cv_.notify_all();
    }

    bool probe(NodeId node, Tag tag) const {
        std::lock_guard lock(mu_);
        return table_.probe(node, tag, now());
    }

    Message recv(NodeId node, NodeId source, Tag tag) {
        return wait_for(node, [&] { return table_.take(node, source, tag, now()); });
    }

    Message recv_any(NodeId node, Tag tag) {
        return wait_for(node, [&] { return table_.take_any(node, tag, now()); });
    }

    void send_cancel(NodeId from, RunId run) {
        {
            std::lock_guard lock(mu_);
            for (NodeId n = 0; n < table_.n_nodes(); ++n) {
                if (n != from) {
                    table_.enqueue_cancel(from, n, run, now());
                }
            }
        }
        cv_.notify_all();
    }

    std::vector<RunId> poll_cancel(NodeId node) {
        std::lock_guard lock(mu_);
        return table_.poll_cancel(node, now());
    }

    void shutdown(NodeId node) {
        {
            std::lock_guard lock(mu_);
            table_.shut(node);
        }
        cv_.notify_all();
    }

    TagCounters received_by(NodeId node) const {
        std::lock_guard lock(mu_);
        return table_.received_by(node);
    }
    TagCounters sent_to(NodeId node) const {
        std::lock_guard lock(mu_);
        return table_.sent_to(node);
    }

private:
    using Clock = std::chrono::steady_clock;

    template <class Take>
    Message wait_for(NodeId node, Take take) {
        std::unique_lock lock(mu_);
        for (;;) {
            if (auto m = take()) {
                return std::move(*m);
            }
            if (table_.is_shut(node)) {
                throw ShutdownError();
            }
            if (auto t = table_.next_delivery(node); t && *t > now()) {
                cv_.wait_until(lock, start_ + std::chrono::duration_cast<Clock::duration>(
                                                  std::chrono::duration<double>(*t)));
            } else {
                cv_.wait_for(lock, std::chrono::milliseconds(5));
            }
        }
    }

    mutable std::mutex mu_;
    std::condition_variable cv_;
    detail::ChannelTable table_;
    Clock::time_point start_;
};

using TransactionHandler = std::function<void(const Message& body)>;

// Worker dispatch over ThreadTransport: transactions run strictly in start
// order, each body received on its own tag. Returns after a Shutdown
// transaction; an unregistered tag is a protocol error.
inline void dispatch_loop(ThreadTransport& t, NodeId node, const std::map<Tag, TransactionHandler>& handlers) {
    for (;;) {
        Message start = t.recv_any(node, Tag::TransactionStart);
        const Tag tag = std::get<Tag>(start.payload);
        Message body = t.recv(node, start.source, tag);
        if (tag == Tag::Shutdown) {
            if (auto it = handlers.find(tag); it != handlers.end()) {
                it->second(body);
            }
            return;
        }
        auto it = handlers.find(tag);
        if (it == handlers.end()) {
            throw ProtocolError(std::string("no handler for transaction ") + to_string(tag));
        }
        it->second(body);
    }
}

} // namespace pipeinfer
