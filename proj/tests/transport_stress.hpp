#pragma once

// Randomized traffic over a chain of nodes: runs flow 0 -> 1 -> ... -> N-1 -> 0
// as ActivationTransfer transactions, background messages flow between random
// node pairs, and the head cancels a share of the runs. Every receiver checks
// per-(source, tag) order and every hop forwards exactly one message per run.

#include "pipeinfer/sim.hpp"
#include "pipeinfer/transport.hpp"

#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace oracle {

using namespace pipeinfer;

struct TransportStress {
    std::uint64_t messages = 0;
    std::uint64_t order_violations = 0;
    std::uint64_t cancels = 0;
    std::uint64_t placeholders_at_head = 0;
    std::uint64_t full_at_head = 0;
    bool hop_counts_exact = true;
    bool counters_balanced = true;
    std::string detail;
};

namespace detail_stress {

inline constexpr std::array<Tag, 3> kNoiseTags = {Tag::RunConfig, Tag::CacheCopy, Tag::CacheRemove};

// Background traffic carries a per-(source, destination, tag) sequence number in run_id.
struct OrderLog {
    std::map<std::tuple<NodeId, NodeId, Tag>, RunId> next_out;
    std::map<std::tuple<NodeId, NodeId, Tag>, RunId> next_in;
    std::uint64_t violations = 0;

    RunId stamp(NodeId s, NodeId d, Tag t) { return next_out[{s, d, t}]++; }
    void observe(const Message& m) {
        RunId& want = next_in[{m.source, m.destination, m.tag}];
        if (m.run_id != want) {
            ++violations;
        }
        want = m.run_id + 1;
    }
};

} // namespace detail_stress

inline TransportStress run_virtual_transport_stress(std::uint64_t seed, int n_nodes = 8, int runs = 450,
                                                    int noise = 4000, double cancel_share = 0.4) {
    using detail_stress::kNoiseTags;
    std::mt19937_64 rng(seed);
    EventQueue events;
    LinkProfile link;
    link.latency = 5e-6;
    link.per_byte = 1e-9;
    link.jitter = 60e-6;
    link.jitter_seed = seed;

    TransportStress out;
    detail_stress::OrderLog order;
    std::vector<std::set<RunId>> cancelled(static_cast<std::size_t>(n_nodes));
    std::vector<std::optional<Message>> pending(static_cast<std::size_t>(n_nodes));
    std::vector<std::vector<RunId>> seen(static_cast<std::size_t>(n_nodes));
    std::vector<RunId> head_order;
    std::set<RunId> to_cancel;

    std::function<void(NodeId)> wake;
    VirtualTransport t(events, n_nodes, link, [&](NodeId n) { wake(n); });

    auto forward = [&](NodeId from, NodeId to, RunId run, bool placeholder) {
        Payload body;
        if (!placeholder) {
            Batch b;
            b.run_id = run;
            b.tokens.resize(1 + run % 5);
            body = b;
        }
        if (to == 0) {
            t.send(from, to, Tag::LogitsTransfer, run, std::move(body));
        } else {
            t.begin_transaction(from, to, Tag::ActivationTransfer, run, std::move(body));
        }
    };

    wake = [&](NodeId n) {
        auto& mine = cancelled[static_cast<std::size_t>(n)];
        for (RunId r : t.poll_cancel(n)) {
            mine.insert(r);
        }
        for (NodeId src = 0; src < n_nodes; ++src) {
            for (Tag tag : kNoiseTags) {
                while (auto m = t.recv(n, src, tag)) {
                    order.observe(*m);
                }
            }
        }
        if (n == 0) {
            const NodeId last = n_nodes - 1;
            while (auto m = t.recv(0, last, Tag::LogitsTransfer)) {
                head_order.push_back(m->run_id);
                (m->is_placeholder() ? out.placeholders_at_head : out.full_at_head) += 1;
                if (m->is_placeholder() && to_cancel.count(m->run_id) == 0) {
                    out.hop_counts_exact = false;
                    out.detail = "placeholder for a run that was never cancelled";
                }
            }
            return;
        }
        auto& pend = pending[static_cast<std::size_t>(n)];
        for (;;) {
            if (!pend) {
                auto s = t.recv(n, n - 1, Tag::TransactionStart);
                if (!s) {
                    return;
                }
                pend = std::move(s);
            }
            auto body = t.recv(n, n - 1, std::get<Tag>(pend->payload));
            if (!body) {
                return;
            }
            if (body->run_id != pend->run_id) {
                ++out.order_violations;
            }
            pend.reset();
            const RunId run = body->run_id;
            seen[static_cast<std::size_t>(n)].push_back(run);
            const bool skip = body->is_placeholder() || mine.count(run) > 0;
            forward(n, (n + 1) % n_nodes, run, skip);
        }
    };

    double at = 0.0;
    for (int r = 0; r < runs; ++r) {
        at += 5e-6 * static_cast<double>(rng() % 20);
        const RunId run = static_cast<RunId>(r + 1);
        events.at(at, [&, run] { forward(0, 1, run, false); });
        if (static_cast<double>(rng() % 1000) < cancel_share * 1000.0) {
            to_cancel.insert(run);
            events.at(at + 1e-6 * static_cast<double>(rng() % 400), [&, run] {
                ++out.cancels;
                t.send_cancel(0, run);
            });
        }
    }
    for (int i = 0; i < noise; ++i) {
        const double when = at * static_cast<double>(rng() % 1000) / 1000.0;
        const auto s = static_cast<NodeId>(rng() % static_cast<std::uint64_t>(n_nodes));
        const auto d = static_cast<NodeId>(rng() % static_cast<std::uint64_t>(n_nodes));
        const Tag tag = kNoiseTags[rng() % kNoiseTags.size()];
        const std::size_t len = rng() % 64;
        events.at(when, [&, s, d, tag, len] {
            Message m;
            m.source = s;
            m.destination = d;
            m.tag = tag;
            m.run_id = order.stamp(s, d, tag);
            Activations a;
            a.rows = 1;
            a.cols = len;
            a.data.assign(len, 0.0);
            m.payload = std::move(a);
            t.send(std::move(m));
        });
    }
    events.run();

    out.order_violations += order.violations;
    for (NodeId n = 1; n < n_nodes; ++n) {
        const auto& s = seen[static_cast<std::size_t>(n)];
        if (s.size() != static_cast<std::size_t>(runs)) {
            out.hop_counts_exact = false;
            out.detail = "node " + std::to_string(n) + " saw " + std::to_string(s.size()) + " runs";
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] != static_cast<RunId>(i + 1)) {
                ++out.order_violations;
            }
        }
    }
    if (head_order.size() != static_cast<std::size_t>(runs)) {
        out.hop_counts_exact = false;
        out.detail = "head saw " + std::to_string(head_order.size()) + " results";
    }
    for (std::size_t i = 0; i < head_order.size(); ++i) {
        if (head_order[i] != static_cast<RunId>(i + 1)) {
            ++out.order_violations;
        }
    }
    // Full results only for runs that were never cancelled or whose cancel came too late.
    if (out.full_at_head + out.placeholders_at_head != static_cast<std::uint64_t>(runs) ||
        out.placeholders_at_head > to_cancel.size()) {
        out.hop_counts_exact = false;
        out.detail = "placeholder accounting mismatch";
    }
    for (NodeId n = 0; n < n_nodes; ++n) {
        if (t.sent_to(n).messages != t.received_by(n).messages) {
            out.counters_balanced = false;
            out.detail = "node " + std::to_string(n) + " left messages unreceived";
        }
    }
    for (Tag tag : kAllTags) {
        if (tag != Tag::Cancel) {
            out.messages += t.totals().messages_of(tag);
        }
    }
    return out;
}

// Same pipeline over real threads, one dispatch loop per worker.
inline TransportStress run_thread_transport_stress(std::uint64_t seed, int n_nodes = 4, int runs = 200) {
    std::mt19937_64 rng(seed);
    LinkProfile link;
    link.jitter = 20e-6;
    link.jitter_seed = seed;
    ThreadTransport t(n_nodes, link);
    TransportStress out;

    auto run_of = [](const Message& m) -> RunId {
        if (const auto* b = std::get_if<Batch>(&m.payload)) {
            return b->run_id;
        }
        return m.run_id;
    };
    std::vector<std::vector<RunId>> seen(static_cast<std::size_t>(n_nodes));
    std::vector<std::thread> workers;
    for (NodeId n = 1; n < n_nodes; ++n) {
        workers.emplace_back([&, n] {
            std::set<RunId> cancelled;
            const NodeId next = (n + 1) % n_nodes;
            std::map<Tag, TransactionHandler> handlers;
            handlers[Tag::ActivationTransfer] = [&](const Message& body) {
                for (RunId r : t.poll_cancel(n)) {
                    cancelled.insert(r);
                }
                const RunId run = run_of(body);
                seen[static_cast<std::size_t>(n)].push_back(run);
                Payload p;
                if (!body.is_placeholder() && cancelled.count(run) == 0) {
                    Batch b;
                    b.run_id = run;
                    b.tokens.resize(2);
                    p = b;
                }
                if (next == 0) {
                    t.send(n, 0, Tag::LogitsTransfer, run, std::move(p));
                } else {
                    t.begin_transaction(n, next, Tag::ActivationTransfer, run, std::move(p));
                }
            };
            handlers[Tag::Shutdown] = [&](const Message&) {
                if (next != 0) {
                    t.begin_transaction(n, next, Tag::Shutdown, 0);
                }
            };
            dispatch_loop(t, n, handlers);
        });
    }
    std::set<RunId> to_cancel;
    for (int r = 1; r <= runs; ++r) {
        Batch b;
        b.run_id = static_cast<RunId>(r);
        b.tokens.resize(2);
        t.begin_transaction(0, 1, Tag::ActivationTransfer, b.run_id, b);
        if (rng() % 2 == 0) {
            to_cancel.insert(b.run_id);
            ++out.cancels;
            t.send_cancel(0, b.run_id);
        }
    }
    std::vector<RunId> head;
    for (int r = 0; r < runs; ++r) {
        Message m = t.recv(0, n_nodes - 1, Tag::LogitsTransfer);
        head.push_back(m.run_id);
        (m.is_placeholder() ? out.placeholders_at_head : out.full_at_head) += 1;
        if (m.is_placeholder() && to_cancel.count(m.run_id) == 0) {
            out.hop_counts_exact = false;
        }
    }
    t.begin_transaction(0, 1, Tag::Shutdown, 0);
    for (auto& w : workers) {
        w.join();
    }
    for (NodeId n = 1; n < n_nodes; ++n) {
        const auto& s = seen[static_cast<std::size_t>(n)];
        out.hop_counts_exact = out.hop_counts_exact && s.size() == static_cast<std::size_t>(runs);
        for (std::size_t i = 0; i < s.size(); ++i) {
            out.order_violations += s[i] != static_cast<RunId>(i + 1) ? 1 : 0;
        }
    }
    for (std::size_t i = 0; i < head.size(); ++i) {
        out.order_violations += head[i] != static_cast<RunId>(i + 1) ? 1 : 0;
    }
    if (out.full_at_head + out.placeholders_at_head != static_cast<std::uint64_t>(runs) ||
        out.placeholders_at_head > to_cancel.size()) {
        out.hop_counts_exact = false;
    }
    for (NodeId n = 0; n < n_nodes; ++n) {
        const TagCounters s = t.sent_to(n);
        const TagCounters r = t.received_by(n);
        out.counters_balanced = out.counters_balanced && s.messages == r.messages;
        for (Tag tag : kAllTags) {
            out.messages += tag == Tag::Cancel ? 0 : s.messages_of(tag);
        }
    }
    return out;
}

} // namespace oracle
