#pragma once

// Minimal discrete-event kernel. Events at equal times run in scheduling
// order, which keeps every trace reproducible.

#include <cstdint>
#include <functional>
#include <queue>
#include <stdexcept>
#include <vector>

namespace pipeinfer {

class EventQueue {
public:
    using Action = std::function<void()>;

    double now() const { return now_; }

    void at(double t, Action fn) {
        if (t < now_) {
            t = now_;
        }
        heap_.push(Event{t, next_seq_++, std::move(fn)});
    }

    void after(double dt, Action fn) { at(now_ + dt, std::move(fn)); }

    bool empty() const { return heap_.empty(); }
    std::uint64_t processed() const { return processed_; }

    bool step() {
        if (heap_.empty()) {
            return false;
        }
        Event e = heap_.top();
        heap_.pop();
        now_ = e.time;
        ++processed_;
        e.fn();
        return true;
    }

    // Runs until the queue drains or `max_events` fire.
    void run(std::uint64_t max_events = UINT64_MAX) {
        for (std::uint64_t i = 0; i < max_events && step(); ++i) {
        }
    }

private:
    struct Event {
        double time;
        std::uint64_t seq;
        Action fn;
    };
    struct Later {
        bool operator()(const Event& a, const Event& b) const {
            return a.time != b.time ? a.time > b.time : a.seq > b.seq;
        }
    };

    double now_ = 0.0;
    std::uint64_t next_seq_ = 0;
    std::uint64_t processed_ = 0;
    std::priority_queue<Event, std::vector<Event>, Later> heap_;
};

} // namespace pipeinfer
