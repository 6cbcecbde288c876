#include "commshim/executor.hpp"

#include <algorithm>
#include <ctime>

namespace commshim {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::usage: return "usage";
    case ErrorCode::config: return "config";
    case ErrorCode::startup: return "startup";
    case ErrorCode::count_overflow: return "count_overflow";
    case ErrorCode::channel: return "channel";
    case ErrorCode::truncation: return "truncation";
    case ErrorCode::busy: return "busy";
    case ErrorCode::cancelled: return "cancelled";
    case ErrorCode::connection: return "connection";
    case ErrorCode::connection_refused: return "connection_refused";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::io: return "io";
    case ErrorCode::correctness: return "correctness";
    case ErrorCode::stalled: return "stalled";
  }
  return "unknown";
}

Executor::Executor(Clock& clock) : clock_(clock) {}

Executor::~Executor() { shutdown(); }

void Executor::shutdown() {
  shutting_down_ = true;
  ready_.clear();
  pollers_.clear();
  while (!timers_.empty()) timers_.pop();
  // Destroying a root may not touch roots_ (the frame never reaches its
  // final suspend), so iterate over a copy.
  std::vector<void*> roots(roots_.begin(), roots_.end());
  roots_.clear();
  for (void* addr : roots) std::coroutine_handle<>::from_address(addr).destroy();
  ready_.clear();
  pollers_.clear();
  shutting_down_ = false;
}

const char* Executor::describe(RunStatus status) {
  switch (status) {
    case RunStatus::done: return "done";
    case RunStatus::stalled: return "stalled (no runnable task and no pending event)";
    case RunStatus::step_limit: return "step budget exhausted";
    case RunStatus::time_limit: return "time budget exhausted";
  }
  return "unknown";
}

void Executor::add_source(IdleSource* source) {
  if (std::find(sources_.begin(), sources_.end(), source) == sources_.end()) {
    sources_.push_back(source);
  }
}

void Executor::remove_source(IdleSource* source) {
  sources_.erase(std::remove(sources_.begin(), sources_.end(), source), sources_.end());
}

void Executor::schedule(std::coroutine_handle<> h) {
  if (shutting_down_ || !h) return;
  ready_.push_back(h);
}

void Executor::wake(const WaiterPtr& w) {
  if (!w || w->fired) return;
  w->fired = true;
  schedule(w->handle);
}

void Executor::add_timer(Nanos deadline, WaiterPtr w) {
  if (shutting_down_) return;
  timers_.push(TimerEntry{deadline, timer_seq_++, std::move(w)});
}

void Executor::note_failure(const char* what) {
  ++failed_tasks_;
  last_failure_ = what;
}

void Executor::fire_due_timers() {
  const Nanos t = now();
  while (!timers_.empty() && timers_.top().deadline <= t) {
    TimerEntry entry = timers_.top();
    timers_.pop();
    if (entry.waiter) wake(entry.waiter);
    force_repoll_ = true;
  }
}

std::uint64_t Executor::total_activity() const {
  std::uint64_t sum = 0;
  for (const IdleSource* s : sources_) sum += s->activity();
  return sum;
}

std::optional<Nanos> Executor::next_deadline() const {
  std::optional<Nanos> best;
  if (!timers_.empty()) best = timers_.top().deadline;
  const Nanos t = now();
  for (const IdleSource* s : sources_) {
    if (auto e = s->next_event_after(t); e && (!best || *e < *best)) best = e;
  }
  return best;
}

void Executor::wait_wall(std::optional<Nanos> deadline) {
  // Socket readiness only matters to parked pollers; without them this is a
  // plain sleep until the next timer.
  std::vector<pollfd> fds;
  if (!pollers_.empty()) {
    for (const IdleSource* s : sources_) s->collect_pollfds(fds);
  }
  Nanos timeout = std::chrono::milliseconds(20);
  if (deadline) timeout = std::clamp(*deadline - now(), Nanos{0}, timeout);
  timespec ts{};
  ts.tv_sec = static_cast<time_t>(timeout.count() / 1'000'000'000);
  ts.tv_nsec = static_cast<long>(timeout.count() % 1'000'000'000);
  ::ppoll(fds.data(), fds.size(), &ts, nullptr);
}

RunStatus Executor::run_for(Nanos duration, RunLimits limits) {
  limits.max_time = std::min(limits.max_time, now() + duration);
  return run_until([] { return false; }, limits);
}

RunStatus Executor::run_until(const std::function<bool()>& stop, RunLimits limits) {
  for (;;) {
    if (stop()) return RunStatus::done;
    if (steps_ >= limits.max_steps) return RunStatus::step_limit;
    if (now() > limits.max_time) return RunStatus::time_limit;

    if (!ready_.empty()) {
      auto h = ready_.front();
      ready_.pop_front();
      ++steps_;
      h.resume();
      // On a wall clock a busy ready queue must not starve timers or parked
      // socket readers, or heartbeats stop during bulk transfers. Virtual
      // time cannot pass while tasks are runnable, so it keeps the strict
      // order.
      // Whatever this wakes goes to the front of the queue.
      if (!clock_.is_virtual() && now() - last_service_ >= kWallServiceEvery) {
        last_service_ = now();
        const std::size_t before = ready_.size();
        fire_due_timers();
        for (auto p : pollers_) ready_.push_back(p);
        pollers_.clear();
        std::rotate(ready_.begin(), ready_.begin() + static_cast<std::ptrdiff_t>(before), ready_.end());
      }
      continue;
    }

    fire_due_timers();
    if (!ready_.empty()) continue;

    if (!pollers_.empty()) {
      const std::uint64_t activity = total_activity();
      if (force_repoll_ || activity != poll_snapshot_) {
        force_repoll_ = false;
        poll_snapshot_ = activity;
        for (auto h : pollers_) ready_.push_back(h);
        pollers_.clear();
        continue;
      }
    }

    // Nothing runnable and polling has reached a fixed point.
    std::optional<Nanos> deadline = next_deadline();
    if (clock_.is_virtual()) {
      if (!deadline) return RunStatus::stalled;
      if (*deadline > limits.max_time) {
        static_cast<VirtualClock&>(clock_).advance_to(limits.max_time);
        return RunStatus::time_limit;
      }
      static_cast<VirtualClock&>(clock_).advance_to(*deadline);
      force_repoll_ = true;
    } else {
      // Without pollers or timers nothing would ever drive a transport again.
      if (!deadline && pollers_.empty()) return RunStatus::stalled;
      if (deadline && *deadline > limits.max_time) deadline = limits.max_time;
      wait_wall(deadline);
      force_repoll_ = true;
    }
  }
}

}  // namespace commshim
