#pragma once

#include "commshim/clock.hpp"
#include "commshim/error.hpp"
#include "commshim/task.hpp"

#include <poll.h>

#include <coroutine>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <variant>
#include <vector>

namespace commshim {

class Executor;

// One suspended coroutine that may be woken from several places (an event
// and a timeout, say). Only the first wake resumes it.
struct Waiter {
  std::coroutine_handle<> handle;
  bool fired = false;
};
using WaiterPtr = std::shared_ptr<Waiter>;

// Something outside the task graph that can make progress while every task
// is parked: a transport. The executor uses it to decide whether polling is
// worthwhile and how far to sleep (or advance virtual time).
class IdleSource {
 public:
  virtual ~IdleSource() = default;
  // Monotonic counter bumped on every externally visible state change.
  virtual std::uint64_t activity() const = 0;
  // Earliest internal event strictly after `now`, if any.
  virtual std::optional<Nanos> next_event_after(Nanos /*now*/) const { return std::nullopt; }
  virtual void collect_pollfds(std::vector<pollfd>& /*out*/) const {}
};

enum class RunStatus { done, stalled, step_limit, time_limit };

struct RunLimits {
  std::uint64_t max_steps = std::numeric_limits<std::uint64_t>::max();
  Nanos max_time = Nanos::max();
};

template <typename T>
struct JoinState {
  using Stored = std::conditional_t<std::is_void_v<T>, std::monostate, T>;
  bool done = false;
  std::optional<Stored> value;
  std::exception_ptr error;
  std::vector<WaiterPtr> waiters;
  void* root = nullptr;
};

namespace detail {

struct RootTask {
  struct promise_type {
    RootTask get_return_object() noexcept {
      return RootTask{std::coroutine_handle<promise_type>::from_promise(*this)};
    }
    std::suspend_always initial_suspend() const noexcept { return {}; }
    std::suspend_never final_suspend() const noexcept { return {}; }
    void return_void() const noexcept {}
    void unhandled_exception() const noexcept { std::terminate(); }
  };
  std::coroutine_handle<promise_type> handle;
};

}  // namespace detail

template <typename T>
class JoinHandle {
 public:
  JoinHandle() = default;
  JoinHandle(Executor* ex, std::shared_ptr<JoinState<T>> state)
      : executor_(ex), state_(std::move(state)) {}

  bool valid() const noexcept { return static_cast<bool>(state_); }
  bool done() const noexcept { return state_ && state_->done; }
  bool failed() const noexcept { return done() && state_->error != nullptr; }

  // Only valid once done(). Moves the result out, so call it once.
  T get() const {
    if (!done()) fail(ErrorCode::usage, "JoinHandle::get on unfinished task");
    if (state_->error) std::rethrow_exception(state_->error);
    if constexpr (!std::is_void_v<T>) return std::move(*state_->value);
  }

  std::exception_ptr error() const { return state_ ? state_->error : nullptr; }

  auto join() const {
    struct Awaiter {
      std::shared_ptr<JoinState<T>> state;
      bool await_ready() const noexcept { return state->done; }
      void await_suspend(std::coroutine_handle<> h) {
        auto w = std::make_shared<Waiter>();
        w->handle = h;
        state->waiters.push_back(std::move(w));
      }
      T await_resume() const {
        if (state->error) std::rethrow_exception(state->error);
        if constexpr (!std::is_void_v<T>) return std::move(*state->value);
      }
    };
    return Awaiter{state_};
  }

 private:
  Executor* executor_ = nullptr;
  std::shared_ptr<JoinState<T>> state_;
};

// Single-threaded cooperative task executor. All coroutines of a process (or
// of every simulated rank, in-process) run here; nothing in the library
// creates threads.
class Executor {
 public:
  explicit Executor(Clock& clock);
  ~Executor();
  Executor(const Executor&) = delete;
  Executor& operator=(const Executor&) = delete;

  Clock& clock() noexcept { return clock_; }
  Nanos now() const { return clock_.now(); }
  bool is_virtual() const { return clock_.is_virtual(); }

  // Resumptions performed so far; the unit of the "executor tick" budgets.
  std::uint64_t steps() const noexcept { return steps_; }
  std::uint64_t failed_tasks() const noexcept { return failed_tasks_; }
  const std::string& last_failure() const noexcept { return last_failure_; }

  void add_source(IdleSource* source);
  void remove_source(IdleSource* source);

  void schedule(std::coroutine_handle<> h);
  void wake(const WaiterPtr& w);
  void add_timer(Nanos deadline, WaiterPtr w);
  // Ensures the executor treats `deadline` as an event time, without any
  // coroutine attached.
  void add_deadline(Nanos deadline) { add_timer(deadline, nullptr); }

  // Re-queue at the back of the ready queue.
  auto yield() {
    struct Awaiter {
      Executor* ex;
      bool await_ready() const noexcept { return false; }
      void await_suspend(std::coroutine_handle<> h) const { ex->schedule(h); }
      void await_resume() const noexcept {}
    };
    return Awaiter{this};
  }

  // Park until the ready queue drains and some source reports activity (or
  // time moves). This is what a polling coroutine yields with.
  auto poll() {
    struct Awaiter {
      Executor* ex;
      bool await_ready() const noexcept { return false; }
      void await_suspend(std::coroutine_handle<> h) const { ex->pollers_.push_back(h); }
      void await_resume() const noexcept {}
    };
    return Awaiter{this};
  }

  auto sleep_until(Nanos deadline) {
    struct Awaiter {
      Executor* ex;
      Nanos deadline;
      bool await_ready() const { return ex->now() >= deadline; }
      void await_suspend(std::coroutine_handle<> h) const {
        auto w = std::make_shared<Waiter>();
        w->handle = h;
        ex->add_timer(deadline, std::move(w));
      }
      void await_resume() const noexcept {}
    };
    return Awaiter{this, deadline};
  }
  auto sleep_for(Nanos d) { return sleep_until(now() + d); }

  template <typename T>
  JoinHandle<T> spawn(Task<T> task) {
    auto state = std::make_shared<JoinState<T>>();
    auto root = run_root<T>(std::move(task), state);
    state->root = root.handle.address();
    roots_.insert(state->root);
    schedule(root.handle);
    return JoinHandle<T>(this, std::move(state));
  }

  RunStatus run_until(const std::function<bool()>& stop, RunLimits limits = {});
  RunStatus run_for(Nanos duration, RunLimits limits = {});

  // Spawns `task`, runs until it finishes and returns its value. Throws
  // Error(stalled) if the executor deadlocks or a limit is hit first.
  template <typename T>
  T block_on(Task<T> task, RunLimits limits = {}) {
    auto handle = spawn(std::move(task));
    const RunStatus status = run_until([&] { return handle.done(); }, limits);
    if (!handle.done()) {
      fail(ErrorCode::stalled, std::string("block_on did not complete: ") + describe(status));
    }
    return handle.get();
  }

  // Destroys every suspended task. Called by the destructor; call it
  // explicitly before tearing down objects those tasks reference.
  void shutdown();

  static const char* describe(RunStatus status);

 private:
  struct TimerEntry {
    Nanos deadline;
    std::uint64_t seq;
    WaiterPtr waiter;
    bool operator>(const TimerEntry& o) const {
      return deadline != o.deadline ? deadline > o.deadline : seq > o.seq;
    }
  };

  template <typename T>
  detail::RootTask run_root(Task<T> task, std::shared_ptr<JoinState<T>> state) {
    try {
      if constexpr (std::is_void_v<T>) {
        co_await task;
        state->value.emplace();
      } else {
        state->value.emplace(co_await task);
      }
    } catch (const std::exception& e) {
      state->error = std::current_exception();
      note_failure(e.what());
    } catch (...) {
      state->error = std::current_exception();
      note_failure("unknown exception");
    }
    state->done = true;
    for (auto& w : state->waiters) wake(w);
    state->waiters.clear();
    roots_.erase(state->root);
  }

  void note_failure(const char* what);
  void fire_due_timers();
  std::uint64_t total_activity() const;
  std::optional<Nanos> next_deadline() const;
  void wait_wall(std::optional<Nanos> deadline);

  Clock& clock_;
  std::deque<std::coroutine_handle<>> ready_;
  std::vector<std::coroutine_handle<>> pollers_;
  std::priority_queue<TimerEntry, std::vector<TimerEntry>, std::greater<>> timers_;
  std::uint64_t timer_seq_ = 0;
  std::vector<IdleSource*> sources_;
  std::unordered_set<void*> roots_;
  static constexpr Nanos kWallServiceEvery{100'000};
  Nanos last_service_{0};
  std::uint64_t steps_ = 0;
  std::uint64_t poll_snapshot_ = std::numeric_limits<std::uint64_t>::max();
  bool force_repoll_ = true;
  bool shutting_down_ = false;
  std::uint64_t failed_tasks_ = 0;
  std::string last_failure_;
};

}  // namespace commshim
