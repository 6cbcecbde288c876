#pragma once

#include "commshim/executor.hpp"

#include <deque>
#include <memory>
#include <vector>

namespace commshim {

// Manual-reset event. `notify_all` wakes current waiters without latching,
// which is what the periodic progress ticker uses.
class Event {
 public:
  explicit Event(Executor& ex) : ex_(&ex) {}

  bool is_set() const noexcept { return set_; }
  void set() {
    set_ = true;
    notify_all();
  }
  void reset() noexcept { set_ = false; }
  void notify_all() {
    auto waiters = std::move(waiters_);
    waiters_.clear();
    for (auto& w : waiters) ex_->wake(w);
  }

  auto wait() {
    struct Awaiter {
      Event* ev;
      bool await_ready() const noexcept { return ev->set_; }
      void await_suspend(std::coroutine_handle<> h) {
        auto w = std::make_shared<Waiter>();
        w->handle = h;
        ev->waiters_.push_back(std::move(w));
      }
      void await_resume() const noexcept {}
    };
    return Awaiter{this};
  }

  // Resumes at the latest at `deadline`; returns whether the event is set.
  auto wait_until(Nanos deadline) {
    struct Awaiter {
      Event* ev;
      Nanos deadline;
      bool await_ready() const { return ev->set_ || ev->ex_->now() >= deadline; }
      void await_suspend(std::coroutine_handle<> h) {
        auto w = std::make_shared<Waiter>();
        w->handle = h;
        ev->waiters_.push_back(w);
        ev->ex_->add_timer(deadline, std::move(w));
      }
      bool await_resume() const noexcept { return ev->set_; }
    };
    return Awaiter{this, deadline};
  }

 private:
  Executor* ex_;
  bool set_ = false;
  std::vector<WaiterPtr> waiters_;
};

// FIFO async mutex. Lock hand-off goes straight to the next waiter.
class AsyncMutex {
 public:
  explicit AsyncMutex(Executor& ex) : ex_(&ex) {}

  class Guard {
   public:
    Guard() = default;
    explicit Guard(AsyncMutex* m) : m_(m) {}
    Guard(Guard&& o) noexcept : m_(std::exchange(o.m_, nullptr)) {}
    Guard& operator=(Guard&& o) noexcept {
      if (this != &o) {
        release();
        m_ = std::exchange(o.m_, nullptr);
      }
      return *this;
    }
    ~Guard() { release(); }
    void release() {
      if (m_) std::exchange(m_, nullptr)->unlock();
    }

   private:
    AsyncMutex* m_ = nullptr;
  };

  bool locked() const noexcept { return locked_; }

  auto lock() {
    struct Awaiter {
      AsyncMutex* m;
      bool await_ready() {
        if (!m->locked_) {
          m->locked_ = true;
          return true;
        }
        return false;
      }
      void await_suspend(std::coroutine_handle<> h) { m->waiters_.push_back(h); }
      Guard await_resume() { return Guard(m); }
    };
    return Awaiter{this};
  }

 private:
  void unlock() {
    if (waiters_.empty()) {
      locked_ = false;
      return;
    }
    auto h = waiters_.front();
    waiters_.pop_front();
    ex_->schedule(h);
  }

  Executor* ex_;
  bool locked_ = false;
  std::deque<std::coroutine_handle<>> waiters_;
};

// Runs every task concurrently and waits for all of them; rethrows the first
// failure only after the rest have finished.
inline Task<> when_all(Executor& ex, std::vector<Task<>> tasks) {
  std::vector<JoinHandle<void>> handles;
  handles.reserve(tasks.size());
  for (auto& t : tasks) handles.push_back(ex.spawn(std::move(t)));
  std::exception_ptr first;
  for (auto& h : handles) {
    try {
      co_await h.join();
    } catch (...) {
      if (!first) first = std::current_exception();
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace commshim
