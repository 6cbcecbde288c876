#pragma once

#include <chrono>
#include <cstdint>

namespace commshim {

// All time in the library is nanoseconds since the clock's epoch. On the
// simulated transport one nanosecond is one virtual tick.
using Nanos = std::chrono::nanoseconds;

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Nanos now() const = 0;
  virtual bool is_virtual() const = 0;
};

// Advanced explicitly by the executor when every task is idle.
class VirtualClock final : public Clock {
 public:
  Nanos now() const override { return now_; }
  bool is_virtual() const override { return true; }

  void advance_to(Nanos t) {
    if (t > now_) now_ = t;
  }

 private:
  Nanos now_{0};
};

class WallClock final : public Clock {
 public:
  WallClock() : origin_(std::chrono::steady_clock::now()) {}

  Nanos now() const override {
    return std::chrono::duration_cast<Nanos>(std::chrono::steady_clock::now() - origin_);
  }
  bool is_virtual() const override { return false; }

 private:
  std::chrono::steady_clock::time_point origin_;
};

inline double to_seconds(Nanos d) { return static_cast<double>(d.count()) / 1e9; }

}  // namespace commshim
