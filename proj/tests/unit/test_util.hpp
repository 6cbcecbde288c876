#pragma once

#include "commshim/sim_transport.hpp"
#include "commshim/transport.hpp"

#include <cstddef>
#include <random>
#include <span>
#include <vector>

namespace testutil {

inline std::vector<std::byte> random_bytes(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::byte> out(n);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& b : out) b = static_cast<std::byte>(d(rng));
  return out;
}

inline std::vector<std::byte> bytes(std::initializer_list<int> xs) {
  std::vector<std::byte> out;
  for (int x : xs) out.push_back(static_cast<std::byte>(x));
  return out;
}

// Length drawn log-uniformly from [0, max].
inline std::size_t log_uniform(std::size_t max, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> e(0.0, std::log2(static_cast<double>(max) + 1.0));
  return std::min(max, static_cast<std::size_t>(std::exp2(e(rng))) - 1);
}

// Drives simulated transports until every listed request has finished,
// advancing the virtual clock between quiescent rounds.
inline void settle(commshim::SimFabric& fabric, std::vector<commshim::Transport*> ranks,
                   const std::vector<commshim::RequestPtr>& requests, int max_rounds = 100000) {
  auto& clock = fabric.clock();
  for (int round = 0; round < max_rounds; ++round) {
    for (auto* t : ranks) t->progress();
    bool all = true;
    for (const auto& r : requests) all = all && r->done();
    if (all) return;
    auto next = fabric.next_event_after(clock.now());
    if (!next) return;
    clock.advance_to(*next);
  }
}

}  // namespace testutil
