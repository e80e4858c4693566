// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>

namespace great {

/// Records the interaction-state buffers that blocks materialize: the
/// T x T score matrix for attention, the M x M propagation matrix for GReaB.
struct InteractionProbe {
  std::uint64_t peak_entries = 0;
  std::uint64_t allocations = 0;

  void record(std::uint64_t entries) {
    peak_entries = std::max(peak_entries, entries);
    ++allocations;
  }
};

namespace detail {
inline InteractionProbe*& active_probe() {
  thread_local InteractionProbe* probe = nullptr;
  return probe;
}

inline void record_interaction_state(std::uint64_t entries) {
  if (InteractionProbe* p = active_probe()) p->record(entries);
}
}  // namespace detail

/// Routes interaction-state records on this thread into `probe`.
class ScopedProbe {
 public:
  explicit ScopedProbe(InteractionProbe& probe) : previous_(detail::active_probe()) {
    detail::active_probe() = &probe;
  }
  ~ScopedProbe() { detail::active_probe() = previous_; }
  ScopedProbe(const ScopedProbe&) = delete;
  ScopedProbe& operator=(const ScopedProbe&) = delete;

 private:
  InteractionProbe* previous_;
};

}  // namespace great
