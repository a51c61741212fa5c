// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string_view>
#include <vector>

#include "nncheck/checks.hpp"

namespace nncheck {

/// Schedules one routine: evaluated at steps cadence, 2*cadence, ...
struct HookSpec {
  Routine routine = Routine::zero_loss;
  std::int64_t cadence = 1;
  bool enabled = true;

  bool due(std::int64_t step) const { return enabled && step > 0 && step % cadence == 0; }

  friend bool operator==(const HookSpec&, const HookSpec&) = default;
};

/// Default cadence: loss routines and the (cheap) activation range every
/// step; tensor-statistics routines every 10 steps.
inline std::int64_t default_cadence(Routine r) {
  switch (r) {
    case Routine::zero_loss:
    case Routine::slow_loss:
    case Routine::diverging_loss:
    case Routine::loss_fluctuation:
    case Routine::activation_range:
    case Routine::small_sample: return 1;
    default: return 10;
  }
}

/// Every routine enabled at its default cadence.
inline std::vector<HookSpec> default_hooks() {
  std::vector<HookSpec> hooks;
  for (Routine r : kAllRoutines) hooks.push_back({r, default_cadence(r), true});
  return hooks;
}

/// Overwrite the cadence of the given routines in `hooks`.
inline std::vector<HookSpec> with_cadence(std::vector<HookSpec> hooks,
                                          std::initializer_list<Routine> routines,
                                          std::int64_t cadence) {
  for (auto& h : hooks) {
    for (Routine r : routines) {
      if (h.routine == r) h.cadence = cadence;
    }
  }
  return hooks;
}

inline std::vector<HookSpec> without(std::vector<HookSpec> hooks,
                                     std::initializer_list<Routine> routines) {
  for (auto& h : hooks) {
    for (Routine r : routines) {
      if (h.routine == r) h.enabled = false;
    }
  }
  return hooks;
}

inline void validate_hooks(const std::vector<HookSpec>& hooks) {
  for (const auto& h : hooks) {
    if (h.cadence < 1) throw UsageError("hook cadence must be >= 1");
  }
}

enum class Reaction { log_warning, halt_with_error };

inline std::string_view to_string(Reaction r) {
  return r == Reaction::log_warning ? "log_warning" : "halt_with_error";
}

inline Reaction reaction_from_string(std::string_view s) {
  if (s == "log_warning") return Reaction::log_warning;
  if (s == "halt_with_error") return Reaction::halt_with_error;
  throw UsageError("unknown reaction: " + std::string(s));
}

/// Per-routine reaction; routines without an entry use `fallback`.
struct ReactionPolicy {
  std::map<Routine, Reaction> modes;
  Reaction fallback = Reaction::log_warning;

  Reaction mode(Routine r) const {
    const auto it = modes.find(r);
    return it == modes.end() ? fallback : it->second;
  }

  static ReactionPolicy halt_on(std::initializer_list<Routine> routines) {
    ReactionPolicy p;
    for (Routine r : routines) p.modes[r] = Reaction::halt_with_error;
    return p;
  }

  friend bool operator==(const ReactionPolicy&, const ReactionPolicy&) = default;
};

}  // namespace nncheck
