// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "chunkflow/chunker.hpp"
#include "chunkflow/common.hpp"

namespace chunkflow {

enum class ExecKind { kForwardDiscard, kForwardRetain, kBackward };

// KV-state actions attached to an event (the cross-chunk StateStore traffic).
struct KvActions {
  bool save_kv = false;            // forward writes this chunk's K/V to the store
  bool read_kv_prefix = false;     // forward reads earlier chunks' K/V
  bool accumulate_kv_grad = false; // backward adds gradients for prefix K/V
};

struct ExecEvent {
  ExecKind kind = ExecKind::kForwardRetain;
  std::int64_t chunk_id = 0;
  std::int64_t group_id = -1;        // -1 for standalone chunks
  std::int64_t index_in_group = -1;  // 0-based within the group
  bool is_recompute = false;         // second forward pass of a discarded chunk
  KvActions notes;
};

struct ExecutionPlan {
  std::vector<ExecEvent> events;
  std::int64_t k = 1;           // retained-activation budget
  std::int64_t chunk_size = 0;  // token cap of the chunks being scheduled
  // Group structure and per-chunk token counts, carried so that replay-based
  // validation can charge actual tokens rather than assuming full chunks.
  std::map<std::int64_t, std::vector<std::int64_t>> groups;
  std::map<std::int64_t, std::int64_t> chunk_tokens;
};

namespace detail {

struct GroupEvent {
  ExecKind kind;
  std::int64_t index;  // 1-based chunk index within the group
  bool is_recompute;
};

// Event skeleton for one dependent group of n chunks under budget k:
// - n <= k: retain-forward 1..n, then backward n..1.
// - n > k: discard-forward 1..n-k, retain-forward n-k+1..n, backward
//   n..n-k+1, then for i = n-k down to 1: recompute-forward i, backward i.
// Backwards descend so every chunk's KV gradients are complete before use.
inline std::vector<GroupEvent> group_events(std::int64_t n, std::int64_t k) {
  if (n < 1) throw ValidationError("group size must be at least 1");
  if (k < 1) throw ValidationError("retention budget k must be at least 1");
  std::vector<GroupEvent> events;
  if (n <= k) {
    for (std::int64_t i = 1; i <= n; ++i) {
      events.push_back({ExecKind::kForwardRetain, i, false});
    }
    for (std::int64_t i = n; i >= 1; --i) {
      events.push_back({ExecKind::kBackward, i, false});
    }
    return events;
  }
  for (std::int64_t i = 1; i <= n - k; ++i) {
    events.push_back({ExecKind::kForwardDiscard, i, false});
  }
  for (std::int64_t i = n - k + 1; i <= n; ++i) {
    events.push_back({ExecKind::kForwardRetain, i, false});
  }
  for (std::int64_t i = n; i >= n - k + 1; --i) {
    events.push_back({ExecKind::kBackward, i, false});
  }
  for (std::int64_t i = n - k; i >= 1; --i) {
    events.push_back({ExecKind::kForwardRetain, i, true});
    events.push_back({ExecKind::kBackward, i, false});
  }
  return events;
}

inline KvActions kv_actions_for(ExecKind kind, bool is_recompute,
                                std::int64_t index_in_group,
                                std::int64_t group_size) {
  KvActions notes;
  if (group_size <= 0) return notes;  // standalone: no cross-chunk state
  const bool is_forward = kind != ExecKind::kBackward;
  if (is_forward) {
    notes.read_kv_prefix = index_in_group > 0;
    notes.save_kv = !is_recompute && index_in_group + 1 < group_size;
  } else {
    notes.accumulate_kv_grad = index_in_group > 0;
  }
  return notes;
}

}  // namespace detail

// Schedules one dependent group of chunks indexed 1..n. chunk_size defaults
// to one abstract token per chunk so diagnostics read in chunk multiples.
inline ExecutionPlan schedule_group(std::int64_t n, std::int64_t k,
                                    std::int64_t chunk_size = 1) {
  ExecutionPlan plan;
  plan.k = k;
  plan.chunk_size = chunk_size;
  for (std::int64_t i = 1; i <= n; ++i) {
    plan.groups[0].push_back(i);
    plan.chunk_tokens[i] = chunk_size;
  }
  for (const detail::GroupEvent& ge : detail::group_events(n, k)) {
    ExecEvent event;
    event.kind = ge.kind;
    event.chunk_id = ge.index;
    event.group_id = 0;
    event.index_in_group = ge.index - 1;
    event.is_recompute = ge.is_recompute;
    event.notes = detail::kv_actions_for(ge.kind, ge.is_recompute,
                                         event.index_in_group, n);
    plan.events.push_back(event);
  }
  return plan;
}

// Schedules a whole chunk plan: standalone chunks as [retain-forward,
// backward] pairs, dependent groups via the group schedule, concatenated in
// plan order. Peak retained activations stay within max(k, 1) * chunk_size.
inline ExecutionPlan schedule_step(const ChunkPlan& chunk_plan, std::int64_t k) {
  if (k < 1) throw ValidationError("retention budget k must be at least 1");
  ExecutionPlan plan;
  plan.k = k;
  plan.chunk_size = chunk_plan.chunk_size;
  plan.groups = chunk_plan.groups;
  for (const Chunk& chunk : chunk_plan.chunks) {
    plan.chunk_tokens[chunk.chunk_id] = chunk.total_tokens;
  }
  std::set<std::int64_t> emitted_groups;
  for (const Chunk& chunk : chunk_plan.chunks) {
    if (chunk.kind == ChunkKind::kStandalone) {
      ExecEvent forward;
      forward.kind = ExecKind::kForwardRetain;
      forward.chunk_id = chunk.chunk_id;
      plan.events.push_back(forward);
      ExecEvent backward;
      backward.kind = ExecKind::kBackward;
      backward.chunk_id = chunk.chunk_id;
      plan.events.push_back(backward);
      continue;
    }
    if (emitted_groups.count(chunk.group_id)) continue;
    emitted_groups.insert(chunk.group_id);
    const std::vector<std::int64_t>& members = chunk_plan.groups.at(chunk.group_id);
    const std::int64_t n = static_cast<std::int64_t>(members.size());
    for (const detail::GroupEvent& ge : detail::group_events(n, k)) {
      ExecEvent event;
      event.kind = ge.kind;
      event.chunk_id = members[static_cast<std::size_t>(ge.index - 1)];
      event.group_id = chunk.group_id;
      event.index_in_group = ge.index - 1;
      event.is_recompute = ge.is_recompute;
      event.notes =
          detail::kv_actions_for(ge.kind, ge.is_recompute, event.index_in_group, n);
      plan.events.push_back(event);
    }
  }
  return plan;
}

struct PlanDiagnostics {
  std::int64_t peak_retained_tokens = 0;
  std::int64_t recompute_token_count = 0;
  std::vector<std::string> violations;
};

// Replays a plan against an abstract memory counter: retain-forwards add the
// chunk's tokens, backwards release them, discard-forwards add nothing.
// Ordering violations are reported as data, not exceptions.
inline PlanDiagnostics validate_plan(const ExecutionPlan& plan) {
  PlanDiagnostics diag;
  std::map<std::int64_t, std::int64_t> position_in_group;  // chunk -> index
  std::map<std::int64_t, std::int64_t> group_of;
  std::map<std::int64_t, std::int64_t> group_sizes;
  for (const auto& [group_id, members] : plan.groups) {
    group_sizes[group_id] = static_cast<std::int64_t>(members.size());
    for (std::size_t i = 0; i < members.size(); ++i) {
      position_in_group[members[i]] = static_cast<std::int64_t>(i);
      group_of[members[i]] = group_id;
    }
  }
  auto tokens_of = [&](std::int64_t chunk_id) {
    auto it = plan.chunk_tokens.find(chunk_id);
    return it == plan.chunk_tokens.end() ? plan.chunk_size : it->second;
  };

  std::map<std::int64_t, std::int64_t> forward_count;
  std::map<std::int64_t, std::int64_t> backward_count;
  std::set<std::int64_t> retained;
  std::map<std::int64_t, std::int64_t> last_first_forward;  // group -> max index seen
  std::map<std::int64_t, std::int64_t> last_backward;       // group -> min index seen
  std::int64_t retained_tokens = 0;

  for (const ExecEvent& event : plan.events) {
    const std::int64_t c = event.chunk_id;
    const bool grouped = group_of.count(c) > 0;
    const std::int64_t index = grouped ? position_in_group[c] : -1;
    const std::int64_t group = grouped ? group_of[c] : -1;
    switch (event.kind) {
      case ExecKind::kForwardDiscard:
      case ExecKind::kForwardRetain: {
        const bool first_pass = forward_count[c] == 0;
        ++forward_count[c];
        if (!first_pass) diag.recompute_token_count += tokens_of(c);
        if (grouped && first_pass) {
          auto it = last_first_forward.find(group);
          const std::int64_t prev = it == last_first_forward.end() ? -1 : it->second;
          if (index != prev + 1) {
            diag.violations.push_back(
                "first forward of chunk " + std::to_string(c) +
                " out of ascending group order");
          }
          last_first_forward[group] = std::max(prev, index);
        }
        if (event.kind == ExecKind::kForwardRetain) {
          if (!retained.count(c)) {
            retained.insert(c);
            retained_tokens += tokens_of(c);
            diag.peak_retained_tokens =
                std::max(diag.peak_retained_tokens, retained_tokens);
          }
        }
        break;
      }
      case ExecKind::kBackward: {
        if (!retained.count(c)) {
          diag.violations.push_back("backward of chunk " + std::to_string(c) +
                                    " without a live retain-forward");
        } else {
          retained.erase(c);
          retained_tokens -= tokens_of(c);
        }
        ++backward_count[c];
        if (backward_count[c] > 1) {
          diag.violations.push_back("chunk " + std::to_string(c) +
                                    " backwarded more than once");
        }
        if (grouped) {
          auto it = last_backward.find(group);
          if (it != last_backward.end() && index != it->second - 1) {
            diag.violations.push_back(
                "backward of chunk " + std::to_string(c) +
                " out of descending group order");
          }
          last_backward[group] = index;
        }
        break;
      }
    }
  }
  for (const auto& [chunk_id, count] : forward_count) {
    if (backward_count[chunk_id] == 0) {
      diag.violations.push_back("chunk " + std::to_string(chunk_id) +
                                " was never backwarded");
    }
    (void)count;
  }
  return diag;
}

inline const char* to_string(ExecKind kind) {
  switch (kind) {
    case ExecKind::kForwardDiscard: return "forward_discard";
    case ExecKind::kForwardRetain: return "forward_retain";
    case ExecKind::kBackward: return "backward";
  }
  return "unknown";
}

// One event per line: `F- chunk=<id> group=<g>` (discard-forward),
// `F+ chunk=<id> group=<g>` (retain-forward), `B chunk=<id> group=<g>`.
inline std::string execution_plan_listing(const ExecutionPlan& plan) {
  std::string out;
  for (const ExecEvent& event : plan.events) {
    const char* tag = event.kind == ExecKind::kForwardDiscard ? "F-"
                      : event.kind == ExecKind::kForwardRetain ? "F+"
                                                               : "B ";
    out += tag;
    out += " chunk=" + std::to_string(event.chunk_id);
    out += " group=";
    out += event.group_id < 0 ? "-" : std::to_string(event.group_id);
    if (event.is_recompute) out += " recompute";
    out += "\n";
  }
  return out;
}

inline nlohmann::json execution_plan_to_json(const ExecutionPlan& plan) {
  nlohmann::json doc;
  doc["k"] = plan.k;
  doc["chunk_size"] = plan.chunk_size;
  doc["events"] = nlohmann::json::array();
  for (const ExecEvent& event : plan.events) {
    nlohmann::json entry;
    entry["kind"] = to_string(event.kind);
    entry["chunk"] = event.chunk_id;
    if (event.group_id >= 0) {
      entry["group"] = event.group_id;
      entry["index_in_group"] = event.index_in_group;
    }
    if (event.is_recompute) entry["recompute"] = true;
    entry["save_kv"] = event.notes.save_kv;
    entry["read_kv_prefix"] = event.notes.read_kv_prefix;
    entry["accumulate_kv_grad"] = event.notes.accumulate_kv_grad;
    doc["events"].push_back(std::move(entry));
  }
  doc["groups"] = nlohmann::json::object();
  for (const auto& [group_id, members] : plan.groups) {
    doc["groups"][std::to_string(group_id)] = members;
  }
  doc["chunk_tokens"] = nlohmann::json::object();
  for (const auto& [chunk_id, tokens] : plan.chunk_tokens) {
    doc["chunk_tokens"][std::to_string(chunk_id)] = tokens;
  }
  return doc;
}

}  // namespace chunkflow
