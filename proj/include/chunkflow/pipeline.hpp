// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chunkflow/chunker.hpp"
#include "chunkflow/common.hpp"

namespace chunkflow {

// Event cost model: forward = gamma + alpha*len + beta*len^2 +
// beta*len*prefix_len; backward = backward_multiplier * forward. The defaults
// (gamma=0, beta=0, alpha=1 per token-unit) reproduce the proportional model
// of the worked pipeline examples; gamma/beta are realism knobs for tuning.
struct CostModel {
  double gamma = 0.0;
  double alpha = 1.0;
  double beta = 0.0;
  double backward_multiplier = 2.0;
  double hop_latency = 0.0;  // per-stage communication latency

  void validate() const {
    if (gamma < 0 || alpha < 0 || beta < 0 || hop_latency < 0) {
      throw ValidationError("cost-model coefficients must be non-negative");
    }
    if (backward_multiplier <= 0) {
      throw ValidationError("backward multiplier must be positive");
    }
  }

  double forward_time(double len, double prefix_len) const {
    return gamma + alpha * len + beta * len * len + beta * len * prefix_len;
  }

  double backward_time(double len, double prefix_len) const {
    return backward_multiplier * forward_time(len, prefix_len);
  }
};

struct PipelineConfig {
  int num_stages = 1;           // pipeline-parallel world size
  std::int64_t k = 1;           // retained-activation budget
  std::int64_t chunk_size = 0;  // informational; carried into reports
};

enum class TraceEventKind { kForward, kRecomputeForward, kBackward };

struct TraceEvent {
  TraceEventKind kind = TraceEventKind::kForward;
  std::int64_t chunk_id = 0;
  double start = 0.0;
  double end = 0.0;
};

struct PipelineTrace {
  std::vector<std::vector<TraceEvent>> stages;  // per stage, sorted by start
  double makespan = 0.0;
  // Useful busy time per stage: first-pass forwards and backwards. Recompute
  // forwards occupy the stage but are overhead, so bubble accounting treats
  // them as lost time; busy_total includes them for work-conservation checks.
  std::vector<double> busy;
  std::vector<double> busy_total;
};

// Which phase leads the steady-state alternation of the per-stage order.
// kBackwardFirst is the production schedule; kForwardFirst exists to mirror
// the plain 1F1B skeleton exactly (useful for equivalence testing).
enum class DispatchPolicy { kBackwardFirst, kForwardFirst };

namespace detail {

struct StageOp {
  TraceEventKind kind;
  std::int64_t chunk;  // index into the per-simulation chunk arrays
};

struct OpCosts {
  std::vector<double> forward;
  std::vector<double> backward;
};

// Earliest-feasible list scheduling over fixed per-stage orders. Cross-stage
// precedence: a first-pass forward follows the same chunk's forward on the
// previous stage; a backward follows the same chunk's backward on the next
// stage; a recompute forward is gated on the same signal as its backward (the
// next stage's backward), which keeps recomputation just-in-time. In-stage
// ordering is the list order itself. The fixed point is unique, so the trace
// is deterministic.
inline PipelineTrace run_dispatch(const std::vector<std::vector<StageOp>>& orders,
                                  const OpCosts& costs, double hop_latency) {
  const int num_stages = static_cast<int>(orders.size());
  PipelineTrace trace;
  trace.stages.resize(orders.size());
  trace.busy.assign(orders.size(), 0.0);
  trace.busy_total.assign(orders.size(), 0.0);

  std::vector<std::size_t> pos(orders.size(), 0);
  std::vector<double> free_at(orders.size(), 0.0);
  using Key = std::pair<int, std::int64_t>;  // (kind, chunk) -> end time
  std::vector<std::map<Key, double>> finished(orders.size());

  std::size_t remaining = 0;
  for (const std::vector<StageOp>& order : orders) remaining += order.size();

  while (remaining > 0) {
    bool progress = false;
    for (int s = 0; s < num_stages; ++s) {
      while (pos[s] < orders[s].size()) {
        const StageOp& op = orders[s][pos[s]];
        double dep_end = 0.0;
        bool ready = true;
        if (op.kind == TraceEventKind::kForward && s > 0) {
          auto it = finished[s - 1].find(
              {static_cast<int>(TraceEventKind::kForward), op.chunk});
          if (it == finished[s - 1].end()) {
            ready = false;
          } else {
            dep_end = it->second + hop_latency;
          }
        } else if (op.kind != TraceEventKind::kForward && s + 1 < num_stages) {
          auto it = finished[s + 1].find(
              {static_cast<int>(TraceEventKind::kBackward), op.chunk});
          if (it == finished[s + 1].end()) {
            ready = false;
          } else {
            dep_end = it->second + hop_latency;
          }
        }
        if (!ready) break;
        const double duration = op.kind == TraceEventKind::kBackward
                                    ? costs.backward[op.chunk]
                                    : costs.forward[op.chunk];
        const double start = std::max(free_at[s], dep_end);
        const double end = start + duration;
        trace.stages[s].push_back({op.kind, op.chunk, start, end});
        finished[s][{static_cast<int>(op.kind), op.chunk}] = end;
        free_at[s] = end;
        trace.busy_total[s] += duration;
        if (op.kind != TraceEventKind::kRecomputeForward) {
          trace.busy[s] += duration;
        }
        trace.makespan = std::max(trace.makespan, end);
        ++pos[s];
        --remaining;
        progress = true;
      }
    }
    if (!progress) {
      throw std::logic_error("pipeline dispatch reached a dependency deadlock");
    }
  }
  return trace;
}

struct ChunkTimingInfo {
  std::vector<double> forward_cost;
  std::vector<double> backward_cost;
  std::vector<bool> discarded;        // needs a recompute forward before backward
  std::vector<std::int64_t> chunk_ids;
  std::vector<std::int64_t> backward_order;  // bq: plan order, groups reversed
};

// Builds one stage's static op order. Warmup runs min(num_stages - s, M)
// first-pass forwards, then the steady state alternates per backward-queue
// entry. Enabler expansion: before a backward can be listed, any first-pass
// forwards it transitively needs (its own, plus earlier chunks in forward
// order) are pulled in; a discarded chunk gets its recompute forward
// immediately before its backward.
inline std::vector<StageOp> build_stage_order(const ChunkTimingInfo& info,
                                              int stage, int num_stages,
                                              DispatchPolicy policy) {
  const std::int64_t num_chunks =
      static_cast<std::int64_t>(info.forward_cost.size());
  std::vector<StageOp> order;
  std::vector<bool> forwarded(static_cast<std::size_t>(num_chunks), false);
  std::int64_t next_forward = 0;
  auto emit_forward = [&]() {
    order.push_back({TraceEventKind::kForward, next_forward});
    forwarded[static_cast<std::size_t>(next_forward)] = true;
    ++next_forward;
  };

  const std::int64_t warmup =
      std::min<std::int64_t>(num_stages - stage, num_chunks);
  for (std::int64_t i = 0; i < warmup; ++i) emit_forward();

  for (std::int64_t c : info.backward_order) {
    if (policy == DispatchPolicy::kForwardFirst && next_forward < num_chunks) {
      emit_forward();
    }
    while (!forwarded[static_cast<std::size_t>(c)]) emit_forward();
    if (info.discarded[static_cast<std::size_t>(c)]) {
      order.push_back({TraceEventKind::kRecomputeForward, c});
    }
    order.push_back({TraceEventKind::kBackward, c});
    if (policy == DispatchPolicy::kBackwardFirst && next_forward < num_chunks) {
      emit_forward();
    }
  }
  return order;
}

}  // namespace detail

// Standard 1F1B over whole-sequence microbatches: stage s performs
// min(num_stages - s, M) warmup forwards, then alternates forward/backward
// (forward leading), then drains. Events dispatch greedily at the earliest
// feasible time under forward/backward cross-stage precedence.
inline PipelineTrace simulate_1f1b(const std::vector<std::int64_t>& lengths,
                                   int num_stages, const CostModel& cost) {
  if (lengths.empty()) throw ValidationError("no microbatches to simulate");
  if (num_stages < 1) throw ValidationError("num_stages must be at least 1");
  cost.validate();
  const std::int64_t m = static_cast<std::int64_t>(lengths.size());

  detail::ChunkTimingInfo info;
  for (std::int64_t i = 0; i < m; ++i) {
    const double len = static_cast<double>(lengths[static_cast<std::size_t>(i)]);
    info.forward_cost.push_back(cost.forward_time(len, 0.0));
    info.backward_cost.push_back(cost.backward_time(len, 0.0));
    info.discarded.push_back(false);
    info.chunk_ids.push_back(i);
    info.backward_order.push_back(i);
  }

  std::vector<std::vector<detail::StageOp>> orders;
  for (int s = 0; s < num_stages; ++s) {
    orders.push_back(detail::build_stage_order(info, s, num_stages,
                                               DispatchPolicy::kForwardFirst));
  }
  detail::OpCosts costs{info.forward_cost, info.backward_cost};
  return detail::run_dispatch(orders, costs, cost.hop_latency);
}

// State-aware 1F1B over a chunk plan: chunks are the microbatches, first-pass
// forwards ascend in group order, backwards descend (the backward queue is
// the plan order with each dependent group's block reversed), and under
// budget k each group's first n-k chunks are discarded on every stage and
// recomputed just-in-time before their backward. Dependent-chunk costs are
// prefix-aware.
inline PipelineTrace simulate_state_aware_1f1b(
    const ChunkPlan& plan, const PipelineConfig& cfg, const CostModel& cost,
    DispatchPolicy policy = DispatchPolicy::kBackwardFirst) {
  if (plan.chunks.empty()) throw ValidationError("chunk plan has no chunks");
  if (cfg.num_stages < 1) throw ValidationError("num_stages must be at least 1");
  if (cfg.k < 1) throw ValidationError("retention budget k must be at least 1");
  cost.validate();

  const std::int64_t m = static_cast<std::int64_t>(plan.chunks.size());
  std::map<std::int64_t, std::int64_t> index_of;  // chunk id -> plan position
  for (std::int64_t i = 0; i < m; ++i) {
    index_of[plan.chunks[static_cast<std::size_t>(i)].chunk_id] = i;
  }

  detail::ChunkTimingInfo info;
  info.forward_cost.resize(static_cast<std::size_t>(m));
  info.backward_cost.resize(static_cast<std::size_t>(m));
  info.discarded.assign(static_cast<std::size_t>(m), false);
  info.chunk_ids.resize(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const Chunk& chunk = plan.chunks[static_cast<std::size_t>(i)];
    double prefix = 0.0;
    if (chunk.kind == ChunkKind::kDependent) {
      const std::vector<std::int64_t>& members = plan.groups.at(chunk.group_id);
      for (std::int64_t member : members) {
        if (member == chunk.chunk_id) break;
        const Chunk& earlier =
            plan.chunks[static_cast<std::size_t>(index_of.at(member))];
        prefix += static_cast<double>(earlier.total_tokens);
      }
      const std::int64_t n = static_cast<std::int64_t>(members.size());
      if (n > cfg.k && chunk.index_in_group < n - cfg.k) {
        info.discarded[static_cast<std::size_t>(i)] = true;
      }
    }
    const double len = static_cast<double>(chunk.total_tokens);
    info.forward_cost[static_cast<std::size_t>(i)] = cost.forward_time(len, prefix);
    info.backward_cost[static_cast<std::size_t>(i)] = cost.backward_time(len, prefix);
    info.chunk_ids[static_cast<std::size_t>(i)] = chunk.chunk_id;
  }

  std::set<std::int64_t> seen_groups;
  for (std::int64_t i = 0; i < m; ++i) {
    const Chunk& chunk = plan.chunks[static_cast<std::size_t>(i)];
    if (chunk.kind == ChunkKind::kStandalone) {
      info.backward_order.push_back(i);
      continue;
    }
    if (seen_groups.count(chunk.group_id)) continue;
    seen_groups.insert(chunk.group_id);
    const std::vector<std::int64_t>& members = plan.groups.at(chunk.group_id);
    for (auto it = members.rbegin(); it != members.rend(); ++it) {
      info.backward_order.push_back(index_of.at(*it));
    }
  }

  std::vector<std::vector<detail::StageOp>> orders;
  for (int s = 0; s < cfg.num_stages; ++s) {
    orders.push_back(detail::build_stage_order(info, s, cfg.num_stages, policy));
  }
  detail::OpCosts costs{info.forward_cost, info.backward_cost};
  PipelineTrace trace = detail::run_dispatch(orders, costs, cost.hop_latency);
  // Dispatch works in plan positions; traces report chunk ids.
  for (std::vector<TraceEvent>& stage : trace.stages) {
    for (TraceEvent& event : stage) {
      event.chunk_id = info.chunk_ids[static_cast<std::size_t>(event.chunk_id)];
    }
  }
  return trace;
}

// Bubble ratio: total stage idle time inside the makespan over total stage
// time. Recompute forwards occupy a stage without contributing useful work,
// so they count toward bubble time here; trace.busy_total preserves the
// occupancy view.
inline double bubble_ratio(const PipelineTrace& trace) {
  if (trace.stages.empty()) throw ValidationError("empty trace");
  if (trace.makespan <= 0.0) return 0.0;
  double bubble = 0.0;
  for (double busy : trace.busy) bubble += trace.makespan - busy;
  return bubble / (static_cast<double>(trace.stages.size()) * trace.makespan);
}

inline const char* trace_event_name(TraceEventKind kind) {
  switch (kind) {
    case TraceEventKind::kForward: return "F";
    case TraceEventKind::kRecomputeForward: return "F'";
    case TraceEventKind::kBackward: return "B";
  }
  return "?";
}

enum class TraceFormat { kChromeTrace, kTable };

inline TraceFormat parse_trace_format(const std::string& name) {
  if (name == "chrome-trace") return TraceFormat::kChromeTrace;
  if (name == "table") return TraceFormat::kTable;
  throw ValidationError("unknown trace format: " + name);
}

// Chrome-trace export: one complete ("X") event per interval, pid = stage
// index, timestamps in microseconds at 1 time unit = 1000 microseconds.
// Table export: one fixed-width Gantt row per stage.
inline std::string export_trace(const PipelineTrace& trace, TraceFormat format) {
  if (format == TraceFormat::kChromeTrace) {
    nlohmann::json doc;
    doc["traceEvents"] = nlohmann::json::array();
    for (std::size_t s = 0; s < trace.stages.size(); ++s) {
      for (const TraceEvent& event : trace.stages[s]) {
        nlohmann::json entry;
        entry["name"] = std::string(trace_event_name(event.kind)) + " chunk" +
                        std::to_string(event.chunk_id);
        entry["ph"] = "X";
        const double ts = event.start * 1000.0;
        const double dur = (event.end - event.start) * 1000.0;
        if (ts == std::floor(ts)) {
          entry["ts"] = static_cast<std::int64_t>(ts);
        } else {
          entry["ts"] = ts;
        }
        if (dur == std::floor(dur)) {
          entry["dur"] = static_cast<std::int64_t>(dur);
        } else {
          entry["dur"] = dur;
        }
        entry["pid"] = s;
        entry["tid"] = 0;
        doc["traceEvents"].push_back(std::move(entry));
      }
    }
    return doc.dump(2) + "\n";
  }
  std::string out;
  for (std::size_t s = 0; s < trace.stages.size(); ++s) {
    out += "stage " + std::to_string(s);
    for (const TraceEvent& event : trace.stages[s]) {
      char cell[96];
      std::snprintf(cell, sizeof(cell), " | %-2s c%lld %.2f-%.2f",
                    trace_event_name(event.kind),
                    static_cast<long long>(event.chunk_id), event.start,
                    event.end);
      out += cell;
    }
    out += "\n";
  }
  return out;
}

}  // namespace chunkflow
