// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "chunkflow/chunker.hpp"
#include "chunkflow/common.hpp"
#include "chunkflow/dataset.hpp"
#include "chunkflow/memory_model.hpp"
#include "chunkflow/pipeline.hpp"

namespace chunkflow {

struct TunerCandidate {
  std::int64_t chunk_size = 0;
  std::int64_t k = 1;
  double mean_time = 0.0;
  double predicted_peak_gib = 0.0;
  bool feasible = false;
};

struct TunerResult {
  bool has_best = false;
  std::int64_t best_chunk_size = 0;
  std::int64_t best_k = 0;
  std::vector<TunerCandidate> table;  // one row per (chunk_size, k) candidate
  std::int64_t evaluations = 0;       // simulated pipeline runs performed
};

// Grid search over (chunk_size, k): for each candidate, chunk the same
// sampled batches, simulate state-aware 1F1B, and average the makespan.
// Feasibility compares the predicted peak at the longest sampled sequence
// against the memory budget. With one pipeline stage k is forced to 1 and the
// search degenerates to chunk_size only. Ties prefer larger chunk_size, then
// smaller k. Deterministic given the seed.
inline TunerResult grid_search(const SequenceSet& set,
                               const std::vector<std::int64_t>& chunk_sizes,
                               const std::vector<std::int64_t>& ks,
                               const PipelineConfig& base_cfg,
                               const CostModel& cost,
                               const MemoryModelCoefficients& mem,
                               double budget_gib,
                               std::int64_t global_batch_size,
                               std::int64_t batches_to_sample,
                               std::uint64_t seed) {
  if (chunk_sizes.empty() || ks.empty()) {
    throw ValidationError("tuner grid must not be empty");
  }
  if (budget_gib <= 0) throw ValidationError("memory budget must be positive");
  if (batches_to_sample < 1) {
    throw ValidationError("batches_to_sample must be at least 1");
  }
  if (set.empty()) throw ValidationError("cannot tune on an empty sequence set");
  cost.validate();
  mem.validate();

  const std::int64_t steps_available =
      ceil_div(static_cast<std::int64_t>(set.size()), global_batch_size);
  std::vector<Batch> batches;
  std::int64_t max_sequence_len = 0;
  for (std::int64_t t = 0; t < batches_to_sample; ++t) {
    auto batch = sample_batch(set, global_batch_size, t % steps_available, seed);
    if (!batch) break;
    for (const SequenceRecord& seq : batch->sequences) {
      max_sequence_len = std::max(max_sequence_len, seq.length);
    }
    batches.push_back(std::move(*batch));
  }

  TunerResult result;
  for (std::int64_t cs : chunk_sizes) {
    for (std::int64_t k : ks) {
      const std::int64_t k_eff = base_cfg.num_stages == 1 ? 1 : k;
      TunerCandidate candidate;
      candidate.chunk_size = cs;
      candidate.k = k;
      candidate.predicted_peak_gib = predict_peak(mem, cs, k_eff, max_sequence_len);
      candidate.feasible = candidate.predicted_peak_gib <= budget_gib;
      double total = 0.0;
      for (const Batch& batch : batches) {
        PipelineConfig cfg = base_cfg;
        cfg.k = k_eff;
        cfg.chunk_size = cs;
        const ChunkPlan plan = construct_chunks(batch, cs);
        total += simulate_state_aware_1f1b(plan, cfg, cost).makespan;
        ++result.evaluations;
      }
      candidate.mean_time = total / static_cast<double>(batches.size());
      result.table.push_back(candidate);
    }
  }

  const TunerCandidate* best = nullptr;
  for (const TunerCandidate& candidate : result.table) {
    if (!candidate.feasible) continue;
    const bool better =
        best == nullptr || candidate.mean_time < best->mean_time ||
        (candidate.mean_time == best->mean_time &&
         (candidate.chunk_size > best->chunk_size ||
          (candidate.chunk_size == best->chunk_size && candidate.k < best->k)));
    if (better) best = &candidate;
  }
  if (best != nullptr) {
    result.has_best = true;
    result.best_chunk_size = best->chunk_size;
    result.best_k = best->k;
  }
  return result;
}

inline std::string tuner_table_csv(const TunerResult& result) {
  std::string out = "chunk_size,k,mean_time,predicted_peak_gib,feasible\n";
  for (const TunerCandidate& row : result.table) {
    out += std::to_string(row.chunk_size) + "," + std::to_string(row.k) + "," +
           format_fixed(row.mean_time, 6) + "," +
           format_fixed(row.predicted_peak_gib, 3) + "," +
           (row.feasible ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string tuner_report(const TunerResult& result) {
  std::vector<TunerCandidate> ranked = result.table;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const TunerCandidate& a, const TunerCandidate& b) {
                     if (a.feasible != b.feasible) return a.feasible;
                     if (a.mean_time != b.mean_time) return a.mean_time < b.mean_time;
                     if (a.chunk_size != b.chunk_size) return a.chunk_size > b.chunk_size;
                     return a.k < b.k;
                   });
  std::string out;
  if (result.has_best) {
    out += "best: chunk_size=" + std::to_string(result.best_chunk_size) +
           " k=" + std::to_string(result.best_k) + "\n";
  } else {
    out += "no feasible configuration\n";
  }
  out += "evaluations: " + std::to_string(result.evaluations) + "\n";
  for (const TunerCandidate& row : ranked) {
    out += "chunk_size=" + std::to_string(row.chunk_size) +
           " k=" + std::to_string(row.k) +
           " mean_time=" + format_fixed(row.mean_time, 3) +
           " predicted_peak_gib=" + format_fixed(row.predicted_peak_gib, 3) +
           (row.feasible ? " feasible" : " infeasible") + "\n";
  }
  return out;
}

}  // namespace chunkflow
