// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "chunkflow/chunker.hpp"
#include "chunkflow/common.hpp"
#include "chunkflow/dataset.hpp"
#include "chunkflow/scheduler.hpp"
#include "chunkflow/toy_model.hpp"

namespace chunkflow {

// Cross-chunk storage for attention key/value tensors and their accumulated
// gradients, keyed by (sequence, chunk index within the sequence's group).
// An entry exists from the chunk's first forward until its backward
// completes; its gradient buffers collect contributions from every later
// chunk's backward and are read exactly once, by the owning chunk's backward.
struct StateStore {
  struct Entry {
    std::int64_t start = 0;  // global position of the chunk's first token
    std::int64_t len = 0;
    std::vector<std::vector<double>> k;   // per layer, len x kv_width
    std::vector<std::vector<double>> v;   // per layer, len x kv_width
    std::vector<std::vector<double>> dk;  // per layer gradient accumulators
    std::vector<std::vector<double>> dv;
    std::int64_t grad_contributions = 0;  // later-chunk backwards completed
  };
  std::map<std::pair<std::int64_t, std::int64_t>, Entry> entries;
};

struct RunInstrumentation {
  // Peak of simultaneously retained chunk activations, in tokens; comparable
  // to validate_plan's peak_retained_tokens.
  std::int64_t peak_retained_tokens = 0;
  std::int64_t recompute_forward_count = 0;
  // Recomputed forwards whose chunk loss was not bitwise equal to the first
  // pass (must stay 0; recomputation is deterministic).
  std::int64_t recompute_loss_mismatches = 0;
  // KV-gradient buffers read before every contributing chunk's backward had
  // completed (must stay 0 on valid plans).
  std::int64_t kv_completeness_violations = 0;
};

struct RunPlanOptions {
  // Fault-injection hook for the verification CLI: scales incoming KV
  // gradients so chunked and full gradients no longer match.
  bool corrupt_kv_grads = false;
  double normalizer_override = 0.0;  // > 0 replaces the global target count
};

struct RunPlanResult {
  double loss = 0.0;
  GradientSet gradients;
  RunInstrumentation instrumentation;
};

// Executes an ExecutionPlan literally against the toy model: discarding
// forwards stream (keeping only KV and the chunk loss), retaining forwards
// keep tapes, backwards consume tapes in plan order while routing KV
// gradients through the StateStore. Loss and parameter gradients equal the
// full-sequence run up to floating-point reassociation across chunks.
inline RunPlanResult run_plan(const ToyModelParams& params,
                              const ChunkPlan& chunk_plan,
                              const ExecutionPlan& exec_plan,
                              const SequenceSet& batch,
                              const RunPlanOptions& options = {}) {
  const ToyModelConfig& cfg = params.config;
  const std::int64_t num_layers = cfg.num_layers;
  const std::int64_t kvw = cfg.kv_width();
  static const std::vector<std::vector<double>> kNoPrefix;

  {
    const PlanDiagnostics diag = validate_plan(exec_plan);
    if (!diag.violations.empty()) {
      throw ValidationError("execution plan is invalid: " + diag.violations.front());
    }
  }

  std::map<std::int64_t, const SequenceRecord*> seq_by_id;
  for (const SequenceRecord& seq : batch) seq_by_id[seq.id] = &seq;
  std::map<std::int64_t, const Chunk*> chunk_by_id;
  for (const Chunk& chunk : chunk_plan.chunks) chunk_by_id[chunk.chunk_id] = &chunk;

  const double normalizer = options.normalizer_override > 0.0
                                ? options.normalizer_override
                                : detail::batch_normalizer(batch);

  auto sequence_of = [&](const ChunkSegment& seg) -> const SequenceRecord& {
    auto it = seq_by_id.find(seg.sequence_id);
    if (it == seq_by_id.end()) {
      throw ValidationError("chunk references unknown sequence " +
                            std::to_string(seg.sequence_id));
    }
    const SequenceRecord& seq = *it->second;
    if (static_cast<std::int64_t>(seq.tokens.size()) != seq.length) {
      throw ValidationError("sequence " + std::to_string(seq.id) +
                            " has no token payload");
    }
    if (seg.start_token < 0 || seg.length < 1 ||
        seg.start_token + seg.length > seq.length) {
      throw ValidationError("chunk segment exceeds sequence " +
                            std::to_string(seq.id));
    }
    return seq;
  };

  auto targets_for = [](const SequenceRecord& seq, std::int64_t start,
                        std::int64_t len) {
    std::vector<std::int64_t> targets(static_cast<std::size_t>(len), -1);
    for (std::int64_t t = 0; t < len; ++t) {
      if (start + t + 1 < seq.length) {
        targets[static_cast<std::size_t>(t)] =
            seq.tokens[static_cast<std::size_t>(start + t + 1)];
      }
    }
    return targets;
  };

  StateStore store;

  // Concatenates the saved K/V of chunk indices [0, index) of one sequence,
  // in ascending position order.
  auto assemble_prefix = [&](std::int64_t seq_id, std::int64_t index,
                             std::int64_t prefix_len) {
    std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> out;
    out.first.assign(static_cast<std::size_t>(num_layers),
                     std::vector<double>(static_cast<std::size_t>(prefix_len * kvw)));
    out.second = out.first;
    std::int64_t filled = 0;
    for (std::int64_t m = 0; m < index; ++m) {
      auto it = store.entries.find({seq_id, m});
      if (it == store.entries.end()) {
        throw ValidationError("missing KV prefix entry for sequence " +
                              std::to_string(seq_id) + " chunk index " +
                              std::to_string(m));
      }
      const StateStore::Entry& e = it->second;
      for (std::int64_t l = 0; l < num_layers; ++l) {
        std::copy(e.k[l].begin(), e.k[l].end(),
                  out.first[l].begin() + filled * kvw);
        std::copy(e.v[l].begin(), e.v[l].end(),
                  out.second[l].begin() + filled * kvw);
      }
      filled += e.len;
    }
    if (filled != prefix_len) {
      throw ValidationError("KV prefix does not cover the segment start of sequence " +
                            std::to_string(seq_id));
    }
    return out;
  };

  auto group_size_of = [&](std::int64_t group_id) -> std::int64_t {
    auto it = chunk_plan.groups.find(group_id);
    if (it == chunk_plan.groups.end()) {
      throw ValidationError("chunk plan has no group " + std::to_string(group_id));
    }
    return static_cast<std::int64_t>(it->second.size());
  };

  struct ChunkTape {
    std::vector<detail::SegmentTape> segments;
    double loss_sum = 0.0;
  };
  std::map<std::int64_t, ChunkTape> live;
  std::map<std::int64_t, double> first_loss;
  GradientSet grads = zero_gradients(params);
  RunInstrumentation instr;
  double loss_sum_total = 0.0;
  std::int64_t retained_tokens = 0;

  for (const ExecEvent& ev : exec_plan.events) {
    auto cit = chunk_by_id.find(ev.chunk_id);
    if (cit == chunk_by_id.end()) {
      throw ValidationError("plan references unknown chunk " +
                            std::to_string(ev.chunk_id));
    }
    const Chunk& chunk = *cit->second;

    if (ev.kind != ExecKind::kBackward) {
      const bool keep = ev.kind == ExecKind::kForwardRetain;
      ChunkTape tape;
      if (chunk.group_id >= 0) {
        const ChunkSegment& seg = chunk.segments.front();
        const SequenceRecord& seq = sequence_of(seg);
        const std::vector<std::int64_t> targets =
            targets_for(seq, seg.start_token, seg.length);
        const std::int64_t prefix_len = seg.start_token;
        std::vector<std::vector<double>> pk, pv;
        if (prefix_len > 0) {
          auto prefix = assemble_prefix(seg.sequence_id, chunk.index_in_group,
                                        prefix_len);
          pk = std::move(prefix.first);
          pv = std::move(prefix.second);
        }
        detail::SegmentTape st = detail::segment_forward(
            params, seq.tokens.data() + seg.start_token, seg.length,
            targets.data(), pk, pv, prefix_len, keep);
        tape.loss_sum = st.loss_sum;
        const auto key = std::make_pair(seg.sequence_id, chunk.index_in_group);
        if (ev.notes.save_kv && store.entries.find(key) == store.entries.end()) {
          StateStore::Entry entry;
          entry.start = seg.start_token;
          entry.len = seg.length;
          entry.k = st.saved_k;
          entry.v = st.saved_v;
          entry.dk.assign(static_cast<std::size_t>(num_layers),
                          std::vector<double>(
                              static_cast<std::size_t>(seg.length * kvw), 0.0));
          entry.dv = entry.dk;
          store.entries.emplace(key, std::move(entry));
        }
        tape.segments.push_back(std::move(st));
      } else {
        for (const ChunkSegment& seg : chunk.segments) {
          const SequenceRecord& seq = sequence_of(seg);
          const std::vector<std::int64_t> targets =
              targets_for(seq, seg.start_token, seg.length);
          detail::SegmentTape st = detail::segment_forward(
              params, seq.tokens.data() + seg.start_token, seg.length,
              targets.data(), kNoPrefix, kNoPrefix, 0, keep);
          tape.loss_sum += st.loss_sum;
          tape.segments.push_back(std::move(st));
        }
      }

      if (!ev.is_recompute) {
        loss_sum_total += tape.loss_sum;
        first_loss[ev.chunk_id] = tape.loss_sum;
      } else {
        ++instr.recompute_forward_count;
        auto fit = first_loss.find(ev.chunk_id);
        if (fit == first_loss.end() || fit->second != tape.loss_sum) {
          ++instr.recompute_loss_mismatches;
        }
      }
      if (keep) {
        retained_tokens += chunk.total_tokens;
        instr.peak_retained_tokens =
            std::max(instr.peak_retained_tokens, retained_tokens);
        live[ev.chunk_id] = std::move(tape);
      }
      continue;
    }

    // Backward.
    auto lit = live.find(ev.chunk_id);
    if (lit == live.end()) {
      throw ValidationError("backward of chunk " + std::to_string(ev.chunk_id) +
                            " without retained activations");
    }
    ChunkTape& tape = lit->second;
    if (chunk.group_id >= 0) {
      const ChunkSegment& seg = chunk.segments.front();
      sequence_of(seg);
      detail::SegmentTape& st = tape.segments.front();
      const std::int64_t prefix_len = st.prefix_len;
      const std::int64_t group_n = group_size_of(chunk.group_id);
      const auto key = std::make_pair(seg.sequence_id, chunk.index_in_group);

      // Gradients for this chunk's own K/V, accumulated by later chunks.
      std::vector<std::vector<double>> inc_dk, inc_dv;
      bool has_incoming = false;
      auto own = store.entries.find(key);
      if (own != store.entries.end()) {
        const std::int64_t expected = group_n - 1 - chunk.index_in_group;
        if (own->second.grad_contributions != expected) {
          ++instr.kv_completeness_violations;
        }
        inc_dk = own->second.dk;
        inc_dv = own->second.dv;
        if (options.corrupt_kv_grads) {
          for (auto& layer : inc_dk) {
            for (double& g : layer) g *= 1.0000001;
          }
          for (auto& layer : inc_dv) {
            for (double& g : layer) g *= 1.0000001;
          }
        }
        has_incoming = true;
      }

      std::vector<std::vector<double>> pk, pv, dpk, dpv;
      if (prefix_len > 0) {
        auto prefix = assemble_prefix(seg.sequence_id, chunk.index_in_group,
                                      prefix_len);
        pk = std::move(prefix.first);
        pv = std::move(prefix.second);
        dpk.assign(static_cast<std::size_t>(num_layers),
                   std::vector<double>(static_cast<std::size_t>(prefix_len * kvw), 0.0));
        dpv = dpk;
      }

      detail::segment_backward(params, st, pk, pv,
                               prefix_len > 0 ? &dpk : nullptr,
                               prefix_len > 0 ? &dpv : nullptr,
                               has_incoming ? &inc_dk : nullptr,
                               has_incoming ? &inc_dv : nullptr,
                               normalizer, grads);

      if (prefix_len > 0) {
        std::int64_t offset = 0;
        for (std::int64_t m = 0; m < chunk.index_in_group; ++m) {
          StateStore::Entry& e = store.entries.at({seg.sequence_id, m});
          for (std::int64_t l = 0; l < num_layers; ++l) {
            const double* src_k = dpk[l].data() + offset * kvw;
            const double* src_v = dpv[l].data() + offset * kvw;
            for (std::int64_t i = 0; i < e.len * kvw; ++i) {
              e.dk[l][static_cast<std::size_t>(i)] += src_k[i];
              e.dv[l][static_cast<std::size_t>(i)] += src_v[i];
            }
          }
          ++e.grad_contributions;
          offset += e.len;
        }
      }
      if (own != store.entries.end()) store.entries.erase(own);
    } else {
      for (detail::SegmentTape& st : tape.segments) {
        detail::segment_backward(params, st, kNoPrefix, kNoPrefix, nullptr,
                                 nullptr, nullptr, nullptr, normalizer, grads);
      }
    }
    retained_tokens -= chunk.total_tokens;
    live.erase(lit);
  }

  grads.loss = loss_sum_total / normalizer;
  RunPlanResult result;
  result.loss = grads.loss;
  result.gradients = std::move(grads);
  result.instrumentation = instr;
  return result;
}

// End-to-end equivalence check used by the verify CLI: chunk the batch, build
// the schedule, execute it, and compare against the full-sequence run.
struct VerifyReport {
  bool pass = false;
  double loss_rel_err = 0.0;
  double max_grad_rel_err = 0.0;
  GradComparison comparison;
  RunInstrumentation instrumentation;
  std::int64_t chunk_count = 0;
  std::int64_t event_count = 0;

  std::string to_text() const {
    std::string out;
    out += "chunks: " + std::to_string(chunk_count) + "\n";
    out += "events: " + std::to_string(event_count) + "\n";
    out += comparison.to_text();
    out += "recompute_forwards: " +
           std::to_string(instrumentation.recompute_forward_count) + "\n";
    out += "recompute_loss_mismatches: " +
           std::to_string(instrumentation.recompute_loss_mismatches) + "\n";
    out += "kv_completeness_violations: " +
           std::to_string(instrumentation.kv_completeness_violations) + "\n";
    out += std::string("result: ") + (pass ? "PASS" : "FAIL") + "\n";
    return out;
  }
};

inline VerifyReport verify_equivalence(const ToyModelParams& params,
                                       const SequenceSet& batch,
                                       std::int64_t chunk_size, std::int64_t k,
                                       double loss_tol = 1e-12,
                                       double grad_tol = 1e-9,
                                       const RunPlanOptions& options = {}) {
  Batch wrapped;
  wrapped.sequences = batch;
  wrapped.global_batch_size = static_cast<std::int64_t>(batch.size());
  const ChunkPlan chunk_plan = construct_chunks(wrapped, chunk_size);
  const ExecutionPlan exec_plan = schedule_step(chunk_plan, k);

  const RunPlanResult run = run_plan(params, chunk_plan, exec_plan, batch, options);
  GradientSet full = backward_full(params, batch);

  VerifyReport report;
  report.chunk_count = static_cast<std::int64_t>(chunk_plan.chunks.size());
  report.event_count = static_cast<std::int64_t>(exec_plan.events.size());
  report.comparison = compare_gradients(run.gradients, full);
  report.loss_rel_err = report.comparison.loss_rel_err;
  report.max_grad_rel_err = report.comparison.max_rel_err;
  report.instrumentation = run.instrumentation;
  report.pass = report.loss_rel_err <= loss_tol &&
                report.max_grad_rel_err <= grad_tol &&
                run.instrumentation.recompute_loss_mismatches == 0 &&
                run.instrumentation.kv_completeness_violations == 0;
  return report;
}

}  // namespace chunkflow
