// SPDX-License-Identifier: Apache-2.0
//
// End-to-end walkthrough: build the worked four-sequence batch, construct
// chunk plans at two chunk sizes, schedule them under different K budgets,
// and compare pipeline bubble ratios against the plain 1F1B baseline.

#include <iostream>
#include <vector>

#include "chunkflow/chunker.hpp"
#include "chunkflow/pipeline.hpp"
#include "chunkflow/scheduler.hpp"

using namespace chunkflow;

namespace {

Batch worked_batch() {
  Batch batch;
  batch.global_batch_size = 4;
  std::int64_t id = 0;
  for (const std::int64_t len : {1, 1, 2, 4}) {
    SequenceRecord rec;
    rec.id = id++;
    rec.length = len;
    batch.sequences.push_back(rec);
  }
  return batch;
}

void show(const char* title, const PipelineTrace& trace) {
  std::cout << "== " << title << " ==\n";
  std::cout << export_trace(trace, TraceFormat::kTable);
  std::cout << "makespan " << format_fixed(trace.makespan, 2) << ", bubble_ratio "
            << format_fixed(bubble_ratio(trace) * 100.0, 2) << "%\n\n";
}

}  // namespace

int main() {
  const Batch batch = worked_batch();
  CostModel cost;  // unit linear cost, backward = 2x forward

  std::vector<std::int64_t> lengths;
  for (const auto& seq : batch.sequences) lengths.push_back(seq.length);
  show("plain 1F1B, whole sequences", simulate_1f1b(lengths, 4, cost));

  const ChunkPlan plan2 = construct_chunks(batch, 2);
  std::cout << "chunk plan at cap 2: " << plan2.chunks.size() << " chunks, "
            << plan2.groups.size() << " dependent group(s)\n";
  std::cout << execution_plan_listing(schedule_step(plan2, 1)) << "\n";

  PipelineConfig cfg;
  cfg.num_stages = 4;
  cfg.chunk_size = 2;
  cfg.k = 1;
  show("state-aware 1F1B, chunk cap 2, K=1",
       simulate_state_aware_1f1b(plan2, cfg, cost));
  cfg.k = 2;
  show("state-aware 1F1B, chunk cap 2, K=2",
       simulate_state_aware_1f1b(plan2, cfg, cost));

  const ChunkPlan plan4 = construct_chunks(batch, 4);
  cfg.chunk_size = 4;
  cfg.k = 1;
  std::cout << "chunk plan at cap 4: " << plan4.chunks.size()
            << " chunks (cap too large: fewer, coarser units)\n";
  show("state-aware 1F1B, chunk cap 4, K=1",
       simulate_state_aware_1f1b(plan4, cfg, cost));
  return 0;
}
