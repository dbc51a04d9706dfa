// SPDX-License-Identifier: Apache-2.0
//
// Scheduler tests: the K-bounded group event skeleton, whole-step plans,
// replay-based validation, and the listing / JSON emitters.

#include "chunkflow/scheduler.hpp"

#include <string>
#include <vector>

#include <gtest/gtest.h>

namespace chunkflow {
namespace {

struct EventShape {
  ExecKind kind;
  std::int64_t chunk_id;
  bool is_recompute;
};

void expect_events(const ExecutionPlan& plan,
                   const std::vector<EventShape>& expected) {
  ASSERT_EQ(plan.events.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(plan.events[i].kind, expected[i].kind) << "event " << i;
    EXPECT_EQ(plan.events[i].chunk_id, expected[i].chunk_id) << "event " << i;
    EXPECT_EQ(plan.events[i].is_recompute, expected[i].is_recompute)
        << "event " << i;
  }
}

Batch batch_of(const std::vector<std::int64_t>& lengths) {
  Batch batch;
  batch.global_batch_size = static_cast<std::int64_t>(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    SequenceRecord seq;
    seq.id = static_cast<std::int64_t>(i);
    seq.length = lengths[i];
    batch.sequences.push_back(seq);
  }
  return batch;
}

TEST(ScheduleGroup, GroupWithinBudgetRetainsEverything) {
  const ExecutionPlan plan = schedule_group(2, 4);
  expect_events(plan, {{ExecKind::kForwardRetain, 1, false},
                       {ExecKind::kForwardRetain, 2, false},
                       {ExecKind::kBackward, 2, false},
                       {ExecKind::kBackward, 1, false}});
}

TEST(ScheduleGroup, BudgetOneRecomputesTheTailDescending) {
  const ExecutionPlan plan = schedule_group(4, 1);
  expect_events(plan, {{ExecKind::kForwardDiscard, 1, false},
                       {ExecKind::kForwardDiscard, 2, false},
                       {ExecKind::kForwardDiscard, 3, false},
                       {ExecKind::kForwardRetain, 4, false},
                       {ExecKind::kBackward, 4, false},
                       {ExecKind::kForwardRetain, 3, true},
                       {ExecKind::kBackward, 3, false},
                       {ExecKind::kForwardRetain, 2, true},
                       {ExecKind::kBackward, 2, false},
                       {ExecKind::kForwardRetain, 1, true},
                       {ExecKind::kBackward, 1, false}});
}

TEST(ScheduleGroup, SingleChunkIsForwardThenBackward) {
  const ExecutionPlan plan = schedule_group(1, 1);
  expect_events(plan, {{ExecKind::kForwardRetain, 1, false},
                       {ExecKind::kBackward, 1, false}});
}

TEST(ScheduleGroup, ValidatesArguments) {
  EXPECT_THROW(schedule_group(0, 1), ValidationError);
  EXPECT_THROW(schedule_group(3, 0), ValidationError);
}

TEST(ScheduleGroup, ForwardCountMatchesTheRecomputeLaw) {
  for (std::int64_t n = 1; n <= 8; ++n) {
    for (std::int64_t k = 1; k <= 8; ++k) {
      const ExecutionPlan plan = schedule_group(n, k);
      std::int64_t forwards = 0;
      std::int64_t backwards = 0;
      for (const ExecEvent& event : plan.events) {
        if (event.kind == ExecKind::kBackward) {
          ++backwards;
        } else {
          ++forwards;
        }
      }
      EXPECT_EQ(forwards, n + std::max<std::int64_t>(0, n - k))
          << "n=" << n << " k=" << k;
      EXPECT_EQ(backwards, n);
    }
  }
}

TEST(ScheduleGroup, KvActionsTrackPrefixStateTraffic) {
  const ExecutionPlan plan = schedule_group(3, 1);
  // Fd1, Fd2, Fr3, B3, Fr2', B2, Fr1', B1
  ASSERT_EQ(plan.events.size(), 8u);
  EXPECT_TRUE(plan.events[0].notes.save_kv);             // Fd1 feeds chunk 2
  EXPECT_FALSE(plan.events[0].notes.read_kv_prefix);     // nothing before it
  EXPECT_TRUE(plan.events[1].notes.save_kv);             // Fd2 feeds chunk 3
  EXPECT_TRUE(plan.events[1].notes.read_kv_prefix);
  EXPECT_FALSE(plan.events[2].notes.save_kv);            // Fr3 is the last chunk
  EXPECT_TRUE(plan.events[2].notes.read_kv_prefix);
  EXPECT_TRUE(plan.events[3].notes.accumulate_kv_grad);  // B3 feeds 1 and 2
  EXPECT_FALSE(plan.events[4].notes.save_kv);            // recompute reuses KV
  EXPECT_TRUE(plan.events[4].notes.read_kv_prefix);
  EXPECT_TRUE(plan.events[5].notes.accumulate_kv_grad);  // B2 feeds 1
  EXPECT_FALSE(plan.events[6].notes.read_kv_prefix);     // Fr1' has no prefix
  EXPECT_FALSE(plan.events[7].notes.accumulate_kv_grad); // B1 feeds nothing
}

TEST(ScheduleStep, WorkedBatchInterleavesStandalonesThenTheGroup) {
  const ChunkPlan chunk_plan = construct_chunks(batch_of({1, 1, 2, 4}), 2);
  const ExecutionPlan plan = schedule_step(chunk_plan, 1);
  expect_events(plan, {{ExecKind::kForwardRetain, 0, false},
                       {ExecKind::kBackward, 0, false},
                       {ExecKind::kForwardRetain, 1, false},
                       {ExecKind::kBackward, 1, false},
                       {ExecKind::kForwardDiscard, 2, false},
                       {ExecKind::kForwardRetain, 3, false},
                       {ExecKind::kBackward, 3, false},
                       {ExecKind::kForwardRetain, 2, true},
                       {ExecKind::kBackward, 2, false}});
  EXPECT_EQ(plan.k, 1);
  EXPECT_EQ(plan.chunk_size, 2);
  EXPECT_EQ(plan.groups, chunk_plan.groups);
  for (const Chunk& chunk : chunk_plan.chunks) {
    EXPECT_EQ(plan.chunk_tokens.at(chunk.chunk_id), chunk.total_tokens);
  }
}

TEST(ScheduleStep, StandaloneOnlyPlansHaveNoRecompute) {
  const ChunkPlan chunk_plan = construct_chunks(batch_of({2, 2, 2}), 2);
  const ExecutionPlan plan = schedule_step(chunk_plan, 5);
  ASSERT_EQ(plan.events.size(), 6u);
  for (const ExecEvent& event : plan.events) {
    EXPECT_FALSE(event.is_recompute);
    EXPECT_EQ(event.group_id, -1);
  }
}

TEST(ScheduleStep, RejectsNonPositiveBudget) {
  const ChunkPlan chunk_plan = construct_chunks(batch_of({2}), 2);
  EXPECT_THROW(schedule_step(chunk_plan, 0), ValidationError);
}

TEST(ValidatePlan, ReplaysGroupSchedulesWithoutViolations) {
  const PlanDiagnostics k1 = validate_plan(schedule_group(4, 1, 10));
  EXPECT_EQ(k1.peak_retained_tokens, 10);
  EXPECT_EQ(k1.recompute_token_count, 30);
  EXPECT_TRUE(k1.violations.empty());

  const PlanDiagnostics k2 = validate_plan(schedule_group(4, 2, 10));
  EXPECT_EQ(k2.peak_retained_tokens, 20);
  EXPECT_EQ(k2.recompute_token_count, 20);
  EXPECT_TRUE(k2.violations.empty());
}

TEST(ValidatePlan, FlagsBackwardWithoutRetainForward) {
  ExecutionPlan plan;
  plan.k = 1;
  plan.chunk_size = 4;
  ExecEvent backward;
  backward.kind = ExecKind::kBackward;
  backward.chunk_id = 0;
  plan.events.push_back(backward);
  const PlanDiagnostics diag = validate_plan(plan);
  ASSERT_FALSE(diag.violations.empty());
  EXPECT_NE(diag.violations[0].find("without a live retain-forward"),
            std::string::npos);
}

TEST(ValidatePlan, FlagsDoubleBackward) {
  ExecutionPlan plan = schedule_group(1, 1);
  plan.events.push_back(plan.events[0]);  // re-retain
  plan.events.push_back(plan.events[1]);  // second backward
  const PlanDiagnostics diag = validate_plan(plan);
  bool found = false;
  for (const std::string& violation : diag.violations) {
    if (violation.find("more than once") != std::string::npos) found = true;
  }
  EXPECT_TRUE(found);
}

TEST(ValidatePlan, FlagsGroupOrderViolations) {
  // Backwards ascending instead of descending.
  ExecutionPlan ascending = schedule_group(2, 2);
  std::swap(ascending.events[2], ascending.events[3]);
  bool backward_order = false;
  for (const std::string& violation : validate_plan(ascending).violations) {
    if (violation.find("out of descending group order") != std::string::npos) {
      backward_order = true;
    }
  }
  EXPECT_TRUE(backward_order);

  // First-pass forwards out of ascending order.
  ExecutionPlan reversed = schedule_group(2, 2);
  std::swap(reversed.events[0], reversed.events[1]);
  bool forward_order = false;
  for (const std::string& violation : validate_plan(reversed).violations) {
    if (violation.find("out of ascending group order") != std::string::npos) {
      forward_order = true;
    }
  }
  EXPECT_TRUE(forward_order);
}

TEST(ValidatePlan, FlagsMissingBackward) {
  ExecutionPlan plan = schedule_group(1, 1);
  plan.events.pop_back();
  bool found = false;
  for (const std::string& violation : validate_plan(plan).violations) {
    if (violation.find("never backwarded") != std::string::npos) found = true;
  }
  EXPECT_TRUE(found);
}

TEST(ValidatePlan, KBoundHoldsOnRandomBatches) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t chunk_size = 2 + static_cast<std::int64_t>(rng.next_below(14));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_below(4));
    const std::size_t count = 1 + static_cast<std::size_t>(rng.next_below(12));
    std::vector<std::int64_t> lengths;
    for (std::size_t i = 0; i < count; ++i) {
      lengths.push_back(1 + static_cast<std::int64_t>(rng.next_below(70)));
    }
    const ChunkPlan chunk_plan = construct_chunks(batch_of(lengths), chunk_size);
    const ExecutionPlan plan = schedule_step(chunk_plan, k);
    const PlanDiagnostics diag = validate_plan(plan);
    EXPECT_TRUE(diag.violations.empty());
    EXPECT_LE(diag.peak_retained_tokens, std::max<std::int64_t>(k, 1) * chunk_size)
        << "chunk_size=" << chunk_size << " k=" << k;
  }
}

TEST(PlanEmitters, ListingUsesTheDocumentedLineFormat) {
  const ChunkPlan chunk_plan = construct_chunks(batch_of({1, 1, 2, 4}), 2);
  const std::string listing = execution_plan_listing(schedule_step(chunk_plan, 1));
  const std::string expected =
      "F+ chunk=0 group=-\n"
      "B  chunk=0 group=-\n"
      "F+ chunk=1 group=-\n"
      "B  chunk=1 group=-\n"
      "F- chunk=2 group=0\n"
      "F+ chunk=3 group=0\n"
      "B  chunk=3 group=0\n"
      "F+ chunk=2 group=0 recompute\n"
      "B  chunk=2 group=0\n";
  EXPECT_EQ(listing, expected);
}

TEST(PlanEmitters, JsonCarriesEventsGroupsAndTokens) {
  const ChunkPlan chunk_plan = construct_chunks(batch_of({1, 1, 2, 4}), 2);
  const ExecutionPlan plan = schedule_step(chunk_plan, 1);
  const nlohmann::json doc = execution_plan_to_json(plan);
  EXPECT_EQ(doc.at("k").get<std::int64_t>(), 1);
  EXPECT_EQ(doc.at("chunk_size").get<std::int64_t>(), 2);
  ASSERT_EQ(doc.at("events").size(), plan.events.size());
  EXPECT_EQ(doc.at("events")[4].at("kind").get<std::string>(), "forward_discard");
  EXPECT_TRUE(doc.at("events")[7].at("recompute").get<bool>());
  EXPECT_EQ(doc.at("groups").at("0").get<std::vector<std::int64_t>>(),
            (std::vector<std::int64_t>{2, 3}));
  EXPECT_EQ(doc.at("chunk_tokens").at("2").get<std::int64_t>(), 2);
}

}  // namespace
}  // namespace chunkflow
