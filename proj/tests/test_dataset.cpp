// SPDX-License-Identifier: Apache-2.0
//
// Dataset module tests: JSONL ingestion, long-tail synthesis, epoch-based
// batch sampling, and the empirical distribution report.

#include "chunkflow/dataset.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

namespace chunkflow {
namespace {

TEST(LoadLengths, ParsesRecordsInLineOrder) {
  std::istringstream in(
      "{\"length\": 5}\n"
      "{\"length\": 2}\n"
      "\n"
      "{\"length\": 9}\n");
  const SequenceSet set = load_lengths(in);
  ASSERT_EQ(set.size(), 3u);
  EXPECT_EQ(set[0].id, 0);
  EXPECT_EQ(set[0].length, 5);
  EXPECT_EQ(set[1].id, 1);
  EXPECT_EQ(set[1].length, 2);
  EXPECT_EQ(set[2].id, 2);
  EXPECT_EQ(set[2].length, 9);
  EXPECT_FALSE(set[0].has_tokens());
}

TEST(LoadLengths, EmptyStreamYieldsEmptySet) {
  std::istringstream in("");
  EXPECT_TRUE(load_lengths(in).empty());
}

TEST(LoadLengths, RejectsNonPositiveLengthNamingLine) {
  std::istringstream in(
      "{\"length\": 5}\n"
      "{\"length\": 0}\n");
  try {
    load_lengths(in);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadLengths, RejectsMalformedJson) {
  std::istringstream in("{\"length\": }\n");
  EXPECT_THROW(load_lengths(in), ParseError);
}

TEST(LoadLengths, RejectsMissingLengthField) {
  std::istringstream in("{\"id\": 3}\n");
  EXPECT_THROW(load_lengths(in), ParseError);
}

TEST(LoadLengths, HonorsExplicitIds) {
  std::istringstream in(
      "{\"id\": 11, \"length\": 5}\n"
      "{\"id\": 4, \"length\": 2}\n");
  const SequenceSet set = load_lengths(in);
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set[0].id, 11);
  EXPECT_EQ(set[1].id, 4);
}

TEST(LoadLengths, RejectsDuplicateIds) {
  std::istringstream in(
      "{\"id\": 7, \"length\": 5}\n"
      "{\"id\": 7, \"length\": 3}\n");
  try {
    load_lengths(in);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate sequence id 7"),
              std::string::npos);
  }
}

TEST(LoadLengths, RejectsNonIntegerId) {
  std::istringstream in("{\"id\": \"a\", \"length\": 5}\n");
  EXPECT_THROW(load_lengths(in), ParseError);
}

TEST(LoadLengths, AcceptsTokensMatchingLength) {
  std::istringstream in("{\"length\": 3, \"tokens\": [4, 5, 6]}\n");
  const SequenceSet set = load_lengths(in);
  ASSERT_EQ(set.size(), 1u);
  ASSERT_TRUE(set[0].has_tokens());
  EXPECT_EQ(set[0].tokens, (std::vector<std::int32_t>{4, 5, 6}));
}

TEST(LoadLengths, RejectsTokenCountMismatch) {
  std::istringstream in("{\"length\": 3, \"tokens\": [4, 5]}\n");
  EXPECT_THROW(load_lengths(in), ValidationError);
}

TEST(WriteRecords, RoundTripsIdsLengthsAndTokens) {
  SequenceSet set;
  set.push_back({9, 2, {1, 2}});
  set.push_back({3, 4, {}});
  std::ostringstream out;
  write_records(out, set);
  std::istringstream in(out.str());
  const SequenceSet reloaded = load_lengths(in);
  ASSERT_EQ(reloaded.size(), 2u);
  EXPECT_EQ(reloaded[0].id, 9);
  EXPECT_EQ(reloaded[0].length, 2);
  EXPECT_EQ(reloaded[0].tokens, set[0].tokens);
  EXPECT_EQ(reloaded[1].id, 3);
  EXPECT_EQ(reloaded[1].length, 4);
  EXPECT_FALSE(reloaded[1].has_tokens());
}

TEST(Synthesize, SingleBucketStaysInRange) {
  DistributionSpec spec;
  spec.buckets = {{8, 1.0}};
  spec.max_length = 8;
  const SequenceSet set = synthesize(spec, 100, 3);
  ASSERT_EQ(set.size(), 100u);
  for (const SequenceRecord& seq : set) {
    EXPECT_GE(seq.length, 1);
    EXPECT_LT(seq.length, 8);
  }
}

TEST(Synthesize, SequentialIdsAndDeterminism) {
  const DistributionSpec spec = eval_table5_spec();
  const SequenceSet a = synthesize(spec, 500, 7);
  const SequenceSet b = synthesize(spec, 500, 7);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, static_cast<std::int64_t>(i));
    EXPECT_EQ(a[i].length, b[i].length);
  }
  const SequenceSet c = synthesize(spec, 500, 8);
  bool any_difference = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].length != c[i].length) any_difference = true;
  }
  EXPECT_TRUE(any_difference);
}

TEST(Synthesize, MatchesTable5FractionsAtModerateScale) {
  const DistributionSpec spec = eval_table5_spec();
  const SequenceSet set = synthesize(spec, 20000, 42);
  std::vector<std::int64_t> bounds;
  for (const DistributionBucket& bucket : spec.buckets) {
    bounds.push_back(bucket.upper_bound);
  }
  const DistributionReport report = distribution_report(set, bounds);
  ASSERT_EQ(report.rows.size(), spec.buckets.size());
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    EXPECT_NEAR(report.rows[i].fraction, spec.buckets[i].cumulative_fraction,
                0.005)
        << "bound " << report.rows[i].bound;
  }
  EXPECT_LE(report.max_length, spec.max_length);
}

TEST(Synthesize, RejectsNonPositiveCount) {
  EXPECT_THROW(synthesize(eval_table5_spec(), 0, 1), ValidationError);
}

TEST(DistributionSpecValidate, AcceptsPresets) {
  EXPECT_NO_THROW(eval_table5_spec().validate());
  EXPECT_NO_THROW(lmsys_table2_spec().validate());
}

TEST(DistributionSpecValidate, RejectsBadSpecs) {
  DistributionSpec no_buckets;
  no_buckets.max_length = 10;
  EXPECT_THROW(no_buckets.validate(), ValidationError);

  DistributionSpec unsorted;
  unsorted.buckets = {{100, 0.5}, {50, 1.0}};
  unsorted.max_length = 50;
  EXPECT_THROW(unsorted.validate(), ValidationError);

  DistributionSpec bad_fraction;
  bad_fraction.buckets = {{100, 1.5}};
  bad_fraction.max_length = 100;
  EXPECT_THROW(bad_fraction.validate(), ValidationError);

  DistributionSpec short_max;
  short_max.buckets = {{100, 1.0}};
  short_max.max_length = 50;
  EXPECT_THROW(short_max.validate(), ValidationError);

  // A tail past the last bound needs probability mass left for it.
  DistributionSpec saturated_tail;
  saturated_tail.buckets = {{100, 1.0}};
  saturated_tail.max_length = 200;
  EXPECT_THROW(saturated_tail.validate(), ValidationError);
}

SequenceSet uniform_set(std::int64_t count) {
  SequenceSet set;
  for (std::int64_t i = 0; i < count; ++i) set.push_back({i, 10 + i, {}});
  return set;
}

TEST(SampleBatch, PartitionsAnEpochIntoDisjointFullBatches) {
  const SequenceSet set = uniform_set(512);
  const auto first = sample_batch(set, 256, 0, 5);
  const auto second = sample_batch(set, 256, 1, 5);
  ASSERT_TRUE(first.has_value());
  ASSERT_TRUE(second.has_value());
  EXPECT_EQ(first->sequences.size(), 256u);
  EXPECT_EQ(second->sequences.size(), 256u);
  EXPECT_FALSE(first->short_batch);
  EXPECT_FALSE(second->short_batch);
  std::set<std::int64_t> ids;
  for (const SequenceRecord& seq : first->sequences) ids.insert(seq.id);
  for (const SequenceRecord& seq : second->sequences) ids.insert(seq.id);
  EXPECT_EQ(ids.size(), 512u) << "steps must cover the set without overlap";
  EXPECT_FALSE(sample_batch(set, 256, 2, 5).has_value());
}

TEST(SampleBatch, FlagsTheShortFinalBatch) {
  const SequenceSet set = uniform_set(300);
  const auto last = sample_batch(set, 256, 1, 5);
  ASSERT_TRUE(last.has_value());
  EXPECT_EQ(last->sequences.size(), 44u);
  EXPECT_TRUE(last->short_batch);
}

TEST(SampleBatch, DeterministicPerSeedAndStep) {
  const SequenceSet set = uniform_set(64);
  const auto a = sample_batch(set, 16, 2, 9);
  const auto b = sample_batch(set, 16, 2, 9);
  ASSERT_TRUE(a.has_value());
  ASSERT_TRUE(b.has_value());
  for (std::size_t i = 0; i < a->sequences.size(); ++i) {
    EXPECT_EQ(a->sequences[i].id, b->sequences[i].id);
  }
}

TEST(SampleBatch, ValidatesArguments) {
  const SequenceSet set = uniform_set(4);
  EXPECT_THROW(sample_batch({}, 2, 0, 1), ValidationError);
  EXPECT_THROW(sample_batch(set, 0, 0, 1), ValidationError);
  EXPECT_THROW(sample_batch(set, 2, -1, 1), ValidationError);
}

TEST(DistributionReport, UsesStrictlyLessThanFractions) {
  SequenceSet set;
  set.push_back({0, 1, {}});
  set.push_back({1, 2, {}});
  set.push_back({2, 3, {}});
  const DistributionReport report = distribution_report(set, {2});
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.rows[0].bound, 2);
  EXPECT_NEAR(report.rows[0].fraction, 1.0 / 3.0, 1e-12);
  EXPECT_EQ(report.max_length, 3);
  EXPECT_EQ(report.total, 3);
}

TEST(DistributionReport, EmptyBoundsReportOnlyMaxLength) {
  SequenceSet set;
  set.push_back({0, 5, {}});
  const DistributionReport report = distribution_report(set, {});
  EXPECT_TRUE(report.rows.empty());
  EXPECT_EQ(report.max_length, 5);
  const std::string text = report.to_text();
  EXPECT_NE(text.find("max_length   5"), std::string::npos);
  EXPECT_NE(text.find("sequences    1"), std::string::npos);
}

TEST(DistributionReport, ValidatesInputs) {
  EXPECT_THROW(distribution_report({}, {2}), ValidationError);
  SequenceSet set;
  set.push_back({0, 5, {}});
  EXPECT_THROW(distribution_report(set, {4, 2}), ValidationError);
}

TEST(DistributionReport, CsvContainsHeaderAndRows) {
  SequenceSet set;
  set.push_back({0, 1, {}});
  set.push_back({1, 5, {}});
  const std::string csv = distribution_report(set, {4}).to_csv();
  EXPECT_NE(csv.find("bound,fraction\n"), std::string::npos);
  EXPECT_NE(csv.find("4,0.500000\n"), std::string::npos);
  EXPECT_NE(csv.find("max_length,5\n"), std::string::npos);
}

}  // namespace
}  // namespace chunkflow
