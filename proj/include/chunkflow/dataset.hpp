// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chunkflow/common.hpp"

namespace chunkflow {

struct SequenceRecord {
  std::int64_t id = 0;
  std::int64_t length = 0;
  // Token payload; present only for numeric-kernel runs. Empty otherwise.
  std::vector<std::int32_t> tokens;

  bool has_tokens() const { return !tokens.empty(); }
};

using SequenceSet = std::vector<SequenceRecord>;

struct DistributionBucket {
  std::int64_t upper_bound = 0;        // lengths strictly below this bound
  double cumulative_fraction = 0.0;
};

struct DistributionSpec {
  std::vector<DistributionBucket> buckets;
  std::int64_t max_length = 0;

  void validate() const {
    if (buckets.empty()) throw ValidationError("distribution spec has no buckets");
    for (std::size_t i = 0; i < buckets.size(); ++i) {
      if (buckets[i].upper_bound < 2) {
        throw ValidationError("bucket upper bound must be at least 2");
      }
      if (i > 0 && buckets[i].upper_bound <= buckets[i - 1].upper_bound) {
        throw ValidationError("bucket upper bounds must be strictly increasing");
      }
      if (buckets[i].cumulative_fraction <= 0.0 ||
          buckets[i].cumulative_fraction > 1.0) {
        throw ValidationError("cumulative fractions must lie in (0, 1]");
      }
      if (i > 0 && buckets[i].cumulative_fraction <=
                       buckets[i - 1].cumulative_fraction) {
        throw ValidationError("cumulative fractions must be strictly increasing");
      }
    }
    const DistributionBucket& last = buckets.back();
    if (max_length < last.upper_bound) {
      throw ValidationError("max_length must be at least the last bucket bound");
    }
    if (max_length > last.upper_bound && last.cumulative_fraction >= 1.0) {
      throw ValidationError(
          "last cumulative fraction must be below 1.0 when max_length exceeds "
          "the last bucket bound");
    }
    if (max_length == last.upper_bound && last.cumulative_fraction != 1.0) {
      throw ValidationError(
          "last cumulative fraction must equal 1.0 when max_length equals the "
          "last bucket bound");
    }
  }
};

struct Batch {
  std::int64_t step = 0;
  std::vector<SequenceRecord> sequences;
  std::int64_t global_batch_size = 0;
  // True when an epoch's final step returned fewer than global_batch_size
  // records.
  bool short_batch = false;
};

// Distribution preset mirroring the long-tail evaluation mix: <1K 98.17%,
// <4K 99.72%, <8K 99.83%, <32K 99.92%, <128K 99.98%, longest 256K.
inline DistributionSpec eval_table5_spec() {
  DistributionSpec spec;
  spec.buckets = {{1024, 0.9817},
                  {4096, 0.9972},
                  {8192, 0.9983},
                  {32768, 0.9992},
                  {131072, 0.9998}};
  spec.max_length = 262144;
  return spec;
}

// Distribution preset mirroring the LMSysChat1M mix: <1K 90.499%,
// <4K 99.539%, <8K 99.908%, <32K 99.987%, <128K 99.996%, longest 303K.
inline DistributionSpec lmsys_table2_spec() {
  DistributionSpec spec;
  spec.buckets = {{1024, 0.90499},
                  {4096, 0.99539},
                  {8192, 0.99908},
                  {32768, 0.99987},
                  {131072, 0.99996}};
  spec.max_length = 303 * 1024;
  return spec;
}

// Parses line-delimited records, one JSON object per line with a required
// `length` field and an optional `tokens` list. Blank lines are skipped.
inline SequenceSet load_lengths(std::istream& in) {
  SequenceSet set;
  std::string line;
  std::int64_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_number) +
                       ": malformed record: " + e.what());
    }
    if (!record.is_object() || !record.contains("length") ||
        !record["length"].is_number_integer()) {
      throw ParseError("line " + std::to_string(line_number) +
                       ": record must be an object with an integer `length`");
    }
    SequenceRecord seq;
    seq.id = static_cast<std::int64_t>(set.size());
    if (record.contains("id")) {
      if (!record["id"].is_number_integer()) {
        throw ParseError("line " + std::to_string(line_number) +
                         ": `id` must be an integer");
      }
      seq.id = record["id"].get<std::int64_t>();
    }
    seq.length = record["length"].get<std::int64_t>();
    if (seq.length <= 0) {
      throw ValidationError("line " + std::to_string(line_number) +
                            ": length must be positive");
    }
    if (record.contains("tokens")) {
      if (!record["tokens"].is_array()) {
        throw ParseError("line " + std::to_string(line_number) +
                         ": `tokens` must be a list of integers");
      }
      seq.tokens = record["tokens"].get<std::vector<std::int32_t>>();
      if (static_cast<std::int64_t>(seq.tokens.size()) != seq.length) {
        throw ValidationError("line " + std::to_string(line_number) +
                              ": tokens count does not match length");
      }
    }
    set.push_back(std::move(seq));
  }
  std::set<std::int64_t> ids;
  for (const SequenceRecord& seq : set) {
    if (!ids.insert(seq.id).second) {
      throw ValidationError("duplicate sequence id " + std::to_string(seq.id));
    }
  }
  return set;
}

// Writes records in the same line-delimited format load_lengths accepts.
inline void write_records(std::ostream& out, const SequenceSet& set) {
  for (const SequenceRecord& seq : set) {
    nlohmann::json record;
    record["id"] = seq.id;
    record["length"] = seq.length;
    if (seq.has_tokens()) record["tokens"] = seq.tokens;
    out << record.dump() << "\n";
  }
}

namespace detail {

// Lower end of a bucket's length range. The first bucket starts at 16 tokens
// (so generated sequences always contain a prediction target) unless the
// bucket's own bound forces a smaller start.
inline std::int64_t bucket_low(const DistributionSpec& spec, std::size_t bucket_index) {
  if (bucket_index == 0) {
    return std::max<std::int64_t>(
        1, std::min<std::int64_t>(16, spec.buckets[0].upper_bound - 1));
  }
  return spec.buckets[bucket_index - 1].upper_bound;
}

// Log-uniform draw from [low, high); high > low >= 1.
inline std::int64_t log_uniform_length(std::int64_t low, std::int64_t high,
                                       SplitMix64& rng) {
  const double lo = std::log(static_cast<double>(low));
  const double hi = std::log(static_cast<double>(high));
  const double x = std::exp(lo + rng.next_double() * (hi - lo));
  std::int64_t length = static_cast<std::int64_t>(std::floor(x));
  return std::clamp<std::int64_t>(length, low, high - 1);
}

}  // namespace detail

// Draws `count` sequence lengths from the spec: a bucket is chosen by CDF
// inversion, then a length is drawn log-uniformly within the bucket's range.
// Lengths at or above the last bound fall into the tail [last_bound,
// max_length]. Pure function of (spec, count, seed).
inline SequenceSet synthesize(const DistributionSpec& spec, std::int64_t count,
                              std::uint64_t seed) {
  spec.validate();
  if (count < 1) throw ValidationError("count must be at least 1");
  SplitMix64 rng(seed);
  SequenceSet set;
  set.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const double u = rng.next_double();
    std::int64_t low = 0;
    std::int64_t high = 0;  // exclusive
    bool found = false;
    for (std::size_t b = 0; b < spec.buckets.size(); ++b) {
      if (u < spec.buckets[b].cumulative_fraction) {
        low = detail::bucket_low(spec, b);
        high = spec.buckets[b].upper_bound;
        found = true;
        break;
      }
    }
    if (!found) {
      low = spec.buckets.back().upper_bound;
      high = spec.max_length + 1;
    }
    SequenceRecord seq;
    seq.id = i;
    seq.length = detail::log_uniform_length(low, high, rng);
    set.push_back(seq);
  }
  return set;
}

// Deterministic epoch sampling: a seed-keyed shuffle of the set partitioned
// into consecutive slices of global_batch_size. Returns nullopt once the
// epoch is exhausted.
inline std::optional<Batch> sample_batch(const SequenceSet& set,
                                         std::int64_t global_batch_size,
                                         std::int64_t step, std::uint64_t seed) {
  if (set.empty()) throw ValidationError("cannot sample from an empty sequence set");
  if (global_batch_size < 1) {
    throw ValidationError("global batch size must be at least 1");
  }
  if (step < 0) throw ValidationError("step must be non-negative");
  const std::int64_t begin = step * global_batch_size;
  if (begin >= static_cast<std::int64_t>(set.size())) return std::nullopt;

  std::vector<std::size_t> order(set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SplitMix64 rng(seed);
  fisher_yates_shuffle(order, rng);

  const std::int64_t end = std::min<std::int64_t>(
      begin + global_batch_size, static_cast<std::int64_t>(set.size()));
  Batch batch;
  batch.step = step;
  batch.global_batch_size = global_batch_size;
  batch.short_batch = (end - begin) < global_batch_size;
  for (std::int64_t i = begin; i < end; ++i) {
    batch.sequences.push_back(set[order[static_cast<std::size_t>(i)]]);
  }
  return batch;
}

struct DistributionReportRow {
  std::int64_t bound = 0;
  double fraction = 0.0;  // fraction of sequences strictly below the bound
};

struct DistributionReport {
  std::vector<DistributionReportRow> rows;
  std::int64_t max_length = 0;
  std::int64_t total = 0;

  std::string to_text() const {
    std::ostringstream out;
    out << "bound        fraction\n";
    for (const DistributionReportRow& row : rows) {
      char line[64];
      std::snprintf(line, sizeof(line), "%-12lld %7.3f%%\n",
                    static_cast<long long>(row.bound), row.fraction * 100.0);
      out << line;
    }
    out << "max_length   " << max_length << "\n";
    out << "sequences    " << total << "\n";
    return out.str();
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "bound,fraction\n";
    for (const DistributionReportRow& row : rows) {
      out << row.bound << "," << format_fixed(row.fraction, 6) << "\n";
    }
    out << "max_length," << max_length << "\n";
    return out.str();
  }
};

// Exact empirical CDF (strictly-less-than convention) at each bound.
inline DistributionReport distribution_report(const SequenceSet& set,
                                              const std::vector<std::int64_t>& bounds) {
  if (set.empty()) throw ValidationError("cannot report on an empty sequence set");
  for (std::size_t i = 1; i < bounds.size(); ++i) {
    if (bounds[i] <= bounds[i - 1]) {
      throw ValidationError("report bounds must be ascending");
    }
  }
  DistributionReport report;
  report.total = static_cast<std::int64_t>(set.size());
  for (const SequenceRecord& seq : set) {
    report.max_length = std::max(report.max_length, seq.length);
  }
  for (std::int64_t bound : bounds) {
    std::int64_t below = 0;
    for (const SequenceRecord& seq : set) {
      if (seq.length < bound) ++below;
    }
    report.rows.push_back(
        {bound, static_cast<double>(below) / static_cast<double>(report.total)});
  }
  return report;
}

}  // namespace chunkflow
