// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "chunkflow/common.hpp"
#include "chunkflow/dataset.hpp"

namespace chunkflow {

enum class ChunkKind { kStandalone, kDependent };

struct ChunkSegment {
  std::int64_t sequence_id = 0;
  std::int64_t start_token = 0;  // offset within the original sequence
  std::int64_t length = 0;
};

struct Chunk {
  std::int64_t chunk_id = 0;
  ChunkKind kind = ChunkKind::kStandalone;
  std::vector<ChunkSegment> segments;
  std::int64_t group_id = -1;        // >= 0 iff dependent
  std::int64_t index_in_group = -1;  // 0-based iff dependent
  std::int64_t total_tokens = 0;
};

struct ChunkPlan {
  std::int64_t chunk_size = 0;
  std::vector<Chunk> chunks;
  std::map<std::int64_t, std::vector<std::int64_t>> groups;  // group -> chunk ids
};

// Splits one over-long sequence into ceil(length / chunk_size) dependent
// chunks covering it contiguously; all but the last hold exactly chunk_size
// tokens. Chunk and group ids are local (0-based); construct_chunks renumbers.
inline std::vector<Chunk> split_long(const SequenceRecord& seq,
                                     std::int64_t chunk_size) {
  if (chunk_size < 1) throw ValidationError("chunk_size must be at least 1");
  if (seq.length <= chunk_size) {
    throw ValidationError("split_long requires a sequence longer than chunk_size");
  }
  std::vector<Chunk> chunks;
  const std::int64_t n = ceil_div(seq.length, chunk_size);
  for (std::int64_t i = 0; i < n; ++i) {
    Chunk chunk;
    chunk.chunk_id = i;
    chunk.kind = ChunkKind::kDependent;
    chunk.group_id = 0;
    chunk.index_in_group = i;
    ChunkSegment segment;
    segment.sequence_id = seq.id;
    segment.start_token = i * chunk_size;
    segment.length = std::min(chunk_size, seq.length - segment.start_token);
    chunk.segments.push_back(segment);
    chunk.total_tokens = segment.length;
    chunks.push_back(chunk);
  }
  return chunks;
}

namespace detail {

struct PackItem {
  std::int64_t length = 0;
  std::int64_t sequence_id = 0;
};

// First-fit-decreasing restricted to bin_count bins. Items must already be
// sorted by (length descending, id ascending). Returns false when some item
// fits no bin.
inline bool ffd_into_bins(const std::vector<PackItem>& items,
                          std::size_t bin_count, std::int64_t capacity,
                          std::vector<std::vector<std::int64_t>>& bins_out) {
  std::vector<std::int64_t> remaining(bin_count, capacity);
  std::vector<std::vector<std::int64_t>> bins(bin_count);
  for (const PackItem& item : items) {
    bool placed = false;
    for (std::size_t b = 0; b < bin_count; ++b) {
      if (remaining[b] >= item.length) {
        remaining[b] -= item.length;
        bins[b].push_back(item.sequence_id);
        placed = true;
        break;
      }
    }
    if (!placed) return false;
  }
  bins_out = std::move(bins);
  return true;
}

// Exhaustive packing into at most bin_count bins, used as a fallback on small
// instances where first-fit-decreasing misses a feasible packing. Depth-first
// over sorted items; a new bin is only opened as the first empty one, and bins
// with equal remaining capacity are tried once, which keeps the search tiny
// for the instance sizes this is enabled on (<= 12 items).
inline bool exact_pack(const std::vector<PackItem>& items, std::size_t index,
                       std::size_t bin_count, std::int64_t capacity,
                       std::vector<std::int64_t>& remaining,
                       std::vector<std::vector<std::int64_t>>& bins) {
  if (index == items.size()) return true;
  const PackItem& item = items[index];
  for (std::size_t b = 0; b < bin_count; ++b) {
    if (bins[b].empty() && b > 0 && bins[b - 1].empty()) break;
    if (remaining[b] < item.length) continue;
    bool duplicate = false;
    for (std::size_t prior = 0; prior < b; ++prior) {
      if (remaining[prior] == remaining[b]) {
        duplicate = true;
        break;
      }
    }
    if (duplicate) continue;
    remaining[b] -= item.length;
    bins[b].push_back(item.sequence_id);
    if (exact_pack(items, index + 1, bin_count, capacity, remaining, bins)) {
      return true;
    }
    bins[b].pop_back();
    remaining[b] += item.length;
  }
  return false;
}

}  // namespace detail

// Bin-packs short sequences into as few chunk_size-capped bins as possible:
// for BinCnt = 1, 2, ... attempt first-fit-decreasing restricted to BinCnt
// bins and take the first feasible packing. On instances of at most 12
// sequences an exhaustive fallback also runs per BinCnt, so the returned bin
// count is optimal there. Deterministic: items are sorted by (length
// descending, id ascending) and ties in bin choice resolve to the lowest bin.
inline std::vector<std::vector<std::int64_t>> pack_short(
    const std::vector<SequenceRecord>& shorts, std::int64_t chunk_size) {
  if (chunk_size < 1) throw ValidationError("chunk_size must be at least 1");
  std::vector<detail::PackItem> items;
  items.reserve(shorts.size());
  for (const SequenceRecord& seq : shorts) {
    if (seq.length > chunk_size) {
      throw ValidationError("pack_short requires lengths at most chunk_size");
    }
    items.push_back({seq.length, seq.id});
  }
  std::sort(items.begin(), items.end(),
            [](const detail::PackItem& a, const detail::PackItem& b) {
              if (a.length != b.length) return a.length > b.length;
              return a.sequence_id < b.sequence_id;
            });
  std::vector<std::vector<std::int64_t>> bins;
  if (items.empty()) return bins;
  const bool small_instance = items.size() <= 12;
  for (std::size_t bin_count = 1; bin_count <= items.size(); ++bin_count) {
    if (detail::ffd_into_bins(items, bin_count, chunk_size, bins)) return bins;
    if (small_instance) {
      std::vector<std::int64_t> remaining(bin_count, chunk_size);
      std::vector<std::vector<std::int64_t>> exact_bins(bin_count);
      if (detail::exact_pack(items, 0, bin_count, chunk_size, remaining,
                             exact_bins)) {
        bins = std::move(exact_bins);
        return bins;
      }
    }
  }
  throw ValidationError("bin packing failed");  // unreachable: n bins always fit
}

// Reorganizes a batch into a chunk plan: sequences longer than chunk_size are
// split into dependent groups; the rest are bin-packed into standalone
// chunks. Plan order: standalone chunks by ascending bin index, then
// dependent groups by ascending sequence id.
inline ChunkPlan construct_chunks(const Batch& batch, std::int64_t chunk_size) {
  if (chunk_size < 1) throw ValidationError("chunk_size must be at least 1");
  ChunkPlan plan;
  plan.chunk_size = chunk_size;

  std::vector<SequenceRecord> shorts;
  std::vector<const SequenceRecord*> longs;
  for (const SequenceRecord& seq : batch.sequences) {
    if (seq.length > chunk_size) {
      longs.push_back(&seq);
    } else {
      shorts.push_back(seq);
    }
  }
  std::sort(longs.begin(), longs.end(),
            [](const SequenceRecord* a, const SequenceRecord* b) {
              return a->id < b->id;
            });

  std::map<std::int64_t, std::int64_t> length_by_id;
  for (const SequenceRecord& seq : batch.sequences) {
    length_by_id[seq.id] = seq.length;
  }

  std::int64_t next_chunk_id = 0;
  for (const std::vector<std::int64_t>& bin : pack_short(shorts, chunk_size)) {
    Chunk chunk;
    chunk.chunk_id = next_chunk_id++;
    chunk.kind = ChunkKind::kStandalone;
    std::vector<std::int64_t> ids = bin;
    std::sort(ids.begin(), ids.end());
    for (std::int64_t id : ids) {
      const std::int64_t length = length_by_id.at(id);
      chunk.segments.push_back({id, 0, length});
      chunk.total_tokens += length;
    }
    plan.chunks.push_back(std::move(chunk));
  }

  std::int64_t next_group_id = 0;
  for (const SequenceRecord* seq : longs) {
    const std::int64_t group_id = next_group_id++;
    for (Chunk& chunk : split_long(*seq, chunk_size)) {
      chunk.chunk_id = next_chunk_id++;
      chunk.group_id = group_id;
      plan.groups[group_id].push_back(chunk.chunk_id);
      plan.chunks.push_back(std::move(chunk));
    }
  }
  return plan;
}

inline const char* to_string(ChunkKind kind) {
  return kind == ChunkKind::kStandalone ? "standalone" : "dependent";
}

inline nlohmann::json chunk_plan_to_json(const ChunkPlan& plan) {
  nlohmann::json doc;
  doc["chunk_size"] = plan.chunk_size;
  doc["chunks"] = nlohmann::json::array();
  for (const Chunk& chunk : plan.chunks) {
    nlohmann::json entry;
    entry["id"] = chunk.chunk_id;
    entry["kind"] = to_string(chunk.kind);
    entry["total_tokens"] = chunk.total_tokens;
    if (chunk.kind == ChunkKind::kDependent) {
      entry["group"] = chunk.group_id;
      entry["index_in_group"] = chunk.index_in_group;
    }
    entry["segments"] = nlohmann::json::array();
    for (const ChunkSegment& segment : chunk.segments) {
      entry["segments"].push_back({{"sequence", segment.sequence_id},
                                   {"start", segment.start_token},
                                   {"length", segment.length}});
    }
    doc["chunks"].push_back(std::move(entry));
  }
  doc["groups"] = nlohmann::json::object();
  for (const auto& [group_id, chunk_ids] : plan.groups) {
    doc["groups"][std::to_string(group_id)] = chunk_ids;
  }
  return doc;
}

inline ChunkPlan chunk_plan_from_json(const nlohmann::json& doc) {
  ChunkPlan plan;
  try {
    plan.chunk_size = doc.at("chunk_size").get<std::int64_t>();
    for (const nlohmann::json& entry : doc.at("chunks")) {
      Chunk chunk;
      chunk.chunk_id = entry.at("id").get<std::int64_t>();
      chunk.kind = entry.at("kind").get<std::string>() == "standalone"
                       ? ChunkKind::kStandalone
                       : ChunkKind::kDependent;
      chunk.total_tokens = entry.at("total_tokens").get<std::int64_t>();
      if (chunk.kind == ChunkKind::kDependent) {
        chunk.group_id = entry.at("group").get<std::int64_t>();
        chunk.index_in_group = entry.at("index_in_group").get<std::int64_t>();
      }
      for (const nlohmann::json& seg : entry.at("segments")) {
        chunk.segments.push_back({seg.at("sequence").get<std::int64_t>(),
                                  seg.at("start").get<std::int64_t>(),
                                  seg.at("length").get<std::int64_t>()});
      }
      plan.chunks.push_back(std::move(chunk));
    }
    if (doc.contains("groups")) {
      for (const auto& [key, value] : doc.at("groups").items()) {
        plan.groups[std::stoll(key)] = value.get<std::vector<std::int64_t>>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed chunk plan: ") + e.what());
  }
  return plan;
}

}  // namespace chunkflow
