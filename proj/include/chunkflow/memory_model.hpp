// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chunkflow/common.hpp"

namespace chunkflow {

struct MemoryMeasurement {
  std::int64_t chunk_size = 0;
  std::int64_t k = 1;
  std::int64_t context_len = 0;
  double peak_gib = 0.0;
};

// Peak memory ~ base + per_chunk_token * (k * chunk_size) +
// per_context_token * gqa_ratio * context_len. The context term models the
// un-offloaded KV state; gqa_ratio scales it by kv_heads / query_heads.
struct MemoryModelCoefficients {
  double base = 0.0;               // GiB: parameters, optimizer, framework
  double per_chunk_token = 0.0;    // GiB per retained activation token
  double per_context_token = 0.0;  // GiB per stored KV token (before gqa)
  double gqa_ratio = 1.0;

  void validate() const {
    if (base < 0 || per_chunk_token < 0 || per_context_token < 0 ||
        gqa_ratio < 0) {
      throw ValidationError("memory-model coefficients must be non-negative");
    }
  }
};

struct CalibrationResult {
  MemoryModelCoefficients coefficients;
  double max_residual_gib = 0.0;
};

inline double predict_peak(const MemoryModelCoefficients& coeffs,
                           std::int64_t chunk_size, std::int64_t k,
                           std::int64_t context_len) {
  return coeffs.base +
         coeffs.per_chunk_token * static_cast<double>(k * chunk_size) +
         coeffs.per_context_token * coeffs.gqa_ratio *
             static_cast<double>(context_len);
}

// Least-squares fit of the linear form above. Requires variation in both the
// activation-token budget (k * chunk_size) and the context length; a
// rank-deficient design raises a calibration error naming the missing axis.
inline CalibrationResult calibrate(const std::vector<MemoryMeasurement>& measurements,
                                   double gqa_ratio = 1.0) {
  if (measurements.size() < 3) {
    throw ValidationError("calibration needs at least 3 measurements");
  }
  if (gqa_ratio <= 0) throw ValidationError("gqa_ratio must be positive");

  const std::size_t n = measurements.size();
  std::vector<double> x1(n), x2(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x1[i] = static_cast<double>(measurements[i].k * measurements[i].chunk_size);
    x2[i] = gqa_ratio * static_cast<double>(measurements[i].context_len);
    y[i] = measurements[i].peak_gib;
  }

  auto variance = [n](const std::vector<double>& v) {
    double mean = 0.0;
    for (double value : v) mean += value;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double value : v) var += (value - mean) * (value - mean);
    return var;
  };
  if (variance(x1) == 0.0) {
    throw ValidationError(
        "calibration design is rank-deficient: no variation in k * chunk_size");
  }
  if (variance(x2) == 0.0) {
    throw ValidationError(
        "calibration design is rank-deficient: no variation in context length");
  }

  // Normal equations for [1, x1, x2], solved by Gaussian elimination with
  // partial pivoting.
  std::array<std::array<double, 4>, 3> m{};
  for (std::size_t i = 0; i < n; ++i) {
    const std::array<double, 3> row = {1.0, x1[i], x2[i]};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r][c] += row[r] * row[c];
      m[r][3] += row[r] * y[i];
    }
  }
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
    }
    std::swap(m[col], m[pivot]);
    if (std::fabs(m[col][col]) < 1e-12) {
      throw ValidationError(
          "calibration design is rank-deficient: collinear measurements");
    }
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double factor = m[r][col] / m[col][col];
      for (int c = col; c < 4; ++c) m[r][c] -= factor * m[col][c];
    }
  }

  CalibrationResult result;
  result.coefficients.base = m[0][3] / m[0][0];
  result.coefficients.per_chunk_token = m[1][3] / m[1][1];
  result.coefficients.per_context_token = m[2][3] / m[2][2];
  result.coefficients.gqa_ratio = gqa_ratio;
  for (std::size_t i = 0; i < n; ++i) {
    const double predicted =
        predict_peak(result.coefficients, measurements[i].chunk_size,
                     measurements[i].k, measurements[i].context_len);
    result.max_residual_gib =
        std::max(result.max_residual_gib, std::fabs(predicted - y[i]));
  }
  return result;
}

inline nlohmann::json coefficients_to_json(const MemoryModelCoefficients& coeffs) {
  return {{"base_gib", coeffs.base},
          {"per_chunk_token_gib", coeffs.per_chunk_token},
          {"per_context_token_gib", coeffs.per_context_token},
          {"gqa_ratio", coeffs.gqa_ratio}};
}

// Parses comma-separated measurement rows: chunk_size,k,context_len,peak_gib.
// A header row is permitted and skipped.
inline std::vector<MemoryMeasurement> parse_measurements(std::istream& in) {
  std::vector<MemoryMeasurement> measurements;
  std::string line;
  std::int64_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    if (line_number == 1 && line.find("chunk_size") != std::string::npos) continue;
    MemoryMeasurement measurement;
    long long cs = 0, k = 0, ctx = 0;
    double peak = 0.0;
    if (std::sscanf(line.c_str(), " %lld , %lld , %lld , %lf", &cs, &k, &ctx,
                    &peak) != 4) {
      throw ParseError("line " + std::to_string(line_number) +
                       ": expected chunk_size,k,context_len,peak_gib");
    }
    measurement.chunk_size = cs;
    measurement.k = k;
    measurement.context_len = ctx;
    measurement.peak_gib = peak;
    measurements.push_back(measurement);
  }
  return measurements;
}

}  // namespace chunkflow
