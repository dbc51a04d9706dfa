// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "chunkflow/common.hpp"
#include "chunkflow/dataset.hpp"

namespace chunkflow {

// Configuration of the toy causal-attention transformer. Deliberately
// minimal: bias-free, norm-free, tanh feed-forward, untied output head, no
// positional encoding. Double precision with hand-rolled loops so that the
// operation order (and therefore the floating-point result) is fully
// deterministic and independent of how a sequence is chunked.
struct ToyModelConfig {
  std::int64_t vocab_size = 32;
  std::int64_t d_model = 16;
  std::int64_t num_heads = 4;
  std::int64_t num_kv_heads = 2;  // grouped-query attention
  std::int64_t num_layers = 2;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 1) throw ValidationError("vocab_size must be at least 1");
    if (d_model < 1) throw ValidationError("d_model must be at least 1");
    if (num_heads < 1) throw ValidationError("num_heads must be at least 1");
    if (num_kv_heads < 1) throw ValidationError("num_kv_heads must be at least 1");
    if (num_layers < 1) throw ValidationError("num_layers must be at least 1");
    if (d_model % num_heads != 0) {
      throw ValidationError("d_model must be divisible by num_heads");
    }
    if (num_heads % num_kv_heads != 0) {
      throw ValidationError("num_heads must be divisible by num_kv_heads");
    }
  }

  std::int64_t head_dim() const { return d_model / num_heads; }
  std::int64_t kv_width() const { return num_kv_heads * head_dim(); }
  std::int64_t heads_per_kv() const { return num_heads / num_kv_heads; }
  std::int64_t ffn_width() const { return 2 * d_model; }
};

struct Tensor {
  std::string name;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> data;  // row-major

  Tensor() = default;
  Tensor(std::string n, std::int64_t r, std::int64_t c)
      : name(std::move(n)), rows(r), cols(c),
        data(static_cast<std::size_t>(r * c), 0.0) {}

  double& at(std::int64_t r, std::int64_t c) {
    return data[static_cast<std::size_t>(r * cols + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols + c)];
  }
  std::int64_t size() const { return rows * cols; }
};

// Tensor order: embedding, then per layer {wq, wk, wv, wo, w1, w2}, then the
// output head. Gradient sets mirror this order exactly.
struct ToyModelParams {
  ToyModelConfig config;
  std::vector<Tensor> tensors;

  static constexpr std::int64_t kPerLayer = 6;

  Tensor& embedding() { return tensors[0]; }
  const Tensor& embedding() const { return tensors[0]; }
  Tensor& wq(std::int64_t l) { return tensors[1 + kPerLayer * l + 0]; }
  const Tensor& wq(std::int64_t l) const { return tensors[1 + kPerLayer * l + 0]; }
  Tensor& wk(std::int64_t l) { return tensors[1 + kPerLayer * l + 1]; }
  const Tensor& wk(std::int64_t l) const { return tensors[1 + kPerLayer * l + 1]; }
  Tensor& wv(std::int64_t l) { return tensors[1 + kPerLayer * l + 2]; }
  const Tensor& wv(std::int64_t l) const { return tensors[1 + kPerLayer * l + 2]; }
  Tensor& wo(std::int64_t l) { return tensors[1 + kPerLayer * l + 3]; }
  const Tensor& wo(std::int64_t l) const { return tensors[1 + kPerLayer * l + 3]; }
  Tensor& w1(std::int64_t l) { return tensors[1 + kPerLayer * l + 4]; }
  const Tensor& w1(std::int64_t l) const { return tensors[1 + kPerLayer * l + 4]; }
  Tensor& w2(std::int64_t l) { return tensors[1 + kPerLayer * l + 5]; }
  const Tensor& w2(std::int64_t l) const { return tensors[1 + kPerLayer * l + 5]; }
  Tensor& head() { return tensors.back(); }
  const Tensor& head() const { return tensors.back(); }
};

// One gradient tensor per parameter tensor, plus the scalar loss of the run
// that produced the gradients.
struct GradientSet {
  double loss = 0.0;
  std::vector<Tensor> tensors;
};

inline GradientSet zero_gradients(const ToyModelParams& params) {
  GradientSet grads;
  grads.tensors.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) {
    grads.tensors.emplace_back(t.name, t.rows, t.cols);
  }
  return grads;
}

inline ToyModelParams init_model(const ToyModelConfig& cfg) {
  cfg.validate();
  ToyModelParams params;
  params.config = cfg;
  const std::int64_t d = cfg.d_model;
  const std::int64_t kvw = cfg.kv_width();
  params.tensors.emplace_back("embedding", cfg.vocab_size, d);
  for (std::int64_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    params.tensors.emplace_back(p + "wq", d, d);
    params.tensors.emplace_back(p + "wk", d, kvw);
    params.tensors.emplace_back(p + "wv", d, kvw);
    params.tensors.emplace_back(p + "wo", d, d);
    params.tensors.emplace_back(p + "w1", d, cfg.ffn_width());
    params.tensors.emplace_back(p + "w2", cfg.ffn_width(), d);
  }
  params.tensors.emplace_back("head", d, cfg.vocab_size);

  SplitMix64 rng(cfg.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (Tensor& t : params.tensors) {
    for (double& v : t.data) v = (rng.next_double() * 2.0 - 1.0) * scale;
  }
  return params;
}

namespace detail {

// Activations retained for one layer of one segment (needed by backward).
struct LayerTape {
  std::vector<double> x_in;   // len x d, layer input
  std::vector<double> q;      // len x d
  // Attention probabilities, indexed [t * num_heads + h]; row t covers
  // prefix_len + t + 1 key positions in ascending global-position order.
  std::vector<std::vector<double>> probs;
  std::vector<double> attn;   // len x d, concatenated head outputs (pre-Wo)
  std::vector<double> x_mid;  // len x d, after the attention residual
  std::vector<double> h;      // len x ffn_width, tanh activations
};

// Forward record of one contiguous segment of one sequence. saved_k/saved_v
// always hold the segment's own key/value rows (the part a later chunk's
// prefix is built from); the layer tapes are populated only on retaining
// forwards.
struct SegmentTape {
  std::int64_t len = 0;
  std::int64_t prefix_len = 0;
  std::vector<std::int32_t> tokens;   // segment input tokens
  std::vector<std::int64_t> targets;  // per position; -1 when no target
  std::vector<LayerTape> layers;      // empty unless the tape was kept
  std::vector<double> x_final;        // len x d; empty unless kept
  std::vector<std::vector<double>> saved_k;  // per layer, len x kv_width
  std::vector<std::vector<double>> saved_v;  // per layer, len x kv_width
  double loss_sum = 0.0;  // unnormalized cross-entropy over target positions
};

inline double dot(const double* a, const double* b, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// y (1 x cols) = x (1 x rows) * w
inline void row_times_matrix(const double* x, const Tensor& w, double* y) {
  for (std::int64_t c = 0; c < w.cols; ++c) {
    double s = 0.0;
    for (std::int64_t r = 0; r < w.rows; ++r) {
      s += x[r] * w.data[static_cast<std::size_t>(r * w.cols + c)];
    }
    y[c] = s;
  }
}

// dw += x^T * dy for a single row pair
inline void add_outer(const double* x, const double* dy, Tensor& dw) {
  for (std::int64_t r = 0; r < dw.rows; ++r) {
    const double xr = x[r];
    double* row = &dw.data[static_cast<std::size_t>(r * dw.cols)];
    for (std::int64_t c = 0; c < dw.cols; ++c) row[c] += xr * dy[c];
  }
}

// dx (1 x rows) += dy (1 x cols) * w^T
inline void add_row_matrix_t(const double* dy, const Tensor& w, double* dx) {
  for (std::int64_t r = 0; r < w.rows; ++r) {
    const double* row = &w.data[static_cast<std::size_t>(r * w.cols)];
    dx[r] += dot(dy, row, w.cols);
  }
}

// Runs one segment forward. prefix_k/prefix_v give, per layer, the key/value
// rows of the sequence's earlier positions (prefix_len x kv_width,
// ascending position order); both empty when prefix_len is 0. The math for
// every position depends only on that position's previous layers and on
// earlier positions' keys/values, so any split of a sequence into contiguous
// segments reproduces the unsplit computation bitwise.
inline SegmentTape segment_forward(const ToyModelParams& params,
                                   const std::int32_t* tokens,
                                   std::int64_t len,
                                   const std::int64_t* targets,
                                   const std::vector<std::vector<double>>& prefix_k,
                                   const std::vector<std::vector<double>>& prefix_v,
                                   std::int64_t prefix_len,
                                   bool keep_tape) {
  const ToyModelConfig& cfg = params.config;
  const std::int64_t d = cfg.d_model;
  const std::int64_t dh = cfg.head_dim();
  const std::int64_t kvw = cfg.kv_width();
  const std::int64_t heads = cfg.num_heads;
  const std::int64_t per_kv = cfg.heads_per_kv();
  const std::int64_t fw = cfg.ffn_width();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  SegmentTape tape;
  tape.len = len;
  tape.prefix_len = prefix_len;
  tape.tokens.assign(tokens, tokens + len);
  tape.targets.assign(targets, targets + len);
  tape.saved_k.resize(cfg.num_layers);
  tape.saved_v.resize(cfg.num_layers);
  if (keep_tape) tape.layers.resize(cfg.num_layers);

  std::vector<double> x(static_cast<std::size_t>(len * d));
  for (std::int64_t t = 0; t < len; ++t) {
    const std::int64_t tok = tokens[t];
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw ValidationError("token id " + std::to_string(tok) +
                            " out of vocabulary range");
    }
    for (std::int64_t r = 0; r < d; ++r) {
      x[t * d + r] = params.embedding().at(tok, r);
    }
  }

  std::vector<double> q(static_cast<std::size_t>(len * d));
  std::vector<double> attn(static_cast<std::size_t>(len * d));
  std::vector<double> x_mid(static_cast<std::size_t>(len * d));
  std::vector<double> h(static_cast<std::size_t>(len * fw));
  for (std::int64_t l = 0; l < cfg.num_layers; ++l) {
    LayerTape* lt = keep_tape ? &tape.layers[l] : nullptr;
    if (lt) {
      lt->x_in = x;
      lt->probs.resize(static_cast<std::size_t>(len * heads));
    }
    std::vector<double>& k = tape.saved_k[l];
    std::vector<double>& v = tape.saved_v[l];
    k.resize(static_cast<std::size_t>(len * kvw));
    v.resize(static_cast<std::size_t>(len * kvw));
    for (std::int64_t t = 0; t < len; ++t) {
      row_times_matrix(&x[t * d], params.wq(l), &q[t * d]);
      row_times_matrix(&x[t * d], params.wk(l), &k[t * kvw]);
      row_times_matrix(&x[t * d], params.wv(l), &v[t * kvw]);
    }
    const double* pk = prefix_len > 0 ? prefix_k[l].data() : nullptr;
    const double* pv = prefix_len > 0 ? prefix_v[l].data() : nullptr;
    std::vector<double> scores;
    for (std::int64_t t = 0; t < len; ++t) {
      double* attn_row = &attn[t * d];
      for (std::int64_t c = 0; c < d; ++c) attn_row[c] = 0.0;
      for (std::int64_t hq = 0; hq < heads; ++hq) {
        const std::int64_t g = hq / per_kv;
        const double* q_h = &q[t * d + hq * dh];
        const std::int64_t rows = prefix_len + t + 1;
        scores.assign(static_cast<std::size_t>(rows), 0.0);
        for (std::int64_t j = 0; j < prefix_len; ++j) {
          scores[j] = dot(q_h, pk + j * kvw + g * dh, dh) * inv_sqrt_dh;
        }
        for (std::int64_t j = 0; j <= t; ++j) {
          scores[prefix_len + j] =
              dot(q_h, &k[j * kvw + g * dh], dh) * inv_sqrt_dh;
        }
        double m = scores[0];
        for (std::int64_t j = 1; j < rows; ++j) m = std::max(m, scores[j]);
        double denom = 0.0;
        for (std::int64_t j = 0; j < rows; ++j) {
          scores[j] = std::exp(scores[j] - m);
          denom += scores[j];
        }
        for (std::int64_t j = 0; j < rows; ++j) scores[j] /= denom;
        double* out_h = attn_row + hq * dh;
        for (std::int64_t j = 0; j < prefix_len; ++j) {
          const double p = scores[j];
          const double* v_j = pv + j * kvw + g * dh;
          for (std::int64_t u = 0; u < dh; ++u) out_h[u] += p * v_j[u];
        }
        for (std::int64_t j = 0; j <= t; ++j) {
          const double p = scores[prefix_len + j];
          const double* v_j = &v[j * kvw + g * dh];
          for (std::int64_t u = 0; u < dh; ++u) out_h[u] += p * v_j[u];
        }
        if (lt) lt->probs[t * heads + hq] = scores;
      }
    }
    for (std::int64_t t = 0; t < len; ++t) {
      double* mid = &x_mid[t * d];
      row_times_matrix(&attn[t * d], params.wo(l), mid);
      for (std::int64_t c = 0; c < d; ++c) mid[c] += x[t * d + c];
      row_times_matrix(mid, params.w1(l), &h[t * fw]);
      for (std::int64_t j = 0; j < fw; ++j) h[t * fw + j] = std::tanh(h[t * fw + j]);
      row_times_matrix(&h[t * fw], params.w2(l), &x[t * d]);
      for (std::int64_t c = 0; c < d; ++c) x[t * d + c] += mid[c];
    }
    if (lt) {
      lt->q = q;
      lt->attn = attn;
      lt->x_mid = x_mid;
      lt->h = h;
    }
  }

  std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size));
  for (std::int64_t t = 0; t < len; ++t) {
    const std::int64_t target = targets[t];
    if (target < 0) continue;
    row_times_matrix(&x[t * d], params.head(), logits.data());
    double m = logits[0];
    for (std::int64_t c = 1; c < cfg.vocab_size; ++c) m = std::max(m, logits[c]);
    double denom = 0.0;
    for (std::int64_t c = 0; c < cfg.vocab_size; ++c) denom += std::exp(logits[c] - m);
    tape.loss_sum += m + std::log(denom) -
                     logits[static_cast<std::size_t>(target)];
  }
  if (keep_tape) tape.x_final = std::move(x);
  return tape;
}

// Backpropagates one segment. Gradients with respect to the segment's own
// key/value rows arriving from later chunks are supplied via incoming_dk/dv
// (per layer, len x kv_width, may be null); gradients this segment produces
// for its prefix's key/value rows are accumulated into d_prefix_k/d_prefix_v
// (per layer, prefix_len x kv_width, may be null when prefix_len is 0).
inline void segment_backward(const ToyModelParams& params,
                             const SegmentTape& tape,
                             const std::vector<std::vector<double>>& prefix_k,
                             const std::vector<std::vector<double>>& prefix_v,
                             std::vector<std::vector<double>>* d_prefix_k,
                             std::vector<std::vector<double>>* d_prefix_v,
                             const std::vector<std::vector<double>>* incoming_dk,
                             const std::vector<std::vector<double>>* incoming_dv,
                             double normalizer,
                             GradientSet& grads) {
  const ToyModelConfig& cfg = params.config;
  const std::int64_t d = cfg.d_model;
  const std::int64_t dh = cfg.head_dim();
  const std::int64_t kvw = cfg.kv_width();
  const std::int64_t heads = cfg.num_heads;
  const std::int64_t per_kv = cfg.heads_per_kv();
  const std::int64_t fw = cfg.ffn_width();
  const std::int64_t len = tape.len;
  const std::int64_t prefix_len = tape.prefix_len;
  const std::int64_t vocab = cfg.vocab_size;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  if (tape.layers.empty()) {
    throw ValidationError("segment backward requires a retained tape");
  }

  Tensor& d_embedding = grads.tensors[0];
  Tensor& d_head = grads.tensors.back();

  // Output head and cross-entropy.
  std::vector<double> dx(static_cast<std::size_t>(len * d), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(vocab));
  std::vector<double> dlogits(static_cast<std::size_t>(vocab));
  for (std::int64_t t = 0; t < len; ++t) {
    const std::int64_t target = tape.targets[t];
    if (target < 0) continue;
    const double* x_row = &tape.x_final[t * d];
    row_times_matrix(x_row, params.head(), logits.data());
    double m = logits[0];
    for (std::int64_t c = 1; c < vocab; ++c) m = std::max(m, logits[c]);
    double denom = 0.0;
    for (std::int64_t c = 0; c < vocab; ++c) denom += std::exp(logits[c] - m);
    for (std::int64_t c = 0; c < vocab; ++c) {
      const double p = std::exp(logits[c] - m) / denom;
      dlogits[c] = (p - (c == target ? 1.0 : 0.0)) / normalizer;
    }
    add_outer(x_row, dlogits.data(), d_head);
    add_row_matrix_t(dlogits.data(), params.head(), &dx[t * d]);
  }

  std::vector<double> dxmid(static_cast<std::size_t>(len * d));
  std::vector<double> da(static_cast<std::size_t>(fw));
  std::vector<double> dh_row(static_cast<std::size_t>(fw));
  std::vector<double> dattn(static_cast<std::size_t>(len * d));
  std::vector<double> dq(static_cast<std::size_t>(len * d));
  std::vector<double> dk_own(static_cast<std::size_t>(len * kvw));
  std::vector<double> dv_own(static_cast<std::size_t>(len * kvw));
  std::vector<double> dp;
  std::vector<double> ds;
  for (std::int64_t l = cfg.num_layers - 1; l >= 0; --l) {
    const LayerTape& lt = tape.layers[l];
    const std::vector<double>& k = tape.saved_k[l];
    const std::vector<double>& v = tape.saved_v[l];
    const double* pk = prefix_len > 0 ? prefix_k[l].data() : nullptr;
    const double* pv = prefix_len > 0 ? prefix_v[l].data() : nullptr;
    double* dpk = (prefix_len > 0 && d_prefix_k) ? (*d_prefix_k)[l].data() : nullptr;
    double* dpv = (prefix_len > 0 && d_prefix_v) ? (*d_prefix_v)[l].data() : nullptr;

    // Feed-forward: x_out = x_mid + tanh(x_mid w1) w2; dx currently holds dx_out.
    for (std::int64_t t = 0; t < len; ++t) {
      const double* dx_row = &dx[t * d];
      const double* h_row = &lt.h[t * fw];
      const double* mid_row = &lt.x_mid[t * d];
      double* dmid_row = &dxmid[t * d];
      for (std::int64_t j = 0; j < fw; ++j) {
        const double* w2_row = &params.w2(l).data[static_cast<std::size_t>(j * d)];
        dh_row[j] = dot(dx_row, w2_row, d);
      }
      add_outer(h_row, dx_row, grads.tensors[1 + ToyModelParams::kPerLayer * l + 5]);
      for (std::int64_t j = 0; j < fw; ++j) {
        da[j] = dh_row[j] * (1.0 - h_row[j] * h_row[j]);
      }
      for (std::int64_t c = 0; c < d; ++c) dmid_row[c] = dx_row[c];
      add_row_matrix_t(da.data(), params.w1(l), dmid_row);
      add_outer(mid_row, da.data(), grads.tensors[1 + ToyModelParams::kPerLayer * l + 4]);
    }

    // Attention output: x_mid = x_in + attn wo.
    for (std::int64_t t = 0; t < len; ++t) {
      const double* dmid_row = &dxmid[t * d];
      double* dattn_row = &dattn[t * d];
      for (std::int64_t r = 0; r < d; ++r) dattn_row[r] = 0.0;
      add_row_matrix_t(dmid_row, params.wo(l), dattn_row);
      add_outer(&lt.attn[t * d], dmid_row, grads.tensors[1 + ToyModelParams::kPerLayer * l + 3]);
    }

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk_own.begin(), dk_own.end(), 0.0);
    std::fill(dv_own.begin(), dv_own.end(), 0.0);
    for (std::int64_t t = 0; t < len; ++t) {
      const double* dattn_row = &dattn[t * d];
      for (std::int64_t hq = 0; hq < heads; ++hq) {
        const std::int64_t g = hq / per_kv;
        const std::vector<double>& p = lt.probs[t * heads + hq];
        const std::int64_t rows = prefix_len + t + 1;
        const double* dout_h = dattn_row + hq * dh;
        const double* q_h = &lt.q[t * d + hq * dh];
        dp.assign(static_cast<std::size_t>(rows), 0.0);
        for (std::int64_t j = 0; j < prefix_len; ++j) {
          const double* v_j = pv + j * kvw + g * dh;
          dp[j] = dot(dout_h, v_j, dh);
          if (dpv) {
            double* dv_j = dpv + j * kvw + g * dh;
            for (std::int64_t u = 0; u < dh; ++u) dv_j[u] += p[j] * dout_h[u];
          }
        }
        for (std::int64_t j = 0; j <= t; ++j) {
          const double* v_j = &v[j * kvw + g * dh];
          dp[prefix_len + j] = dot(dout_h, v_j, dh);
          double* dv_j = &dv_own[j * kvw + g * dh];
          const double pj = p[prefix_len + j];
          for (std::int64_t u = 0; u < dh; ++u) dv_j[u] += pj * dout_h[u];
        }
        double p_dot_dp = 0.0;
        for (std::int64_t j = 0; j < rows; ++j) p_dot_dp += p[j] * dp[j];
        ds.assign(static_cast<std::size_t>(rows), 0.0);
        for (std::int64_t j = 0; j < rows; ++j) {
          ds[j] = p[j] * (dp[j] - p_dot_dp) * inv_sqrt_dh;
        }
        double* dq_h = &dq[t * d + hq * dh];
        for (std::int64_t j = 0; j < prefix_len; ++j) {
          const double* k_j = pk + j * kvw + g * dh;
          for (std::int64_t u = 0; u < dh; ++u) dq_h[u] += ds[j] * k_j[u];
          if (dpk) {
            double* dk_j = dpk + j * kvw + g * dh;
            for (std::int64_t u = 0; u < dh; ++u) dk_j[u] += ds[j] * q_h[u];
          }
        }
        for (std::int64_t j = 0; j <= t; ++j) {
          const double* k_j = &k[j * kvw + g * dh];
          const double s = ds[prefix_len + j];
          for (std::int64_t u = 0; u < dh; ++u) dq_h[u] += s * k_j[u];
          double* dk_j = &dk_own[j * kvw + g * dh];
          for (std::int64_t u = 0; u < dh; ++u) dk_j[u] += s * q_h[u];
        }
      }
    }

    if (incoming_dk) {
      const std::vector<double>& add = (*incoming_dk)[l];
      for (std::size_t i = 0; i < dk_own.size(); ++i) dk_own[i] += add[i];
    }
    if (incoming_dv) {
      const std::vector<double>& add = (*incoming_dv)[l];
      for (std::size_t i = 0; i < dv_own.size(); ++i) dv_own[i] += add[i];
    }

    // Projections: q = x_in wq, k = x_in wk, v = x_in wv; residual into x_in.
    Tensor& d_wq = grads.tensors[1 + ToyModelParams::kPerLayer * l + 0];
    Tensor& d_wk = grads.tensors[1 + ToyModelParams::kPerLayer * l + 1];
    Tensor& d_wv = grads.tensors[1 + ToyModelParams::kPerLayer * l + 2];
    for (std::int64_t t = 0; t < len; ++t) {
      const double* x_row = &lt.x_in[t * d];
      double* dx_row = &dx[t * d];
      for (std::int64_t c = 0; c < d; ++c) dx_row[c] = dxmid[t * d + c];
      add_outer(x_row, &dq[t * d], d_wq);
      add_row_matrix_t(&dq[t * d], params.wq(l), dx_row);
      add_outer(x_row, &dk_own[t * kvw], d_wk);
      add_row_matrix_t(&dk_own[t * kvw], params.wk(l), dx_row);
      add_outer(x_row, &dv_own[t * kvw], d_wv);
      add_row_matrix_t(&dv_own[t * kvw], params.wv(l), dx_row);
    }
  }

  for (std::int64_t t = 0; t < len; ++t) {
    const std::int64_t tok = tape.tokens[t];
    for (std::int64_t r = 0; r < d; ++r) {
      d_embedding.at(tok, r) += dx[t * d + r];
    }
  }
}

inline void check_sequence_for_model(const SequenceRecord& seq) {
  if (seq.length < 2) {
    throw ValidationError("sequence " + std::to_string(seq.id) +
                          " must have length >= 2");
  }
  if (static_cast<std::int64_t>(seq.tokens.size()) != seq.length) {
    throw ValidationError("sequence " + std::to_string(seq.id) +
                          " has no token payload");
  }
}

inline double batch_normalizer(const SequenceSet& batch) {
  std::int64_t targets = 0;
  for (const SequenceRecord& seq : batch) {
    check_sequence_for_model(seq);
    targets += seq.length - 1;
  }
  if (targets <= 0) throw ValidationError("batch has no prediction targets");
  return static_cast<double>(targets);
}

// Next-token targets for a whole sequence treated as one segment.
inline std::vector<std::int64_t> full_sequence_targets(const SequenceRecord& seq) {
  std::vector<std::int64_t> targets(static_cast<std::size_t>(seq.length), -1);
  for (std::int64_t t = 0; t + 1 < seq.length; ++t) {
    targets[t] = seq.tokens[static_cast<std::size_t>(t + 1)];
  }
  return targets;
}

}  // namespace detail

// Mean next-token cross-entropy over the batch; each sequence attends only to
// itself. normalizer_override (> 0) replaces the global target count.
inline double forward_full(const ToyModelParams& params, const SequenceSet& batch,
                           double normalizer_override = 0.0) {
  const double normalizer = normalizer_override > 0.0
                                ? normalizer_override
                                : detail::batch_normalizer(batch);
  static const std::vector<std::vector<double>> kNoPrefix;
  double loss_sum = 0.0;
  for (const SequenceRecord& seq : batch) {
    detail::check_sequence_for_model(seq);
    const std::vector<std::int64_t> targets = detail::full_sequence_targets(seq);
    loss_sum += detail::segment_forward(params, seq.tokens.data(), seq.length,
                                        targets.data(), kNoPrefix, kNoPrefix, 0,
                                        /*keep_tape=*/false)
                    .loss_sum;
  }
  return loss_sum / normalizer;
}

// Exact analytic gradients of forward_full's loss.
inline GradientSet backward_full(const ToyModelParams& params,
                                 const SequenceSet& batch,
                                 double normalizer_override = 0.0) {
  const double normalizer = normalizer_override > 0.0
                                ? normalizer_override
                                : detail::batch_normalizer(batch);
  static const std::vector<std::vector<double>> kNoPrefix;
  GradientSet grads = zero_gradients(params);
  double loss_sum = 0.0;
  for (const SequenceRecord& seq : batch) {
    detail::check_sequence_for_model(seq);
    const std::vector<std::int64_t> targets = detail::full_sequence_targets(seq);
    detail::SegmentTape tape = detail::segment_forward(
        params, seq.tokens.data(), seq.length, targets.data(), kNoPrefix,
        kNoPrefix, 0, /*keep_tape=*/true);
    loss_sum += tape.loss_sum;
    detail::segment_backward(params, tape, kNoPrefix, kNoPrefix, nullptr,
                             nullptr, nullptr, nullptr, normalizer, grads);
  }
  grads.loss = loss_sum / normalizer;
  return grads;
}

// Central finite differences of forward_full on a seeded sample of parameter
// entries (all entries when the model has at most max_samples). Entries
// outside the sample are zero; sampled_mask (when non-null) receives a
// parallel 0/1 mask identifying the sampled entries.
inline GradientSet finite_diff_grads(
    const ToyModelParams& params, const SequenceSet& batch, double epsilon,
    std::int64_t max_samples = 200, std::uint64_t sample_seed = 2024,
    std::vector<std::vector<std::uint8_t>>* sampled_mask = nullptr) {
  if (epsilon <= 0.0) throw ValidationError("epsilon must be positive");
  if (max_samples < 1) throw ValidationError("sample count must be positive");
  std::int64_t total = 0;
  for (const Tensor& t : params.tensors) total += t.size();

  std::set<std::int64_t> sampled;
  if (total <= max_samples) {
    for (std::int64_t i = 0; i < total; ++i) sampled.insert(i);
  } else {
    SplitMix64 rng(sample_seed);
    while (static_cast<std::int64_t>(sampled.size()) < max_samples) {
      sampled.insert(static_cast<std::int64_t>(
          rng.next_below(static_cast<std::uint64_t>(total))));
    }
  }

  GradientSet grads = zero_gradients(params);
  grads.loss = forward_full(params, batch);
  if (sampled_mask) {
    sampled_mask->clear();
    for (const Tensor& t : params.tensors) {
      sampled_mask->emplace_back(static_cast<std::size_t>(t.size()), 0);
    }
  }
  ToyModelParams scratch = params;
  for (std::int64_t global : sampled) {
    std::size_t ti = 0;
    std::int64_t offset = global;
    while (offset >= scratch.tensors[ti].size()) {
      offset -= scratch.tensors[ti].size();
      ++ti;
    }
    double& entry = scratch.tensors[ti].data[static_cast<std::size_t>(offset)];
    const double original = entry;
    entry = original + epsilon;
    const double plus = forward_full(scratch, batch);
    entry = original - epsilon;
    const double minus = forward_full(scratch, batch);
    entry = original;
    grads.tensors[ti].data[static_cast<std::size_t>(offset)] =
        (plus - minus) / (2.0 * epsilon);
    if (sampled_mask) (*sampled_mask)[ti][static_cast<std::size_t>(offset)] = 1;
  }
  return grads;
}

// Plain-text gradient comparison: per-tensor max-norm relative error
// (restricted to masked entries when a mask is given).
struct GradComparisonRow {
  std::string name;
  double max_abs_diff = 0.0;
  double rel_err = 0.0;
};

struct GradComparison {
  std::vector<GradComparisonRow> rows;
  double loss_a = 0.0;
  double loss_b = 0.0;
  double loss_rel_err = 0.0;
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;

  std::string to_text() const {
    std::string out;
    for (const GradComparisonRow& row : rows) {
      out += row.name + " max_abs_diff=" + format_scientific(row.max_abs_diff) +
             " rel_err=" + format_scientific(row.rel_err) + "\n";
    }
    out += "loss_rel_err=" + format_scientific(loss_rel_err) + "\n";
    out += "max_rel_err=" + format_scientific(max_rel_err) + "\n";
    out += "mean_rel_err=" + format_scientific(mean_rel_err) + "\n";
    return out;
  }
};

inline GradComparison compare_gradients(
    const GradientSet& a, const GradientSet& b,
    const std::vector<std::vector<std::uint8_t>>* mask = nullptr,
    double denom_floor = 1e-12) {
  if (a.tensors.size() != b.tensors.size()) {
    throw ValidationError("gradient sets have different tensor counts");
  }
  GradComparison cmp;
  cmp.loss_a = a.loss;
  cmp.loss_b = b.loss;
  cmp.loss_rel_err =
      std::abs(a.loss - b.loss) /
      std::max({std::abs(a.loss), std::abs(b.loss), denom_floor});
  double rel_sum = 0.0;
  for (std::size_t ti = 0; ti < a.tensors.size(); ++ti) {
    const Tensor& ta = a.tensors[ti];
    const Tensor& tb = b.tensors[ti];
    if (ta.size() != tb.size()) {
      throw ValidationError("gradient tensor shape mismatch for " + ta.name);
    }
    double max_diff = 0.0;
    double max_mag = 0.0;
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
      if (mask && !(*mask)[ti][i]) continue;
      max_diff = std::max(max_diff, std::abs(ta.data[i] - tb.data[i]));
      max_mag = std::max({max_mag, std::abs(ta.data[i]), std::abs(tb.data[i])});
    }
    GradComparisonRow row;
    row.name = ta.name;
    row.max_abs_diff = max_diff;
    row.rel_err = max_diff / std::max(max_mag, denom_floor);
    cmp.max_rel_err = std::max(cmp.max_rel_err, row.rel_err);
    rel_sum += row.rel_err;
    cmp.rows.push_back(std::move(row));
  }
  cmp.mean_rel_err = cmp.rows.empty() ? 0.0 : rel_sum / static_cast<double>(cmp.rows.size());
  return cmp;
}

}  // namespace chunkflow
