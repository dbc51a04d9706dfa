// SPDX-License-Identifier: Apache-2.0
//
// chunkflow CLI: wires dataset synthesis, chunk packing, K-bounded
// scheduling, pipeline simulation, memory calibration, tuning, and numeric
// verification into one reproducible command-line surface.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chunkflow/chunker.hpp"
#include "chunkflow/common.hpp"
#include "chunkflow/dataset.hpp"
#include "chunkflow/memory_model.hpp"
#include "chunkflow/pipeline.hpp"
#include "chunkflow/plan_runner.hpp"
#include "chunkflow/scheduler.hpp"
#include "chunkflow/toy_model.hpp"
#include "chunkflow/tuner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerification = 2;
constexpr int kExitIo = 3;

std::filesystem::path ensure_out_dir(const std::string& out_dir) {
  std::filesystem::path dir(out_dir.empty() ? "." : out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw chunkflow::IoError("cannot create output directory " + dir.string());
  }
  return dir;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw chunkflow::IoError("cannot write " + path.string());
  out << content;
  if (!out) throw chunkflow::IoError("failed while writing " + path.string());
}

chunkflow::SequenceSet load_dataset_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw chunkflow::IoError("cannot open dataset " + path);
  return chunkflow::load_lengths(in);
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw chunkflow::IoError("cannot open " + path);
  try {
    nlohmann::json doc;
    in >> doc;
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw chunkflow::ParseError("invalid JSON in " + path + ": " + e.what());
  }
}

struct CostFlags {
  double gamma = 0.0;
  double alpha = 1.0;
  double beta = 0.0;
  double backward_multiplier = 2.0;
  double hop_latency = 0.0;

  chunkflow::CostModel model() const {
    chunkflow::CostModel cost;
    cost.gamma = gamma;
    cost.alpha = alpha;
    cost.beta = beta;
    cost.backward_multiplier = backward_multiplier;
    cost.hop_latency = hop_latency;
    cost.validate();
    return cost;
  }
};

void add_cost_flags(CLI::App* cmd, CostFlags& flags) {
  cmd->add_option("--gamma", flags.gamma, "fixed per-chunk launch overhead");
  cmd->add_option("--alpha", flags.alpha, "linear per-token forward cost");
  cmd->add_option("--beta", flags.beta, "quadratic attention cost coefficient");
  cmd->add_option("--backward-multiplier", flags.backward_multiplier,
                  "backward cost as a multiple of forward");
  cmd->add_option("--hop-latency", flags.hop_latency,
                  "stage-to-stage communication latency");
}

chunkflow::DistributionSpec preset_spec(const std::string& preset) {
  if (preset == "eval-table5") return chunkflow::eval_table5_spec();
  if (preset == "lmsys-table2") return chunkflow::lmsys_table2_spec();
  throw chunkflow::ValidationError("unknown preset " + preset);
}

chunkflow::Batch take_batch(const chunkflow::SequenceSet& set,
                            std::int64_t batch_size, std::int64_t step,
                            std::uint64_t seed) {
  if (batch_size == 0) {
    chunkflow::Batch batch;
    batch.step = 0;
    batch.sequences = set;
    batch.global_batch_size = static_cast<std::int64_t>(set.size());
    return batch;
  }
  auto batch = chunkflow::sample_batch(set, batch_size, step, seed);
  if (!batch) {
    throw chunkflow::ValidationError("step " + std::to_string(step) +
                                     " is beyond the dataset epoch");
  }
  return *batch;
}

std::string pack_summary_text(const chunkflow::ChunkPlan& plan) {
  std::int64_t standalone = 0;
  std::int64_t tokens = 0;
  for (const chunkflow::Chunk& chunk : plan.chunks) {
    if (chunk.kind == chunkflow::ChunkKind::kStandalone) ++standalone;
    tokens += chunk.total_tokens;
  }
  const std::int64_t group_count = static_cast<std::int64_t>(plan.groups.size());
  const std::int64_t units = standalone + group_count;

  std::string line = std::to_string(plan.chunks.size()) + " chunks (" +
                     std::to_string(units) + " standalone-equivalent, ";
  if (group_count == 1) {
    line += "1 group of " +
            std::to_string(plan.groups.begin()->second.size()) + ")";
  } else {
    line += std::to_string(group_count) + " groups";
    if (group_count > 0) {
      line += " of ";
      bool first = true;
      for (const auto& [gid, members] : plan.groups) {
        if (!first) line += ",";
        line += std::to_string(members.size());
        first = false;
      }
    }
    line += ")";
  }

  const double denom = static_cast<double>(plan.chunks.size()) *
                       static_cast<double>(plan.chunk_size);
  std::string out = line + "\n";
  out += "tokens: " + std::to_string(tokens) + "\n";
  out += "fill_ratio: " +
         chunkflow::format_fixed(100.0 * static_cast<double>(tokens) / denom, 2) +
         "%\n";
  return out;
}

std::string simulate_report_text(const chunkflow::PipelineTrace& trace) {
  std::string out = "makespan: " + chunkflow::format_fixed(trace.makespan, 2) + "\n";
  for (std::size_t s = 0; s < trace.stages.size(); ++s) {
    out += "stage " + std::to_string(s) + " busy: " +
           chunkflow::format_fixed(trace.busy[s], 2) + "\n";
  }
  out += "bubble_ratio " +
         chunkflow::format_fixed(chunkflow::bubble_ratio(trace) * 100.0, 2) + "%\n";
  return out;
}

// --- subcommand option blocks -------------------------------------------

struct GenDatasetOpts {
  std::string preset = "eval-table5";
  std::int64_t count = 10000;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

struct PackOpts {
  std::string dataset;
  std::int64_t chunk_size = 0;
  std::int64_t batch_size = 0;  // 0 = the whole dataset as one batch
  std::int64_t step = 0;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

struct ScheduleOpts {
  std::string plan;
  std::int64_t k = 1;
  std::string out_dir = ".";
};

struct SimulateOpts {
  std::string plan;
  std::string dataset;
  std::int64_t batch_size = 0;
  std::int64_t step = 0;
  std::int64_t chunk_size = 0;
  std::int64_t stages = 1;
  std::int64_t k = 1;
  bool baseline = false;
  std::string trace_format = "chrome-trace";
  std::string dispatch = "backward-first";
  std::uint64_t seed = 1;
  std::string out_dir = ".";
  CostFlags cost;
};

struct TuneOpts {
  std::string dataset;
  std::vector<std::int64_t> chunk_sizes;
  std::vector<std::int64_t> ks{1};
  std::int64_t stages = 1;
  double budget_gib = 1e18;
  std::int64_t batch_size = 8;
  std::int64_t batches = 2;
  std::uint64_t seed = 1;
  std::string coefficients;
  double mem_base = 0.0;
  double mem_per_chunk_token = 0.0;
  double mem_per_context_token = 0.0;
  double gqa_ratio = 1.0;
  std::string out_dir = ".";
  CostFlags cost;
};

struct VerifyOpts {
  std::int64_t vocab = 32;
  std::int64_t d_model = 16;
  std::int64_t heads = 4;
  std::int64_t kv_heads = 2;
  std::int64_t layers = 2;
  std::uint64_t model_seed = 7;
  std::vector<std::int64_t> lengths{8, 8, 16, 32};
  std::uint64_t data_seed = 11;
  std::int64_t chunk_size = 16;
  std::int64_t k = 1;
  double loss_tol = 1e-12;
  double grad_tol = 1e-9;
  bool corrupt_kv_grads = false;
  std::string out_dir = ".";
};

struct CalibrateOpts {
  std::string measurements;
  double gqa_ratio = 1.0;
  std::vector<std::int64_t> predict;  // optional: chunk_size,k,context_len
  std::string out_dir = ".";
};

// --- subcommand implementations ------------------------------------------

int run_gen_dataset(const GenDatasetOpts& opts) {
  if (opts.count < 1) {
    throw chunkflow::ValidationError("--count must be at least 1");
  }
  const chunkflow::DistributionSpec spec = preset_spec(opts.preset);
  const chunkflow::SequenceSet set =
      chunkflow::synthesize(spec, opts.count, opts.seed);

  const auto dir = ensure_out_dir(opts.out_dir);
  {
    std::ofstream out(dir / "dataset.jsonl", std::ios::binary);
    if (!out) throw chunkflow::IoError("cannot write " + (dir / "dataset.jsonl").string());
    chunkflow::write_records(out, set);
    if (!out) throw chunkflow::IoError("failed while writing dataset.jsonl");
  }
  std::vector<std::int64_t> bounds;
  for (const auto& bucket : spec.buckets) bounds.push_back(bucket.upper_bound);
  const chunkflow::DistributionReport report =
      chunkflow::distribution_report(set, bounds);
  write_file(dir / "distribution_report.txt", report.to_text());
  write_file(dir / "distribution_report.csv", report.to_csv());
  std::cout << report.to_text();
  return kExitOk;
}

int run_pack(const PackOpts& opts) {
  if (opts.chunk_size < 1) {
    throw chunkflow::ValidationError("--chunk-size must be at least 1");
  }
  const chunkflow::SequenceSet set = load_dataset_file(opts.dataset);
  const chunkflow::Batch batch =
      take_batch(set, opts.batch_size, opts.step, opts.seed);
  const chunkflow::ChunkPlan plan =
      chunkflow::construct_chunks(batch, opts.chunk_size);

  const auto dir = ensure_out_dir(opts.out_dir);
  write_file(dir / "chunk_plan.json", chunkflow::chunk_plan_to_json(plan).dump(2) + "\n");
  const std::string summary = pack_summary_text(plan);
  write_file(dir / "pack_summary.txt", summary);
  std::cout << summary;
  return kExitOk;
}

int run_schedule(const ScheduleOpts& opts) {
  const chunkflow::ChunkPlan plan =
      chunkflow::chunk_plan_from_json(load_json_file(opts.plan));
  const chunkflow::ExecutionPlan exec = chunkflow::schedule_step(plan, opts.k);
  const chunkflow::PlanDiagnostics diag = chunkflow::validate_plan(exec);

  const auto dir = ensure_out_dir(opts.out_dir);
  write_file(dir / "execution_plan.json",
             chunkflow::execution_plan_to_json(exec).dump(2) + "\n");
  std::string listing = chunkflow::execution_plan_listing(exec);
  listing += "peak_retained_tokens: " + std::to_string(diag.peak_retained_tokens) + "\n";
  listing += "recompute_tokens: " + std::to_string(diag.recompute_token_count) + "\n";
  write_file(dir / "execution_plan.txt", listing);
  std::cout << listing;
  return kExitOk;
}

int run_simulate(const SimulateOpts& opts) {
  if (opts.stages < 1) {
    throw chunkflow::ValidationError("--stages must be at least 1");
  }
  if (opts.k < 1) {
    throw chunkflow::ValidationError("--k must be at least 1");
  }
  const chunkflow::CostModel cost = opts.cost.model();
  const chunkflow::TraceFormat format =
      chunkflow::parse_trace_format(opts.trace_format);

  chunkflow::PipelineTrace trace;
  if (opts.baseline) {
    if (opts.dataset.empty()) {
      throw chunkflow::ValidationError("--baseline requires --dataset");
    }
    const chunkflow::SequenceSet set = load_dataset_file(opts.dataset);
    const chunkflow::Batch batch =
        take_batch(set, opts.batch_size, opts.step, opts.seed);
    std::vector<std::int64_t> lengths;
    for (const auto& seq : batch.sequences) lengths.push_back(seq.length);
    trace = chunkflow::simulate_1f1b(lengths, opts.stages, cost);
  } else {
    chunkflow::ChunkPlan plan;
    if (!opts.plan.empty()) {
      plan = chunkflow::chunk_plan_from_json(load_json_file(opts.plan));
    } else if (!opts.dataset.empty()) {
      if (opts.chunk_size < 1) {
        throw chunkflow::ValidationError(
            "--chunk-size is required when simulating from a dataset");
      }
      const chunkflow::SequenceSet set = load_dataset_file(opts.dataset);
      const chunkflow::Batch batch =
          take_batch(set, opts.batch_size, opts.step, opts.seed);
      plan = chunkflow::construct_chunks(batch, opts.chunk_size);
    } else {
      throw chunkflow::ValidationError("simulate needs --plan or --dataset");
    }
    chunkflow::PipelineConfig cfg;
    cfg.num_stages = opts.stages;
    cfg.k = opts.k;
    cfg.chunk_size = plan.chunk_size;
    chunkflow::DispatchPolicy policy;
    if (opts.dispatch == "backward-first") {
      policy = chunkflow::DispatchPolicy::kBackwardFirst;
    } else if (opts.dispatch == "forward-first") {
      policy = chunkflow::DispatchPolicy::kForwardFirst;
    } else {
      throw chunkflow::ValidationError("unknown dispatch policy " + opts.dispatch);
    }
    trace = chunkflow::simulate_state_aware_1f1b(plan, cfg, cost, policy);
  }

  const auto dir = ensure_out_dir(opts.out_dir);
  const char* trace_name =
      format == chunkflow::TraceFormat::kChromeTrace ? "trace.json" : "trace.txt";
  write_file(dir / trace_name, chunkflow::export_trace(trace, format));
  const std::string report = simulate_report_text(trace);
  write_file(dir / "simulate_report.txt", report);
  std::cout << report;
  return kExitOk;
}

int run_tune(const TuneOpts& opts) {
  if (opts.chunk_sizes.empty() || opts.ks.empty()) {
    throw chunkflow::ValidationError("--chunk-sizes and --ks must not be empty");
  }
  const chunkflow::SequenceSet set = load_dataset_file(opts.dataset);
  chunkflow::MemoryModelCoefficients mem;
  if (!opts.coefficients.empty()) {
    const nlohmann::json doc = load_json_file(opts.coefficients);
    try {
      mem.base = doc.at("base_gib").get<double>();
      mem.per_chunk_token = doc.at("per_chunk_token_gib").get<double>();
      mem.per_context_token = doc.at("per_context_token_gib").get<double>();
      mem.gqa_ratio = doc.at("gqa_ratio").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw chunkflow::ParseError(std::string("invalid coefficients file: ") + e.what());
    }
  } else {
    mem.base = opts.mem_base;
    mem.per_chunk_token = opts.mem_per_chunk_token;
    mem.per_context_token = opts.mem_per_context_token;
    mem.gqa_ratio = opts.gqa_ratio;
  }

  chunkflow::PipelineConfig cfg;
  cfg.num_stages = opts.stages;
  const chunkflow::TunerResult result = chunkflow::grid_search(
      set, opts.chunk_sizes, opts.ks, cfg, opts.cost.model(), mem,
      opts.budget_gib, opts.batch_size, opts.batches, opts.seed);

  const auto dir = ensure_out_dir(opts.out_dir);
  write_file(dir / "tuner_table.csv", chunkflow::tuner_table_csv(result));
  const std::string report = chunkflow::tuner_report(result);
  write_file(dir / "tuner_report.txt", report);
  std::cout << report;
  return result.has_best ? kExitOk : kExitVerification;
}

int run_verify(const VerifyOpts& opts) {
  chunkflow::ToyModelConfig cfg;
  cfg.vocab_size = opts.vocab;
  cfg.d_model = opts.d_model;
  cfg.num_heads = opts.heads;
  cfg.num_kv_heads = opts.kv_heads;
  cfg.num_layers = opts.layers;
  cfg.seed = opts.model_seed;
  cfg.validate();
  const chunkflow::ToyModelParams params = chunkflow::init_model(cfg);

  chunkflow::SplitMix64 rng(opts.data_seed);
  chunkflow::SequenceSet batch;
  std::int64_t id = 0;
  for (const std::int64_t len : opts.lengths) {
    if (len < 2) {
      throw chunkflow::ValidationError("sequence lengths must be at least 2");
    }
    chunkflow::SequenceRecord rec;
    rec.id = id++;
    rec.length = len;
    rec.tokens.reserve(static_cast<std::size_t>(len));
    for (std::int64_t t = 0; t < len; ++t) {
      rec.tokens.push_back(static_cast<std::int32_t>(
          rng.next_below(static_cast<std::uint64_t>(cfg.vocab_size))));
    }
    batch.push_back(std::move(rec));
  }

  chunkflow::RunPlanOptions run_opts;
  run_opts.corrupt_kv_grads = opts.corrupt_kv_grads;
  const chunkflow::VerifyReport report = chunkflow::verify_equivalence(
      params, batch, opts.chunk_size, opts.k, opts.loss_tol, opts.grad_tol,
      run_opts);

  const auto dir = ensure_out_dir(opts.out_dir);
  write_file(dir / "verify_report.txt", report.to_text());
  std::cout << "max_rel_err: " << chunkflow::format_scientific(report.max_grad_rel_err)
            << "\n"
            << "recompute_forwards: "
            << report.instrumentation.recompute_forward_count << "\n"
            << "result: " << (report.pass ? "PASS" : "FAIL") << "\n";
  return report.pass ? kExitOk : kExitVerification;
}

int run_calibrate(const CalibrateOpts& opts) {
  std::ifstream in(opts.measurements, std::ios::binary);
  if (!in) throw chunkflow::IoError("cannot open " + opts.measurements);
  const std::vector<chunkflow::MemoryMeasurement> measurements =
      chunkflow::parse_measurements(in);
  const chunkflow::CalibrationResult result =
      chunkflow::calibrate(measurements, opts.gqa_ratio);

  const auto dir = ensure_out_dir(opts.out_dir);
  write_file(dir / "mem_coefficients.json",
             chunkflow::coefficients_to_json(result.coefficients).dump(2) + "\n");
  std::string report;
  report += "base_gib: " + chunkflow::format_scientific(result.coefficients.base) + "\n";
  report += "per_chunk_token_gib: " +
            chunkflow::format_scientific(result.coefficients.per_chunk_token) + "\n";
  report += "per_context_token_gib: " +
            chunkflow::format_scientific(result.coefficients.per_context_token) + "\n";
  report += "gqa_ratio: " +
            chunkflow::format_scientific(result.coefficients.gqa_ratio) + "\n";
  report += "max_residual_gib: " +
            chunkflow::format_scientific(result.max_residual_gib) + "\n";
  if (!opts.predict.empty()) {
    if (opts.predict.size() != 3) {
      throw chunkflow::ValidationError(
          "--predict expects chunk_size,k,context_len");
    }
    const double peak =
        chunkflow::predict_peak(result.coefficients, opts.predict[0],
                                opts.predict[1], opts.predict[2]);
    report += "predicted_peak_gib: " + chunkflow::format_fixed(peak, 3) + "\n";
  }
  write_file(dir / "calibration_report.txt", report);
  std::cout << report;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "chunkflow: chunk-centric long-sequence training toolkit "
      "(packing, K-bounded scheduling, pipeline simulation, tuning, "
      "numeric verification)"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value configuration file");

  GenDatasetOpts gen_opts;
  CLI::App* gen = app.add_subcommand(
      "gen-dataset", "synthesize a long-tail sequence-length dataset");
  gen->add_option("--preset", gen_opts.preset,
                  "distribution preset (eval-table5 or lmsys-table2)")
      ->check(CLI::IsMember({"eval-table5", "lmsys-table2"}));
  gen->add_option("--count", gen_opts.count, "number of sequences");
  gen->add_option("--seed", gen_opts.seed, "random seed");
  gen->add_option("--out-dir", gen_opts.out_dir, "output directory");

  PackOpts pack_opts;
  CLI::App* pack = app.add_subcommand(
      "pack", "sample a batch and construct a chunk plan");
  pack->add_option("--dataset", pack_opts.dataset, "line-delimited dataset file")
      ->required();
  pack->add_option("--chunk-size", pack_opts.chunk_size, "chunk token cap")
      ->required();
  pack->add_option("--batch-size", pack_opts.batch_size,
                   "sequences per batch (0 = whole dataset)");
  pack->add_option("--step", pack_opts.step, "epoch step to sample");
  pack->add_option("--seed", pack_opts.seed, "shuffle seed");
  pack->add_option("--out-dir", pack_opts.out_dir, "output directory");

  ScheduleOpts schedule_opts;
  CLI::App* schedule = app.add_subcommand(
      "schedule", "build the K-bounded execution plan for a chunk plan");
  schedule->add_option("--plan", schedule_opts.plan, "chunk plan JSON file")
      ->required();
  schedule->add_option("--k", schedule_opts.k, "retained-activation budget");
  schedule->add_option("--out-dir", schedule_opts.out_dir, "output directory");

  SimulateOpts sim_opts;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "run the pipeline simulator and report the bubble ratio");
  simulate->add_option("--plan", sim_opts.plan, "chunk plan JSON file");
  simulate->add_option("--dataset", sim_opts.dataset, "dataset to chunk on the fly");
  simulate->add_option("--batch-size", sim_opts.batch_size,
                       "sequences per batch (0 = whole dataset)");
  simulate->add_option("--step", sim_opts.step, "epoch step to sample");
  simulate->add_option("--chunk-size", sim_opts.chunk_size,
                       "chunk token cap (dataset mode)");
  simulate->add_option("--stages", sim_opts.stages, "pipeline stages");
  simulate->add_option("--k", sim_opts.k, "retained-activation budget");
  simulate->add_flag("--baseline", sim_opts.baseline,
                     "simulate plain 1F1B with whole sequences as microbatches");
  simulate->add_option("--trace-format", sim_opts.trace_format,
                       "chrome-trace or table");
  simulate->add_option("--dispatch", sim_opts.dispatch,
                       "steady-state order: backward-first or forward-first");
  simulate->add_option("--seed", sim_opts.seed, "shuffle seed");
  simulate->add_option("--out-dir", sim_opts.out_dir, "output directory");
  add_cost_flags(simulate, sim_opts.cost);

  TuneOpts tune_opts;
  CLI::App* tune = app.add_subcommand(
      "tune", "grid-search chunk size and K under a memory budget");
  tune->add_option("--dataset", tune_opts.dataset, "dataset file")->required();
  tune->add_option("--chunk-sizes", tune_opts.chunk_sizes,
                   "chunk sizes to try (comma separated)")
      ->required()
      ->delimiter(',');
  tune->add_option("--ks", tune_opts.ks, "K values to try (comma separated)")
      ->delimiter(',');
  tune->add_option("--stages", tune_opts.stages, "pipeline stages");
  tune->add_option("--budget-gib", tune_opts.budget_gib, "memory budget in GiB");
  tune->add_option("--batch-size", tune_opts.batch_size, "sequences per batch");
  tune->add_option("--batches", tune_opts.batches, "batches to average over");
  tune->add_option("--seed", tune_opts.seed, "shuffle seed");
  tune->add_option("--coefficients", tune_opts.coefficients,
                   "memory coefficients JSON from calibrate-mem");
  tune->add_option("--mem-base", tune_opts.mem_base, "memory model base GiB");
  tune->add_option("--mem-per-chunk-token", tune_opts.mem_per_chunk_token,
                   "memory per retained chunk token, GiB");
  tune->add_option("--mem-per-context-token", tune_opts.mem_per_context_token,
                   "memory per context token, GiB");
  tune->add_option("--gqa-ratio", tune_opts.gqa_ratio,
                   "kv-head to query-head ratio");
  tune->add_option("--out-dir", tune_opts.out_dir, "output directory");
  add_cost_flags(tune, tune_opts.cost);

  VerifyOpts verify_opts;
  CLI::App* verify = app.add_subcommand(
      "verify", "check chunked-equals-full gradient equivalence numerically");
  verify->add_option("--vocab", verify_opts.vocab, "vocabulary size");
  verify->add_option("--d-model", verify_opts.d_model, "model width");
  verify->add_option("--heads", verify_opts.heads, "query heads");
  verify->add_option("--kv-heads", verify_opts.kv_heads, "key/value heads");
  verify->add_option("--layers", verify_opts.layers, "transformer layers");
  verify->add_option("--model-seed", verify_opts.model_seed, "parameter seed");
  verify->add_option("--lengths", verify_opts.lengths,
                     "sequence lengths of the test batch")
      ->delimiter(',');
  verify->add_option("--data-seed", verify_opts.data_seed, "token seed");
  verify->add_option("--chunk-size", verify_opts.chunk_size, "chunk token cap");
  verify->add_option("--k", verify_opts.k, "retained-activation budget");
  verify->add_option("--loss-tol", verify_opts.loss_tol, "loss tolerance");
  verify->add_option("--grad-tol", verify_opts.grad_tol, "gradient tolerance");
  verify
      ->add_flag("--corrupt-kv-grads", verify_opts.corrupt_kv_grads,
                 "fault-injection hook: corrupt KV gradients")
      ->group("");  // hidden test hook
  verify->add_option("--out-dir", verify_opts.out_dir, "output directory");

  CalibrateOpts cal_opts;
  CLI::App* calibrate = app.add_subcommand(
      "calibrate-mem", "least-squares fit of the peak-memory model");
  calibrate
      ->add_option("--measurements", cal_opts.measurements,
                   "CSV of chunk_size,k,context_len,peak_gib rows")
      ->required();
  calibrate->add_option("--gqa-ratio", cal_opts.gqa_ratio,
                        "kv-head to query-head ratio");
  calibrate->add_option("--predict", cal_opts.predict,
                        "predict peak for chunk_size,k,context_len")
      ->delimiter(',');
  calibrate->add_option("--out-dir", cal_opts.out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand(gen)) return run_gen_dataset(gen_opts);
    if (app.got_subcommand(pack)) return run_pack(pack_opts);
    if (app.got_subcommand(schedule)) return run_schedule(schedule_opts);
    if (app.got_subcommand(simulate)) return run_simulate(sim_opts);
    if (app.got_subcommand(tune)) return run_tune(tune_opts);
    if (app.got_subcommand(verify)) return run_verify(verify_opts);
    if (app.got_subcommand(calibrate)) return run_calibrate(cal_opts);
    std::cerr << app.help();
    return kExitUsage;
  } catch (const chunkflow::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const chunkflow::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const chunkflow::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
