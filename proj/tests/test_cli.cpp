// SPDX-License-Identifier: Apache-2.0
//
// End-to-end CLI tests: drive the installed binary through every subcommand
// and check exit codes, stdout, and the files it writes.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

std::string run_cli(const std::string& args, int* exit_code) {
  const std::string command = std::string(CHUNKFLOW_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(command.c_str(), "r");
  if (pipe == nullptr) {
    *exit_code = -1;
    return {};
  }
  std::string output;
  char buffer[4096];
  std::size_t n = 0;
  while ((n = fread(buffer, 1, sizeof(buffer), pipe)) > 0) {
    output.append(buffer, n);
  }
  const int status = pclose(pipe);
  *exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return output;
}

struct TempDir {
  std::filesystem::path path;

  TempDir() {
    std::string tmpl = "/tmp/chunkflow_cli_XXXXXX";
    path = mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::string write_worked_dataset(const TempDir& dir) {
  const std::string path = dir.sub("fig.jsonl");
  write_text(path,
             "{\"length\": 1}\n{\"length\": 1}\n{\"length\": 2}\n{\"length\": 4}\n");
  return path;
}

std::string write_measurements(const TempDir& dir) {
  const std::string path = dir.sub("measurements.csv");
  write_text(path,
             "chunk_size,k,context_len,peak_gib\n"
             "2048,1,32768,41.6\n"
             "2048,1,262144,45.6\n"
             "4096,1,32768,47.5\n"
             "4096,1,262144,50.8\n"
             "8192,1,32768,59.3\n"
             "8192,1,262144,63.8\n");
  return path;
}

std::int64_t count_lines(const std::string& text) {
  std::int64_t lines = 0;
  for (char c : text) lines += c == '\n' ? 1 : 0;
  return lines;
}

TEST(Cli, HelpExitsCleanlyAndListsSubcommands) {
  int code = -1;
  const std::string out = run_cli("--help", &code);
  EXPECT_EQ(code, 0);
  EXPECT_NE(out.find("gen-dataset"), std::string::npos);
  EXPECT_NE(out.find("calibrate-mem"), std::string::npos);
  EXPECT_NE(out.find("simulate"), std::string::npos);
}

TEST(Cli, UnknownSubcommandIsAUsageError) {
  int code = -1;
  run_cli("frobnicate", &code);
  EXPECT_EQ(code, 1);
}

TEST(Cli, GenDatasetWritesReproducibleFiles) {
  TempDir a;
  TempDir b;
  int code = -1;
  const std::string out = run_cli(
      "gen-dataset --count 500 --seed 3 --out-dir " + a.path.string(), &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(out.find("max_length"), std::string::npos);

  const std::string dataset = read_text(a.sub("dataset.jsonl"));
  EXPECT_EQ(count_lines(dataset), 500);
  EXPECT_FALSE(read_text(a.sub("distribution_report.txt")).empty());
  EXPECT_FALSE(read_text(a.sub("distribution_report.csv")).empty());

  run_cli("gen-dataset --count 500 --seed 3 --out-dir " + b.path.string(), &code);
  ASSERT_EQ(code, 0);
  EXPECT_EQ(dataset, read_text(b.sub("dataset.jsonl")));
}

TEST(Cli, GenDatasetRejectsBadArguments) {
  TempDir dir;
  int code = -1;
  run_cli("gen-dataset --count 0 --out-dir " + dir.path.string(), &code);
  EXPECT_EQ(code, 1);
  run_cli("gen-dataset --preset bogus --out-dir " + dir.path.string(), &code);
  EXPECT_EQ(code, 1);
}

TEST(Cli, PackReportsTheWorkedChunkCounts) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  const std::string out = run_cli("pack --dataset " + dataset +
                                      " --chunk-size 2 --out-dir " + dir.path.string(),
                                  &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(out.find("4 chunks (3 standalone-equivalent, 1 group of 2)"),
            std::string::npos);
  EXPECT_NE(out.find("tokens: 8"), std::string::npos);
  EXPECT_NE(out.find("fill_ratio: 100.00%"), std::string::npos);
  EXPECT_EQ(out, read_text(dir.sub("pack_summary.txt")));

  const nlohmann::json plan = nlohmann::json::parse(read_text(dir.sub("chunk_plan.json")));
  EXPECT_EQ(plan.at("chunk_size").get<int>(), 2);
  EXPECT_EQ(plan.at("chunks").size(), 4u);

  const std::string coarse = run_cli("pack --dataset " + dataset +
                                         " --chunk-size 4 --out-dir " + dir.path.string(),
                                     &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(coarse.find("2 chunks (2 standalone-equivalent, 0 groups)"),
            std::string::npos);
}

TEST(Cli, PackFailsOnMissingDatasetWithIoExit) {
  TempDir dir;
  int code = -1;
  run_cli("pack --dataset " + dir.sub("absent.jsonl") + " --chunk-size 4 --out-dir " +
              dir.path.string(),
          &code);
  EXPECT_EQ(code, 3);
}

TEST(Cli, PackRejectsStepsBeyondTheEpoch) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  const std::string out = run_cli("pack --dataset " + dataset +
                                      " --chunk-size 2 --batch-size 2 --step 5 --out-dir " +
                                      dir.path.string(),
                                  &code);
  EXPECT_EQ(code, 1);
  EXPECT_NE(out.find("beyond the dataset epoch"), std::string::npos);
}

TEST(Cli, ScheduleEmitsTheKBoundedPlan) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  run_cli("pack --dataset " + dataset + " --chunk-size 2 --out-dir " + dir.path.string(),
          &code);
  ASSERT_EQ(code, 0);

  const std::string out = run_cli("schedule --plan " + dir.sub("chunk_plan.json") +
                                      " --k 1 --out-dir " + dir.path.string(),
                                  &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(out.find("F- chunk=2 group=0"), std::string::npos);
  EXPECT_NE(out.find("recompute"), std::string::npos);
  EXPECT_NE(out.find("peak_retained_tokens: 2"), std::string::npos);
  EXPECT_NE(out.find("recompute_tokens: 2"), std::string::npos);
  EXPECT_EQ(out, read_text(dir.sub("execution_plan.txt")));

  const nlohmann::json plan =
      nlohmann::json::parse(read_text(dir.sub("execution_plan.json")));
  EXPECT_EQ(plan.at("events").size(), 9u);
  EXPECT_EQ(plan.at("k").get<int>(), 1);
}

TEST(Cli, SimulateBaselineReproducesTheWorkedBubbleRatio) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  const std::string out = run_cli("simulate --baseline --dataset " + dataset +
                                      " --stages 4 --out-dir " + dir.path.string(),
                                  &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(out.find("makespan: 56.00"), std::string::npos);
  EXPECT_NE(out.find("bubble_ratio 57.14%"), std::string::npos);
  EXPECT_EQ(out, read_text(dir.sub("simulate_report.txt")));

  const nlohmann::json trace = nlohmann::json::parse(read_text(dir.sub("trace.json")));
  EXPECT_EQ(trace.at("traceEvents").size(), 32u);  // 4 stages x (F+B) x 4 microbatches
}

TEST(Cli, SimulateStateAwareReproducesTheWorkedRatios) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  const std::string k1 = run_cli("simulate --dataset " + dataset +
                                     " --chunk-size 2 --k 1 --stages 4 --out-dir " +
                                     dir.path.string(),
                                 &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(k1.find("makespan: 54.00"), std::string::npos);
  EXPECT_NE(k1.find("bubble_ratio 55.56%"), std::string::npos);
  const std::string first_trace = read_text(dir.sub("trace.json"));

  const std::string again = run_cli("simulate --dataset " + dataset +
                                        " --chunk-size 2 --k 1 --stages 4 --out-dir " +
                                        dir.path.string(),
                                    &code);
  ASSERT_EQ(code, 0);
  EXPECT_EQ(first_trace, read_text(dir.sub("trace.json")));

  const std::string k2 = run_cli("simulate --dataset " + dataset +
                                     " --chunk-size 2 --k 2 --stages 4 --out-dir " +
                                     dir.path.string(),
                                 &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(k2.find("makespan: 46.00"), std::string::npos);
  EXPECT_NE(k2.find("bubble_ratio 47.83%"), std::string::npos);
}

TEST(Cli, SimulateWritesTableTraces) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  run_cli("simulate --dataset " + dataset +
              " --chunk-size 2 --stages 2 --trace-format table --out-dir " +
              dir.path.string(),
          &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(read_text(dir.sub("trace.txt")).find("stage 0"), std::string::npos);
}

TEST(Cli, SimulateValidatesItsArguments) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  run_cli("simulate --dataset " + dataset + " --chunk-size 2 --stages 0 --out-dir " +
              dir.path.string(),
          &code);
  EXPECT_EQ(code, 1);
  run_cli("simulate --dataset " + dataset +
              " --chunk-size 2 --trace-format bogus --out-dir " + dir.path.string(),
          &code);
  EXPECT_EQ(code, 1);
  run_cli("simulate --out-dir " + dir.path.string(), &code);
  EXPECT_EQ(code, 1);
}

TEST(Cli, TunePicksTheWorkedBestCell) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  const std::string out = run_cli(
      "tune --dataset " + dataset +
          " --chunk-sizes 2,4 --ks 1,2 --stages 4 --batch-size 4 --batches 1 --out-dir " +
          dir.path.string(),
      &code);
  ASSERT_EQ(code, 0);
  EXPECT_EQ(out.find("best: chunk_size=2 k=2"), 0u);
  EXPECT_NE(out.find("evaluations: 4"), std::string::npos);

  const std::string csv = read_text(dir.sub("tuner_table.csv"));
  EXPECT_EQ(count_lines(csv), 5);  // header + four grid rows
  EXPECT_EQ(csv.find("chunk_size,k,mean_time,predicted_peak_gib,feasible"), 0u);
  EXPECT_EQ(out, read_text(dir.sub("tuner_report.txt")));
}

TEST(Cli, TuneSignalsWhenNothingFitsTheBudget) {
  TempDir dir;
  const std::string dataset = write_worked_dataset(dir);
  int code = -1;
  const std::string out = run_cli("tune --dataset " + dataset +
                                      " --chunk-sizes 2,4 --ks 1,2 --stages 4"
                                      " --budget-gib 0.5 --mem-base 1 --out-dir " +
                                      dir.path.string(),
                                  &code);
  EXPECT_EQ(code, 2);
  EXPECT_NE(out.find("no feasible configuration"), std::string::npos);
}

TEST(Cli, VerifyPassesOnTheDefaultConfiguration) {
  TempDir dir;
  int code = -1;
  const std::string out = run_cli("verify --out-dir " + dir.path.string(), &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(out.find("max_rel_err: "), std::string::npos);
  EXPECT_NE(out.find("recompute_forwards: 1"), std::string::npos);
  EXPECT_NE(out.find("result: PASS"), std::string::npos);
  EXPECT_NE(read_text(dir.sub("verify_report.txt")).find("result: PASS"),
            std::string::npos);
}

TEST(Cli, VerifyFailsWhenKvGradientsAreCorrupted) {
  TempDir dir;
  int code = -1;
  const std::string out =
      run_cli("verify --corrupt-kv-grads --out-dir " + dir.path.string(), &code);
  EXPECT_EQ(code, 2);
  EXPECT_NE(out.find("result: FAIL"), std::string::npos);
}

TEST(Cli, CalibrateMemFitsAndPredicts) {
  TempDir dir;
  const std::string measurements = write_measurements(dir);
  int code = -1;
  const std::string out = run_cli("calibrate-mem --measurements " + measurements +
                                      " --predict 8192,2,262144 --out-dir " +
                                      dir.path.string(),
                                  &code);
  ASSERT_EQ(code, 0);
  EXPECT_NE(out.find("base_gib: "), std::string::npos);
  EXPECT_NE(out.find("max_residual_gib: "), std::string::npos);
  EXPECT_NE(out.find("predicted_peak_gib: 87.481"), std::string::npos);
  EXPECT_EQ(out, read_text(dir.sub("calibration_report.txt")));

  const nlohmann::json coeffs =
      nlohmann::json::parse(read_text(dir.sub("mem_coefficients.json")));
  EXPECT_TRUE(coeffs.contains("base_gib"));
  EXPECT_TRUE(coeffs.contains("per_chunk_token_gib"));
  EXPECT_GT(coeffs.at("per_context_token_gib").get<double>(), 0.0);
}

TEST(Cli, CalibrateMemRejectsMalformedRows) {
  TempDir dir;
  const std::string path = dir.sub("bad.csv");
  write_text(path, "chunk_size,k,context_len,peak_gib\nnot,a,valid,row\n");
  int code = -1;
  run_cli("calibrate-mem --measurements " + path + " --out-dir " + dir.path.string(),
          &code);
  EXPECT_EQ(code, 1);
  run_cli("calibrate-mem --measurements " + dir.sub("absent.csv") + " --out-dir " +
              dir.path.string(),
          &code);
  EXPECT_EQ(code, 3);
}

}  // namespace
