#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "mfbdsde/cli.hpp"
#include "mfbdsde/report.hpp"
#include "test_util.hpp"

using namespace mfbdsde;

namespace {

ReportRow row(const std::string& sid, const std::string& check, const std::string& metric, double v) {
  ReportRow r;
  r.scenario_id = sid;
  r.check_id = check;
  r.metric = metric;
  r.value = v;
  r.std_error = v / 3.0;
  r.n_samples = 12;
  r.dt = 1.0 / 3.0;
  r.N = 1024;
  r.M = 16;
  r.seed = 18446744073709551615ull;
  r.pass = v < 1.0;
  return r;
}

std::string scenario_file(const std::string& id) { return std::string(MFBDSDE_SCENARIO_DIR) + "/" + id + ".cfg"; }

CliRequest request(const std::string& sub, const std::string& scenario) {
  CliRequest r;
  r.subcommand = sub;
  r.scenario = scenario;
  r.seed_from_env = false;
  return r;
}

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST(Report, RoundTripIsExact) {
  std::vector<ReportRow> rows{row("S1", "flow", "a", 0.1), row("S2", "ito", "gap", 1.0 / 7.0),
                              row("S3", "x", "y", 1e-300), row("S4", "x", "z", -2.5e17)};
  const auto back = parse_report(format_report(rows));
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].scenario_id, rows[i].scenario_id);
    EXPECT_EQ(back[i].metric, rows[i].metric);
    EXPECT_EQ(back[i].value, rows[i].value);
    EXPECT_EQ(back[i].std_error, rows[i].std_error);
    EXPECT_EQ(back[i].dt, rows[i].dt);
    EXPECT_EQ(back[i].seed, rows[i].seed);
    EXPECT_EQ(back[i].pass, rows[i].pass);
  }
  EXPECT_EQ(format_report(back), format_report(rows));
}

TEST(Report, RejectsBadRows) {
  ReportRow r = row("S1", "c", "m", 0.5);
  r.value = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(code_of([&] { format_row(r); }), ErrorCode::NonfiniteState);
  r = row("S1", "c,d", "m", 0.5);
  EXPECT_EQ(code_of([&] { format_row(r); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { parse_report(""); }), ErrorCode::SchemaMismatch);
  EXPECT_EQ(code_of([] { parse_report("a,b,c\n"); }), ErrorCode::SchemaMismatch);
  const std::string hdr = format_report({});
  EXPECT_EQ(code_of([&] { parse_report(hdr + "S1,c,m,1,0,1,0.1,1,1,1,maybe\n"); }), ErrorCode::SchemaMismatch);
  EXPECT_EQ(code_of([&] { parse_report(hdr + "S1,c,m,1\n"); }), ErrorCode::SchemaMismatch);
}

TEST(Report, FileName) { EXPECT_EQ(report_file_name("S1", "check-flow", 7), "S1__check-flow__7.csv"); }

TEST(Merge, SingleFileAddsProvenance) {
  const std::string a = format_report({row("S1", "b", "m", 0.1), row("S1", "a", "m", 0.2)});
  const std::string m = report_merge({{"a.csv", a}});
  EXPECT_EQ(lines(m), lines(a));
  EXPECT_NE(m.find("provenance"), std::string::npos);
  // sorted by (scenario, check, metric)
  EXPECT_LT(m.find(",a,m,"), m.find(",b,m,"));
  EXPECT_NE(m.find(",a.csv\n"), std::string::npos);
}

TEST(Merge, TwoFilesAddRowsStably) {
  const std::string a = format_report({row("S1", "c", "m", 0.1), row("S2", "c", "m", 0.2)});
  const std::string b = format_report({row("S1", "c", "m", 0.3)});
  const std::string m = report_merge({{"a", a}, {"b", b}});
  EXPECT_EQ(lines(m), 1 + 2 + 1);
  EXPECT_LT(m.find(",a\n"), m.find(",b\n"));
}

TEST(Merge, SchemaMismatch) {
  const std::string a = format_report({row("S1", "c", "m", 0.1)});
  EXPECT_EQ(code_of([&] { report_merge({{"a", a}, {"b", "x,y\n1,2\n"}}); }), ErrorCode::SchemaMismatch);
  EXPECT_EQ(code_of([&] { report_merge({{"a", a + "S1,c\n"}}); }), ErrorCode::SchemaMismatch);
}

TEST(Cli, CheckFlowOnNullScenarioPasses) {
  const RunResult r = run_command(request("check-flow", scenario_file("S0")));
  EXPECT_EQ(r.exit_code, exit_pass) << r.message;
  EXPECT_FALSE(r.rows.empty());
  EXPECT_TRUE(all_pass(r.rows));
  EXPECT_EQ(parse_report(r.report_text).size(), r.rows.size());
}

TEST(Cli, SolveConstantBackwardMeetsOracle) {
  CliRequest q = request("solve-bdsde", scenario_file("S1"));
  q.particles = 1024;
  q.bpaths = 8;
  const RunResult r = run_command(q);
  EXPECT_EQ(r.exit_code, exit_pass) << r.message;
  bool seen = false;
  for (const auto& row : r.rows)
    if (row.metric.find("y_rmse") != std::string::npos) {
      seen = true;
      EXPECT_TRUE(row.pass) << row.metric;
    }
  EXPECT_TRUE(seen);
}

TEST(Cli, ConfigErrors) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "mfbdsde_cli_test";
  std::filesystem::create_directories(dir);
  std::string text = read_file(scenario_file("S1"));
  const auto pos = text.find("time.T");
  text.erase(pos, text.find('\n', pos) - pos + 1);
  write_file((dir / "noT.cfg").string(), text);
  CliRequest q = request("solve-bdsde", (dir / "noT.cfg").string());
  q.out_dir = (dir / "out").string();
  const RunResult r = run_command(q);
  EXPECT_EQ(r.exit_code, exit_config);
  EXPECT_TRUE(r.rows.empty());
  EXPECT_FALSE(std::filesystem::exists(dir / "out"));

  EXPECT_EQ(run_command(request("no-such", "S1")).exit_code, exit_config);
  EXPECT_EQ(run_command(request("solve-bdsde", "S9")).exit_code, exit_config);
  CliRequest sw = request("sweep", "S1");
  sw.axis = "dt";
  sw.ladder = {0.1};
  const RunResult s = run_command(sw);
  EXPECT_EQ(s.exit_code, exit_config);
  EXPECT_NE(s.message.find("InsufficientLadder"), std::string::npos) << s.message;
  sw.axis = "q";
  sw.ladder = {1, 2, 3, 4};
  EXPECT_EQ(run_command(sw).exit_code, exit_config);
  std::filesystem::remove_all(dir);
}

TEST(Cli, SeedPrecedence) {
  CliRequest q = request("simulate-forward", "S0");
  EXPECT_EQ(run_command(q).spec.seed, catalog_entry("S0").spec.seed);
  setenv("MFBDSDE_SEED", "99", 1);
  q.seed_from_env = true;
  EXPECT_EQ(run_command(q).spec.seed, 99u);
  q.seed = 5;
  EXPECT_EQ(run_command(q).spec.seed, 5u);
  unsetenv("MFBDSDE_SEED");
}

TEST(Cli, WritesReportAndManifest) {
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "mfbdsde_cli_out";
  std::filesystem::remove_all(dir);
  CliRequest q = request("check-flow", "S0");
  q.out_dir = dir.string();
  q.seed = 11;
  const RunResult r = run_command(q);
  EXPECT_EQ(r.exit_code, exit_pass);
  EXPECT_EQ(std::filesystem::path(r.report_path).filename().string(), "S0__check-flow__11.csv");
  EXPECT_EQ(read_file(r.report_path), r.report_text);
  const auto m = nlohmann::json::parse(read_file(r.manifest_path));
  EXPECT_EQ(m["seed"].get<std::uint64_t>(), 11u);
  EXPECT_EQ(m["subcommand"].get<std::string>(), "check-flow");
  std::filesystem::remove_all(dir);
}

TEST(Cli, ReplayIsBitExactAcrossWidths) {
  CliRequest q = request("solve-bdsde", "S6");
  q.particles = 512;
  q.bpaths = 4;
  q.threads = 1;
  const RunResult r = run_command(q);
  ASSERT_NE(r.exit_code, exit_config) << r.message;
  for (std::size_t w : {1u, 3u, 4u}) {
    const ReplayResult rp = replay_manifest(r.manifest.dump(), w);
    EXPECT_TRUE(rp.identical) << "width " << w;
  }
  set_thread_width(1);
  EXPECT_EQ(replay_manifest("{not json").run.exit_code, exit_config);
  EXPECT_EQ(replay_manifest("{}").run.exit_code, exit_config);
}
