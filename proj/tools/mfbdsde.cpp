#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mfbdsde.hpp"

namespace {

std::vector<double> parse_ladder(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(mfbdsde::detail::parse_number<double>("--ladder", mfbdsde::detail::trim(tok)));
  return out;
}

void print_rows(const mfbdsde::RunResult& r) {
  std::cout << r.report_text;
  if (!r.report_path.empty()) std::cerr << "report: " << r.report_path << "\nmanifest: " << r.manifest_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mean-field BDSDE simulation and verification"};
  app.require_subcommand(1);

  mfbdsde::CliRequest req;
  std::string scenario_opt, ladder;
  std::uint64_t seed = 0;
  double dt = 0.0, tol = 0.0;
  std::size_t particles = 0, bpaths = 0;

  for (const auto& name : mfbdsde::subcommands()) {
    auto* sc = app.add_subcommand(name);
    sc->add_option("SCENARIO", req.scenario, "scenario file or catalog id (S0..S6)");
    sc->add_option("--scenario", scenario_opt, "scenario file or catalog id");
    sc->add_option("--seed", seed, "root seed (overrides MFBDSDE_SEED)");
    sc->add_option("--out", req.out_dir, "directory for the report and manifest");
    sc->add_option("--dt", dt, "time step");
    sc->add_option("--particles", particles, "law particles N");
    sc->add_option("--bpaths", bpaths, "B-paths M");
    sc->add_option("--tol", tol, "check tolerance");
    sc->add_option("--threads", req.threads, "worker threads");
    if (name == "sweep") {
      sc->add_option("--axis", req.axis, "dt, N or M")->required()->check(CLI::IsMember({"dt", "N", "M"}));
      sc->add_option("--ladder", ladder, "comma-separated ladder values")->required();
    }
  }

  std::string manifest;
  std::size_t replay_threads = 0;
  std::string replay_out;
  auto* rp = app.add_subcommand("replay", "re-run a manifest and compare with its recorded report");
  rp->add_option("manifest", manifest)->required();
  rp->add_option("--threads", replay_threads);
  rp->add_option("--out", replay_out);

  std::vector<std::string> inputs;
  std::string merged;
  auto* mg = app.add_subcommand("merge", "merge report files");
  mg->add_option("reports", inputs)->required();
  mg->add_option("--out", merged)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : mfbdsde::exit_config;
  }

  try {
    if (rp->parsed()) {
      const auto r = mfbdsde::replay_manifest(mfbdsde::read_file(manifest), replay_threads, replay_out);
      if (r.run.exit_code == mfbdsde::exit_config || r.run.exit_code == mfbdsde::exit_solver) {
        std::cerr << r.run.message << "\n";
        return r.run.exit_code;
      }
      print_rows(r.run);
      std::cerr << (r.identical ? "replay identical\n" : "replay differs from the recorded report\n");
      return r.identical ? r.run.exit_code : mfbdsde::exit_failed_check;
    }
    if (mg->parsed()) {
      std::vector<std::pair<std::string, std::string>> named;
      for (const auto& f : inputs) named.emplace_back(f, mfbdsde::read_file(f));
      mfbdsde::write_file(merged, mfbdsde::report_merge(named));
      return 0;
    }
    const CLI::App* sc = app.get_subcommands().front();
    req.subcommand = sc->get_name();
    if (!scenario_opt.empty()) req.scenario = scenario_opt;
    if (sc->count("--seed")) req.seed = seed;
    if (sc->count("--dt")) req.dt = dt;
    if (sc->count("--particles")) req.particles = particles;
    if (sc->count("--bpaths")) req.bpaths = bpaths;
    if (sc->count("--tol")) req.tol = tol;
    if (!ladder.empty()) req.ladder = parse_ladder(ladder);
  } catch (const mfbdsde::Error& e) {
    std::cerr << e.what() << "\n";
    return mfbdsde::exit_code_for(e.code());
  }

  const auto r = mfbdsde::run_command(req);
  if (r.exit_code == mfbdsde::exit_config || r.exit_code == mfbdsde::exit_solver) {
    std::cerr << r.message << "\n";
    return r.exit_code;
  }
  print_rows(r);
  return r.exit_code;
}
