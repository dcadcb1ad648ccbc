// extendova_cli: generate streams, run experiments, summarise run directories.
//
//   extendova_cli generate --config <path> --out <path>
//   extendova_cli train --config <path> [--resume <dir>]
//   extendova_cli report <dir> [--format csv|json]
//
// Exit codes: 0 success, 2 configuration error, 3 runtime or numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "extendova/experiment.hpp"
#include "extendova/stream_io.hpp"

namespace {

using namespace extendova;
namespace ex = extendova::experiment;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int cmd_generate(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const auto cfg = ex::load_config(config_path);
  stream::StreamConfig sc = cfg.stream;
  if (seed) sc.seed = *seed;
  const auto steps = stream::generate_stream(sc);
  stream::write_stream(out, sc, steps);
  std::printf("step  cameras  classes  seen  unseen  seen/unseen\n");
  for (const auto& s : steps) {
    const int seen = s.seen_count();
    const int unseen = s.n_local_classes() - seen;
    std::printf("%4d  %7zu  %7d  %4d  %6d  ", s.step, s.cameras.size(), s.n_local_classes(), seen, unseen);
    if (s.step == 1 || unseen == 0) std::printf("%11s\n", "-");
    else std::printf("%11.4f\n", static_cast<double>(seen) / unseen);
  }
  std::printf("wrote %s (seed %llu)\n", out.c_str(), static_cast<unsigned long long>(sc.seed));
  return 0;
}

int cmd_train(const std::string& config_path, const std::optional<std::string>& resume,
              std::optional<int> halt_after) {
  const auto cfg = ex::load_config(config_path);
  const fs::path dir = resume ? fs::path(*resume) : ex::resolve_output_dir(cfg.output_dir);
  if (resume) {
    if (!fs::exists(dir / "config.json")) throw ConfigError("--resume: no run found in " + dir.string());
    if (checkpoint::read_json((dir / "config.json").string()) != ex::config_to_json(cfg))
      throw ConfigError("--resume: config differs from the one stored in " + dir.string());
  } else if (fs::exists(dir / "config.json")) {
    throw ConfigError("output_dir: " + dir.string() + " already holds a run; pass --resume to continue it");
  }
  ex::RunOptions opt;
  opt.halt_after_step = halt_after;
  const auto r = ex::run_experiment(cfg, dir, opt);
  int last = 0;
  for (const auto& row : r.rows) last = std::max(last, row.step);
  for (const auto& row : r.rows)
    if (row.step == last && row.split == "all" && row.metric == "mAP")
      std::printf("%-10s seed %-4llu step %d  mAP %.4f\n", row.method.c_str(),
                  static_cast<unsigned long long>(row.seed), row.step, row.value);
  std::printf("%s run in %s\n", r.complete ? "complete" : "partial", dir.string().c_str());
  return 0;
}

int cmd_report(const std::string& dir, const std::string& format) {
  const auto rep = ex::load_report(dir);
  std::cout << (format == "json" ? ex::report_json(rep) : ex::report_csv(rep));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ExtendOVA camera-incremental re-identification on synthetic streams"};
  app.require_subcommand(1);

  std::string config, out, run_dir, format = "csv";
  std::optional<std::string> resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> halt_after;

  auto* gen = app.add_subcommand("generate", "Write a synthetic stream file and print per-step class counts");
  gen->add_option("--config", config, "Experiment config (JSON)")->required();
  gen->add_option("--out", out, "Output stream file")->required();
  gen->add_option("--seed", seed, "Override the stream seed");

  auto* train = app.add_subcommand("train", "Run every method and seed of a config");
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--resume", resume, "Continue the run stored in this directory");
  train->add_option("--halt-after-step", halt_after, "Stop each method after this step (leaves a partial run)")
      ->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarise a run directory");
  report->add_option("dir", run_dir, "Run directory")->required();
  report->add_option("--format", format, "Output format")->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(config, out, seed);
    if (*train) return cmd_train(config, resume, halt_after);
    return cmd_report(run_dir, format);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
