// fedwsq: command-line driver.
//
//   fedwsq run     --config <path> [--seed <u64>] [--out <dir>]
//   fedwsq compare --config <path> [--seed <u64>] [--out <dir>]
//   fedwsq levels  --bits {1|2|4} [--pin-zero {true|false}] [--out <dir>]
//
// Exit codes: 0 ok, 2 configuration error, 3 numerical error during a run.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fedwsq/config.hpp"
#include "fedwsq/danuq.hpp"
#include "fedwsq/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedwsq;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

RunConfig load_with_overrides(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_config(path);
  if (seed) cfg.seed = *seed;
  if (const char* env = std::getenv("FEDWSQ_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) cfg.threads = std::min<std::size_t>(cfg.threads, static_cast<std::size_t>(cap));
  }
  return cfg;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + p.string(), "out");
  return os;
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const fs::path& out_dir) {
  const RunConfig cfg = load_with_overrides(config_path, seed);
  fs::create_directories(out_dir);
  auto csv = open_out(out_dir / "metrics.csv");
  csv << exp::kCsvHeader << "\n";
  const auto summary = exp::run_experiment(cfg, [&](const exp::RoundRow& r) { csv << exp::csv_row(r) << "\n"; });
  auto txt = open_out(out_dir / "summary.txt");
  exp::write_summary(txt, cfg, summary);
  if (summary.degenerate_scales)
    std::cerr << "warning: " << summary.degenerate_scales << " block(s) hit the degenerate-scale rule\n";
  std::cout << "rounds " << summary.rows.size() << "  final acc (ema) " << summary.final_acc_ema
            << "  uplink bytes " << summary.total_uplink_bytes << "\n";
  return 0;
}

int cmd_compare(const std::string& config_path, std::optional<std::uint64_t> seed, const fs::path& out_dir) {
  const RunConfig cfg = load_with_overrides(config_path, seed);
  fs::create_directories(out_dir);
  auto csv = open_out(out_dir / "compare.csv");
  csv << exp::kCompareHeader << "\n";
  for (const auto& arm : exp::compare_arms()) {
    const RunConfig arm_cfg = exp::arm_config(cfg, arm);
    auto metrics = open_out(out_dir / ("metrics_" + arm.name + ".csv"));
    metrics << exp::kCsvHeader << "\n";
    exp::ArmResult r{arm, exp::run_experiment(arm_cfg, [&](const exp::RoundRow& row) {
                       metrics << exp::csv_row(row) << "\n";
                     })};
    csv << exp::compare_row(cfg, r) << "\n";
    std::cout << std::left << std::setw(12) << arm.name << " final acc (ema) " << r.summary.final_acc_ema
              << "  weight payload bytes " << r.summary.total_weight_payload_bytes << "\n";
  }
  return 0;
}

int cmd_levels(int bits, bool pin_zero, const fs::path& out_dir) {
  if (!danuq::supported_bits(bits)) {
    std::cerr << "error: unsupported bit-width " << bits << " (expected 1, 2 or 4)\n";
    return kExitConfig;
  }
  const auto levels = danuq::optimize_levels(bits, pin_zero);
  const double mse = danuq::expected_error(levels);
  fs::create_directories(out_dir);
  const auto path = out_dir / ("levels_" + std::to_string(bits) + "bit.txt");
  auto os = open_out(path);
  os << std::setprecision(12);
  os << "# bits = " << bits << "\n# zero_pinned = " << (levels.zero_pinned() ? "true" : "false") << "\n";
  os << "# expected_error = " << mse << "\n# index level lower_bound upper_bound\n";
  const auto u = levels.boundaries();
  for (std::size_t r = 0; r < levels.size(); ++r)
    os << r << " " << levels[r] << " " << u[r] << " " << u[r + 1] << "\n";

  const auto published = danuq::published_levels(bits);
  double max_dev = 0.0;
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "bits " << bits << "  expected error " << mse << "  (published table: "
            << danuq::expected_error(published) << ")\n";
  std::cout << "  r   computed   published   deviation\n";
  for (std::size_t r = 0; r < levels.size(); ++r) {
    const double dev = std::abs(levels[r] - published[r]);
    max_dev = std::max(max_dev, dev);
    std::cout << std::setw(3) << r << std::setw(11) << levels[r] << std::setw(12) << published[r] << std::setw(12)
              << dev << "\n";
  }
  std::cout << "max deviation from published table: " << max_dev << "\n";
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with weight standardization and distribution-aware quantization"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  int bits = 4;
  std::string pin_zero = "true";

  auto* run = app.add_subcommand("run", "Run a federated experiment and write metrics.csv and summary.txt");
  run->add_option("--config", config_path, "Configuration file")->required();
  run->add_option("--seed", seed, "Override the configured seed");
  run->add_option("--out", out_dir, "Output directory");

  auto* compare = app.add_subcommand("compare", "Run the WS x quantizer grid plus a full-precision control");
  compare->add_option("--config", config_path, "Configuration file")->required();
  compare->add_option("--seed", seed, "Override the configured seed");
  compare->add_option("--out", out_dir, "Output directory");

  auto* levels = app.add_subcommand("levels", "Compute an optimal level table and compare with the published one");
  levels->add_option("--bits", bits, "Bit-width (1, 2 or 4)")->required();
  levels->add_option("--pin-zero", pin_zero, "Pin one level at zero (bits >= 2)")
      ->check(CLI::IsMember({"true", "false"}));
  levels->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, seed, out_dir);
    if (*compare) return cmd_compare(config_path, seed, out_dir);
    if (*levels) return cmd_levels(bits, pin_zero == "true", out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error";
    if (!e.key().empty()) std::cerr << " [" << e.key() << "]";
    std::cerr << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const exp::RoundError& e) {
    std::cerr << "numerical error in round " << e.round() << ": " << e.what() << "\n";
    return kExitNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
