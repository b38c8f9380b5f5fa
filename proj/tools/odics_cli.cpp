#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "odics/domains.hpp"
#include "odics/error.hpp"
#include "odics/experiment.hpp"
#include "odics/invariants.hpp"
#include "odics/report.hpp"

namespace {

using namespace odics;

ParsedConfig load(const std::string& preset, const std::string& config_path, const std::vector<std::string>& sets) {
  if (preset.empty() == config_path.empty()) throw ConfigError("give exactly one of --preset or --config");
  auto parsed = preset.empty() ? load_config_file(config_path) : load_preset(preset);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key(detail::trim(std::string_view(kv).substr(0, eq)));
    const std::string value(detail::trim(std::string_view(kv).substr(eq + 1)));
    if (key.rfind("grid.", 0) == 0) {
      const auto sub = key.substr(5);
      std::erase_if(parsed.grid, [&](const auto& axis) { return axis.first == sub; });
      parsed.grid.emplace_back(sub, detail::split(value, '|'));
    } else {
      set_config_key(parsed.config, key, value);
    }
  }
  return parsed;
}

int cmd_run(const std::string& preset, const std::string& config, const std::vector<std::string>& sets,
            const std::string& out) {
  const auto parsed = load(preset, config, sets);
  if (!parsed.grid.empty()) throw ConfigError("config has grid axes; use the grid subcommand");
  parsed.config.validate();
  const auto r = run_and_write(parsed.config, out);
  std::cout << summary_csv(r);
  std::cout << "wrote " << (std::filesystem::path(out) / "record.json").string() << '\n';
  return 0;
}

int cmd_grid(const std::string& preset, const std::string& config, const std::vector<std::string>& sets,
             const std::string& out, std::size_t jobs) {
  const auto parsed = load(preset, config, sets);
  const auto cells = expand_grid(parsed);
  for (const auto& c : cells) c.validate();
  const auto outcomes = run_grid(cells, out, jobs);
  std::size_t failed = 0;
  for (const auto& o : outcomes) failed += !o.ok;
  std::cout << cells.size() - failed << " of " << cells.size() << " cells completed\n";
  return failed ? 1 : 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  const auto r = write_report(in, out.empty() ? in : out);
  std::cout << render_table(r);
  return r.rows.empty() ? 1 : 0;
}

int cmd_dump(const std::string& domain, const std::string& split, std::size_t count, std::size_t canvas,
             const std::string& out) {
  auto domains = real_domain_presets(canvas);
  for (auto& s : sim_domain_presets(canvas)) domains.push_back(std::move(s));
  const auto spec = find_domain(domains, domain);
  if (split != "train" && split != "test") throw ConfigError("--split must be train or test");
  const auto seeds = make_split(spec, count, count);
  std::filesystem::create_directories(out);
  const auto manifest_path = std::filesystem::path(out) / "manifest.csv";
  const bool fresh = !std::filesystem::exists(manifest_path);
  std::ofstream manifest(manifest_path, std::ios::app);
  if (!manifest) throw ConfigError("cannot write " + manifest_path.string());
  if (fresh) manifest << "file,domain,seed,split\n";
  dump_samples(out, spec, split == "train" ? seeds.train : seeds.test, split, manifest);
  std::cout << "wrote " << count << " samples of " << domain << " to " << out << '\n';
  return 0;
}

int cmd_check(const std::string& preset, const std::string& config, const std::vector<std::string>& sets) {
  if (!preset.empty() || !config.empty()) {
    const auto parsed = load(preset, config, sets);
    for (const auto& c : expand_grid(parsed)) c.validate();
    std::cout << config_echo(parsed.config);
    for (const auto& [key, values] : parsed.grid) {
      std::cout << "grid." << key << " =";
      for (std::size_t i = 0; i < values.size(); ++i) std::cout << (i ? " | " : " ") << values[i];
      std::cout << '\n';
    }
  }
  std::size_t failed = 0;
  for (const auto& r : run_invariant_suite()) {
    std::cout << (r.ok ? "PASS " : "FAIL ") << r.name << "  " << r.detail << '\n';
    failed += !r.ok;
  }
  if (failed) throw NumericError(std::to_string(failed) + " invariant check(s) failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online domain-incremental segmentation bench"};
  app.require_subcommand(1);

  std::string preset, config, out = "runs/out", in;
  std::vector<std::string> sets;
  std::size_t jobs = 1;

  auto* run = app.add_subcommand("run", "Run one experiment and write its record");
  run->add_option("--preset", preset, "Built-in preset name");
  run->add_option("--config", config, "Config file (key = value lines)");
  run->add_option("--set", sets, "Override key=value (repeatable)");
  run->add_option("--out", out, "Output directory");

  auto* grid = app.add_subcommand("grid", "Run every cell of a grid config");
  grid->add_option("--preset", preset, "Built-in preset name");
  grid->add_option("--config", config, "Config file with grid.<key> = a | b lines");
  grid->add_option("--set", sets, "Override key=value (repeatable)");
  grid->add_option("--out", out, "Output directory, one subdirectory per cell");
  grid->add_option("--jobs", jobs, "Cells run in parallel")->check(CLI::PositiveNumber);

  std::string report_out;
  auto* report = app.add_subcommand("report", "Summarize records and draw transfer heatmaps");
  report->add_option("--in", in, "Directory searched for record.json files")->required();
  report->add_option("--out", report_out, "Report directory (default: --in)");

  std::string domain = "CS", split = "train";
  std::size_t count = 16, canvas = 32;
  auto* dump = app.add_subcommand("dump-dataset", "Write images, masks and a manifest for one domain");
  dump->add_option("--domain", domain, "CS, IDD, BDD, ACDC, SimA or SimB");
  dump->add_option("--split", split, "train or test");
  dump->add_option("--count", count, "Number of samples");
  dump->add_option("--canvas", canvas, "Image side length");
  dump->add_option("--out", out, "Output directory");

  auto* check = app.add_subcommand("check", "Validate a config and run the invariant suite");
  check->add_option("--preset", preset, "Built-in preset to validate");
  check->add_option("--config", config, "Config file to validate");
  check->add_option("--set", sets, "Override key=value (repeatable)");

  auto* presets = app.add_subcommand("presets", "List built-in presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*run) return cmd_run(preset, config, sets, out);
    if (*grid) return cmd_grid(preset, config, sets, out, jobs);
    if (*report) return cmd_report(in, report_out);
    if (*dump) return cmd_dump(domain, split, count, canvas, out);
    if (*check) return cmd_check(preset, config, sets);
    if (*presets) {
      for (const auto& [name, text] : preset_texts()) std::cout << name << '\n';
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kConfig);
  }
  return 0;
}
