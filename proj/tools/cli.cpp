#include "cli.hpp"

#include "kinmap/experiment.hpp"
#include "kinmap/io.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <ostream>

namespace kinmap::cli {

namespace fs = std::filesystem;
namespace ex = kinmap::experiment;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> solver;
  int threads = 1;
  std::optional<int> side;
  std::optional<double> if_noise;
  std::optional<int> replicates;
  std::string dataset;
  std::vector<std::string> maps;
  std::string input;
  int frame = -1;
};

ex::ExperimentConfig load(const Options& o, const fs::path& fallback) {
  ex::ExperimentConfig c;
  if (!o.config.empty()) {
    c = ex::read_config(o.config);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    c = ex::read_config(fallback);
  }
  if (o.seed) c.seed = *o.seed;
  if (o.side) c.side = *o.side;
  if (o.if_noise) c.if_noise = *o.if_noise;
  if (o.replicates) c.replicates = *o.replicates;
  if (o.solver) {
    const auto s = imaging::parse_solver(*o.solver);
    if (!s) throw ConfigError("--solver: expected reg-as-tr or projected-lm");
    c.solver = *s;
  }
  return c;
}

std::vector<fs::path> default_maps(const fs::path& dataset) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dataset)) {
    if (e.is_directory() && e.path().filename().string().rfind("maps-", 0) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pixel-wise kinetic parameter maps from simulated dynamic PET data"};
  app.require_subcommand(1);
  Options o;

  auto* simulate = app.add_subcommand("simulate", "Write a phantom dataset: noise-free reference and noisy replicates");
  auto* fit = app.add_subcommand("fit", "Fit parametric maps for every member of a dataset");
  auto* evaluate = app.add_subcommand("evaluate", "Region statistics and errors against the ground truth");
  auto* render = app.add_subcommand("render", "Grey-scale PGM images of maps or frames");

  for (auto* sub : {simulate, fit}) {
    sub->add_option("--config", o.config, "Configuration file (section.key = value)");
    sub->add_option("--seed", o.seed, "Master seed");
    sub->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  }
  simulate->add_option("--out", o.out, "Dataset directory (default: run.out)");
  simulate->add_option("--side", o.side, "Phantom side in pixels");
  simulate->add_option("--if-noise", o.if_noise, "Input-function perturbation level c");
  simulate->add_option("--replicates", o.replicates, "Number of noisy replicates");
  simulate->add_option("--solver", o.solver, "Solver recorded in the stored configuration");

  fit->add_option("dataset", o.dataset, "Dataset directory")->required();
  fit->add_option("--out", o.out, "Maps directory (default: <dataset>/maps-<solver>)");
  fit->add_option("--solver", o.solver, "reg-as-tr or projected-lm");

  evaluate->add_option("dataset", o.dataset, "Dataset directory")->required();
  evaluate->add_option("maps", o.maps, "Maps directories (default: every maps-* in the dataset)");
  evaluate->add_option("--out", o.out, "Report directory (default: <dataset>/evaluation)");

  render->add_option("input", o.input, "Maps directory, dataset reference or replicate")->required();
  render->add_option("--out", o.out, "Image directory (default: <input>/render)");
  render->add_option("--frame", o.frame, "Frame to render (default: last)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (simulate->parsed()) {
      auto c = load(o, {});
      if (!o.out.empty()) c.out_dir = o.out;
      ex::cmd_simulate(c, o.threads);
      out << "dataset written to " << c.out_dir << '\n';
      return kSuccess;
    }
    if (fit->parsed()) {
      const fs::path dataset = o.dataset;
      if (!fs::is_directory(dataset)) throw io::IoError("dataset '" + o.dataset + "' not found");
      const auto c = load(o, dataset / "config.txt");
      const fs::path maps = o.out.empty() ? ex::default_maps_dir(dataset, c.solver) : fs::path(o.out);
      const auto s = ex::cmd_fit(dataset, c, maps, o.threads);
      out << "maps written to " << maps.string() << " (" << s.fitted << " pixels, " << s.stalled << " stalled)\n";
      if (s.worst_stalled_fraction > 0.1) {
        err << "error: more than 10% of the pixels stalled\n";
        return kStallEpidemic;
      }
      return kSuccess;
    }
    if (evaluate->parsed()) {
      const fs::path dataset = o.dataset;
      if (!fs::is_directory(dataset)) throw io::IoError("dataset '" + o.dataset + "' not found");
      std::vector<fs::path> maps(o.maps.begin(), o.maps.end());
      if (maps.empty()) maps = default_maps(dataset);
      if (maps.empty()) throw io::IoError("no maps-* directories in '" + o.dataset + "'");
      const fs::path report = o.out.empty() ? dataset / "evaluation" : fs::path(o.out);
      ex::cmd_evaluate(dataset, maps, report);
      out << io::read_text(report / "report.txt");
      return kSuccess;
    }
    if (render->parsed()) {
      const fs::path input = o.input;
      if (!fs::is_directory(input)) throw io::IoError("'" + o.input + "' not found");
      const fs::path dir = o.out.empty() ? input / "render" : fs::path(o.out);
      ex::cmd_render(input, dir, o.frame);
      out << "images written to " << dir.string() << '\n';
      return kSuccess;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const io::IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace kinmap::cli
