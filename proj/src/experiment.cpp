#include "kinmap/experiment.hpp"

#include "kinmap/io.hpp"
#include "kinmap/seeds.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace kinmap::experiment {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Small text helpers

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? std::string() : item.substr(b, e - b + 1));
  }
  return out;
}

double parse_double(const std::string& key, const std::string& text) {
  Settings one{{key, text}};
  return get_double(one, key, 0.0);
}

template <std::size_t N>
std::array<double, N> get_list(const Settings& s, const std::string& key, std::array<double, N> fallback) {
  const auto it = s.find(key);
  if (it == s.end()) return fallback;
  const auto parts = split(it->second, ',');
  if (parts.size() != N) {
    throw ConfigError("config key '" + key + "': expected " + std::to_string(N) + " comma-separated numbers");
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_double(key, parts[i]);
  return out;
}

template <typename Seq>
std::string join(const Seq& values) {
  std::string out;
  for (const double v : values) {
    if (!out.empty()) out += ',';
    out += format_double(v);
  }
  return out;
}

std::string frames_text(const std::vector<std::pair<int, double>>& frames) {
  std::string out;
  for (const auto& [count, duration] : frames) {
    if (!out.empty()) out += ',';
    out += std::to_string(count) + 'x' + format_double(duration);
  }
  return out;
}

std::vector<std::pair<int, double>> parse_frames(const std::string& key, const std::string& text) {
  std::vector<std::pair<int, double>> out;
  for (const auto& block : split(text, ',')) {
    const auto x = block.find('x');
    if (x == std::string::npos) throw ConfigError("config key '" + key + "': blocks look like 6x10");
    Settings one{{key, block.substr(0, x)}};
    out.emplace_back(static_cast<int>(get_int(one, key, 0)), parse_double(key, block.substr(x + 1)));
  }
  return out;
}

std::string window_name(phantom::Apodization w) { return w == phantom::Apodization::hann ? "hann" : "ramp"; }

phantom::Apodization parse_window(const std::string& s) {
  if (s == "hann") return phantom::Apodization::hann;
  if (s == "ramp") return phantom::Apodization::ramp;
  throw ConfigError("config key 'noise.window': expected hann or ramp, got '" + s + "'");
}

std::string order_name(imaging::ScanOrder o) { return o == imaging::ScanOrder::raster ? "raster" : "wavefront"; }

imaging::ScanOrder parse_order(const std::string& s) {
  if (s == "raster") return imaging::ScanOrder::raster;
  if (s == "wavefront") return imaging::ScanOrder::wavefront;
  throw ConfigError("config key 'policy.order': expected raster or wavefront, got '" + s + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

template <typename F>
void as_config_error(F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (side < 32) throw ConfigError("phantom.side must be at least 32");
  if (!(activity_mbq > 0.0) || !(vd_liters > 0.0)) {
    throw ConfigError("if.activity_mbq and if.vd_liters must be positive");
  }
  if (!(if_noise >= 0.0) || !std::isfinite(if_noise)) throw ConfigError("if.noise must be non-negative");
  if (frames.empty()) throw ConfigError("grid.frames must list at least one block");
  for (const auto& [count, duration] : frames) {
    if (count < 1 || !(duration > 0.0)) throw ConfigError("grid.frames blocks need positive counts and durations");
  }
  if (replicates < 0 || replicates > 999) throw ConfigError("noise.replicates must be in 0..999");
  if (smoothing_window < 1 || smoothing_window % 2 == 0) throw ConfigError("smoothing.window must be odd");
  if (!(smoothing_sigma > 0.0)) throw ConfigError("smoothing.sigma must be positive");
  if (out_dir.empty()) throw ConfigError("run.out must not be empty");
  as_config_error([&] {
    if_shape.validate();
    noise.validate();
    tr.validate();
    lm.validate();
    policy.validate();
    (void)grid();
  });
  std::size_t n = 0;
  for (const auto& f : frames) n += static_cast<std::size_t>(f.first);
  if (n < 4) throw ConfigError("grid.frames must give at least four frames");
}

Settings to_settings(const ExperimentConfig& c) {
  Settings s;
  s["phantom.side"] = std::to_string(c.side);
  s["phantom.labels"] = c.label_file;
  s["if.activity_mbq"] = format_double(c.activity_mbq);
  s["if.vd_liters"] = format_double(c.vd_liters);
  s["if.t_peak_min"] = format_double(c.if_shape.t_peak_min);
  s["if.fractions"] = join(c.if_shape.fractions);
  s["if.rates"] = join(c.if_shape.rates);
  s["if.noise"] = format_double(c.if_noise);
  s["grid.frames"] = frames_text(c.frames);
  s["noise.counts_per_max_bin"] = format_double(c.noise.counts_per_max_bin);
  s["noise.angles"] = std::to_string(c.noise.angles);
  s["noise.window"] = window_name(c.noise.window);
  s["noise.replicates"] = std::to_string(c.replicates);
  s["run.seed"] = std::to_string(c.seed);
  s["run.out"] = c.out_dir;
  s["smoothing.enabled"] = bool_text(c.smoothing);
  s["smoothing.sigma"] = format_double(c.smoothing_sigma);
  s["smoothing.window"] = std::to_string(c.smoothing_window);
  s["solver.name"] = std::string(imaging::to_string(c.solver));
  s.merge(optim::to_settings(c.tr, "tr"));
  s.merge(optim::to_settings(c.lm, "lm"));
  const auto& p = c.policy;
  s["policy.prior_low"] = join(p.prior_low);
  s["policy.prior_high"] = join(p.prior_high);
  s["policy.neighbor_init"] = bool_text(p.neighbor_init);
  s["policy.tau2_boundary"] = format_double(p.tau2_boundary);
  s["policy.tau2_inner"] = format_double(p.tau2_inner);
  s["policy.boundary_cv"] = format_double(p.boundary_cv);
  s["policy.plateau"] = format_double(p.plateau);
  s["policy.order"] = order_name(p.order);
  s["policy.frame_sigma"] = p.frame_sigma ? format_double(*p.frame_sigma) : "estimate";
  return s;
}

ExperimentConfig config_from_settings(const Settings& s) {
  static const Settings known = to_settings(ExperimentConfig{});
  for (const auto& [key, value] : s) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  ExperimentConfig c;
  c.side = static_cast<int>(get_int(s, "phantom.side", c.side));
  c.label_file = get_string(s, "phantom.labels", c.label_file);
  c.activity_mbq = get_double(s, "if.activity_mbq", c.activity_mbq);
  c.vd_liters = get_double(s, "if.vd_liters", c.vd_liters);
  c.if_shape.t_peak_min = get_double(s, "if.t_peak_min", c.if_shape.t_peak_min);
  c.if_shape.fractions = get_list(s, "if.fractions", c.if_shape.fractions);
  c.if_shape.rates = get_list(s, "if.rates", c.if_shape.rates);
  c.if_noise = get_double(s, "if.noise", c.if_noise);
  if (const auto it = s.find("grid.frames"); it != s.end()) c.frames = parse_frames(it->first, it->second);
  c.noise.counts_per_max_bin = get_double(s, "noise.counts_per_max_bin", c.noise.counts_per_max_bin);
  c.noise.angles = static_cast<int>(get_int(s, "noise.angles", c.noise.angles));
  c.noise.window = parse_window(get_string(s, "noise.window", window_name(c.noise.window)));
  c.replicates = static_cast<int>(get_int(s, "noise.replicates", c.replicates));
  c.seed = get_u64(s, "run.seed", c.seed);
  c.out_dir = get_string(s, "run.out", c.out_dir);
  c.smoothing = get_bool(s, "smoothing.enabled", c.smoothing);
  c.smoothing_sigma = get_double(s, "smoothing.sigma", c.smoothing_sigma);
  c.smoothing_window = static_cast<int>(get_int(s, "smoothing.window", c.smoothing_window));
  const std::string solver = get_string(s, "solver.name", std::string(imaging::to_string(c.solver)));
  const auto parsed = imaging::parse_solver(solver);
  if (!parsed) throw ConfigError("config key 'solver.name': expected reg-as-tr or projected-lm, got '" + solver + "'");
  c.solver = *parsed;
  optim::apply_settings(c.tr, s, "tr");
  optim::apply_settings(c.lm, s, "lm");
  auto& p = c.policy;
  const auto low = get_list<4>(s, "policy.prior_low", {p.prior_low[0], p.prior_low[1], p.prior_low[2], p.prior_low[3]});
  const auto high =
      get_list<4>(s, "policy.prior_high", {p.prior_high[0], p.prior_high[1], p.prior_high[2], p.prior_high[3]});
  p.prior_low = Eigen::Vector4d(low[0], low[1], low[2], low[3]);
  p.prior_high = Eigen::Vector4d(high[0], high[1], high[2], high[3]);
  p.neighbor_init = get_bool(s, "policy.neighbor_init", p.neighbor_init);
  p.tau2_boundary = get_double(s, "policy.tau2_boundary", p.tau2_boundary);
  p.tau2_inner = get_double(s, "policy.tau2_inner", p.tau2_inner);
  p.boundary_cv = get_double(s, "policy.boundary_cv", p.boundary_cv);
  p.plateau = get_double(s, "policy.plateau", p.plateau);
  p.order = parse_order(get_string(s, "policy.order", order_name(p.order)));
  const std::string sigma = get_string(s, "policy.frame_sigma", "estimate");
  if (sigma == "estimate") {
    p.frame_sigma.reset();
  } else {
    p.frame_sigma = parse_double("policy.frame_sigma", sigma);
  }
  return c;
}

ExperimentConfig read_config(const fs::path& path) { return config_from_settings(read_settings_file(path.string())); }

void write_config(const fs::path& path, const ExperimentConfig& c) {
  std::ostringstream os;
  os << "# kinmap experiment configuration\n";
  write_settings(os, to_settings(c));
  io::write_text(path, os.str());
}

// ---------------------------------------------------------------------------
// Datasets

namespace {

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw io::IoError("'" + path.string() + "': " + e.what());
  }
}

std::vector<double> as_doubles(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

std::vector<double> if_array(const kinetics::InputFunction& f) {
  std::vector<double> out = f.times();
  out.insert(out.end(), f.values().begin(), f.values().end());
  return out;
}

kinetics::InputFunction read_if(const fs::path& path) {
  const auto raw = io::read_f32(path);
  if (raw.size() < 4 || raw.size() % 2 != 0) throw io::IoError("'" + path.string() + "': malformed input function");
  const std::size_t n = raw.size() / 2;
  try {
    return {std::vector<double>(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(n)),
            std::vector<double>(raw.begin() + static_cast<std::ptrdiff_t>(n), raw.end())};
  } catch (const std::invalid_argument& e) {
    throw io::IoError("'" + path.string() + "': " + e.what());
  }
}

json common_header(const ExperimentConfig& c, const phantom::DynamicImage& img, const std::string& kind) {
  json h;
  h["format"] = "kinmap-dataset";
  h["version"] = 1;
  h["kind"] = kind;
  h["side"] = img.side;
  h["frames"] = img.frames();
  h["frame_boundaries_s"] = img.grid.boundaries_s();
  h["master_seed"] = c.seed;
  h["input_function"] = {{"activity_mbq", c.activity_mbq},
                         {"vd_liters", c.vd_liters},
                         {"t_peak_min", c.if_shape.t_peak_min},
                         {"fractions", c.if_shape.fractions},
                         {"rates_per_min", c.if_shape.rates}};
  h["provenance"] = img.provenance;
  return h;
}

phantom::LabelImage load_labels(const ExperimentConfig& c) {
  if (c.label_file.empty()) return phantom::make_phantom(c.side);
  phantom::LabelImage labels;
  try {
    labels = phantom::read_label_pgm(c.label_file);
  } catch (const std::runtime_error& e) {
    throw io::IoError(e.what());
  }
  if (labels.side != c.side) throw ConfigError("phantom.labels: image side differs from phantom.side");
  return labels;
}

}  // namespace

std::string replicate_name(int replicate) {
  std::ostringstream os;
  os << "replicate_" << std::setw(3) << std::setfill('0') << replicate;
  return os.str();
}

void cmd_simulate(const ExperimentConfig& c, int threads) {
  c.validate();
  const fs::path root = c.out_dir;
  io::ensure_directory(root);
  write_config(root / "config.txt", c);

  phantom::GroundTruth gt;
  gt.labels = load_labels(c);
  const auto grid = c.grid();
  const auto if_times = phantom::default_if_times(grid);
  const auto input = phantom::input_function(c.activity_mbq, c.vd_liters, c.if_shape, if_times);
  auto clean = phantom::simulate_dynamic(gt, input, grid);
  clean.provenance["generator"] = "simulate_dynamic";

  const fs::path ref = root / "reference";
  io::ensure_directory(ref);
  {
    json h = common_header(c, clean, "reference");
    h["arrays"] = {{"labels.f32", {c.side, c.side}},
                   {"vmap.f32", {c.side, c.side}},
                   {"truth.f32", {4, c.side, c.side}},
                   {"if.f32", {2, input.times().size()}},
                   {"dynamic.f32", {clean.frames(), c.side, c.side}}};
    h["table"] = json::array();
    for (const auto& k : gt.regions) h["table"].push_back({k.k1, k.k2, k.k3, k.k4, k.V});
    write_json(ref / "header.json", h);
    try {
      phantom::write_label_pgm((ref / "labels.pgm").string(), gt.labels);
    } catch (const std::runtime_error& e) {
      throw io::IoError(e.what());
    }
    io::write_f32(ref / "labels.f32", as_doubles(gt.labels.labels));
    io::write_f32(ref / "vmap.f32", clean.vmap);
    std::vector<double> truth;
    for (const auto& plane : gt.rate_maps()) truth.insert(truth.end(), plane.begin(), plane.end());
    io::write_f32(ref / "truth.f32", truth);
    io::write_f32(ref / "if.f32", if_array(input));
    io::write_f32(ref / "dynamic.f32", clean.data);
  }

  for (int r = 0; r < c.replicates; ++r) {
    const auto rep = static_cast<std::uint64_t>(r);
    auto noisy = phantom::project_and_reconstruct(clean, c.noise, c.seed, rep, threads);
    const std::uint64_t if_seed = derive_seed(c.seed, Stream::input_function, rep);
    const auto fit_input = c.if_noise > 0.0 ? phantom::perturb_if(input, c.if_noise, if_seed) : input;
    noisy.image.provenance["generator"] = "radon+poisson+fbp";

    const fs::path dir = root / replicate_name(r);
    io::ensure_directory(dir);
    json h = common_header(c, noisy.image, "replicate");
    h["replicate"] = r;
    h["noise"] = {{"counts_per_max_bin", c.noise.counts_per_max_bin},
                  {"angles", c.noise.angles},
                  {"window", window_name(c.noise.window)},
                  {"clamped_bins", noisy.clamped},
                  {"seed_rule", "derive_seed(master, poisson, replicate, frame)"}};
    h["input_function"]["noise_c"] = c.if_noise;
    h["input_function"]["perturbation_seed"] = if_seed;
    const int bins = noisy.sinograms.empty() ? 0 : noisy.sinograms.front().bins;
    h["arrays"] = {{"labels.f32", {c.side, c.side}},
                   {"vmap.f32", {c.side, c.side}},
                   {"if.f32", {2, fit_input.times().size()}},
                   {"if_true.f32", {2, input.times().size()}},
                   {"dynamic.f32", {noisy.image.frames(), c.side, c.side}},
                   {"sinogram.f32", {noisy.sinograms.size(), static_cast<std::size_t>(c.noise.angles), bins}}};
    write_json(dir / "header.json", h);
    io::write_f32(dir / "labels.f32", as_doubles(gt.labels.labels));
    io::write_f32(dir / "vmap.f32", clean.vmap);
    io::write_f32(dir / "if.f32", if_array(fit_input));
    io::write_f32(dir / "if_true.f32", if_array(input));
    io::write_f32(dir / "dynamic.f32", noisy.image.data);
    std::vector<double> sino;
    for (const auto& s : noisy.sinograms) sino.insert(sino.end(), s.data.begin(), s.data.end());
    io::write_f32(dir / "sinogram.f32", sino);
  }
}

std::vector<fs::path> dataset_members(const fs::path& root) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(root, ec)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind("replicate_", 0) == 0) out.push_back(e.path());
  }
  if (ec) throw io::IoError("cannot list dataset '" + root.string() + "'");
  std::sort(out.begin(), out.end());
  if (out.empty()) {
    if (!fs::is_directory(root / "reference")) throw io::IoError("'" + root.string() + "' is not a dataset");
    out.push_back(root / "reference");
  }
  return out;
}

Dataset read_dataset(const fs::path& dir) {
  const json h = read_json(dir / "header.json");
  Dataset d;
  d.name = dir.filename().string();
  try {
    const int side = h.at("side").get<int>();
    auto& img = d.image;
    img.side = side;
    img.grid = kinetics::TimeGrid(h.at("frame_boundaries_s").get<std::vector<double>>());
    img.provenance = h.at("provenance").get<std::map<std::string, std::string>>();
    const std::size_t pixels = img.pixels();
    const auto labels = io::read_f32(dir / "labels.f32", pixels);
    img.labels.side = side;
    img.labels.labels.resize(pixels);
    for (std::size_t i = 0; i < pixels; ++i) img.labels.labels[i] = static_cast<std::uint8_t>(labels[i]);
    img.vmap = io::read_f32(dir / "vmap.f32", pixels);
    img.data = io::read_f32(dir / "dynamic.f32", pixels * img.frames());
  } catch (const json::exception& e) {
    throw io::IoError("'" + (dir / "header.json").string() + "': " + e.what());
  } catch (const std::invalid_argument& e) {
    throw io::IoError("'" + dir.string() + "': " + e.what());
  }
  d.input = read_if(dir / "if.f32");
  return d;
}

// ---------------------------------------------------------------------------
// Fitting

fs::path default_maps_dir(const fs::path& dataset, imaging::Solver solver) {
  return dataset / ("maps-" + std::string(imaging::to_string(solver)));
}

namespace {

struct MemberResult {
  imaging::FitReport report;
  double wall_seconds = 0.0;
};

void write_maps(const fs::path& dir, const imaging::ParametricMaps& m, const json& extra) {
  io::ensure_directory(dir);
  std::vector<double> k;
  for (const auto& plane : m.k) k.insert(k.end(), plane.begin(), plane.end());
  io::write_f32(dir / "k.f32", k);
  io::write_f32(dir / "stop.f32", as_doubles(m.stop));
  io::write_f32(dir / "iterations.f32", std::vector<double>(m.iterations.begin(), m.iterations.end()));
  io::write_f32(dir / "infilled.f32", as_doubles(m.infilled));
  json h = extra;
  h["format"] = "kinmap-maps";
  h["version"] = 1;
  h["side"] = m.side;
  h["arrays"] = {{"k.f32", {4, m.side, m.side}},
                 {"stop.f32", {m.side, m.side}},
                 {"iterations.f32", {m.side, m.side}},
                 {"infilled.f32", {m.side, m.side}}};
  write_json(dir / "header.json", h);
}

json fit_summary(const imaging::FitReport& rep) {
  const auto& m = rep.maps;
  std::map<std::string, std::size_t> reasons;
  std::vector<int> iters;
  for (std::size_t p = 0; p < m.pixels(); ++p) {
    const auto why = imaging::stop_from_code(m.stop[p]);
    if (!why) continue;
    ++reasons[std::string(optim::to_string(*why))];
    iters.push_back(m.iterations[p]);
  }
  json j;
  j["fitted"] = rep.fitted;
  j["stalled"] = rep.stalled;
  j["stop_reasons"] = reasons;
  if (!iters.empty()) {
    std::sort(iters.begin(), iters.end());
    double sum = 0.0;
    for (int v : iters) sum += v;
    j["iterations"] = {{"mean", sum / static_cast<double>(iters.size())},
                       {"median", iters[iters.size() / 2]},
                       {"max", iters.back()}};
  }
  return j;
}

}  // namespace

FitRunSummary cmd_fit(const fs::path& dataset, const ExperimentConfig& c, const fs::path& maps_dir, int threads) {
  c.validate();
  const auto members = dataset_members(dataset);
  io::ensure_directory(maps_dir);
  write_config(maps_dir / "config.txt", c);

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(members.size())));
  const int inner = std::max(1, threads / workers);
  std::vector<MemberResult> results(members.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < members.size(); i = next++) {
      try {
        const auto t0 = std::chrono::steady_clock::now();
        Dataset d = read_dataset(members[i]);
        const bool reconstructed = d.name != "reference";
        if (reconstructed && c.smoothing) {
          d.image = imaging::deblur_gaussian(d.image, c.smoothing_sigma, c.smoothing_window);
        }
        imaging::FitOptions opt{c.solver, c.tr, c.lm, c.policy, inner};
        const std::uint64_t seed = derive_seed(c.seed, Stream::fit, i);
        results[i].report = imaging::fit_image(d.image, d.input, d.image.vmap, opt, seed);
        const auto& rep = results[i].report;
        json extra;
        extra["solver"] = std::string(imaging::to_string(c.solver));
        extra["member"] = d.name;
        extra["fit_seed"] = seed;
        extra["smoothed"] = reconstructed && c.smoothing;
        extra["summary"] = fit_summary(rep);
        write_maps(maps_dir / d.name, rep.maps, extra);
        results[i].wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  FitRunSummary summary;
  std::ostringstream timing;
  timing << "member pixels solver_seconds mean_seconds_per_pixel wall_seconds\n";
  for (std::size_t i = 0; i < members.size(); ++i) {
    const auto& rep = results[i].report;
    summary.fitted += rep.fitted;
    summary.stalled += rep.stalled;
    if (rep.fitted > 0) {
      summary.worst_stalled_fraction = std::max(
          summary.worst_stalled_fraction, static_cast<double>(rep.stalled) / static_cast<double>(rep.fitted));
    }
    const double per_pixel = rep.fitted > 0 ? rep.solver_seconds / static_cast<double>(rep.fitted) : 0.0;
    timing << members[i].filename().string() << ' ' << rep.fitted << ' ' << rep.solver_seconds << ' ' << per_pixel
           << ' ' << results[i].wall_seconds << '\n';
  }
  io::write_text(maps_dir / "timing.txt", timing.str());
  return summary;
}

imaging::ParametricMaps read_maps(const fs::path& dir) {
  const json h = read_json(dir / "header.json");
  imaging::ParametricMaps m;
  try {
    m.side = h.at("side").get<int>();
  } catch (const json::exception& e) {
    throw io::IoError("'" + (dir / "header.json").string() + "': " + e.what());
  }
  const std::size_t n = m.pixels();
  if (fs::exists(dir / "truth.f32")) {
    // Reference directory: rebuild the truth from labels and the exact table
    // rather than from the float32 copy.
    const auto labels = io::read_f32(dir / "labels.f32", n);
    std::vector<std::vector<double>> table;
    try {
      table = h.at("table").get<std::vector<std::vector<double>>>();
    } catch (const json::exception& e) {
      throw io::IoError("'" + (dir / "header.json").string() + "': " + e.what());
    }
    for (auto& plane : m.k) plane.assign(n, 0.0);
    m.stop.assign(n, 0);
    for (std::size_t p = 0; p < n; ++p) {
      const auto label = static_cast<std::size_t>(labels[p]);
      if (label == 0) continue;
      if (label > table.size() || table[label - 1].size() < 4) throw io::IoError("'" + dir.string() + "': bad table");
      for (std::size_t i = 0; i < 4; ++i) m.k[i][p] = table[label - 1][i];
      m.stop[p] = imaging::stop_code(optim::StopReason::stationary);
    }
    m.iterations.assign(n, 0);
    m.infilled.assign(n, 0);
    return m;
  }
  const auto k = io::read_f32(dir / "k.f32", 4 * n);
  for (std::size_t i = 0; i < 4; ++i) {
    m.k[i].assign(k.begin() + static_cast<std::ptrdiff_t>(i * n), k.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  }
  const auto stop = io::read_f32(dir / "stop.f32", n);
  const auto iters = io::read_f32(dir / "iterations.f32", n);
  const auto infilled = io::read_f32(dir / "infilled.f32", n);
  m.stop.assign(stop.begin(), stop.end());
  m.iterations.assign(iters.begin(), iters.end());
  m.infilled.assign(infilled.begin(), infilled.end());
  return m;
}

namespace {

bool holds_maps(const fs::path& dir) {
  return fs::exists(dir / "header.json") && (fs::exists(dir / "k.f32") || fs::exists(dir / "truth.f32"));
}

std::vector<fs::path> map_members(const fs::path& maps_dir) {
  if (holds_maps(maps_dir)) return {maps_dir};
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(maps_dir, ec)) {
    if (e.is_directory() && holds_maps(e.path())) out.push_back(e.path());
  }
  if (ec || out.empty()) throw io::IoError("'" + maps_dir.string() + "' holds no parametric maps");
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<imaging::ParametricMaps> read_maps_tree(const fs::path& maps_dir) {
  std::vector<imaging::ParametricMaps> out;
  for (const auto& d : map_members(maps_dir)) out.push_back(read_maps(d));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::string method_name(const fs::path& maps_dir) {
  auto name = maps_dir.lexically_normal().filename().string();
  if (name.empty()) name = maps_dir.lexically_normal().parent_path().filename().string();
  if (name == "reference") return "truth";
  if (name.rfind("maps-", 0) == 0) return name.substr(5);
  return name;
}

Evaluation evaluate(const fs::path& dataset, const std::vector<fs::path>& maps_dirs) {
  const fs::path ref = dataset / "reference";
  const auto truth = read_maps(ref);
  const auto labels_raw = io::read_f32(ref / "labels.f32", truth.pixels());
  phantom::LabelImage labels;
  labels.side = truth.side;
  for (double v : labels_raw) labels.labels.push_back(static_cast<std::uint8_t>(v));
  const json header = read_json(ref / "header.json");
  std::array<Eigen::Vector4d, 4> table;
  try {
    for (std::size_t r = 0; r < 4; ++r) {
      const auto row = header.at("table").at(r).get<std::vector<double>>();
      table[r] = Eigen::Vector4d(row.at(0), row.at(1), row.at(2), row.at(3));
    }
  } catch (const std::exception& e) {
    throw io::IoError("'" + (ref / "header.json").string() + "': " + e.what());
  }

  Evaluation ev;
  for (const auto& dir : maps_dirs) {
    const std::string method = method_name(dir);
    const auto maps = read_maps_tree(dir);
    for (const auto& m : maps) {
      if (m.side != labels.side) throw io::IoError("'" + dir.string() + "': map size differs from the dataset");
    }
    for (const auto& s : imaging::region_stats(maps, labels)) {
      EvaluationRow row{method, s, table[static_cast<std::size_t>(s.region - 1)][s.parameter], 0.0};
      if (s.present) row.rel_error = std::abs(s.mean - row.truth) / row.truth;
      ev.rows.push_back(row);
    }
    for (int i = 0; i < 4; ++i) {
      const auto pi = static_cast<std::size_t>(i);
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& m : maps) {
        for (std::size_t p = 0; p < m.pixels(); ++p) {
          if (labels.labels[p] == 0 || m.stop[p] == 0 || m.infilled[p]) continue;
          const double d = m.k[pi][p] - truth.k[pi][p];
          sum += d * d;
          ++n;
        }
      }
      ev.rmse.push_back({method, i, n > 0 ? std::sqrt(sum / static_cast<double>(n)) : 0.0, n});
    }
  }
  return ev;
}

Evaluation cmd_evaluate(const fs::path& dataset, const std::vector<fs::path>& maps_dirs, const fs::path& out_dir) {
  const Evaluation ev = evaluate(dataset, maps_dirs);
  io::ensure_directory(out_dir);
  std::ostringstream csv, rmse, report;
  csv << "method,region,parameter,mean,std,n,truth,rel_error\n";
  report << "method      region  param         mean          std      n        truth   rel_error\n";
  for (const auto& r : ev.rows) {
    const auto& s = r.stat;
    const std::string param = "k" + std::to_string(s.parameter + 1);
    csv << r.method << ',' << s.region << ',' << param << ',';
    if (s.present) {
      csv << format_double(s.mean) << ',' << format_double(s.std) << ',' << s.n << ',' << format_double(r.truth)
          << ',' << format_double(r.rel_error) << '\n';
    } else {
      csv << ",,0," << format_double(r.truth) << ",\n";
    }
    report << std::left << std::setw(12) << r.method << std::right << std::setw(6) << s.region << std::setw(7)
           << param;
    if (s.present) {
      report << std::scientific << std::setprecision(4) << std::setw(13) << s.mean << std::setw(13) << s.std
             << std::setw(7) << s.n << std::setw(13) << r.truth << std::fixed << std::setprecision(2)
             << std::setw(11) << 100.0 * r.rel_error << "%\n";
    } else {
      report << "       absent\n";
    }
    report << std::defaultfloat;
  }
  rmse << "method,parameter,rmse,n\n";
  report << "\npooled RMSE over fitted foreground pixels\n";
  for (const auto& r : ev.rmse) {
    rmse << r.method << ",k" << r.parameter + 1 << ',' << format_double(r.rmse) << ',' << r.n << '\n';
    report << std::left << std::setw(12) << r.method << std::right << "  k" << r.parameter + 1 << std::scientific
           << std::setprecision(4) << std::setw(13) << r.rmse << std::defaultfloat << '\n';
  }
  io::write_text(out_dir / "evaluation.csv", csv.str());
  io::write_text(out_dir / "rmse.csv", rmse.str());
  io::write_text(out_dir / "report.txt", report.str());
  return ev;
}

// ---------------------------------------------------------------------------
// Rendering

std::pair<double, double> parameter_scale(int parameter) {
  double hi = 0.0;
  for (const auto& k : phantom::reference_kinetics()) hi = std::max(hi, k.rates()[parameter]);
  return {0.0, 2.0 * hi};
}

namespace {

json render_maps(const std::vector<imaging::ParametricMaps>& maps, const fs::path& out_dir) {
  json scale;
  const int side = maps.front().side;
  const std::size_t n = maps.front().pixels();
  for (int i = 0; i < 4; ++i) {
    std::vector<double> mean(n, 0.0);
    for (const auto& m : maps) {
      for (std::size_t p = 0; p < n; ++p) mean[p] += m.k[static_cast<std::size_t>(i)][p];
    }
    for (double& v : mean) v /= static_cast<double>(maps.size());
    const auto [lo, hi] = parameter_scale(i);
    const std::string name = "k" + std::to_string(i + 1);
    io::write_gray_pgm(out_dir / (name + ".pgm"), side, io::to_gray(mean, lo, hi));
    scale[name] = {{"min", lo}, {"max", hi}, {"unit", "1/min"}, {"members", maps.size()}};
  }
  return scale;
}

json render_frame(const fs::path& member, const fs::path& out_dir, int frame) {
  const Dataset d = read_dataset(member);
  const auto frames = static_cast<int>(d.image.frames());
  const int f = frame < 0 ? frames - 1 : frame;
  if (f >= frames) throw io::IoError("frame " + std::to_string(frame) + " out of range");
  const auto values = d.image.frame(static_cast<std::size_t>(f));
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  std::ostringstream name;
  name << "frame_" << std::setw(2) << std::setfill('0') << f;
  io::write_gray_pgm(out_dir / (name.str() + ".pgm"), d.image.side, io::to_gray(values, 0.0, hi));
  return {{"min", 0.0}, {"max", hi}, {"unit", "kBq/mL"}, {"frame", f}, {"source", d.name}};
}

}  // namespace

void cmd_render(const fs::path& input, const fs::path& out_dir, int frame) {
  io::ensure_directory(out_dir);
  json scale;
  const bool frames_only = fs::exists(input / "dynamic.f32") && !fs::exists(input / "truth.f32");
  if (frames_only) {
    scale["frame"] = render_frame(input, out_dir, frame);
  } else {
    scale = render_maps(read_maps_tree(input), out_dir);
    if (fs::exists(input / "dynamic.f32")) scale["frame"] = render_frame(input, out_dir, frame);
  }
  write_json(out_dir / "scale.json", scale);
}

}  // namespace kinmap::experiment
