#include "cli.hpp"
#include "kinmap/experiment.hpp"
#include "kinmap/io.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ex = kinmap::experiment;
namespace io = kinmap::io;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kinmap_exp_" + name);
  fs::remove_all(p);
  return p;
}

// Relative path -> file bytes, optionally skipping files by name.
std::map<std::string, std::string> snapshot(const fs::path& root, const std::string& skip = "timing.txt") {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == skip) continue;
    out[fs::relative(e.path(), root).string()] = io::read_text(e.path());
  }
  return out;
}

int cli(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int rc = kinmap::cli::run(args, out, err);
  if (err_text) *err_text = err.str();
  return rc;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(line);
  while (std::getline(in, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

ex::ExperimentConfig small_config(const fs::path& out, int replicates) {
  ex::ExperimentConfig c;
  c.side = 32;
  c.replicates = replicates;
  c.noise.angles = 45;
  c.out_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("configuration round trip") {
  ex::ExperimentConfig c;
  CHECK(ex::config_from_settings(ex::to_settings(c)) == c);

  c.side = 128;
  c.label_file = "brain.pgm";
  c.activity_mbq = 300.5;
  c.if_shape.t_peak_min = 0.6;
  c.if_shape.fractions = {0.7, 0.2, 0.1};
  c.if_shape.rates = {3.0, 0.25, 0.01};
  c.if_noise = 0.1;
  c.frames = {{10, 6.0}, {5, 60.0}, {11, 300.0}};
  c.noise.counts_per_max_bin = 2.5e5;
  c.noise.angles = 120;
  c.noise.window = kinmap::phantom::Apodization::ramp;
  c.replicates = 10;
  c.seed = 18446744073709551615ULL;
  c.smoothing = false;
  c.smoothing_sigma = 0.7;
  c.smoothing_window = 5;
  c.solver = kinmap::imaging::Solver::projected_lm;
  c.tr.tau = 3.3;
  c.tr.max_iterations = 77;
  c.lm.nu_up = 7.0;
  c.policy.prior_low[1] = 0.001;
  c.policy.neighbor_init = false;
  c.policy.order = kinmap::imaging::ScanOrder::wavefront;
  c.policy.frame_sigma = 0.125;
  c.out_dir = "elsewhere";

  const auto path = fresh_dir("config.txt");
  ex::write_config(path, c);
  const auto back = ex::read_config(path);
  CHECK(back == c);
  CHECK(ex::to_settings(back) == ex::to_settings(c));
  CHECK(back.grid().size() == 26);

  SUBCASE("bad input") {
    using kinmap::ConfigError;
    CHECK_THROWS_AS(ex::config_from_settings({{"solver.nmae", "reg-as-tr"}}), ConfigError);
    CHECK_THROWS_AS(ex::config_from_settings({{"solver.name", "newton"}}), ConfigError);
    CHECK_THROWS_AS(ex::config_from_settings({{"if.fractions", "0.5,0.5"}}), ConfigError);
    CHECK_THROWS_AS(ex::config_from_settings({{"grid.frames", "6-10"}}), ConfigError);
    CHECK_THROWS_AS(ex::config_from_settings({{"phantom.side", "sixty"}}), ConfigError);
    CHECK_THROWS_AS(ex::config_from_settings({{"noise.window", "cosine"}}), ConfigError);
    ex::ExperimentConfig v;
    v.side = 16;
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v = {};
    v.smoothing_window = 4;
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v = {};
    v.if_shape.fractions = {0.5, 0.2, 0.2};
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v = {};
    v.tr.tau = 1.5;  // needs tau > 1/q
    CHECK_THROWS_AS(v.validate(), ConfigError);
  }
}

TEST_CASE("binary arrays and images") {
  const auto dir = fresh_dir("io");
  io::ensure_directory(dir);
  const std::vector<double> v{1.0, -2.5, 0.0, 1e-3, 3.0e7};
  io::write_f32(dir / "a.f32", v);
  const auto bytes = io::read_text(dir / "a.f32");
  REQUIRE(bytes.size() == 20);
  // 1.0f little-endian.
  CHECK(static_cast<unsigned char>(bytes[0]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[2]) == 0x80);
  CHECK(static_cast<unsigned char>(bytes[3]) == 0x3f);
  const auto back = io::read_f32(dir / "a.f32", 5);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(back[i] == static_cast<double>(static_cast<float>(v[i])));
  CHECK_THROWS_AS(io::read_f32(dir / "a.f32", 6), io::IoError);
  CHECK_THROWS_AS(io::read_f32(dir / "missing.f32"), io::IoError);

  const std::vector<double> ramp{-1.0, 0.0, 0.5, 1.0, 2.0, std::nan("")};
  const auto g = io::to_gray(ramp, 0.0, 1.0);
  CHECK(std::vector<int>(g.begin(), g.end()) == std::vector<int>{0, 0, 128, 255, 255, 0});

  io::write_gray_pgm(dir / "g.pgm", 2, std::vector<std::uint8_t>{1, 2, 3, 4});
  CHECK(io::read_text(dir / "g.pgm") == std::string("P5\n2 2\n255\n\x01\x02\x03\x04"));
  CHECK_THROWS_AS(io::write_gray_pgm(dir / "bad.pgm", 3, std::vector<std::uint8_t>{1}), io::IoError);
}

TEST_CASE("simulate") {
  SUBCASE("no replicates writes the reference only") {
    const auto out = fresh_dir("sim0");
    ex::cmd_simulate(small_config(out, 0));
    CHECK(fs::exists(out / "config.txt"));
    CHECK(fs::exists(out / "reference" / "truth.f32"));
    CHECK_FALSE(fs::exists(out / ex::replicate_name(0)));
    const auto members = ex::dataset_members(out);
    REQUIRE(members.size() == 1);
    CHECK(members[0].filename() == "reference");
  }

  SUBCASE("one replicate of the desk-scale phantom") {
    const auto out = fresh_dir("sim1");
    ex::ExperimentConfig c;
    c.replicates = 1;
    c.out_dir = out.string();
    ex::cmd_simulate(c);
    const auto d = ex::read_dataset(out / "replicate_000");
    CHECK(d.image.side == 64);
    CHECK(d.image.frames() == 28);
    CHECK(d.image.grid == kinmap::kinetics::TimeGrid::standard());
    const auto header = io::read_text(out / "replicate_000" / "header.json");
    CHECK(header.find("\"frames\": 28") != std::string::npos);
    CHECK(header.find("\"clamped_bins\"") != std::string::npos);
    CHECK(io::read_f32(out / "replicate_000" / "sinogram.f32").size() == 28u * 90u * 93u);
    CHECK(ex::read_config(out / "config.txt") == c);
  }

  SUBCASE("same configuration gives the same bytes for any thread count") {
    const auto a = fresh_dir("simA"), b = fresh_dir("simB");
    auto ca = small_config(a, 2), cb = small_config(b, 2);
    ca.if_noise = cb.if_noise = 0.1;
    ex::cmd_simulate(ca, 1);
    ex::cmd_simulate(cb, 3);
    auto sa = snapshot(a), sb = snapshot(b);
    // The stored configurations differ only in the output directory.
    sa.erase("config.txt");
    sb.erase("config.txt");
    CHECK(sa == sb);
    // The perturbed input function differs from the true one.
    CHECK(sa.at("replicate_000/if.f32") != sa.at("replicate_000/if_true.f32"));
    CHECK(sa.at("replicate_000/if.f32") != sa.at("replicate_001/if.f32"));
  }

  SUBCASE("labels from a PGM file") {
    const auto out = fresh_dir("simPgm");
    io::ensure_directory(out);
    auto labels = kinmap::phantom::make_phantom(40);
    kinmap::phantom::write_label_pgm((out / "in.pgm").string(), labels);
    auto c = small_config(out / "data", 0);
    c.side = 40;
    c.label_file = (out / "in.pgm").string();
    ex::cmd_simulate(c);
    CHECK(kinmap::phantom::read_label_pgm((out / "data" / "reference" / "labels.pgm").string()) == labels);
    c.side = 48;
    CHECK_THROWS_AS(ex::cmd_simulate(c), kinmap::ConfigError);
  }
}

TEST_CASE("fit, evaluate and render") {
  const auto out = fresh_dir("fit");
  const auto c = small_config(out, 0);
  ex::cmd_simulate(c);

  for (auto solver : {kinmap::imaging::Solver::reg_as_tr, kinmap::imaging::Solver::projected_lm}) {
    auto cs = c;
    cs.solver = solver;
    const auto maps_dir = ex::default_maps_dir(out, solver);
    const auto s = ex::cmd_fit(out, cs, maps_dir);
    const auto labels = kinmap::phantom::make_phantom(32);
    std::size_t foreground = 0;
    for (auto l : labels.labels) foreground += l != 0;
    CHECK(s.fitted == foreground);
    const auto maps = ex::read_maps_tree(maps_dir);
    REQUIRE(maps.size() == 1);
    for (std::size_t p = 0; p < labels.size(); ++p) {
      CHECK((maps[0].stop[p] != 0) == (labels.labels[p] != 0));
      for (const auto& k : maps[0].k) CHECK(k[p] >= 0.0);
    }
    CHECK(fs::exists(maps_dir / "timing.txt"));

    // Rerun into a second directory: identical apart from timing.
    const auto again = fresh_dir("fit_again");
    ex::cmd_fit(out, cs, again, 2);
    CHECK(snapshot(maps_dir) == snapshot(again));
  }
  CHECK(ex::method_name(ex::default_maps_dir(out, kinmap::imaging::Solver::projected_lm)) == "projected-lm");

  SUBCASE("ground truth evaluates to zero error") {
    const auto report = out / "eval_truth";
    const auto ev = ex::cmd_evaluate(out, {out / "reference"}, report);
    REQUIRE(ev.rows.size() == 16);
    for (const auto& r : ev.rows) {
      CHECK(r.method == "truth");
      CHECK(r.rel_error == 0.0);
      CHECK(r.stat.std == 0.0);
    }
    for (const auto& r : ev.rmse) CHECK(r.rmse == 0.0);
  }

  SUBCASE("CSV relative errors recompute from the other columns") {
    const auto report = out / "eval";
    ex::cmd_evaluate(out, {ex::default_maps_dir(out, kinmap::imaging::Solver::reg_as_tr),
                           ex::default_maps_dir(out, kinmap::imaging::Solver::projected_lm)},
                     report);
    std::ifstream in(report / "evaluation.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "method,region,parameter,mean,std,n,truth,rel_error");
    std::map<std::string, int> rows;
    while (std::getline(in, line)) {
      const auto f = split_csv(line);
      REQUIRE(f.size() == 8);
      ++rows[f[0]];
      const double mean = std::stod(f[3]), truth = std::stod(f[6]), rel = std::stod(f[7]);
      CHECK(rel == doctest::Approx(std::abs(mean - truth) / truth).epsilon(1e-14));
    }
    CHECK(rows == std::map<std::string, int>{{"projected-lm", 16}, {"reg-as-tr", 16}});
    CHECK(fs::exists(report / "rmse.csv"));
    CHECK(fs::exists(report / "report.txt"));
  }

  SUBCASE("rendering") {
    const auto img = out / "render_truth";
    ex::cmd_render(out / "reference", img);
    const auto labels = kinmap::phantom::make_phantom(32);
    // Pixels share a grey-level tuple exactly when they share a label.
    std::vector<std::string> planes;
    for (int i = 1; i <= 4; ++i) {
      const auto text = io::read_text(img / ("k" + std::to_string(i) + ".pgm"));
      planes.push_back(text.substr(text.size() - labels.size()));
    }
    std::map<std::array<char, 4>, std::set<int>> classes;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      classes[{planes[0][p], planes[1][p], planes[2][p], planes[3][p]}].insert(labels.labels[p]);
    }
    CHECK(classes.size() == 5);
    for (const auto& [key, ls] : classes) CHECK(ls.size() == 1);
    CHECK(fs::exists(img / "frame_27.pgm"));
    const auto scale = io::read_text(img / "scale.json");
    CHECK(scale.find("\"max\": 0.5") != std::string::npos);  // k2: twice the largest table value

    // A constant map renders as a uniform image.
    const auto flat = out / "flat";
    kinmap::imaging::ParametricMaps m;
    m.side = 32;
    for (auto& k : m.k) k.assign(m.pixels(), 0.04);
    io::ensure_directory(flat);
    std::vector<double> kflat(4 * m.pixels(), 0.04), zeros(m.pixels(), 0.0);
    io::write_f32(flat / "k.f32", kflat);
    io::write_f32(flat / "stop.f32", zeros);
    io::write_f32(flat / "iterations.f32", zeros);
    io::write_f32(flat / "infilled.f32", zeros);
    io::write_text(flat / "header.json", "{\"side\": 32}");
    ex::cmd_render(flat, flat / "img");
    for (int i = 1; i <= 4; ++i) {
      const auto text = io::read_text(flat / "img" / ("k" + std::to_string(i) + ".pgm"));
      const auto pixels = text.substr(text.size() - m.pixels());
      CHECK(pixels.find_first_not_of(pixels[0]) == std::string::npos);
    }
  }
}

TEST_CASE("command-line exit codes") {
  const auto out = fresh_dir("cli");
  std::string err;
  CHECK(cli({"simulate", "--out", out.string(), "--side", "32", "--replicates", "1", "--seed", "9"}) == 0);
  CHECK(ex::read_config(out / "config.txt").seed == 9);
  CHECK(cli({"fit", out.string(), "--threads", "2"}) == 0);
  CHECK(fs::exists(out / "maps-reg-as-tr" / "replicate_000" / "k.f32"));
  CHECK(cli({"fit", out.string(), "--solver", "projected-lm"}) == 0);
  CHECK(cli({"evaluate", out.string()}) == 0);
  CHECK(fs::exists(out / "evaluation" / "evaluation.csv"));
  CHECK(cli({"render", (out / "maps-reg-as-tr").string()}) == 0);
  CHECK(cli({"render", (out / "replicate_000").string(), "--frame", "3"}) == 0);
  CHECK(fs::exists(out / "replicate_000" / "render" / "frame_03.pgm"));
  CHECK(cli({"--help"}) == 0);

  // Configuration problems.
  CHECK(cli({"frobnicate"}) == kinmap::cli::kConfigError);
  CHECK(cli({"simulate", "--out", (out / "x").string(), "--side", "8"}, &err) == kinmap::cli::kConfigError);
  CHECK(err.find("phantom.side") != std::string::npos);
  CHECK(cli({"fit", out.string(), "--solver", "newton"}) == kinmap::cli::kConfigError);
  io::write_text(out / "bad.txt", "solver.bogus = 1\n");
  CHECK(cli({"fit", out.string(), "--config", (out / "bad.txt").string()}) == kinmap::cli::kConfigError);
  CHECK(cli({"fit", out.string(), "--config", (out / "none.txt").string()}) == kinmap::cli::kConfigError);

  // I/O problems.
  CHECK(cli({"fit", (out / "missing").string()}) == kinmap::cli::kIoError);
  CHECK(cli({"evaluate", (out / "missing").string()}) == kinmap::cli::kIoError);
  CHECK(cli({"render", (out / "missing").string()}) == kinmap::cli::kIoError);
  io::write_text(out / "file", "x");
  CHECK(cli({"simulate", "--out", (out / "file" / "sub").string(), "--side", "32"}) == kinmap::cli::kIoError);

  // A solver that can accept almost no step stalls on most pixels.
  io::write_text(out / "stall.txt", "phantom.side = 32\ntr.beta = 0.999\ntr.max_inner = 1\n");
  CHECK(cli({"fit", out.string(), "--config", (out / "stall.txt").string(), "--out", (out / "stall").string()}) ==
        kinmap::cli::kStallEpidemic);
}
