// equireg: synthetic-experiment CLI for the equivariant registration library.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "equireg/config.hpp"
#include "equireg/equiv.hpp"
#include "equireg/gridio.hpp"

namespace fs = std::filesystem;
using namespace equireg;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> overrides;
};

FlatConfig resolve_config(const GlobalOpts& g) {
  FlatConfig cfg;
  if (!g.config_path.empty()) cfg = FlatConfig::from_file(g.config_path);
  for (const std::string& kv : g.overrides) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw DataError("--set expects key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed_given) {
    cfg.set("data.seed", std::to_string(g.seed));
    cfg.set("train.seed", std::to_string(g.seed));
  }
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError(path + ": cannot write");
  f << text;
}

MultiStepAlgorithm load_algorithm_from_checkpoint(const std::string& ckpt_dir,
                                                  ExperimentConfig* out_cfg = nullptr) {
  FlatConfig flat = FlatConfig::from_file(ckpt_dir + "/config.txt");
  ExperimentConfig e = experiment_config(flat);
  if (out_cfg) *out_cfg = e;
  MultiStepAlgorithm alg =
      build_algorithm(e.algorithm, e.data.resolution, e.xi, e.psi, e.schedule.seed);
  load_checkpoint(ckpt_dir, alg.all_params());
  return alg;
}

std::vector<const Param*> as_const(const std::vector<Param*>& p) {
  return std::vector<const Param*>(p.begin(), p.end());
}

GradGrid sampled_displacement(const Transform& t, const std::vector<int>& spatial) {
  GradGrid pts = coord_grid(spatial);
  return sub(t(pts), pts);
}

int cmd_gen_data(const GlobalOpts& g) {
  ExperimentConfig e = experiment_config(resolve_config(g));
  Dataset ds = generate_dataset(e.data);
  fs::create_directories(g.out_dir);
  save_dataset(g.out_dir, ds);
  std::printf("wrote %zu train / %zu test pairs (%s, %dpx) to %s\n", ds.train.size(),
              ds.test.size(), to_string(ds.cfg.variant).c_str(), ds.cfg.resolution,
              g.out_dir.c_str());
  return 0;
}

int cmd_train(const GlobalOpts& g, const std::string& data_dir) {
  ExperimentConfig e = experiment_config(resolve_config(g));
  Dataset ds = load_dataset(data_dir);
  e.data = ds.cfg;
  MultiStepAlgorithm alg =
      build_algorithm(e.algorithm, ds.cfg.resolution, e.xi, e.psi, e.schedule.seed);
  TrainResult res = train_algorithm(alg, ds.train, e.schedule, [&](int step, const LossRow& row) {
    std::printf("step %5d  sim %.4f/%.4f  reg %.4f  total %.4f\n", step, row.sim_fwd,
                row.sim_bwd, row.reg, row.total);
    std::fflush(stdout);
  });
  fs::create_directories(g.out_dir);
  write_text(g.out_dir + "/loss.csv", loss_log_csv(res.log));
  SvgSeries total{"total", {}, {}};
  for (const LossRow& r : res.log) {
    total.x.push_back(r.step);
    total.y.push_back(r.total);
  }
  write_svg_plot(g.out_dir + "/loss.svg", "training loss", {total});
  if (res.diverged) {
    std::fprintf(stderr, "training diverged at step %d (non-finite loss)\n", res.diverged_step);
    return 3;
  }
  std::string ckpt = g.out_dir + "/ckpt";
  save_checkpoint(ckpt, as_const(alg.all_params()));
  write_text(ckpt + "/config.txt", to_flat(e).serialize());
  std::printf("checkpoint written to %s\n", ckpt.c_str());
  return 0;
}

int cmd_register(const GlobalOpts& g, const std::string& moving_path,
                 const std::string& fixed_path, const std::string& ckpt,
                 const std::string& out_file) {
  Image moving(read_grid(moving_path));
  Image fixed(read_grid(fixed_path));
  MultiStepAlgorithm alg = load_algorithm_from_checkpoint(ckpt);
  Transform t = alg.deployed()->run(nullptr, moving, fixed);
  write_grid(out_file, sampled_displacement(t, fixed.spatial()));
  return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& data_dir, const std::string& split,
             const std::string& ckpt, int io_steps) {
  Dataset ds = load_dataset(data_dir);
  const std::vector<RegPair>& pairs = split == "train" ? ds.train : ds.test;
  ExperimentConfig e;
  MultiStepAlgorithm alg = load_algorithm_from_checkpoint(ckpt, &e);
  DiceSummary dice;
  if (io_steps > 0) {
    LossConfig lc;
    lc.lambda = e.schedule.lambda;
    lc.lncc_window = e.schedule.lncc_window;
    lc.reg = RegularizerKind::GradIcon;
    for (const RegPair& p : pairs) {
      Transform t = instance_optimize(*alg.deployed(), p.moving, p.fixed, io_steps, lc, e.io_lr);
      dice.per_pair.push_back(dice_score(warp(p.moving, t), p.fixed));
    }
    for (double v : dice.per_pair) dice.mean += v;
    if (!dice.per_pair.empty()) dice.mean /= static_cast<double>(dice.per_pair.size());
  } else {
    dice = evaluate_dice(*alg.deployed(), pairs);
  }
  fs::create_directories(g.out_dir);
  write_text(g.out_dir + "/dice.csv", dice_csv(dice));
  std::printf("mean dice (%s, %zu pairs%s): %.4f\n", split.c_str(), dice.per_pair.size(),
              io_steps > 0 ? ", instance-optimized" : "", dice.mean);
  return 0;
}

int cmd_equiv_check(const GlobalOpts& g, const std::string& data_dir, const std::string& cls_s,
                    const std::string& mode_s, const std::string& ckpt, int pair_index,
                    const std::string& magnitudes_s) {
  Dataset ds = load_dataset(data_dir);
  if (pair_index < 0 || static_cast<std::size_t>(pair_index) >= ds.test.size())
    throw DataError("pair index out of range");
  const RegPair& pair = ds.test[static_cast<std::size_t>(pair_index)];

  TransformClass cls = cls_s == "translation" ? TransformClass::Translation
                       : cls_s == "rotation"  ? TransformClass::Rotation
                                              : TransformClass::Scale;
  EquivMode mode = mode_s == "wu" ? EquivMode::WU : EquivMode::UU;

  std::vector<float> mags;
  std::stringstream ss(magnitudes_s);
  std::string tok;
  while (std::getline(ss, tok, ',')) mags.push_back(std::stof(tok));

  ExperimentConfig e;
  MultiStepAlgorithm alg = load_algorithm_from_checkpoint(ckpt, &e);
  std::uint64_t seed = resolve_config(g).get_u64("train.seed", 1);
  EquivReport report =
      measure_equivariance(*alg.deployed(), pair.moving, pair.fixed, cls, mags, mode, seed);
  fs::create_directories(g.out_dir);
  write_text(g.out_dir + "/equiv.csv", report.to_csv());
  SvgSeries mean_s{"mean defect", {}, {}}, max_s{"max defect", {}, {}};
  for (const EquivRow& r : report.rows) {
    mean_s.x.push_back(r.magnitude);
    mean_s.y.push_back(r.mean_defect);
    max_s.x.push_back(r.magnitude);
    max_s.y.push_back(r.max_defect);
  }
  write_svg_plot(g.out_dir + "/equiv.svg", cls_s + " " + mode_s + " defect", {mean_s, max_s});
  std::printf("max defect %.5f domain units (%.2f voxels)\n", report.max_defect(),
              report.max_defect_voxels());
  return 0;
}

int cmd_landscape(const GlobalOpts& g, const std::string& data_dir, const std::string& ckpt,
                  float t_max, int t_steps, int n_pairs) {
  Dataset ds = load_dataset(data_dir);
  MultiStepAlgorithm alg = load_algorithm_from_checkpoint(ckpt);
  std::vector<RegPair> pairs(ds.test.begin(),
                             ds.test.begin() + std::min<std::size_t>(ds.test.size(),
                                                                     static_cast<std::size_t>(n_pairs)));
  std::vector<float> ts;
  for (int i = 0; i < t_steps; ++i)
    ts.push_back(-t_max + 2.0f * t_max * static_cast<float>(i) / (t_steps - 1));
  std::vector<LandscapeRow> rows =
      capture_radius_study(alg.deployed(), pairs, ts, 5);
  fs::create_directories(g.out_dir);
  write_text(g.out_dir + "/landscape.csv", landscape_csv(rows));
  SvgSeries lt{"loss tau", {}, {}}, l2{"loss twostep", {}, {}};
  for (const LandscapeRow& r : rows) {
    lt.x.push_back(r.t);
    lt.y.push_back(r.loss_tau);
    l2.x.push_back(r.t);
    l2.y.push_back(r.loss_two);
  }
  write_svg_plot(g.out_dir + "/landscape.svg", "loss landscape", {lt, l2});
  std::printf("capture radius: tau %.4f, twostep %.4f\n", capture_radius(rows, false),
              capture_radius(rows, true));
  return 0;
}

int cmd_io_refine(const GlobalOpts& g, const std::string& moving_path,
                  const std::string& fixed_path, const std::string& ckpt, int steps,
                  const std::string& out_file) {
  Image moving(read_grid(moving_path));
  Image fixed(read_grid(fixed_path));
  ExperimentConfig e;
  MultiStepAlgorithm alg = load_algorithm_from_checkpoint(ckpt, &e);
  LossConfig lc;
  lc.lambda = e.schedule.lambda;
  lc.lncc_window = e.schedule.lncc_window;
  lc.reg = RegularizerKind::GradIcon;
  std::vector<float> trace;
  Transform t = instance_optimize(*alg.deployed(), moving, fixed,
                                  steps >= 0 ? steps : e.io_steps, lc, e.io_lr, &trace);
  write_grid(out_file, sampled_displacement(t, fixed.spatial()));
  fs::create_directories(g.out_dir);
  std::string csv = "step,objective\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    csv += std::to_string(i) + "," + std::to_string(trace[i]) + "\n";
  write_text(g.out_dir + "/io_trace.csv", csv);
  if (!trace.empty())
    std::printf("objective %.5f -> %.5f in %zu evaluations\n", trace.front(), trace.back(),
                trace.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equivariant multi-step deformable registration experiments"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "flat key = value config file");
  app.add_option("--out", g.out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", g.seed, "seed override (data + training)");
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic retina dataset");

  std::string data_dir;
  auto* train = app.add_subcommand("train", "train a registration algorithm");
  train->add_option("--data", data_dir, "dataset directory")->required();

  std::string moving_path, fixed_path, ckpt, out_file = "transform.grid";
  auto* reg = app.add_subcommand("register", "register two grid images");
  reg->add_option("moving", moving_path, "moving image grid file")->required();
  reg->add_option("fixed", fixed_path, "fixed image grid file")->required();
  reg->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  reg->add_option("--out-grid", out_file, "output displacement grid file");

  std::string split = "test";
  int io_steps_eval = 0;
  auto* eval = app.add_subcommand("eval", "dice evaluation on a dataset split");
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split, "train or test");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--io-steps", io_steps_eval, "instance-optimization steps (0 = off)");

  std::string cls_s = "translation", mode_s = "wu", mags = "0,0.02,0.05,0.08";
  int pair_index = 0;
  auto* equiv = app.add_subcommand("equiv-check", "measure equivariance defects");
  equiv->add_option("--data", data_dir, "dataset directory")->required();
  equiv->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  equiv->add_option("--class", cls_s, "translation | rotation | scale");
  equiv->add_option("--mode", mode_s, "wu | uu");
  equiv->add_option("--pair", pair_index, "test pair index");
  equiv->add_option("--magnitudes", mags, "comma-separated magnitudes");

  float t_max = 0.25f;
  int t_steps = 21, n_pairs = 4;
  auto* land = app.add_subcommand("landscape", "capture-radius loss landscape");
  land->add_option("--data", data_dir, "dataset directory")->required();
  land->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  land->add_option("--t-max", t_max, "sweep half-width");
  land->add_option("--t-steps", t_steps, "sweep sample count");
  land->add_option("--pairs", n_pairs, "pairs to average over");

  int io_steps = -1;
  auto* ior = app.add_subcommand("io-refine", "instance optimization on one pair");
  ior->add_option("moving", moving_path, "moving image grid file")->required();
  ior->add_option("fixed", fixed_path, "fixed image grid file")->required();
  ior->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  ior->add_option("--steps", io_steps, "optimization steps");
  ior->add_option("--out-grid", out_file, "output displacement grid file");

  try {
    app.parse(argc, argv);
    g.seed_given = seed_opt->count() > 0;
    if (gen->parsed()) return cmd_gen_data(g);
    if (train->parsed()) return cmd_train(g, data_dir);
    if (reg->parsed()) return cmd_register(g, moving_path, fixed_path, ckpt, out_file);
    if (eval->parsed()) return cmd_eval(g, data_dir, split, ckpt, io_steps_eval);
    if (equiv->parsed())
      return cmd_equiv_check(g, data_dir, cls_s, mode_s, ckpt, pair_index, mags);
    if (land->parsed()) return cmd_landscape(g, data_dir, ckpt, t_max, t_steps, n_pairs);
    if (ior->parsed()) return cmd_io_refine(g, moving_path, fixed_path, ckpt, io_steps, out_file);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);  // 0 for --help, 1 and usage text otherwise
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
