#pragma once

#include <map>
#include <string>
#include <vector>

#include "equireg/dataset.hpp"
#include "equireg/trainer.hpp"

namespace equireg {

// Flat "key = value" text config; '#' starts a comment. Flags override file
// values through set().
class FlatConfig {
 public:
  FlatConfig() = default;
  static FlatConfig from_file(const std::string& path);

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  double get_num(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  std::string serialize() const;

 private:
  std::map<std::string, std::string> kv_;
};

// Desk-scale experiment knobs resolved from a FlatConfig.
struct ExperimentConfig {
  DatasetConfig data;
  TrainSchedule schedule;
  XiThetaConfig xi;
  DisplacementNetConfig psi;
  std::string algorithm = "carl";  // carl | baseline | xi-only
  int io_steps = 50;
  float io_lr = 1e-4f;
};

ExperimentConfig experiment_config(const FlatConfig& cfg);
// Inverse of experiment_config for checkpoint/config snapshots.
FlatConfig to_flat(const ExperimentConfig& cfg);

// Minimal polyline SVG plot (no dependencies).
struct SvgSeries {
  std::string label;
  std::vector<double> x, y;
};
void write_svg_plot(const std::string& path, const std::string& title,
                    const std::vector<SvgSeries>& series);

}  // namespace equireg
