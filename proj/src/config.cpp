#include "equireg/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace equireg {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

FlatConfig FlatConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError(path + ": cannot open config file");
  FlatConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw DataError(path + ":" + std::to_string(lineno) + ": empty key");
    cfg.kv_[key] = value;
  }
  return cfg;
}

std::string FlatConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

double FlatConfig::get_num(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw DataError("config key '" + key + "': not a number: " + it->second);
  }
}

int FlatConfig::get_int(const std::string& key, int fallback) const {
  return static_cast<int>(std::llround(get_num(key, fallback)));
}

std::uint64_t FlatConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return std::stoull(it->second);
  } catch (const std::exception&) {
    throw DataError("config key '" + key + "': not an integer: " + it->second);
  }
}

std::string FlatConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
  return os.str();
}

ExperimentConfig experiment_config(const FlatConfig& cfg) {
  ExperimentConfig e;

  e.data.variant = retina_variant_from_string(cfg.get_str("data.variant", "baseline"));
  e.data.n_train = cfg.get_int("data.n_train", e.data.n_train);
  e.data.n_test = cfg.get_int("data.n_test", e.data.n_test);
  e.data.resolution = cfg.get_int("data.resolution", 96);
  e.data.warp_sigma = static_cast<float>(cfg.get_num("data.warp_sigma", e.data.warp_sigma));
  e.data.warp_amplitude =
      static_cast<float>(cfg.get_num("data.warp_amplitude", e.data.warp_amplitude));
  e.data.shift_fraction =
      static_cast<float>(cfg.get_num("data.shift_fraction", e.data.shift_fraction));
  e.data.scale_factor = static_cast<float>(cfg.get_num("data.scale_factor", e.data.scale_factor));
  e.data.seed = cfg.get_u64("data.seed", e.data.seed);

  e.schedule.warmup_steps = cfg.get_int("train.warmup_steps", 200);
  e.schedule.psi3_step = cfg.get_int("train.psi3_step", 3000);
  e.schedule.total_steps = cfg.get_int("train.total_steps", 6000);
  e.schedule.batch = cfg.get_int("train.batch", 4);
  e.schedule.lr = static_cast<float>(cfg.get_num("train.lr", 1e-4));
  e.schedule.lambda = static_cast<float>(cfg.get_num("train.lambda", 1.5));
  e.schedule.lncc_window = cfg.get_int("train.lncc_window", 5);
  e.schedule.reg_resolution = cfg.get_int("train.reg_resolution", 0);
  e.schedule.seed = cfg.get_u64("train.seed", 1);
  e.schedule.log_every = cfg.get_int("train.log_every", 25);
  e.schedule.threads = cfg.get_int("train.threads", 0);

  e.xi.pad = cfg.get_int("xi.pad", 8);
  e.xi.encoder.width = cfg.get_int("xi.width", 64);
  e.xi.encoder.extra_dilated_block = cfg.get_int("xi.extra_dilated_block", 0) != 0;
  e.xi.encoder.final_gain = static_cast<float>(cfg.get_num("xi.final_gain", 6.0));
  e.xi.logit_scale = static_cast<float>(cfg.get_num("xi.logit_scale", 0.0));
  e.xi.rotation_group = cfg.get_int("xi.rotation_group", 1);

  e.psi.init_scale = static_cast<float>(cfg.get_num("psi.init_scale", 1.0));

  e.algorithm = cfg.get_str("algorithm", "carl");
  e.io_steps = cfg.get_int("io.steps", 50);
  e.io_lr = static_cast<float>(cfg.get_num("io.lr", 1e-4));
  return e;
}

FlatConfig to_flat(const ExperimentConfig& e) {
  FlatConfig c;
  auto num = [&](const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    c.set(k, buf);
  };
  c.set("data.variant", to_string(e.data.variant));
  num("data.n_train", e.data.n_train);
  num("data.n_test", e.data.n_test);
  num("data.resolution", e.data.resolution);
  num("data.warp_sigma", e.data.warp_sigma);
  num("data.warp_amplitude", e.data.warp_amplitude);
  num("data.shift_fraction", e.data.shift_fraction);
  num("data.scale_factor", e.data.scale_factor);
  c.set("data.seed", std::to_string(e.data.seed));
  num("train.warmup_steps", e.schedule.warmup_steps);
  num("train.psi3_step", e.schedule.psi3_step);
  num("train.total_steps", e.schedule.total_steps);
  num("train.batch", e.schedule.batch);
  num("train.lr", e.schedule.lr);
  num("train.lambda", e.schedule.lambda);
  num("train.lncc_window", e.schedule.lncc_window);
  num("train.reg_resolution", e.schedule.reg_resolution);
  c.set("train.seed", std::to_string(e.schedule.seed));
  num("train.log_every", e.schedule.log_every);
  num("train.threads", e.schedule.threads);
  num("xi.pad", e.xi.pad);
  num("xi.width", e.xi.encoder.width);
  num("xi.extra_dilated_block", e.xi.encoder.extra_dilated_block ? 1 : 0);
  num("xi.final_gain", e.xi.encoder.final_gain);
  num("xi.logit_scale", e.xi.logit_scale);
  num("xi.rotation_group", e.xi.rotation_group);
  num("psi.init_scale", e.psi.init_scale);
  c.set("algorithm", e.algorithm);
  num("io.steps", e.io_steps);
  num("io.lr", e.io_lr);
  return c;
}

void write_svg_plot(const std::string& path, const std::string& title,
                    const std::vector<SvgSeries>& series) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  const double w = 640, h = 400, ml = 70, mr = 20, mt = 40, mb = 50;
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto sy = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
  static const char* colors[] = {"#1f6feb", "#d1242f", "#1a7f37", "#8250df"};

  std::ofstream f(path);
  if (!f) throw DataError(path + ": cannot write plot");
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='15'>" << title
    << "</text>\n";
  f << "<rect x='" << ml << "' y='" << mt << "' width='" << w - ml - mr << "' height='"
    << h - mt - mb << "' fill='none' stroke='#888'/>\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.4g", ymin);
  f << "<text x='8' y='" << sy(ymin) << "' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", ymax);
  f << "<text x='8' y='" << sy(ymax) + 10 << "' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", xmin);
  f << "<text x='" << sx(xmin) << "' y='" << h - 28 << "' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", xmax);
  f << "<text x='" << sx(xmax) - 30 << "' y='" << h - 28 << "' font-size='11'>" << buf
    << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const SvgSeries& s = series[si];
    f << "<polyline fill='none' stroke='" << colors[si % 4] << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.x.size(); ++i) f << sx(s.x[i]) << ',' << sy(s.y[i]) << ' ';
    f << "'/>\n";
    f << "<text x='" << w - mr - 150 << "' y='" << mt + 16 + 16 * si << "' font-size='12' fill='"
      << colors[si % 4] << "'>" << s.label << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace equireg
