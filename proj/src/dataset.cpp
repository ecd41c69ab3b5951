#include "equireg/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "equireg/gridio.hpp"
#include "equireg/registration.hpp"

namespace equireg {

std::string to_string(RetinaVariant v) {
  switch (v) {
    case RetinaVariant::Baseline: return "baseline";
    case RetinaVariant::Shift: return "shift";
    case RetinaVariant::ScaleShift: return "scaleshift";
  }
  return "?";
}

RetinaVariant retina_variant_from_string(const std::string& s) {
  if (s == "baseline") return RetinaVariant::Baseline;
  if (s == "shift") return RetinaVariant::Shift;
  if (s == "scaleshift") return RetinaVariant::ScaleShift;
  throw DataError("unknown dataset variant: " + s);
}

namespace {

// Retina-like binary mask: annulus plus radial spokes and a central disc,
// rendered with a ~1.5 voxel soft edge so LNCC sees usable gradients.
struct BaseShape {
  float cx, cy, outer, inner, disc;
  int spokes;
  float spoke_phase, spoke_halfwidth;
};

BaseShape sample_shape(Rng& rng) {
  BaseShape s;
  s.cx = 0.5f + static_cast<float>(rng.uniform(-0.03, 0.03));
  s.cy = 0.5f + static_cast<float>(rng.uniform(-0.03, 0.03));
  s.outer = 0.26f + static_cast<float>(rng.uniform(-0.02, 0.02));
  s.inner = s.outer * (0.70f + static_cast<float>(rng.uniform(-0.05, 0.05)));
  s.disc = s.outer * 0.22f;
  s.spokes = 5 + static_cast<int>(rng.index(5));
  s.spoke_phase = static_cast<float>(rng.uniform(0.0, 6.2831853));
  s.spoke_halfwidth = 0.018f + static_cast<float>(rng.uniform(0.0, 0.012));
  return s;
}

Image render_shape(const BaseShape& s, int n) {
  GradGrid g({1, n, n});
  float edge = 1.5f / static_cast<float>(n);
  auto soft = [edge](float signed_dist) {
    // 1 inside (signed_dist < 0), 0 outside, linear ramp across the edge
    float t = 0.5f - signed_dist / (2.0f * edge);
    return std::clamp(t, 0.0f, 1.0f);
  };
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      float px = (x + 0.5f) / n - s.cx;
      float py = (y + 0.5f) / n - s.cy;
      float r = std::sqrt(px * px + py * py);
      float ring = soft(std::abs(r - 0.5f * (s.outer + s.inner)) - 0.5f * (s.outer - s.inner));
      float disc = soft(r - s.disc);
      float spoke = 0.0f;
      if (r < s.outer) {
        float theta = std::atan2(py, px);
        for (int k = 0; k < s.spokes; ++k) {
          float ang = s.spoke_phase + 6.2831853f * k / s.spokes;
          float dth = std::remainder(theta - ang, 6.2831853f);
          float cross = std::abs(dth) * std::max(r, 0.05f);  // arc distance to the ray
          spoke = std::max(spoke, soft(cross - s.spoke_halfwidth) * soft(r - s.outer));
        }
      }
      g.raw()[static_cast<std::size_t>(y) * n + x] = std::max({ring, disc, spoke});
    }
  return Image(g);
}

GradGrid gaussian_kernel1d(int dim, int axis, float sigma_vox) {
  int half = std::max(1, static_cast<int>(std::ceil(3.0f * sigma_vox)));
  int len = 2 * half + 1;
  std::vector<float> w(static_cast<std::size_t>(len));
  float total = 0.0f;
  for (int i = 0; i < len; ++i) {
    float d = static_cast<float>(i - half) / sigma_vox;
    w[static_cast<std::size_t>(i)] = std::exp(-0.5f * d * d);
    total += w[static_cast<std::size_t>(i)];
  }
  for (float& v : w) v /= total;
  Shape s{1, 1};
  for (int a = 0; a < dim; ++a) s.push_back(a == axis ? len : 1);
  return GradGrid(s, std::move(w));
}

GradGrid smooth_field(const GradGrid& noise, float sigma_vox) {
  int d = noise.dim();
  GradGrid out;
  for (int c = 0; c < noise.channels(); ++c) {
    GradGrid plane = select_channel(noise, c);
    for (int a = 0; a < d; ++a) plane = conv(plane, gaussian_kernel1d(d, a, sigma_vox), 1);
    out = (c == 0) ? plane : concat_channels(out, plane);
  }
  return out;
}

// Grid-sampled numeric inverse of a small displacement transform by
// fixed-point iteration; accurate for the dataset's contractive warps.
Transform numeric_inverse(const Transform& t, int resolution, int dim) {
  std::vector<int> sp(static_cast<std::size_t>(dim), resolution);
  GradGrid x = coord_grid(sp);
  GradGrid y = x;  // initial guess
  for (int it = 0; it < 20; ++it) y = sub(y, sub(t(y), x));
  return Transform::displacement_field(sub(y, x), Transform::Extrap::ClipReflect);
}

}  // namespace

Transform random_elastic_warp(int resolution, float sigma, float amplitude, Rng& rng) {
  GradGrid noise = GradGrid::random_normal({2, resolution, resolution}, rng, 1.0f);
  float sigma_vox = sigma * static_cast<float>(resolution);
  GradGrid smooth = smooth_field(noise, sigma_vox);
  float peak = 1e-9f;
  for (std::size_t i = 0; i < smooth.size(); ++i) peak = std::max(peak, std::abs(smooth.at(i)));
  float scale = amplitude * static_cast<float>(rng.uniform(0.6, 1.0)) / peak;
  return Transform::displacement_field(scalar_mul(smooth, scale), Transform::Extrap::ClipReflect);
}

Dataset generate_dataset(const DatasetConfig& cfg) {
  Dataset ds;
  ds.cfg = cfg;
  Rng root(cfg.seed);

  std::vector<BaseShape> train_shapes, test_shapes;
  Rng shape_rng = root.fork(1);
  for (int i = 0; i < cfg.n_base_train; ++i) train_shapes.push_back(sample_shape(shape_rng));
  for (int i = 0; i < cfg.n_base_test; ++i) test_shapes.push_back(sample_shape(shape_rng));

  float diameter = 0.52f;  // nominal object diameter of the shape family
  Transform variant_map = Transform::identity(2);
  if (cfg.variant != RetinaVariant::Baseline) {
    // content moves right by shift: I'(x) = I(x - shift)
    variant_map = Transform::translation({-cfg.shift_fraction * diameter, 0.0f});
    if (cfg.variant == RetinaVariant::ScaleShift) {
      Transform shrink = Transform::scaling(2, 1.0f / cfg.scale_factor, {0.5f, 0.5f});
      variant_map = compose(shrink, variant_map);
    }
  }

  auto make_pairs = [&](const std::vector<BaseShape>& shapes, int count, std::uint64_t stream) {
    std::vector<RegPair> pairs;
    Rng rng = root.fork(stream);
    for (int i = 0; i < count; ++i) {
      const BaseShape& base = shapes[rng.index(shapes.size())];
      Image img = render_shape(base, cfg.resolution);
      Transform w1 = random_elastic_warp(cfg.resolution, cfg.warp_sigma, cfg.warp_amplitude, rng);
      Transform w2 = random_elastic_warp(cfg.resolution, cfg.warp_sigma, cfg.warp_amplitude, rng);
      RegPair p;
      p.moving = warp(img, w1);
      Transform fixed_map = compose(w2, variant_map);
      p.fixed = warp(img, fixed_map);
      // moving o gt ~ fixed: gt = w1^-1 o w2 o variant_map
      p.gt = compose(numeric_inverse(w1, cfg.resolution, 2), fixed_map);
      pairs.push_back(std::move(p));
    }
    return pairs;
  };

  ds.train = make_pairs(train_shapes, cfg.n_train, 2);
  ds.test = make_pairs(test_shapes, cfg.n_test, 3);
  return ds;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir + "/train");
  fs::create_directories(dir + "/test");
  std::ofstream meta(dir + "/meta.txt");
  if (!meta) throw DataError(dir + ": cannot write meta.txt");
  meta << "variant " << to_string(ds.cfg.variant) << "\n"
       << "resolution " << ds.cfg.resolution << "\n"
       << "n_train " << ds.train.size() << "\n"
       << "n_test " << ds.test.size() << "\n"
       << "seed " << ds.cfg.seed << "\n";
  std::vector<int> sp{ds.cfg.resolution, ds.cfg.resolution};
  GradGrid pts = coord_grid(sp);
  auto dump = [&](const std::vector<RegPair>& pairs, const std::string& split) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      std::string stem = dir + "/" + split + "/pair" + std::to_string(i);
      write_grid(stem + "_moving.grid", pairs[i].moving.grid);
      write_grid(stem + "_fixed.grid", pairs[i].fixed.grid);
      write_grid(stem + "_gt.grid", sub(pairs[i].gt(pts), pts));  // displacement form
    }
  };
  dump(ds.train, "train");
  dump(ds.test, "test");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream meta(dir + "/meta.txt");
  if (!meta) throw DataError(dir + "/meta.txt: cannot open");
  Dataset ds;
  std::string key, value;
  std::size_t n_train = 0, n_test = 0;
  while (meta >> key >> value) {
    if (key == "variant") ds.cfg.variant = retina_variant_from_string(value);
    if (key == "resolution") ds.cfg.resolution = std::stoi(value);
    if (key == "n_train") n_train = static_cast<std::size_t>(std::stoul(value));
    if (key == "n_test") n_test = static_cast<std::size_t>(std::stoul(value));
    if (key == "seed") ds.cfg.seed = std::stoull(value);
  }
  auto slurp = [&](std::size_t count, const std::string& split) {
    std::vector<RegPair> pairs;
    for (std::size_t i = 0; i < count; ++i) {
      std::string stem = dir + "/" + split + "/pair" + std::to_string(i);
      RegPair p;
      p.moving = Image(read_grid(stem + "_moving.grid"));
      p.fixed = Image(read_grid(stem + "_fixed.grid"));
      p.gt = Transform::displacement_field(read_grid(stem + "_gt.grid"),
                                           Transform::Extrap::ClipReflect);
      pairs.push_back(std::move(p));
    }
    return pairs;
  };
  ds.train = slurp(n_train, "train");
  ds.test = slurp(n_test, "test");
  return ds;
}

double dice_score(const Image& warped_moving, const Image& fixed, float threshold) {
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < fixed.grid.size(); ++i) {
    bool in_a = warped_moving.grid.at(i) > threshold;
    bool in_b = fixed.grid.at(i) > threshold;
    a += in_a;
    b += in_b;
    inter += (in_a && in_b);
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

DiceSummary evaluate_dice(RegistrationAlgorithm& alg, const std::vector<RegPair>& pairs,
                          float threshold) {
  DiceSummary out;
  for (const RegPair& p : pairs) {
    Transform phi = alg.run(nullptr, p.moving, p.fixed);
    out.per_pair.push_back(dice_score(warp(p.moving, phi), p.fixed, threshold));
  }
  for (double v : out.per_pair) out.mean += v;
  if (!out.per_pair.empty()) out.mean /= static_cast<double>(out.per_pair.size());
  return out;
}

}  // namespace equireg
