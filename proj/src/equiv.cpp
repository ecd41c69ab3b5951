#include "equireg/equiv.hpp"

#include <cmath>
#include <sstream>

namespace equireg {

std::string to_string(TransformClass c) {
  switch (c) {
    case TransformClass::Translation: return "translation";
    case TransformClass::Rotation: return "rotation";
    case TransformClass::Scale: return "scale";
  }
  return "?";
}

std::string to_string(EquivMode m) { return m == EquivMode::WU ? "wu" : "uu"; }

std::string EquivReport::to_csv() const {
  std::ostringstream os;
  os << "class,mode,magnitude,mean_defect,max_defect,n_points,seed\n";
  char buf[256];
  for (const EquivRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.9g,%.9g,%.9g,%d,%llu\n", to_string(cls).c_str(),
                  to_string(mode).c_str(), static_cast<double>(r.magnitude), r.mean_defect,
                  r.max_defect, r.n_points,
                  static_cast<unsigned long long>(seed));
    os << buf;
  }
  return os.str();
}

double EquivReport::max_defect() const {
  double m = 0.0;
  for (const EquivRow& r : rows) m = std::max(m, r.max_defect);
  return m;
}

namespace {

// Interior sample grid over [margin, 1-margin]^D.
GradGrid interior_points(int d, float margin, int per_axis) {
  if (margin >= 0.45f)
    throw ContractError("equivariance margin " + std::to_string(margin) +
                        " leaves no interior sample region");
  std::size_t total = 1;
  for (int a = 0; a < d; ++a) total *= static_cast<std::size_t>(per_axis);
  Shape shape{d};
  shape.push_back(static_cast<int>(total));
  GradGrid pts(shape);
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  for (std::size_t p = 0; p < total; ++p) {
    for (int a = 0; a < d; ++a)
      pts.raw()[static_cast<std::size_t>(a) * total + p] =
          margin + (1.0f - 2.0f * margin) * static_cast<float>(idx[static_cast<std::size_t>(a)]) /
                       static_cast<float>(per_axis - 1);
    for (int a = d - 1; a >= 0; --a) {
      if (++idx[static_cast<std::size_t>(a)] < per_axis) break;
      idx[static_cast<std::size_t>(a)] = 0;
    }
  }
  return pts;
}

struct DefectStats {
  double mean = 0.0, max = 0.0;
  int n = 0;
};

DefectStats pointwise_defect(const GradGrid& lhs, const GradGrid& rhs) {
  int d = lhs.channels();
  std::size_t samples = lhs.size() / static_cast<std::size_t>(d);
  DefectStats st;
  double acc = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    double norm2 = 0.0;
    for (int a = 0; a < d; ++a) {
      double diff = double(lhs.at(static_cast<std::size_t>(a) * samples + s)) -
                    rhs.at(static_cast<std::size_t>(a) * samples + s);
      norm2 += diff * diff;
    }
    double norm = std::sqrt(norm2);
    acc += norm;
    st.max = std::max(st.max, norm);
  }
  st.n = static_cast<int>(samples);
  st.mean = samples ? acc / static_cast<double>(samples) : 0.0;
  return st;
}

// Random member of a transform class at the given magnitude. Translations are
// snapped to integer voxels when requested (the structural guarantees hold
// for integer shifts).
Transform sample_member(TransformClass cls, float magnitude, int d, int resolution,
                        bool snap, Rng& rng) {
  if (magnitude == 0.0f) return Transform::identity(d);
  switch (cls) {
    case TransformClass::Translation: {
      std::vector<float> r(static_cast<std::size_t>(d), 0.0f);
      if (d == 1) {
        r[0] = rng.uniform() < 0.5 ? magnitude : -magnitude;
      } else {
        double angle = rng.uniform(0.0, 2.0 * 3.14159265358979);
        r[0] = magnitude * static_cast<float>(std::cos(angle));
        r[1] = magnitude * static_cast<float>(std::sin(angle));
      }
      if (snap)
        for (float& v : r)
          v = std::round(v * static_cast<float>(resolution)) / static_cast<float>(resolution);
      return Transform::translation(r);
    }
    case TransformClass::Rotation: {
      if (d != 2) throw ContractError("rotation class needs 2D images");
      float angle = rng.uniform() < 0.5 ? magnitude : -magnitude;
      return Transform::rotation2d(angle);
    }
    case TransformClass::Scale: {
      float f = rng.uniform() < 0.5 ? 1.0f + magnitude : 1.0f / (1.0f + magnitude);
      std::vector<float> c(static_cast<std::size_t>(d), 0.5f);
      return Transform::scaling(d, f, c);
    }
  }
  throw ContractError("unknown transform class");
}

}  // namespace

EquivReport measure_equivariance(RegistrationAlgorithm& alg, const Image& moving,
                                 const Image& fixed, TransformClass cls,
                                 const std::vector<float>& magnitudes, EquivMode mode,
                                 std::uint64_t seed, const EquivOptions& opt) {
  int d = moving.dim();
  int n = moving.spatial()[0];
  EquivReport report;
  report.cls = cls;
  report.mode = mode;
  report.seed = seed;
  report.resolution = n;

  Transform base = alg.run(nullptr, moving, fixed);
  Rng root(seed);

  for (std::size_t mi = 0; mi < magnitudes.size(); ++mi) {
    float mag = magnitudes[mi];
    Rng rng = root.fork(mi);
    Transform w = sample_member(cls, mag, d, n, opt.snap_to_voxels, rng);
    Transform u = mode == EquivMode::UU ? w : sample_member(cls, mag, d, n, opt.snap_to_voxels, rng);

    // effective displacement magnitude for the interior margin
    float reach = mag;
    if (cls == TransformClass::Rotation) reach = mag * 0.75f;  // max |x - R x| on the domain
    if (cls == TransformClass::Scale) reach = mag * 0.75f;
    float margin = reach + alg.boundary_radius(n) + opt.extra_margin;
    GradGrid pts = interior_points(d, margin, opt.grid_points_per_axis);

    Image mw = warp(moving, w);
    Image fu = warp(fixed, u);
    Transform warped_run = alg.run(nullptr, mw, fu);

    GradGrid lhs = warped_run(pts);
    Transform w_inv = *w.inverse();
    GradGrid rhs = w_inv(base(u(pts)));

    DefectStats st = pointwise_defect(lhs, rhs);
    report.rows.push_back(EquivRow{mag, st.mean, st.max, st.n});
  }
  return report;
}

double guarantee_check(RegistrationAlgorithm& alg, const Image& image, const Transform& u,
                       float margin) {
  Image fixed = warp(image, u);
  Transform phi = alg.run(nullptr, image, fixed);
  GradGrid pts = interior_points(image.dim(), margin, 17);
  return pointwise_defect(phi(pts), u(pts)).max;
}

double symmetry_witness(RegistrationAlgorithm& alg, const Image& image, const Transform& w,
                        float symmetry_tol, float margin) {
  Image warped = warp(image, w);
  double img_scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < image.grid.size(); ++i) {
    img_scale = std::max(img_scale, std::abs(double(image.grid.at(i))));
    diff = std::max(diff, std::abs(double(warped.grid.at(i)) - image.grid.at(i)));
  }
  if (diff > symmetry_tol * std::max(img_scale, 1.0))
    throw ContractError("symmetry_witness: image is not symmetric under W (max deviation " +
                        std::to_string(diff) + ")");

  Transform phi_warped = alg.run(nullptr, warped, image);
  Transform phi_base = alg.run(nullptr, image, image);
  GradGrid pts = interior_points(image.dim(), margin, 17);
  Transform w_inv = *w.inverse();
  return pointwise_defect(phi_warped(pts), w_inv(phi_base(pts))).max;
}

}  // namespace equireg
