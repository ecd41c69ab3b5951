#include "equireg/transform.hpp"

#include <cmath>

namespace equireg {

GradGrid coord_grid(const std::vector<int>& spatial) {
  return coord_grid_padded(spatial, 0);
}

GradGrid coord_grid_padded(const std::vector<int>& spatial, int pad) {
  int d = static_cast<int>(spatial.size());
  std::vector<int> ext(spatial);
  for (int& e : ext) e += 2 * pad;
  Shape shape;
  shape.push_back(d);
  for (int e : ext) shape.push_back(e);
  GradGrid g(shape);
  std::size_t sp = 1;
  for (int e : ext) sp *= static_cast<std::size_t>(e);
  std::vector<std::size_t> idx(static_cast<std::size_t>(d), 0);
  for (std::size_t p = 0; p < sp; ++p) {
    for (int a = 0; a < d; ++a)
      g.raw()[static_cast<std::size_t>(a) * sp + p] =
          (static_cast<float>(idx[static_cast<std::size_t>(a)]) - static_cast<float>(pad) + 0.5f) /
          static_cast<float>(spatial[static_cast<std::size_t>(a)]);
    for (int a = d - 1; a >= 0; --a) {
      if (++idx[static_cast<std::size_t>(a)] < static_cast<std::size_t>(ext[static_cast<std::size_t>(a)])) break;
      idx[static_cast<std::size_t>(a)] = 0;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Transform impls
// ---------------------------------------------------------------------------

struct Transform::Impl {
  virtual ~Impl() = default;
  virtual int dim() const = 0;
  virtual GradGrid eval(const GradGrid& points) const = 0;
  virtual std::optional<Transform> inverse() const { return std::nullopt; }
};

namespace {

void check_points(const GradGrid& points, int d, const char* what) {
  if (points.channels() != d)
    throw ShapeError(std::string(what) + ": expected " + std::to_string(d) +
                     "-vector points, got " + shape_str(points.shape()));
}

struct AffineImpl final : Transform::Impl {
  int d;
  std::vector<float> a;  // row-major d x d
  std::vector<float> b;  // d

  AffineImpl(int dim_, std::vector<float> a_, std::vector<float> b_)
      : d(dim_), a(std::move(a_)), b(std::move(b_)) {}

  int dim() const override { return d; }

  GradGrid eval(const GradGrid& points) const override {
    check_points(points, d, "affine transform");
    // channel mixing as a 1x..x1 conv plus a bias
    Shape kshape;
    kshape.push_back(d);
    kshape.push_back(d);
    for (int i = 0; i < points.dim(); ++i) kshape.push_back(1);
    GradGrid kernel(kshape, a);
    GradGrid bias({d}, b);
    return bias_add(conv(points, kernel, 1), bias);
  }

  std::optional<Transform> inverse() const override;
};

// Gauss-Jordan inverse, d <= 3 in practice.
std::optional<std::vector<float>> invert_matrix(const std::vector<float>& a, int d) {
  std::vector<double> m(static_cast<std::size_t>(d) * d), inv(static_cast<std::size_t>(d) * d, 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i];
  for (int i = 0; i < d; ++i) inv[static_cast<std::size_t>(i) * d + i] = 1.0;
  for (int col = 0; col < d; ++col) {
    int piv = col;
    for (int r = col + 1; r < d; ++r)
      if (std::abs(m[static_cast<std::size_t>(r) * d + col]) >
          std::abs(m[static_cast<std::size_t>(piv) * d + col]))
        piv = r;
    if (std::abs(m[static_cast<std::size_t>(piv) * d + col]) < 1e-12) return std::nullopt;
    for (int c = 0; c < d; ++c) {
      std::swap(m[static_cast<std::size_t>(piv) * d + c], m[static_cast<std::size_t>(col) * d + c]);
      std::swap(inv[static_cast<std::size_t>(piv) * d + c], inv[static_cast<std::size_t>(col) * d + c]);
    }
    double s = 1.0 / m[static_cast<std::size_t>(col) * d + col];
    for (int c = 0; c < d; ++c) {
      m[static_cast<std::size_t>(col) * d + c] *= s;
      inv[static_cast<std::size_t>(col) * d + c] *= s;
    }
    for (int r = 0; r < d; ++r) {
      if (r == col) continue;
      double f = m[static_cast<std::size_t>(r) * d + col];
      for (int c = 0; c < d; ++c) {
        m[static_cast<std::size_t>(r) * d + c] -= f * m[static_cast<std::size_t>(col) * d + c];
        inv[static_cast<std::size_t>(r) * d + c] -= f * inv[static_cast<std::size_t>(col) * d + c];
      }
    }
  }
  std::vector<float> out(inv.size());
  for (std::size_t i = 0; i < inv.size(); ++i) out[i] = static_cast<float>(inv[i]);
  return out;
}

struct AnalyticImpl final : Transform::Impl {
  int d;
  std::function<GradGrid(const GradGrid&)> fwd, inv;

  AnalyticImpl(int dim_, std::function<GradGrid(const GradGrid&)> f,
               std::function<GradGrid(const GradGrid&)> i)
      : d(dim_), fwd(std::move(f)), inv(std::move(i)) {}

  int dim() const override { return d; }
  GradGrid eval(const GradGrid& points) const override {
    check_points(points, d, "analytic transform");
    return fwd(points);
  }
  std::optional<Transform> inverse() const override {
    if (!inv) return std::nullopt;
    return Transform::analytic(d, inv, fwd);
  }
};

struct DisplacementImpl final : Transform::Impl {
  GradGrid disp;  // {D, n...}
  Transform::Extrap mode;

  DisplacementImpl(GradGrid g, Transform::Extrap m) : disp(std::move(g)), mode(m) {}

  int dim() const override { return disp.channels(); }

  GradGrid eval(const GradGrid& points) const override {
    check_points(points, dim(), "displacement field");
    GradGrid clipped = grid_sample(disp, clip01(points));
    if (mode == Transform::Extrap::Clip) return add(points, clipped);
    GradGrid reflected = grid_sample(disp, clip01(reflect01(points)));
    // x + 2 interp(disp, clip(x)) - interp(disp, reflect(x))
    return add(points, sub(scalar_mul(clipped, 2.0f), reflected));
  }
};

struct CompositeImpl final : Transform::Impl {
  std::vector<Transform> parts;  // outermost first; eval applies back-to-front

  explicit CompositeImpl(std::vector<Transform> p) : parts(std::move(p)) {}

  int dim() const override { return parts.front().dim(); }

  GradGrid eval(const GradGrid& points) const override {
    GradGrid x = points;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) x = (*it)(x);
    return x;
  }

  std::optional<Transform> inverse() const override {
    std::vector<Transform> inv;
    inv.reserve(parts.size());
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      auto pi = it->inverse();
      if (!pi) return std::nullopt;
      inv.push_back(*pi);
    }
    Transform out = inv.front();
    for (std::size_t i = 1; i < inv.size(); ++i) out = compose(out, inv[i]);
    return out;
  }
};

}  // namespace

std::optional<Transform> AffineImpl::inverse() const {
  auto ainv = invert_matrix(a, d);
  if (!ainv) return std::nullopt;
  // x = A^-1 (y - b)
  std::vector<float> binv(static_cast<std::size_t>(d), 0.0f);
  for (int i = 0; i < d; ++i) {
    float acc = 0.0f;
    for (int j = 0; j < d; ++j) acc += (*ainv)[static_cast<std::size_t>(i) * d + j] * b[static_cast<std::size_t>(j)];
    binv[static_cast<std::size_t>(i)] = -acc;
  }
  return Transform::affine(d, *ainv, binv);
}

// ---------------------------------------------------------------------------
// Transform surface
// ---------------------------------------------------------------------------

int Transform::dim() const {
  if (!impl_) throw ContractError("empty transform");
  return impl_->dim();
}

GradGrid Transform::operator()(const GradGrid& points) const {
  if (!impl_) throw ContractError("empty transform");
  return impl_->eval(points);
}

std::optional<Transform> Transform::inverse() const {
  if (!impl_) throw ContractError("empty transform");
  return impl_->inverse();
}

Transform Transform::identity(int dim) {
  std::vector<float> a(static_cast<std::size_t>(dim) * dim, 0.0f);
  for (int i = 0; i < dim; ++i) a[static_cast<std::size_t>(i) * dim + i] = 1.0f;
  return affine(dim, std::move(a), std::vector<float>(static_cast<std::size_t>(dim), 0.0f));
}

Transform Transform::translation(std::vector<float> offset) {
  int d = static_cast<int>(offset.size());
  std::vector<float> a(static_cast<std::size_t>(d) * d, 0.0f);
  for (int i = 0; i < d; ++i) a[static_cast<std::size_t>(i) * d + i] = 1.0f;
  return affine(d, std::move(a), std::move(offset));
}

Transform Transform::rotation2d(float angle, std::array<float, 2> center) {
  float c = std::cos(angle), s = std::sin(angle);
  // rotate about the center: A x + (I - A) center
  std::vector<float> a{c, -s, s, c};
  std::vector<float> b{center[0] - (c * center[0] - s * center[1]),
                       center[1] - (s * center[0] + c * center[1])};
  return affine(2, std::move(a), std::move(b));
}

Transform Transform::scaling(int dim, float factor, std::vector<float> center) {
  std::vector<float> a(static_cast<std::size_t>(dim) * dim, 0.0f);
  std::vector<float> b(static_cast<std::size_t>(dim), 0.0f);
  for (int i = 0; i < dim; ++i) {
    a[static_cast<std::size_t>(i) * dim + i] = factor;
    b[static_cast<std::size_t>(i)] = (1.0f - factor) * center[static_cast<std::size_t>(i)];
  }
  return affine(dim, std::move(a), std::move(b));
}

Transform Transform::affine(int dim, std::vector<float> a_rowmajor, std::vector<float> b) {
  if (a_rowmajor.size() != static_cast<std::size_t>(dim) * static_cast<std::size_t>(dim) ||
      b.size() != static_cast<std::size_t>(dim))
    throw ShapeError("affine: matrix/offset sizes do not match dimension");
  return Transform(std::make_shared<AffineImpl>(dim, std::move(a_rowmajor), std::move(b)));
}

Transform Transform::analytic(int dim, std::function<GradGrid(const GradGrid&)> fwd,
                              std::function<GradGrid(const GradGrid&)> inv) {
  return Transform(std::make_shared<AnalyticImpl>(dim, std::move(fwd), std::move(inv)));
}

Transform Transform::displacement_field(GradGrid disp, Extrap mode) {
  if (disp.channels() != disp.dim())
    throw ShapeError("displacement_field: expected {D, n1..nD}, got " + shape_str(disp.shape()));
  return Transform(std::make_shared<DisplacementImpl>(std::move(disp), mode));
}

Transform Transform::coordinate_map(GradGrid coord_values, Extrap mode) {
  GradGrid coords = coord_grid(coord_values.spatial());
  return displacement_field(sub(coord_values, coords), mode);
}

Transform compose(const Transform& outer, const Transform& inner) {
  if (outer.dim() != inner.dim())
    throw ShapeError("compose: dimension mismatch " + std::to_string(outer.dim()) + " vs " +
                     std::to_string(inner.dim()));
  std::vector<Transform> parts;
  auto splice = [&parts](const Transform& t) {
    if (auto* c = dynamic_cast<const CompositeImpl*>(t.impl_.get()))
      parts.insert(parts.end(), c->parts.begin(), c->parts.end());
    else
      parts.push_back(t);
  };
  splice(outer);
  splice(inner);
  return Transform(std::make_shared<CompositeImpl>(std::move(parts)));
}

Image warp(const Image& image, const Transform& t) {
  GradGrid points = coord_grid(image.spatial());
  return Image(grid_sample_zero(image.grid, t(points)));
}

GradGrid transform_jacobian(const Transform& t, const GradGrid& points, float step) {
  int d = points.channels();
  std::vector<GradGrid> cols;  // cols[j] = d phi / d x_j, {D, m...}
  cols.reserve(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    GradGrid delta(points.shape());
    std::size_t sp = points.size() / static_cast<std::size_t>(d);
    for (std::size_t i = 0; i < sp; ++i) delta.raw()[static_cast<std::size_t>(j) * sp + i] = step;
    GradGrid plus = t(add(points, delta));
    GradGrid minus = t(sub(points, delta));
    cols.push_back(scalar_mul(sub(plus, minus), 0.5f / step));
  }
  // channel i*D+j = d phi_i / d x_j
  GradGrid out;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      GradGrid entry = select_channel(cols[static_cast<std::size_t>(j)], i);
      out = (i == 0 && j == 0) ? entry : concat_channels(out, entry);
    }
  return out;
}

}  // namespace equireg
