#pragma once

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "equireg/ndgrad.hpp"

namespace equireg {

// Intensity grid over the domain [0,1]^D, any resolution.
struct Image {
  GradGrid grid;  // {c, n1..nD}

  Image() = default;
  explicit Image(GradGrid g) : grid(std::move(g)) {}
  int dim() const { return grid.dim(); }
  std::vector<int> spatial() const { return grid.spatial(); }
};

// Voxel-center coordinates: coords(i) = (i + 0.5) / n per axis, {D, n1..nD}.
GradGrid coord_grid(const std::vector<int>& spatial);
// Same map extended over a frame of `pad` voxels per side; coordinates run
// outside [0,1] there: coords(i) = (i - pad + 0.5) / n.
GradGrid coord_grid_padded(const std::vector<int>& spatial, int pad);

// A map [0,1]^D -> R^D (evaluable on all of R^D), built from analytic pieces
// and displacement-field grids. Immutable and cheap to copy; evaluation is
// lazy so composites keep their algebraic structure.
class Transform {
 public:
  enum class Extrap { Clip, ClipReflect };

  Transform() = default;

  static Transform identity(int dim);
  static Transform translation(std::vector<float> offset);
  static Transform rotation2d(float angle, std::array<float, 2> center = {0.5f, 0.5f});
  static Transform scaling(int dim, float factor, std::vector<float> center);
  // points -> A * points + b, A row-major DxD
  static Transform affine(int dim, std::vector<float> a_rowmajor, std::vector<float> b);
  // custom analytic map with optional exact inverse
  static Transform analytic(int dim, std::function<GradGrid(const GradGrid&)> fwd,
                            std::function<GradGrid(const GradGrid&)> inv = nullptr);
  // disp {D, n1..nD}: phi(x) = x + extrapolated interpolation of disp
  static Transform displacement_field(GradGrid disp, Extrap mode = Extrap::ClipReflect);
  // predicted coordinate values over the grid; stored as displacement
  // against the voxel-center map
  static Transform coordinate_map(GradGrid coord_values, Extrap mode = Extrap::ClipReflect);

  bool valid() const { return impl_ != nullptr; }
  int dim() const;

  // Evaluate at points {D, m...}; differentiable w.r.t. both the points and
  // any tracked grids inside the transform.
  GradGrid operator()(const GradGrid& points) const;

  std::optional<Transform> inverse() const;

  friend Transform compose(const Transform& outer, const Transform& inner);

  struct Impl;

 private:
  explicit Transform(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<const Impl> impl_;
};

// compose(phi, psi)(x) = phi(psi(x))
Transform compose(const Transform& outer, const Transform& inner);

// output(v) = interpolate(image, t(coords(v))); samples outside [0,1]^D read
// as zero. Same resolution as the input.
Image warp(const Image& image, const Transform& t);

// Central finite-difference Jacobian at the given points, step in domain
// units (callers use half a voxel). Output {D*D, m...}, channel i*D+j holds
// d phi_i / d x_j.
GradGrid transform_jacobian(const Transform& t, const GradGrid& points, float step);

}  // namespace equireg
