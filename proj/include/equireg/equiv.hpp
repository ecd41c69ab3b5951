#pragma once

#include <string>

#include "equireg/registration.hpp"

namespace equireg {

enum class TransformClass { Translation, Rotation, Scale };
enum class EquivMode { WU, UU };

std::string to_string(TransformClass c);
std::string to_string(EquivMode m);

struct EquivRow {
  float magnitude = 0.0f;
  double mean_defect = 0.0;  // domain units
  double max_defect = 0.0;
  int n_points = 0;
};

// Measured equivariance defect of an algorithm: per magnitude, the mean/max
// over interior sample points of || phi[M o W, F o U](x) - (W^-1 o phi[M,F] o U)(x) ||.
struct EquivReport {
  TransformClass cls = TransformClass::Translation;
  EquivMode mode = EquivMode::WU;
  std::uint64_t seed = 0;
  int resolution = 0;  // voxels per domain unit, for voxel conversions
  std::vector<EquivRow> rows;

  std::string to_csv() const;  // class, mode, magnitude, mean_defect, max_defect, n_points, seed
  double max_defect() const;
  double max_defect_voxels() const { return max_defect() * resolution; }
};

struct EquivOptions {
  int grid_points_per_axis = 15;
  // translations snap to integer voxels of the image grid
  bool snap_to_voxels = true;
  // extra margin excluded from the defect grid on top of the transform
  // magnitudes and the algorithm's boundary radius
  float extra_margin = 0.02f;
};

// Deterministic given the seed. Throws ContractError when magnitudes leave no
// interior sample region.
EquivReport measure_equivariance(RegistrationAlgorithm& alg, const Image& moving,
                                 const Image& fixed, TransformClass cls,
                                 const std::vector<float>& magnitudes, EquivMode mode,
                                 std::uint64_t seed, const EquivOptions& opt = {});

// Executable form of phi[I, I o U] = U for identity-on-self, [W,U]-equivariant
// algorithms: max interior deviation of phi[I, I o U] from U.
double guarantee_check(RegistrationAlgorithm& alg, const Image& image, const Transform& u,
                       float margin);

// Negative witness: requires image o W == image (to tolerance), then returns
// the [W,U] defect with U = identity. The impossibility argument says this
// cannot vanish for any input-determined algorithm when W is not identity.
double symmetry_witness(RegistrationAlgorithm& alg, const Image& image, const Transform& w,
                        float symmetry_tol = 1e-4f, float margin = 0.15f);

}  // namespace equireg
