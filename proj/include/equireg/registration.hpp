#pragma once

#include <memory>
#include <string>
#include <vector>

#include "equireg/transform.hpp"

namespace equireg {

// Advisory metadata only; actual guarantees come from the audit harness.
enum class EquivClass { None, WUTranslation, UUTranslation };

// Anything that maps an image pair to a transform. Passing a tape makes the
// result differentiable w.r.t. the algorithm's parameters; a null tape runs
// inference.
class RegistrationAlgorithm {
 public:
  virtual ~RegistrationAlgorithm() = default;

  virtual Transform run(Tape* tape, const Image& moving, const Image& fixed) = 0;

  virtual std::vector<Param*> params() { return {}; }
  virtual EquivClass declared_equivariance() const { return EquivClass::None; }

  // Width (domain units) of the band near the image edge where the output is
  // boundary-contaminated, given the input extent. The audit harness excludes
  // this band plus the transform magnitudes from defect sampling.
  virtual float boundary_radius(int extent) const {
    (void)extent;
    return 0.0f;
  }

  virtual std::shared_ptr<RegistrationAlgorithm> clone() const = 0;
};

using AlgPtr = std::shared_ptr<RegistrationAlgorithm>;

// Always returns the identity transform.
AlgPtr make_identity_algorithm(int dim);

// TwoStep{first, second}[M, F] = first[M,F] o second[M o first[M,F], F]
AlgPtr two_step(AlgPtr first, AlgPtr second);

// Downsample{inner}[A, B] = inner[averagePool(A,2), averagePool(B,2)]; the
// returned transform acts on [0,1]^D coordinates, so it is used at full
// resolution unchanged.
AlgPtr downsample(AlgPtr inner);

// CARL assembly; psis are the refinement layers ordered coarse-to-fine:
//   TwoStep{ Down{ TwoStep{ Down{xi}, psi1 } }, psi2 }           (2 psis)
// wrapped once more as TwoStep{., psi3} when include_final.
AlgPtr assemble_carl(AlgPtr xi, const std::vector<AlgPtr>& psis, bool include_final);

// Deduplicated parameter list across shared submodules, in first-use order.
std::vector<Param*> unique_params(const std::vector<Param*>& params);

}  // namespace equireg
