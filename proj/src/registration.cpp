#include "equireg/registration.hpp"

#include <algorithm>
#include <unordered_set>

namespace equireg {

std::vector<Param*> unique_params(const std::vector<Param*>& params) {
  std::vector<Param*> out;
  std::unordered_set<const Param*> seen;
  for (Param* p : params)
    if (seen.insert(p).second) out.push_back(p);
  return out;
}

namespace {

struct IdentityAlg final : RegistrationAlgorithm {
  int d;
  explicit IdentityAlg(int dim) : d(dim) {}
  Transform run(Tape*, const Image& moving, const Image&) override {
    if (moving.dim() != d) throw ShapeError("identity algorithm: dimension mismatch");
    return Transform::identity(d);
  }
  EquivClass declared_equivariance() const override { return EquivClass::WUTranslation; }
  AlgPtr clone() const override { return std::make_shared<IdentityAlg>(d); }
};

struct TwoStepAlg final : RegistrationAlgorithm {
  AlgPtr first, second;
  TwoStepAlg(AlgPtr f, AlgPtr s) : first(std::move(f)), second(std::move(s)) {}

  Transform run(Tape* tape, const Image& moving, const Image& fixed) override {
    if (moving.dim() != fixed.dim())
      throw ShapeError("two_step: moving/fixed dimension mismatch");
    Transform coarse = first->run(tape, moving, fixed);
    Image resampled = warp(moving, coarse);
    Transform refine = second->run(tape, resampled, fixed);
    return compose(coarse, refine);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> p = first->params();
    std::vector<Param*> q = second->params();
    p.insert(p.end(), q.begin(), q.end());
    return unique_params(p);
  }

  EquivClass declared_equivariance() const override {
    // [W,U] first + [U,U] second gives [W,U] overall (TwoStep theorem)
    if (first->declared_equivariance() == EquivClass::WUTranslation &&
        second->declared_equivariance() != EquivClass::None)
      return EquivClass::WUTranslation;
    if (first->declared_equivariance() != EquivClass::None &&
        second->declared_equivariance() != EquivClass::None)
      return EquivClass::UUTranslation;
    return EquivClass::None;
  }

  float boundary_radius(int extent) const override {
    return std::max(first->boundary_radius(extent), second->boundary_radius(extent));
  }

  AlgPtr clone() const override {
    return std::make_shared<TwoStepAlg>(first->clone(), second->clone());
  }
};

struct DownsampleAlg final : RegistrationAlgorithm {
  AlgPtr inner;
  explicit DownsampleAlg(AlgPtr i) : inner(std::move(i)) {}

  Transform run(Tape* tape, const Image& moving, const Image& fixed) override {
    Image m2(average_pool2(moving.grid));
    Image f2(average_pool2(fixed.grid));
    return inner->run(tape, m2, f2);
  }

  std::vector<Param*> params() override { return inner->params(); }
  EquivClass declared_equivariance() const override { return inner->declared_equivariance(); }
  float boundary_radius(int extent) const override {
    return inner->boundary_radius(extent / 2);
  }
  AlgPtr clone() const override { return std::make_shared<DownsampleAlg>(inner->clone()); }
};

}  // namespace

AlgPtr make_identity_algorithm(int dim) { return std::make_shared<IdentityAlg>(dim); }

AlgPtr two_step(AlgPtr first, AlgPtr second) {
  return std::make_shared<TwoStepAlg>(std::move(first), std::move(second));
}

AlgPtr downsample(AlgPtr inner) { return std::make_shared<DownsampleAlg>(std::move(inner)); }

AlgPtr assemble_carl(AlgPtr xi, const std::vector<AlgPtr>& psis, bool include_final) {
  if (psis.size() < 2)
    throw ContractError("assemble_carl: need at least 2 refinement nets");
  if (include_final && psis.size() < 3)
    throw ContractError("assemble_carl: include_final needs a third refinement net");
  AlgPtr a = two_step(downsample(std::move(xi)), psis[0]);
  a = two_step(downsample(a), psis[1]);
  if (include_final) a = two_step(a, psis[2]);
  return a;
}

}  // namespace equireg
