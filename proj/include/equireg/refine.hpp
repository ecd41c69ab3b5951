#pragma once

#include "equireg/registration.hpp"

namespace equireg {

struct DisplacementNetConfig {
  std::vector<int> level_channels = {16, 32, 64};  // encoder widths per level
  float negative_slope = 0.1f;
  float init_scale = 1.0f;  // multiplier on the He init of the hidden convs
};

// Encoder-decoder conv net over the channel-concatenated image pair,
// predicting a displacement field: phi[M,F](x) = net(cat(M,F))(x) + x.
// The final 1x1 conv is zero-initialized so a fresh net is the identity.
class DisplacementNet final : public RegistrationAlgorithm {
 public:
  DisplacementNet(int dim, DisplacementNetConfig cfg, std::uint64_t seed,
                  std::string name_prefix = "psi");

  Transform run(Tape* tape, const Image& moving, const Image& fixed) override;
  std::vector<Param*> params() override;
  EquivClass declared_equivariance() const override { return EquivClass::UUTranslation; }
  float boundary_radius(int extent) const override;
  AlgPtr clone() const override;

  // test hook: perturb the zero-initialized output layer
  Param& output_kernel() { return params_[params_.size() - 2]; }

 private:
  GradGrid conv_block(Tape* tape, const GradGrid& x, std::size_t layer) const;

  int dim_;
  DisplacementNetConfig cfg_;
  std::string prefix_;
  std::uint64_t seed_;
  // interleaved kernel/bias pairs, encoder then decoder then output
  mutable std::vector<Param> params_;
  int receptive_radius_voxels_ = 0;
};

}  // namespace equireg
