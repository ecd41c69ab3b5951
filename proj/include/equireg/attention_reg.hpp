#pragma once

#include "equireg/registration.hpp"

namespace equireg {

struct EncoderConfig {
  int width = 64;
  std::vector<int> dilations = {1, 1, 2, 4, 8, 1};
  bool extra_dilated_block = false;  // rotation variant: one more dilation-8 block
  float negative_slope = 0.1f;
  float final_gain = 6.0f;  // sharpens untrained attention onto content keys
};

// Same-resolution dilated conv stack. Convolutions carry no bias so an
// all-zero neighborhood maps to exactly zero features; zero-padded frames
// then stay consistent under integer shifts of the content.
class ConvEncoder {
 public:
  ConvEncoder(int dim, int in_channels, EncoderConfig cfg, std::uint64_t seed,
              std::string name_prefix = "enc");

  GradGrid encode(Tape* tape, const GradGrid& image) const;
  std::vector<Param*> params();
  const EncoderConfig& config() const { return cfg_; }
  int receptive_radius_voxels() const { return receptive_radius_; }
  int in_channels() const { return in_channels_; }

  std::vector<Param> params_storage_copy() const { return params_; }
  void set_params_storage(std::vector<Param> p) { params_ = std::move(p); }

 private:
  int dim_, in_channels_;
  EncoderConfig cfg_;
  std::vector<Param> params_;
  std::vector<int> dilations_;
  int receptive_radius_ = 0;
};

// E'(I) = (1/|G|) sum_g g^-1 . E(I o g) over axis-aligned rotations.
// group_size 1 = plain encoder, 2 = {id, pi}, 4 = C4. Square 2D grids only.
GradGrid group_averaged_encode(const ConvEncoder& encoder, Tape* tape, const GradGrid& image,
                               int group_size);

// Coordinate attention: queries = fixed features, keys = moving features,
// values = moving voxel coordinates. The output row per fixed voxel is the
// center of mass of its attention mask over the moving grid, returned as a
// coordinate-map transform (ClipReflect between nodes).
Transform coordinate_attention(const GradGrid& moving_features, const GradGrid& fixed_features,
                               const GradGrid& moving_coords, const std::vector<int>& fixed_spatial,
                               float logit_scale);

struct XiThetaConfig {
  EncoderConfig encoder;
  int pad = 8;               // frame width in voxels at the operating scale
  float logit_scale = 0.0f;  // <= 0 means 1/sqrt(width)
  int rotation_group = 1;    // 1 plain, 2 or 4 group-averaged encoder
};

// Trainable coordinate-attention registration. Both images are zero-padded,
// encoded, and the fixed features cropped back, so fixed voxels can attend to
// moving coordinates outside [0,1]^D.
class XiTheta final : public RegistrationAlgorithm {
 public:
  XiTheta(int dim, XiThetaConfig cfg, std::uint64_t seed);

  Transform run(Tape* tape, const Image& moving, const Image& fixed) override;
  std::vector<Param*> params() override { return encoder_.params(); }
  EquivClass declared_equivariance() const override { return EquivClass::WUTranslation; }
  float boundary_radius(int extent) const override { return 2.0f / static_cast<float>(extent); }
  AlgPtr clone() const override;

  int pad() const { return cfg_.pad; }
  float logit_scale() const;
  // audit hook: dense attention weights {fixed voxels, padded moving voxels}
  std::vector<float> attention_map(const Image& moving, const Image& fixed) const;

 private:
  GradGrid features(Tape* tape, const GradGrid& padded) const;

  int dim_;
  XiThetaConfig cfg_;
  std::uint64_t seed_;
  ConvEncoder encoder_;
};

// Calibrated on the 1D analytic oracle (cos(pi x/2) vs x + 0.07 sin(3 pi x),
// 256 samples, max error <= 0.02), then frozen.
inline constexpr int kXiFChannels = 128;
inline constexpr float kXiFOmegaScale = 60.0f;
inline constexpr float kXiFLogitScale = 0.8f;

struct XiFConfig {
  int channels = kXiFChannels;
  float omega_scale = kXiFOmegaScale;
  float logit_scale = kXiFLogitScale;
  std::uint64_t seed = 0x5EEDF00Dull;
};

// Training-free registration of images that are diffeomorphisms: a pointwise
// sine embedding (1x1 conv with large weights) followed by coordinate
// attention. Exactly translation-equivariant because the embedding is
// pointwise.
class XiF final : public RegistrationAlgorithm {
 public:
  XiF(int dim, int image_channels, XiFConfig cfg = {});

  Transform run(Tape* tape, const Image& moving, const Image& fixed) override;
  EquivClass declared_equivariance() const override { return EquivClass::WUTranslation; }
  float boundary_radius(int extent) const override { return 2.0f / static_cast<float>(extent); }
  AlgPtr clone() const override { return std::make_shared<XiF>(*this); }

  GradGrid embed(const GradGrid& image) const;

 private:
  int dim_;
  XiFConfig cfg_;
  GradGrid omega_;  // {m, c, 1...}
  GradGrid phase_;  // {m}
};

}  // namespace equireg
