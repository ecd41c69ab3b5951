#include "equireg/attention_reg.hpp"

#include <cmath>

namespace equireg {

namespace {

Shape conv_kernel_shape(int dim, int cout, int cin, int k) {
  Shape s{cout, cin};
  for (int i = 0; i < dim; ++i) s.push_back(k);
  return s;
}

}  // namespace

ConvEncoder::ConvEncoder(int dim, int in_channels, EncoderConfig cfg, std::uint64_t seed,
                         std::string name_prefix)
    : dim_(dim), in_channels_(in_channels), cfg_(std::move(cfg)) {
  dilations_ = cfg_.dilations;
  if (cfg_.extra_dilated_block) dilations_.push_back(8);
  Rng rng(seed);
  int cin = in_channels_;
  for (std::size_t l = 0; l < dilations_.size(); ++l) {
    Shape s = conv_kernel_shape(dim_, cfg_.width, cin, 3);
    std::size_t fan_in = static_cast<std::size_t>(cin);
    for (int i = 0; i < dim_; ++i) fan_in *= 3;
    float gain = (l + 1 == dilations_.size()) ? cfg_.final_gain : 1.0f;
    float std = gain * std::sqrt(2.0f / static_cast<float>(fan_in));
    params_.push_back(Param(name_prefix + ".w" + std::to_string(l), s,
                            GradGrid::random_normal(s, rng, std).vec()));
    cin = cfg_.width;
    receptive_radius_ += dilations_[l];
  }
}

GradGrid ConvEncoder::encode(Tape* tape, const GradGrid& image) const {
  if (image.channels() != in_channels_)
    throw ShapeError("encoder: expected " + std::to_string(in_channels_) + " channels, got " +
                     shape_str(image.shape()));
  GradGrid x = image;
  for (std::size_t l = 0; l < dilations_.size(); ++l) {
    const Param& w = params_[l];
    GradGrid wk = tape ? tape->leaf(w) : GradGrid(w.shape, w.value);
    x = conv(x, wk, dilations_[l]);
    if (l + 1 < dilations_.size()) x = leaky_relu(x, cfg_.negative_slope);
  }
  return x;
}

std::vector<Param*> ConvEncoder::params() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (Param& p : params_) out.push_back(&p);
  return out;
}

GradGrid group_averaged_encode(const ConvEncoder& encoder, Tape* tape, const GradGrid& image,
                               int group_size) {
  if (group_size == 1) return encoder.encode(tape, image);
  if (group_size != 2 && group_size != 4)
    throw ContractError("group_averaged_encode: group size must be 1, 2 or 4");
  int step = 4 / group_size;
  GradGrid acc;
  for (int g = 0; g < group_size; ++g) {
    int q = g * step;
    GradGrid rotated = rot90(image, -q);
    GradGrid feat = rot90(encoder.encode(tape, rotated), q);
    acc = (g == 0) ? feat : add(acc, feat);
  }
  return scalar_mul(acc, 1.0f / static_cast<float>(group_size));
}

Transform coordinate_attention(const GradGrid& moving_features, const GradGrid& fixed_features,
                               const GradGrid& moving_coords, const std::vector<int>& fixed_spatial,
                               float logit_scale) {
  if (moving_features.spatial() != moving_coords.spatial())
    throw ShapeError("coordinate_attention: feature/coordinate grids disagree");
  GradGrid queries = to_tokens(fixed_features);
  GradGrid keys = to_tokens(moving_features);
  GradGrid values = to_tokens(moving_coords);
  GradGrid out = attention(queries, keys, values, logit_scale);
  GradGrid coord_map = from_tokens(out, fixed_spatial);
  return Transform::coordinate_map(coord_map, Transform::Extrap::ClipReflect);
}

// ---------------------------------------------------------------------------
// XiTheta
// ---------------------------------------------------------------------------

XiTheta::XiTheta(int dim, XiThetaConfig cfg, std::uint64_t seed)
    : dim_(dim), cfg_(cfg), seed_(seed), encoder_(dim, 1, cfg.encoder, seed) {
  if (cfg_.rotation_group != 1 && dim != 2)
    throw ContractError("xi_theta: rotation-averaged encoder is 2D only");
}

float XiTheta::logit_scale() const {
  return cfg_.logit_scale > 0.0f ? cfg_.logit_scale
                                 : 1.0f / std::sqrt(static_cast<float>(cfg_.encoder.width));
}

GradGrid XiTheta::features(Tape* tape, const GradGrid& padded) const {
  return cfg_.rotation_group == 1 ? encoder_.encode(tape, padded)
                                  : group_averaged_encode(encoder_, tape, padded, cfg_.rotation_group);
}

Transform XiTheta::run(Tape* tape, const Image& moving, const Image& fixed) {
  if (moving.spatial() != fixed.spatial())
    throw ShapeError("xi_theta: resolution mismatch");
  GradGrid moving_feat = features(tape, pad_spatial_zero(moving.grid, cfg_.pad));
  GradGrid fixed_feat = crop_spatial(features(tape, pad_spatial_zero(fixed.grid, cfg_.pad)), cfg_.pad);
  GradGrid coords = coord_grid_padded(moving.spatial(), cfg_.pad);
  return coordinate_attention(moving_feat, fixed_feat, coords, fixed.spatial(), logit_scale());
}

std::vector<float> XiTheta::attention_map(const Image& moving, const Image& fixed) const {
  GradGrid moving_feat = features(nullptr, pad_spatial_zero(moving.grid, cfg_.pad));
  GradGrid fixed_feat =
      crop_spatial(features(nullptr, pad_spatial_zero(fixed.grid, cfg_.pad)), cfg_.pad);
  return attention_weights(to_tokens(fixed_feat), to_tokens(moving_feat), logit_scale());
}

AlgPtr XiTheta::clone() const {
  auto copy = std::make_shared<XiTheta>(dim_, cfg_, seed_);
  copy->encoder_.set_params_storage(encoder_.params_storage_copy());
  return copy;
}

// ---------------------------------------------------------------------------
// XiF
// ---------------------------------------------------------------------------

XiF::XiF(int dim, int image_channels, XiFConfig cfg) : dim_(dim), cfg_(cfg) {
  Rng rng(cfg.seed);
  Shape ws = conv_kernel_shape(dim, cfg.channels, image_channels, 1);
  omega_ = GradGrid::random_normal(ws, rng, cfg.omega_scale);
  phase_ = GradGrid::random_uniform({cfg.channels}, rng, 0.0f,
                                    2.0f * 3.14159265358979323846f);
}

GradGrid XiF::embed(const GradGrid& image) const {
  return sine(bias_add(conv(image, omega_, 1), phase_));
}

Transform XiF::run(Tape*, const Image& moving, const Image& fixed) {
  if (moving.spatial() != fixed.spatial())
    throw ShapeError("xi_f: resolution mismatch");
  GradGrid keys = embed(moving.grid);
  GradGrid queries = embed(fixed.grid);
  GradGrid coords = coord_grid(moving.spatial());
  return coordinate_attention(keys, queries, coords, fixed.spatial(), cfg_.logit_scale);
}

}  // namespace equireg
