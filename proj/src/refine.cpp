#include "equireg/refine.hpp"

#include <cmath>

namespace equireg {

namespace {

Shape kernel_shape(int dim, int cout, int cin, int k) {
  Shape s{cout, cin};
  for (int i = 0; i < dim; ++i) s.push_back(k);
  return s;
}

Param he_kernel(const std::string& name, int dim, int cout, int cin, int k, Rng& rng,
                float gain) {
  Shape s = kernel_shape(dim, cout, cin, k);
  std::size_t fan_in = static_cast<std::size_t>(cin);
  for (int i = 0; i < dim; ++i) fan_in *= static_cast<std::size_t>(k);
  float std = gain * std::sqrt(2.0f / static_cast<float>(fan_in));
  GradGrid g = GradGrid::random_normal(s, rng, std);
  return Param(name, s, g.vec());
}

}  // namespace

DisplacementNet::DisplacementNet(int dim, DisplacementNetConfig cfg, std::uint64_t seed,
                                 std::string name_prefix)
    : dim_(dim), cfg_(std::move(cfg)), prefix_(std::move(name_prefix)), seed_(seed) {
  Rng rng(seed);
  const auto& ch = cfg_.level_channels;
  int levels = static_cast<int>(ch.size());
  auto push = [&](int cout, int cin, int k, float gain, const std::string& tag) {
    params_.push_back(he_kernel(prefix_ + "." + tag + ".w", dim_, cout, cin, k, rng, gain));
    params_.push_back(Param(prefix_ + "." + tag + ".b", {cout},
                            std::vector<float>(static_cast<std::size_t>(cout), 0.0f)));
  };
  // encoder: two 3^D convs per level
  int cin = 2;
  for (int l = 0; l < levels; ++l) {
    push(ch[static_cast<std::size_t>(l)], cin, 3, cfg_.init_scale, "enc" + std::to_string(l) + "a");
    push(ch[static_cast<std::size_t>(l)], ch[static_cast<std::size_t>(l)], 3, cfg_.init_scale,
         "enc" + std::to_string(l) + "b");
    cin = ch[static_cast<std::size_t>(l)];
  }
  // decoder: one 3^D conv per level after concatenating the skip
  for (int l = levels - 2; l >= 0; --l) {
    int cat = ch[static_cast<std::size_t>(l + 1)] + ch[static_cast<std::size_t>(l)];
    push(ch[static_cast<std::size_t>(l)], cat, 3, cfg_.init_scale, "dec" + std::to_string(l));
  }
  // zero-initialized 1^D output conv -> identity transform at start
  Shape s = kernel_shape(dim_, dim_, ch[0], 1);
  params_.push_back(Param(prefix_ + ".out.w", s, std::vector<float>(shape_numel(s), 0.0f)));
  params_.push_back(Param(prefix_ + ".out.b", {dim_},
                          std::vector<float>(static_cast<std::size_t>(dim_), 0.0f)));

  // two r=1 convs per encoder level at stride 2^l, one per decoder level
  int r = 0;
  for (int l = 0; l < levels; ++l) r += 2 << l;
  for (int l = levels - 2; l >= 0; --l) r += 1 << l;
  receptive_radius_voxels_ = r;
}

GradGrid DisplacementNet::conv_block(Tape* tape, const GradGrid& x, std::size_t layer) const {
  const Param& w = params_[2 * layer];
  const Param& b = params_[2 * layer + 1];
  GradGrid wk = tape ? tape->leaf(w) : GradGrid(w.shape, w.value);
  GradGrid bk = tape ? tape->leaf(b) : GradGrid(b.shape, b.value);
  return bias_add(conv(x, wk, 1), bk);
}

Transform DisplacementNet::run(Tape* tape, const Image& moving, const Image& fixed) {
  if (moving.dim() != dim_ || fixed.dim() != dim_)
    throw ShapeError("displacement net: dimension mismatch");
  if (moving.spatial() != fixed.spatial())
    throw ShapeError("displacement net: resolution mismatch " + shape_str(moving.grid.shape()) +
                     " vs " + shape_str(fixed.grid.shape()));

  int levels = static_cast<int>(cfg_.level_channels.size());
  GradGrid x = concat_channels(moving.grid, fixed.grid);
  std::vector<GradGrid> skips;
  std::size_t layer = 0;
  for (int l = 0; l < levels; ++l) {
    if (l > 0) x = average_pool2(x);
    x = leaky_relu(conv_block(tape, x, layer++), cfg_.negative_slope);
    x = leaky_relu(conv_block(tape, x, layer++), cfg_.negative_slope);
    if (l + 1 < levels) skips.push_back(x);
  }
  for (int l = levels - 2; l >= 0; --l) {
    x = upsample2_nearest(x);
    x = concat_channels(x, skips[static_cast<std::size_t>(l)]);
    x = leaky_relu(conv_block(tape, x, layer++), cfg_.negative_slope);
  }
  GradGrid disp = conv_block(tape, x, layer);
  return Transform::displacement_field(disp, Transform::Extrap::ClipReflect);
}

std::vector<Param*> DisplacementNet::params() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (Param& p : params_) out.push_back(&p);
  return out;
}

float DisplacementNet::boundary_radius(int extent) const {
  return static_cast<float>(receptive_radius_voxels_) / static_cast<float>(extent);
}

AlgPtr DisplacementNet::clone() const {
  auto copy = std::make_shared<DisplacementNet>(dim_, cfg_, seed_, prefix_);
  copy->params_ = params_;
  return copy;
}

}  // namespace equireg
