#include "equireg/losses.hpp"

#include <cmath>

namespace equireg {

namespace {

constexpr float kVarianceFloor = 1e-5f;

GradGrid box_mean(const GradGrid& x, int window) {
  int d = x.dim();
  Shape ks{1, 1};
  std::size_t taps = 1;
  for (int i = 0; i < d; ++i) {
    ks.push_back(window);
    taps *= static_cast<std::size_t>(window);
  }
  GradGrid kernel = GradGrid::full(ks, 1.0f / static_cast<float>(taps));
  return conv(x, kernel, 1);
}

GradGrid lncc_single_channel(const GradGrid& a, const GradGrid& b, int window) {
  GradGrid ma = box_mean(a, window);
  GradGrid mb = box_mean(b, window);
  GradGrid va = sub(box_mean(mul(a, a), window), mul(ma, ma));
  GradGrid vb = sub(box_mean(mul(b, b), window), mul(mb, mb));
  GradGrid cov = sub(box_mean(mul(a, b), window), mul(ma, mb));
  GradGrid denom = sqrt_op(mul(scalar_add(va, kVarianceFloor), scalar_add(vb, kVarianceFloor)));
  GradGrid ncc = mul(cov, reciprocal_eps(denom, 0.0f));
  return scalar_add(scalar_mul(mean(ncc), -1.0f), 1.0f);
}

}  // namespace

GradGrid lncc_loss(const GradGrid& a, const GradGrid& b, int window) {
  if (a.shape() != b.shape())
    throw ShapeError("lncc: resolution mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  if (window < 3 || window % 2 == 0)
    throw ContractError("lncc: window must be odd and >= 3");
  GradGrid acc;
  for (int c = 0; c < a.channels(); ++c) {
    GradGrid l = lncc_single_channel(select_channel(a, c), select_channel(b, c), window);
    acc = (c == 0) ? l : add(acc, l);
  }
  return scalar_mul(acc, 1.0f / static_cast<float>(a.channels()));
}

GradGrid diffusion_reg(const Transform& t, const GradGrid& sample_points, float step) {
  int d = sample_points.channels();
  GradGrid jac = transform_jacobian(t, sample_points, step);
  std::size_t samples = sample_points.size() / static_cast<std::size_t>(d);
  GradGrid ident(jac.shape());
  for (int i = 0; i < d; ++i) {
    float* plane = ident.raw() + static_cast<std::size_t>(i * d + i) * samples;
    for (std::size_t s = 0; s < samples; ++s) plane[s] = 1.0f;
  }
  GradGrid diff = sub(jac, ident);
  // mean over points of the squared Frobenius norm
  return scalar_mul(sum(mul(diff, diff)), 1.0f / static_cast<float>(samples));
}

GradGrid gradicon_reg(const Transform& forward, const Transform& backward,
                      const GradGrid& sample_points, float step) {
  return diffusion_reg(compose(forward, backward), sample_points, step);
}

ObjectiveParts training_objective_parts(Tape* tape, RegistrationAlgorithm& alg,
                                        const Image& moving, const Image& fixed,
                                        const LossConfig& cfg) {
  if (cfg.lambda <= 0.0f) throw ContractError("loss config: lambda must be positive");
  ObjectiveParts parts;
  parts.forward = alg.run(tape, moving, fixed);
  parts.backward = alg.run(tape, fixed, moving);
  parts.sim_fwd = lncc_loss(warp(moving, parts.forward).grid, fixed.grid, cfg.lncc_window);
  parts.sim_bwd = lncc_loss(warp(fixed, parts.backward).grid, moving.grid, cfg.lncc_window);

  int reg_res = cfg.reg_resolution > 0 ? cfg.reg_resolution : moving.spatial()[0];
  std::vector<int> sp(static_cast<std::size_t>(moving.dim()), reg_res);
  GradGrid points = coord_grid(sp);
  float step = cfg.jacobian_step > 0.0f ? cfg.jacobian_step : 0.5f / static_cast<float>(reg_res);
  parts.reg = cfg.reg == RegularizerKind::Diffusion
                  ? diffusion_reg(parts.forward, points, step)
                  : gradicon_reg(parts.forward, parts.backward, points, step);

  parts.total = add(add(parts.sim_fwd, parts.sim_bwd), scalar_mul(parts.reg, cfg.lambda));
  return parts;
}

GradGrid training_objective(Tape* tape, RegistrationAlgorithm& alg, const Image& moving,
                            const Image& fixed, const LossConfig& cfg) {
  return training_objective_parts(tape, alg, moving, fixed, cfg).total;
}

namespace {

struct AugmentedAlg final : RegistrationAlgorithm {
  RegistrationAlgorithm& inner;
  Transform r, q, q_inv;

  AugmentedAlg(RegistrationAlgorithm& alg, Transform r_, Transform q_)
      : inner(alg), r(std::move(r_)), q(std::move(q_)) {
    auto qi = q.inverse();
    if (!qi) throw ContractError("rotation_augmented_objective: Q has no exact inverse");
    if (!r.inverse()) throw ContractError("rotation_augmented_objective: R has no exact inverse");
    q_inv = *qi;
  }

  Transform run(Tape* tape, const Image& moving, const Image& fixed) override {
    Image mr = warp(moving, r);
    Image fq = warp(fixed, q);
    Transform phi = inner.run(tape, mr, fq);
    return compose(compose(r, phi), q_inv);
  }

  std::vector<Param*> params() override { return inner.params(); }
  AlgPtr clone() const override {
    throw ContractError("augmented algorithm view is not cloneable");
  }
};

}  // namespace

GradGrid rotation_augmented_objective(Tape* tape, RegistrationAlgorithm& alg,
                                      const Image& moving, const Image& fixed,
                                      const Transform& r, const Transform& q,
                                      const LossConfig& cfg) {
  AugmentedAlg wrapped(alg, r, q);
  return training_objective(tape, wrapped, moving, fixed, cfg);
}

Transform instance_optimize(const RegistrationAlgorithm& alg, const Image& moving,
                            const Image& fixed, int steps, const LossConfig& cfg, float lr,
                            std::vector<float>* loss_trace) {
  AlgPtr clone = alg.clone();
  std::vector<Param*> params = unique_params(clone->params());
  if (steps > 0 && params.empty())
    throw ContractError("instance_optimize: algorithm has no trainable parameters");

  AdamState opt(AdamConfig{lr, 0.9f, 0.999f, 1e-8f});
  float best_loss = std::numeric_limits<float>::infinity();
  std::vector<std::vector<float>> best_values;

  auto snapshot = [&]() {
    best_values.clear();
    for (const Param* p : params) best_values.push_back(p->value);
  };

  for (int it = 0; it < steps; ++it) {
    Tape tape;
    GradGrid loss = training_objective(&tape, *clone, moving, fixed, cfg);
    float v = loss.item();
    if (!std::isfinite(v)) throw ContractError("instance_optimize: objective diverged");
    if (loss_trace) loss_trace->push_back(v);
    if (v < best_loss) {
      best_loss = v;
      snapshot();
    }
    tape.backward(loss);
    opt.step_from_tape(params, tape);
  }
  if (steps > 0) {
    // keep the last iterate only if it improves on the best seen
    float final_loss = training_objective(nullptr, *clone, moving, fixed, cfg).item();
    if (loss_trace) loss_trace->push_back(final_loss);
    if (final_loss > best_loss)
      for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  }
  return clone->run(nullptr, moving, fixed);
}

}  // namespace equireg
