#pragma once

#include "equireg/registration.hpp"

namespace equireg {

enum class RegularizerKind { Diffusion, GradIcon };

struct LossConfig {
  float lambda = 1.5f;
  int lncc_window = 5;  // odd, >= 3
  RegularizerKind reg = RegularizerKind::Diffusion;
  float jacobian_step = 0.0f;  // <= 0: half a voxel of the regularizer grid
  int reg_resolution = 0;      // <= 0: image resolution
};

// 1 - mean local normalized cross correlation over a box window (variance
// floor 1e-5). Multi-channel images average the per-channel loss.
GradGrid lncc_loss(const GradGrid& a, const GradGrid& b, int window);

// mean_x || J_t(x) - I ||_F^2 with J from central finite differences.
GradGrid diffusion_reg(const Transform& t, const GradGrid& sample_points, float step);

// Diffusion penalty of the inverse-consistency composite forward o backward.
GradGrid gradicon_reg(const Transform& forward, const Transform& backward,
                      const GradGrid& sample_points, float step);

struct ObjectiveParts {
  GradGrid total, sim_fwd, sim_bwd, reg;
  Transform forward, backward;
};

// Symmetric LNCC in both directions plus lambda * regularizer (diffusion uses
// the forward transform only; GradICON uses both directions).
ObjectiveParts training_objective_parts(Tape* tape, RegistrationAlgorithm& alg,
                                        const Image& moving, const Image& fixed,
                                        const LossConfig& cfg);
GradGrid training_objective(Tape* tape, RegistrationAlgorithm& alg, const Image& moving,
                            const Image& fixed, const LossConfig& cfg);

// The objective evaluated on the rotation-augmented algorithm
//   alg_hat[M, F] := R o alg[M o R, F o Q] o Q^-1,
// which equals the plain objective when alg is [W,U]-equivariant w.r.t. the
// class of R and Q. R and Q need exact inverses.
GradGrid rotation_augmented_objective(Tape* tape, RegistrationAlgorithm& alg,
                                      const Image& moving, const Image& fixed,
                                      const Transform& r, const Transform& q,
                                      const LossConfig& cfg);

// Per-pair test-time refinement: clones the algorithm's parameters, runs Adam
// on the training objective for this single pair, and returns the transform
// of the best-seen iterate. The original parameters are untouched.
Transform instance_optimize(const RegistrationAlgorithm& alg, const Image& moving,
                            const Image& fixed, int steps, const LossConfig& cfg,
                            float lr = 1e-4f, std::vector<float>* loss_trace = nullptr);

}  // namespace equireg
