#pragma once

#include <functional>

#include "equireg/attention_reg.hpp"
#include "equireg/dataset.hpp"
#include "equireg/losses.hpp"
#include "equireg/refine.hpp"

namespace equireg {

struct TrainSchedule {
  int warmup_steps = 200;  // diffusion regularizer, then GradICON
  int psi3_step = 3000;    // final refinement layer joins here
  int total_steps = 6000;
  int batch = 4;
  float lr = 1e-4f;
  float lambda = 1.5f;
  int lncc_window = 5;
  int reg_resolution = 0;
  std::uint64_t seed = 1;
  int log_every = 25;
  int threads = 0;  // 0 = hardware concurrency

  void validate() const;  // warmup < psi3 < total, batch > 0
};

struct LossRow {
  int step = 0;
  double sim_fwd = 0.0, sim_bwd = 0.0, reg = 0.0, total = 0.0;
};

struct TrainResult {
  std::vector<LossRow> log;
  bool diverged = false;
  int diverged_step = -1;
};

// Ignores its inputs; always shifts right by its single parameter t.
class FixedTranslationNet final : public RegistrationAlgorithm {
 public:
  explicit FixedTranslationNet(int dim) : dim_(dim) {}
  Transform run(Tape* tape, const Image& moving, const Image& fixed) override;
  std::vector<Param*> params() override { return {&t_}; }
  AlgPtr clone() const override;
  void set_t(float v) { t_.value[0] = v; }
  float t() const { return t_.value[0]; }

 private:
  int dim_;
  Param t_{"tau.t", {1}, {0.0f}};
};

// A multi-step assembly whose final refinement layer joins after
// schedule.psi3_step. Both views share the same parameter storage; the
// final layer's zero-initialized output keeps them numerically identical
// until it starts training.
struct MultiStepAlgorithm {
  AlgPtr pre;   // without the final refinement layer
  AlgPtr full;  // with it
  AlgPtr first_stage;
  std::vector<AlgPtr> psis;

  AlgPtr active(int step, const TrainSchedule& sched) const {
    return (full && step >= sched.psi3_step) ? full : pre;
  }
  AlgPtr deployed() const { return full ? full : pre; }
  std::vector<Param*> all_params() const;
};

// kind: "carl" (Xi_theta first stage), "baseline" (displacement net first
// stage, the non-equivariant control), "xi-only" (Down{Down{Xi_theta}}).
MultiStepAlgorithm build_algorithm(const std::string& kind, int resolution,
                                   const XiThetaConfig& xi_cfg,
                                   const DisplacementNetConfig& psi_cfg, std::uint64_t seed);

using StepCallback = std::function<void(int step, const LossRow&)>;

TrainResult train_algorithm(MultiStepAlgorithm& alg, const std::vector<RegPair>& pairs,
                            const TrainSchedule& sched, const StepCallback& cb = nullptr);

// Loss landscape of the single-parameter translation net, alone and as the
// first step of TwoStep{tau, phi}, with tape gradients w.r.t. t.
struct LandscapeRow {
  float t = 0.0f;
  double loss_tau = 0.0, loss_two = 0.0, grad_tau = 0.0, grad_two = 0.0;
};

std::vector<LandscapeRow> capture_radius_study(const AlgPtr& phi,
                                               const std::vector<RegPair>& pairs,
                                               const std::vector<float>& t_values,
                                               int lncc_window);

// Largest radius around the sweep's own optimum with the correct gradient
// sign on both sides (the capture radius read off a landscape column).
double capture_radius(const std::vector<LandscapeRow>& rows, bool two_step_column);

std::string loss_log_csv(const std::vector<LossRow>& rows);
std::string landscape_csv(const std::vector<LandscapeRow>& rows);
std::string dice_csv(const DiceSummary& dice);

}  // namespace equireg
