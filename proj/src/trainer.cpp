#include "equireg/trainer.hpp"

#include <cmath>
#include <future>
#include <sstream>
#include <thread>

namespace equireg {

void TrainSchedule::validate() const {
  if (batch <= 0 || total_steps < 0) throw ContractError("schedule: bad batch/steps");
  if (total_steps > 0 && !(warmup_steps <= psi3_step && psi3_step <= total_steps))
    throw ContractError("schedule: need warmup <= psi3 <= total");
}

Transform FixedTranslationNet::run(Tape* tape, const Image& moving, const Image&) {
  if (moving.dim() != dim_) throw ShapeError("fixed translation net: dimension mismatch");
  GradGrid tv = tape ? tape->leaf(t_) : GradGrid(t_.shape, t_.value);
  GradGrid offset = reshape(tv, {1, 1});
  for (int a = 1; a < dim_; ++a) offset = concat_channels(offset, GradGrid({1, 1}));
  GradGrid off_vec = reshape(offset, {dim_});
  GradGrid neg_vec = scalar_mul(off_vec, -1.0f);
  return Transform::analytic(
      dim_, [off_vec](const GradGrid& pts) { return bias_add(pts, off_vec); },
      [neg_vec](const GradGrid& pts) { return bias_add(pts, neg_vec); });
}

AlgPtr FixedTranslationNet::clone() const {
  auto c = std::make_shared<FixedTranslationNet>(dim_);
  c->t_ = t_;
  return c;
}

std::vector<Param*> MultiStepAlgorithm::all_params() const {
  std::vector<Param*> out;
  AlgPtr a = deployed();
  if (a) out = a->params();
  return unique_params(out);
}

MultiStepAlgorithm build_algorithm(const std::string& kind, int resolution,
                                   const XiThetaConfig& xi_cfg,
                                   const DisplacementNetConfig& psi_cfg, std::uint64_t seed) {
  if (resolution % 4 != 0)
    throw ContractError("build_algorithm: resolution must be divisible by 4");
  MultiStepAlgorithm out;
  if (kind == "carl" || kind == "baseline") {
    if (kind == "carl")
      out.first_stage = std::make_shared<XiTheta>(2, xi_cfg, seed);
    else
      out.first_stage = std::make_shared<DisplacementNet>(2, psi_cfg, seed ^ 0x9999, "psi0");
    out.psis = {std::make_shared<DisplacementNet>(2, psi_cfg, seed + 1, "psi1"),
                std::make_shared<DisplacementNet>(2, psi_cfg, seed + 2, "psi2"),
                std::make_shared<DisplacementNet>(2, psi_cfg, seed + 3, "psi3")};
    out.pre = assemble_carl(out.first_stage, out.psis, false);
    out.full = assemble_carl(out.first_stage, out.psis, true);
  } else if (kind == "xi-only") {
    out.first_stage = std::make_shared<XiTheta>(2, xi_cfg, seed);
    out.pre = downsample(downsample(out.first_stage));
    out.full = nullptr;
  } else {
    throw ContractError("unknown algorithm kind: " + kind);
  }
  return out;
}

namespace {

struct PairResult {
  LossRow row;
  std::vector<std::vector<float>> grads;
  bool finite = true;
};

PairResult run_pair(RegistrationAlgorithm& alg, const std::vector<Param*>& params,
                    const RegPair& pair, const LossConfig& cfg) {
  PairResult res;
  Tape tape;
  ObjectiveParts parts = training_objective_parts(&tape, alg, pair.moving, pair.fixed, cfg);
  res.row.sim_fwd = parts.sim_fwd.item();
  res.row.sim_bwd = parts.sim_bwd.item();
  res.row.reg = parts.reg.item();
  res.row.total = parts.total.item();
  if (!std::isfinite(res.row.total)) {
    res.finite = false;
    return res;
  }
  tape.backward(parts.total);
  res.grads.reserve(params.size());
  for (Param* p : params) res.grads.push_back(tape.param_grad(*p));
  return res;
}

}  // namespace

TrainResult train_algorithm(MultiStepAlgorithm& alg, const std::vector<RegPair>& pairs,
                            const TrainSchedule& sched, const StepCallback& cb) {
  sched.validate();
  if (pairs.empty()) throw ContractError("train: empty dataset");
  TrainResult result;
  if (sched.total_steps == 0) return result;

  AdamState opt(AdamConfig{sched.lr, 0.9f, 0.999f, 1e-8f});
  Rng rng(sched.seed);
  unsigned workers = sched.threads > 0 ? static_cast<unsigned>(sched.threads)
                                       : std::max(1u, std::thread::hardware_concurrency());

  for (int step = 0; step < sched.total_steps; ++step) {
    LossConfig cfg;
    cfg.lambda = sched.lambda;
    cfg.lncc_window = sched.lncc_window;
    cfg.reg_resolution = sched.reg_resolution;
    cfg.reg = step < sched.warmup_steps ? RegularizerKind::Diffusion : RegularizerKind::GradIcon;
    AlgPtr active = alg.active(step, sched);
    std::vector<Param*> params = unique_params(active->params());

    std::vector<std::size_t> batch_idx;
    for (int b = 0; b < sched.batch; ++b) batch_idx.push_back(rng.index(pairs.size()));

    std::vector<PairResult> results(batch_idx.size());
    for (std::size_t start = 0; start < batch_idx.size(); start += workers) {
      std::size_t chunk = std::min<std::size_t>(workers, batch_idx.size() - start);
      std::vector<std::future<PairResult>> futs;
      for (std::size_t k = 0; k < chunk; ++k)
        futs.push_back(std::async(std::launch::async, [&, k, start]() {
          return run_pair(*active, params, pairs[batch_idx[start + k]], cfg);
        }));
      for (std::size_t k = 0; k < chunk; ++k) results[start + k] = futs[k].get();
    }

    LossRow row;
    row.step = step;
    std::vector<std::vector<float>> grads;
    for (Param* p : params) grads.emplace_back(p->value.size(), 0.0f);
    float inv = 1.0f / static_cast<float>(batch_idx.size());
    for (const PairResult& r : results) {
      if (!r.finite) {
        result.diverged = true;
        result.diverged_step = step;
        return result;
      }
      row.sim_fwd += r.row.sim_fwd * inv;
      row.sim_bwd += r.row.sim_bwd * inv;
      row.reg += r.row.reg * inv;
      row.total += r.row.total * inv;
      for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += r.grads[i][j] * inv;
    }
    opt.step(params, grads);
    if (step % sched.log_every == 0 || step + 1 == sched.total_steps) {
      result.log.push_back(row);
      if (cb) cb(step, row);
    }
  }
  return result;
}

std::vector<LandscapeRow> capture_radius_study(const AlgPtr& phi,
                                               const std::vector<RegPair>& pairs,
                                               const std::vector<float>& t_values,
                                               int lncc_window) {
  if (pairs.empty()) throw ContractError("capture_radius_study: no pairs");
  std::vector<LandscapeRow> rows;
  FixedTranslationNet tau(2);
  Param* tparam = tau.params()[0];
  for (float t : t_values) {
    LandscapeRow row;
    row.t = t;
    for (const RegPair& p : pairs) {
      tau.set_t(t);
      {
        Tape tape;
        Transform phi_tau = tau.run(&tape, p.moving, p.fixed);
        GradGrid loss = lncc_loss(warp(p.moving, phi_tau).grid, p.fixed.grid, lncc_window);
        row.loss_tau += loss.item();
        tape.backward(loss);
        row.grad_tau += tape.param_grad(*tparam)[0];
      }
      {
        Tape tape;
        Transform coarse = tau.run(&tape, p.moving, p.fixed);
        Image resampled = warp(p.moving, coarse);
        Transform refine = phi->run(&tape, resampled, p.fixed);
        Transform both = compose(coarse, refine);
        GradGrid loss = lncc_loss(warp(p.moving, both).grid, p.fixed.grid, lncc_window);
        row.loss_two += loss.item();
        tape.backward(loss);
        row.grad_two += tape.param_grad(*tparam)[0];
      }
    }
    double inv = 1.0 / static_cast<double>(pairs.size());
    row.loss_tau *= inv;
    row.loss_two *= inv;
    row.grad_tau *= inv;
    row.grad_two *= inv;
    rows.push_back(row);
  }
  return rows;
}

double capture_radius(const std::vector<LandscapeRow>& rows, bool two_step_column) {
  if (rows.size() < 3) return 0.0;
  auto loss = [&](std::size_t i) { return two_step_column ? rows[i].loss_two : rows[i].loss_tau; };
  auto grad = [&](std::size_t i) { return two_step_column ? rows[i].grad_two : rows[i].grad_tau; };
  std::size_t opt = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (loss(i) < loss(opt)) opt = i;
  double radius = 0.0;
  // walk outwards while the gradient keeps pointing back at the optimum
  for (std::size_t i = opt + 1; i < rows.size(); ++i) {
    if (grad(i) > 0.0)
      radius = std::max(radius, 0.0 + rows[i].t - rows[opt].t);
    else
      break;
  }
  double left = 0.0;
  for (std::size_t i = opt; i-- > 0;) {
    if (grad(i) < 0.0)
      left = std::max(left, 0.0 + rows[opt].t - rows[i].t);
    else
      break;
  }
  return std::min(radius, left);
}

std::string loss_log_csv(const std::vector<LossRow>& rows) {
  std::ostringstream os;
  os << "step,sim_fwd,sim_bwd,reg,total\n";
  char buf[192];
  for (const LossRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", r.step, r.sim_fwd, r.sim_bwd,
                  r.reg, r.total);
    os << buf;
  }
  return os.str();
}

std::string landscape_csv(const std::vector<LandscapeRow>& rows) {
  std::ostringstream os;
  os << "t,loss_tau,loss_two,grad_tau,grad_two\n";
  char buf[224];
  for (const LandscapeRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g,%.9g\n", static_cast<double>(r.t),
                  r.loss_tau, r.loss_two, r.grad_tau, r.grad_two);
    os << buf;
  }
  return os.str();
}

std::string dice_csv(const DiceSummary& dice) {
  std::ostringstream os;
  os << "pair_id,dice\n";
  char buf[96];
  for (std::size_t i = 0; i < dice.per_pair.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, dice.per_pair[i]);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "mean,%.9g\n", dice.mean);
  os << buf;
  return os.str();
}

}  // namespace equireg
