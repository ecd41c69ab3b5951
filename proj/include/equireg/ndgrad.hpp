#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "equireg/errors.hpp"
#include "equireg/rng.hpp"

namespace equireg {

// Extents, channels first for image-like grids: {c, n1, ..., nD}.
// Token matrices (attention) use the plain 2-axis form {rows, cols}.
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense float32 grid, optionally tracked on a tape for reverse-mode
// differentiation. Data is shared (copy-on-construct ops, never in-place),
// so copies are cheap and tracked values are immutable.
class GradGrid {
 public:
  GradGrid() = default;
  explicit GradGrid(Shape shape);
  GradGrid(Shape shape, std::vector<float> data);

  static GradGrid scalar(float v);
  static GradGrid full(Shape shape, float v);
  static GradGrid random_normal(Shape shape, Rng& rng, float stddev);
  static GradGrid random_uniform(Shape shape, Rng& rng, float lo, float hi);

  const Shape& shape() const { return shape_; }
  int channels() const { return shape_.empty() ? 0 : shape_[0]; }
  int dim() const { return static_cast<int>(shape_.size()) - 1; }
  std::vector<int> spatial() const;
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  const float* data() const { return data_->data(); }
  const std::vector<float>& vec() const { return *data_; }
  float at(std::size_t i) const { return (*data_)[i]; }
  // Scalar extraction; throws ContractError unless size() == 1.
  float item() const;

  // Mutable access; contract: only for grids not tracked on a tape.
  float* raw();

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  GradGrid detach() const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
  friend class Tape;
};

// Named trainable parameter storage. Modules own Params; each forward pass
// binds them to the active tape via Tape::leaf.
struct Param {
  std::string name;
  Shape shape;
  std::vector<float> value;

  Param() = default;
  Param(std::string n, Shape s, std::vector<float> v)
      : name(std::move(n)), shape(std::move(s)), value(std::move(v)) {}
  std::size_t size() const { return value.size(); }
};

// Records the forward computation as an ordered list of nodes; backward
// replays it in strict reverse order. One tape plus its grids form a
// single-threaded unit of work.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Bind a parameter (or constant) as a tracked leaf. Binding the same Param
  // several times is allowed; its gradients accumulate across bindings.
  GradGrid leaf(const Param& p);
  GradGrid leaf(const GradGrid& constant);

  // Reverse pass from a scalar loss. Calling backward a second time without
  // recording new forward work is a contract error.
  void backward(const GradGrid& loss);

  // Gradient of the loss w.r.t. a tracked grid (zeros if unreachable).
  GradGrid grad(const GradGrid& of) const;
  // Sum of gradients over every leaf binding of this Param on this tape.
  std::vector<float> param_grad(const Param& p) const;

  std::size_t num_nodes() const { return nodes_.size(); }

  // --- op implementation interface ---
  GradGrid emit(Shape shape, std::vector<float> data,
                std::function<void(Tape&)> backward_fn);
  // Gradient buffer of a node, allocated on first touch.
  std::vector<float>& grad_buf(int node);
  bool reached(int node) const;

 private:
  struct NodeRec {
    std::size_t numel = 0;
    std::vector<float> grad;  // empty until touched in backward
    std::function<void(Tape&)> backward_fn;
  };
  std::vector<NodeRec> nodes_;
  std::vector<std::pair<const Param*, int>> param_leaves_;
  std::size_t nodes_at_last_backward_ = static_cast<std::size_t>(-1);
};

// ---------------------------------------------------------------------------
// Primitive operations. All return a new grid; inputs sharing a tape produce
// a tracked result, pure constants produce a constant. Mixing two different
// tapes is a contract error.
// ---------------------------------------------------------------------------

// pointwise
GradGrid add(const GradGrid& a, const GradGrid& b);
GradGrid sub(const GradGrid& a, const GradGrid& b);
GradGrid mul(const GradGrid& a, const GradGrid& b);
GradGrid scalar_mul(const GradGrid& a, float s);
GradGrid scalar_add(const GradGrid& a, float s);
GradGrid sine(const GradGrid& a);
GradGrid leaky_relu(const GradGrid& a, float negative_slope = 0.01f);
GradGrid sqrt_op(const GradGrid& a);                    // pre: entries >= 0
GradGrid reciprocal_eps(const GradGrid& a, float eps);  // 1 / (a + eps)
GradGrid clip01(const GradGrid& a);     // componentwise clamp to [0, 1]
GradGrid reflect01(const GradGrid& a);  // x<0 -> -x ; x>1 -> 2-x
// Per-channel bias: a {c, sp...} + bias {c}.
GradGrid bias_add(const GradGrid& a, const GradGrid& bias);

// reductions -> shape {1}
GradGrid sum(const GradGrid& a);
GradGrid mean(const GradGrid& a);

// softmax over the last axis of a 2-axis grid {rows, cols}
GradGrid softmax_rows(const GradGrid& a);

// shape ops
GradGrid reshape(const GradGrid& a, Shape s);
GradGrid concat_channels(const GradGrid& a, const GradGrid& b);
GradGrid pad_spatial_zero(const GradGrid& a, int pad);
GradGrid crop_spatial(const GradGrid& a, int crop);
// {c, n1..nD} <-> token matrix {n1*..*nD, c}
GradGrid to_tokens(const GradGrid& features);
GradGrid from_tokens(const GradGrid& tokens, std::vector<int> spatial);
// single channel {1, n...} out of {c, n...}
GradGrid select_channel(const GradGrid& a, int channel);
// quarter-turn rotations of 2D square grids (positive = counterclockwise)
GradGrid rot90(const GradGrid& a, int quarter_turns);

// Same-size dilated correlation with zero padding.
// input {cin, sp...}, kernel {cout, cin, k...}, odd k per axis.
GradGrid conv(const GradGrid& input, const GradGrid& kernel, int dilation = 1);

// Scaled-dot-product attention, no positional embedding, no masking.
// queries {tq, f}, keys {tk, f}, values {tk, dv} -> {tq, dv}.
GradGrid attention(const GradGrid& queries, const GradGrid& keys,
                   const GradGrid& values, float logit_scale);
// Audit helper: dense softmax weight matrix {tq, tk} (not differentiable).
std::vector<float> attention_weights(const GradGrid& queries,
                                     const GradGrid& keys, float logit_scale);

// Multilinear interpolation of values {c, n...} at points {D, m...} given in
// domain coordinates (voxel centers at (i+0.5)/n). The strict variant
// requires points inside [0,1]^D and clamps the half-voxel boundary band;
// the zero variant accepts any points, reading missing neighbors as zero.
GradGrid grid_sample(const GradGrid& values, const GradGrid& points);
GradGrid grid_sample_zero(const GradGrid& values, const GradGrid& points);

GradGrid average_pool2(const GradGrid& a);
GradGrid upsample2_nearest(const GradGrid& a);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Per-parameter first/second moment grids plus step counters.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(float lr) { cfg_.lr = lr; }

  // One update from explicit gradients (grads[i] matches params[i]).
  void step(const std::vector<Param*>& params,
            const std::vector<std::vector<float>>& grads);
  // Convenience: pull gradients off a tape after backward().
  void step_from_tape(const std::vector<Param*>& params, const Tape& tape);

  int step_count(const Param& p) const;
  void reset();

 private:
  struct Moments {
    std::vector<float> m, v;
    int t = 0;
  };
  AdamConfig cfg_;
  std::unordered_map<const Param*, Moments> moments_;
};

}  // namespace equireg
