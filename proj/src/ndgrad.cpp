#include "equireg/ndgrad.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace equireg {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(e);
  }
  return s.empty() ? 0 : n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << '}';
  return os.str();
}

// ---------------------------------------------------------------------------
// GradGrid
// ---------------------------------------------------------------------------

GradGrid::GradGrid(Shape shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<float>>(shape_numel(shape_), 0.0f)) {}

GradGrid::GradGrid(Shape shape, std::vector<float> data) : shape_(std::move(shape)) {
  if (data.size() != shape_numel(shape_))
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape_));
  data_ = std::make_shared<std::vector<float>>(std::move(data));
}

GradGrid GradGrid::scalar(float v) { return GradGrid({1}, {v}); }

GradGrid GradGrid::full(Shape shape, float v) {
  GradGrid g(std::move(shape));
  std::fill(g.data_->begin(), g.data_->end(), v);
  return g;
}

GradGrid GradGrid::random_normal(Shape shape, Rng& rng, float stddev) {
  GradGrid g(std::move(shape));
  for (float& x : *g.data_) x = static_cast<float>(rng.normal(0.0, stddev));
  return g;
}

GradGrid GradGrid::random_uniform(Shape shape, Rng& rng, float lo, float hi) {
  GradGrid g(std::move(shape));
  for (float& x : *g.data_) x = static_cast<float>(rng.uniform(lo, hi));
  return g;
}

std::vector<int> GradGrid::spatial() const {
  if (shape_.empty()) return {};
  return std::vector<int>(shape_.begin() + 1, shape_.end());
}

float GradGrid::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar grid " + shape_str(shape_));
  return (*data_)[0];
}

float* GradGrid::raw() {
  if (tracked()) throw ContractError("mutable access to a tape-tracked grid");
  return data_->data();
}

GradGrid GradGrid::detach() const {
  GradGrid g;
  g.shape_ = shape_;
  g.data_ = data_;
  return g;
}

bool GradGrid::all_finite() const {
  for (float v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

GradGrid Tape::emit(Shape shape, std::vector<float> data,
                    std::function<void(Tape&)> backward_fn) {
  GradGrid g(std::move(shape), std::move(data));
  g.tape_ = this;
  g.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(NodeRec{g.size(), {}, std::move(backward_fn)});
  return g;
}

GradGrid Tape::leaf(const Param& p) {
  GradGrid g = emit(p.shape, p.value, nullptr);
  param_leaves_.emplace_back(&p, g.node());
  return g;
}

GradGrid Tape::leaf(const GradGrid& constant) {
  return emit(constant.shape(), constant.vec(), nullptr);
}

std::vector<float>& Tape::grad_buf(int node) {
  NodeRec& rec = nodes_.at(static_cast<std::size_t>(node));
  if (rec.grad.empty()) rec.grad.assign(rec.numel, 0.0f);
  return rec.grad;
}

bool Tape::reached(int node) const {
  return !nodes_.at(static_cast<std::size_t>(node)).grad.empty();
}

void Tape::backward(const GradGrid& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss grid not on this tape");
  if (loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (nodes_at_last_backward_ == nodes_.size())
    throw ContractError("backward called twice without a new forward pass");
  for (NodeRec& n : nodes_) n.grad.clear();
  grad_buf(loss.node())[0] = 1.0f;
  for (int i = loss.node(); i >= 0; --i) {
    NodeRec& rec = nodes_[static_cast<std::size_t>(i)];
    if (!rec.grad.empty() && rec.backward_fn) rec.backward_fn(*this);
  }
  nodes_at_last_backward_ = nodes_.size();
}

GradGrid Tape::grad(const GradGrid& of) const {
  if (of.tape() != this) throw ContractError("grad: grid not on this tape");
  const NodeRec& rec = nodes_.at(static_cast<std::size_t>(of.node()));
  if (rec.grad.empty()) return GradGrid(of.shape());
  return GradGrid(of.shape(), rec.grad);
}

std::vector<float> Tape::param_grad(const Param& p) const {
  std::vector<float> g(p.value.size(), 0.0f);
  for (const auto& [param, node] : param_leaves_) {
    if (param != &p) continue;
    const NodeRec& rec = nodes_[static_cast<std::size_t>(node)];
    if (rec.grad.empty()) continue;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += rec.grad[i];
  }
  return g;
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

Tape* common_tape(std::initializer_list<const GradGrid*> ins) {
  Tape* t = nullptr;
  for (const GradGrid* g : ins) {
    if (!g->tracked()) continue;
    if (t && t != g->tape()) throw ContractError("operands live on different tapes");
    t = g->tape();
  }
  return t;
}

void require_same_shape(const GradGrid& a, const GradGrid& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

void accum(std::vector<float>& dst, const float* src, std::size_t n, float scale = 1.0f) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
}

std::size_t spatial_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= static_cast<std::size_t>(s[i]);
  return n;
}

std::vector<std::size_t> row_major_strides(const std::vector<int>& extents) {
  std::vector<std::size_t> st(extents.size(), 1);
  for (int i = static_cast<int>(extents.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(extents[static_cast<std::size_t>(i) + 1]);
  return st;
}

// Node id the next emit() on tape t will receive; closures capture it so the
// backward fn can find its own output gradient.
int next_node_id(Tape* t) { return static_cast<int>(t->num_nodes()); }

}  // namespace

GradGrid add(const GradGrid& a, const GradGrid& b) {
  require_same_shape(a, b, "add");
  Tape* t = common_tape({&a, &b});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), bn = b.node(), on = next_node_id(t);
  return t->emit(a.shape(), std::move(out), [an, bn, on](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), g.size());
    if (bn >= 0) accum(tp.grad_buf(bn), g.data(), g.size());
  });
}

GradGrid sub(const GradGrid& a, const GradGrid& b) {
  require_same_shape(a, b, "sub");
  Tape* t = common_tape({&a, &b});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), bn = b.node(), on = next_node_id(t);
  return t->emit(a.shape(), std::move(out), [an, bn, on](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), g.size());
    if (bn >= 0) accum(tp.grad_buf(bn), g.data(), g.size(), -1.0f);
  });
}

GradGrid mul(const GradGrid& a, const GradGrid& b) {
  require_same_shape(a, b, "mul");
  Tape* t = common_tape({&a, &b});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), bn = b.node(), on = next_node_id(t);
  GradGrid av = a.detach(), bv = b.detach();
  return t->emit(a.shape(), std::move(out), [an, bn, on, av, bv](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) {
      std::vector<float>& ga = tp.grad_buf(an);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv.at(i);
    }
    if (bn >= 0) {
      std::vector<float>& gb = tp.grad_buf(bn);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av.at(i);
    }
  });
}

GradGrid scalar_mul(const GradGrid& a, float s) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  return t->emit(a.shape(), std::move(out), [an, on, s](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), g.size(), s);
  });
}

GradGrid scalar_add(const GradGrid& a, float s) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + s;
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  return t->emit(a.shape(), std::move(out), [an, on](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), g.size());
  });
}

GradGrid sine(const GradGrid& a) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sin(a.at(i));
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid av = a.detach();
  return t->emit(a.shape(), std::move(out), [an, on, av](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * std::cos(av.at(i));
  });
}

GradGrid leaky_relu(const GradGrid& a, float negative_slope) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    float x = a.at(i);
    out[i] = x >= 0.0f ? x : negative_slope * x;
  }
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid av = a.detach();
  return t->emit(a.shape(), std::move(out), [an, on, av, negative_slope](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i] * (av.at(i) >= 0.0f ? 1.0f : negative_slope);
  });
}

GradGrid sqrt_op(const GradGrid& a) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    float x = a.at(i);
    if (x < 0.0f) throw ContractError("sqrt_op: negative input");
    out[i] = std::sqrt(x);
  }
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid ov(a.shape(), out);  // save outputs: d sqrt = 1/(2 sqrt)
  return t->emit(a.shape(), std::move(out), [an, on, ov](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i] * 0.5f / std::max(ov.at(i), 1e-12f);
  });
}

GradGrid reciprocal_eps(const GradGrid& a, float eps) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f / (a.at(i) + eps);
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid ov(a.shape(), out);
  return t->emit(a.shape(), std::move(out), [an, on, ov](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < g.size(); ++i) {
      float y = ov.at(i);
      ga[i] += g[i] * (-y * y);
    }
  });
}

GradGrid clip01(const GradGrid& a) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.at(i), 0.0f, 1.0f);
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid av = a.detach();
  return t->emit(a.shape(), std::move(out), [an, on, av](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < g.size(); ++i) {
      float x = av.at(i);
      if (x > 0.0f && x < 1.0f) ga[i] += g[i];
    }
  });
}

GradGrid reflect01(const GradGrid& a) {
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    float x = a.at(i);
    out[i] = x < 0.0f ? -x : (x > 1.0f ? 2.0f - x : x);
  }
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid av = a.detach();
  return t->emit(a.shape(), std::move(out), [an, on, av](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < g.size(); ++i) {
      float x = av.at(i);
      ga[i] += g[i] * ((x >= 0.0f && x <= 1.0f) ? 1.0f : -1.0f);
    }
  });
}

GradGrid bias_add(const GradGrid& a, const GradGrid& bias) {
  if (bias.shape().size() != 1 || bias.shape()[0] != a.channels())
    throw ShapeError("bias_add: bias " + shape_str(bias.shape()) + " vs channels " +
                     std::to_string(a.channels()));
  Tape* t = common_tape({&a, &bias});
  std::size_t sp = spatial_numel(a.shape());
  std::vector<float> out(a.size());
  for (int c = 0; c < a.channels(); ++c) {
    float b = bias.at(static_cast<std::size_t>(c));
    const float* src = a.data() + static_cast<std::size_t>(c) * sp;
    float* dst = out.data() + static_cast<std::size_t>(c) * sp;
    for (std::size_t i = 0; i < sp; ++i) dst[i] = src[i] + b;
  }
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), bn = bias.node(), on = next_node_id(t);
  int ch = a.channels();
  return t->emit(a.shape(), std::move(out), [an, bn, on, ch, sp](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), g.size());
    if (bn >= 0) {
      std::vector<float>& gb = tp.grad_buf(bn);
      for (int c = 0; c < ch; ++c) {
        const float* gs = g.data() + static_cast<std::size_t>(c) * sp;
        float acc = 0.0f;
        for (std::size_t i = 0; i < sp; ++i) acc += gs[i];
        gb[static_cast<std::size_t>(c)] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

GradGrid sum(const GradGrid& a) {
  Tape* t = common_tape({&a});
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
  std::vector<float> out{static_cast<float>(acc)};
  if (!t) return GradGrid({1}, std::move(out));
  int an = a.node(), on = next_node_id(t);
  std::size_t n = a.size();
  return t->emit({1}, std::move(out), [an, on, n](Tape& tp) {
    float g = tp.grad_buf(on)[0];
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

GradGrid mean(const GradGrid& a) {
  Tape* t = common_tape({&a});
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
  float inv = 1.0f / static_cast<float>(a.size());
  std::vector<float> out{static_cast<float>(acc) * inv};
  if (!t) return GradGrid({1}, std::move(out));
  int an = a.node(), on = next_node_id(t);
  std::size_t n = a.size();
  return t->emit({1}, std::move(out), [an, on, n, inv](Tape& tp) {
    float g = tp.grad_buf(on)[0] * inv;
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

GradGrid softmax_rows(const GradGrid& a) {
  if (a.shape().size() != 2) throw ShapeError("softmax_rows: expected {rows, cols}");
  int rows = a.shape()[0], cols = a.shape()[1];
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  for (int r = 0; r < rows; ++r) {
    const float* x = a.data() + static_cast<std::size_t>(r) * cols;
    float* y = out.data() + static_cast<std::size_t>(r) * cols;
    float mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    float denom = 0.0f;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      denom += y[c];
    }
    float inv = 1.0f / denom;
    for (int c = 0; c < cols; ++c) y[c] *= inv;
  }
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  GradGrid ov(a.shape(), out);
  return t->emit(a.shape(), std::move(out), [an, on, ov, rows, cols](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an < 0) return;
    std::vector<float>& ga = tp.grad_buf(an);
    for (int r = 0; r < rows; ++r) {
      const float* w = ov.data() + static_cast<std::size_t>(r) * cols;
      const float* go = g.data() + static_cast<std::size_t>(r) * cols;
      float* gi = ga.data() + static_cast<std::size_t>(r) * cols;
      float dot = 0.0f;
      for (int c = 0; c < cols; ++c) dot += go[c] * w[c];
      for (int c = 0; c < cols; ++c) gi[c] += w[c] * (go[c] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

GradGrid reshape(const GradGrid& a, Shape s) {
  if (shape_numel(s) != a.size())
    throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
  Tape* t = common_tape({&a});
  std::vector<float> out(a.vec());
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = a.node(), on = next_node_id(t);
  return t->emit(std::move(s), std::move(out), [an, on](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), g.size());
  });
}

GradGrid concat_channels(const GradGrid& a, const GradGrid& b) {
  if (a.spatial() != b.spatial())
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tape* t = common_tape({&a, &b});
  Shape s = a.shape();
  s[0] = a.channels() + b.channels();
  std::vector<float> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.vec().begin(), a.vec().end());
  out.insert(out.end(), b.vec().begin(), b.vec().end());
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = a.node(), bn = b.node(), on = next_node_id(t);
  std::size_t na = a.size(), nb = b.size();
  return t->emit(std::move(s), std::move(out), [an, bn, on, na, nb](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    if (an >= 0) accum(tp.grad_buf(an), g.data(), na);
    if (bn >= 0) accum(tp.grad_buf(bn), g.data() + na, nb);
  });
}

namespace {

// dst (extents de) <- src (extents se) at integer offset off (dst coords of
// src origin); out-of-range reads are skipped. Used by pad/crop forward and
// backward with swapped roles.
void copy_block(const float* src, const std::vector<int>& se, float* dst,
                const std::vector<int>& de, const std::vector<int>& off, bool add) {
  std::size_t d = se.size();
  std::vector<std::size_t> ss = row_major_strides(se), ds = row_major_strides(de);
  std::vector<int> idx(d, 0);  // index into src
  // iterate all but last axis
  for (;;) {
    bool in_range = true;
    std::size_t sbase = 0, dbase = 0;
    for (std::size_t a = 0; a + 1 < d; ++a) {
      int dpos = idx[a] + off[a];
      if (dpos < 0 || dpos >= de[a]) {
        in_range = false;
        break;
      }
      sbase += static_cast<std::size_t>(idx[a]) * ss[a];
      dbase += static_cast<std::size_t>(dpos) * ds[a];
    }
    if (in_range) {
      int last = static_cast<int>(d) - 1;
      int lo = std::max(0, -off[static_cast<std::size_t>(last)]);
      int hi = std::min(se[static_cast<std::size_t>(last)],
                        de[static_cast<std::size_t>(last)] - off[static_cast<std::size_t>(last)]);
      if (lo < hi) {
        const float* s = src + sbase + static_cast<std::size_t>(lo);
        float* dd = dst + dbase + static_cast<std::size_t>(lo + off[static_cast<std::size_t>(last)]);
        if (add)
          for (int i = 0; i < hi - lo; ++i) dd[i] += s[i];
        else
          std::memcpy(dd, s, static_cast<std::size_t>(hi - lo) * sizeof(float));
      }
    }
    // odometer over axes [0, d-1)
    int a = static_cast<int>(d) - 2;
    for (; a >= 0; --a) {
      if (++idx[static_cast<std::size_t>(a)] < se[static_cast<std::size_t>(a)]) break;
      idx[static_cast<std::size_t>(a)] = 0;
    }
    if (a < 0) break;
  }
}

}  // namespace

GradGrid pad_spatial_zero(const GradGrid& a, int pad) {
  if (pad < 0) throw ContractError("pad_spatial_zero: negative pad");
  Shape s = a.shape();
  for (std::size_t i = 1; i < s.size(); ++i) s[i] += 2 * pad;
  Tape* t = common_tape({&a});
  std::vector<float> out(shape_numel(s), 0.0f);
  std::vector<int> se = a.spatial(), de(s.begin() + 1, s.end());
  std::vector<int> off(se.size(), pad);
  std::size_t sp_in = spatial_numel(a.shape()), sp_out = shape_numel(s) / static_cast<std::size_t>(s[0]);
  for (int c = 0; c < a.channels(); ++c)
    copy_block(a.data() + static_cast<std::size_t>(c) * sp_in, se,
               out.data() + static_cast<std::size_t>(c) * sp_out, de, off, false);
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = a.node(), on = next_node_id(t);
  Shape in_shape = a.shape();
  return t->emit(std::move(s), std::move(out), [an, on, in_shape, se, de, pad, sp_in, sp_out](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    std::vector<int> off(se.size(), -pad);
    for (int c = 0; c < in_shape[0]; ++c)
      copy_block(g.data() + static_cast<std::size_t>(c) * sp_out, de,
                 ga.data() + static_cast<std::size_t>(c) * sp_in, se, off, true);
  });
}

GradGrid crop_spatial(const GradGrid& a, int crop) {
  if (crop < 0) throw ContractError("crop_spatial: negative crop");
  Shape s = a.shape();
  for (std::size_t i = 1; i < s.size(); ++i) {
    s[i] -= 2 * crop;
    if (s[i] <= 0) throw ShapeError("crop_spatial: crop exceeds extent");
  }
  Tape* t = common_tape({&a});
  std::vector<float> out(shape_numel(s), 0.0f);
  std::vector<int> se = a.spatial(), de(s.begin() + 1, s.end());
  std::vector<int> off(se.size(), -crop);
  std::size_t sp_in = spatial_numel(a.shape()), sp_out = shape_numel(s) / static_cast<std::size_t>(s[0]);
  for (int c = 0; c < a.channels(); ++c)
    copy_block(a.data() + static_cast<std::size_t>(c) * sp_in, se,
               out.data() + static_cast<std::size_t>(c) * sp_out, de, off, false);
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = a.node(), on = next_node_id(t);
  Shape in_shape = a.shape();
  return t->emit(std::move(s), std::move(out), [an, on, in_shape, se, de, crop, sp_in, sp_out](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    std::vector<int> off(se.size(), crop);
    for (int c = 0; c < in_shape[0]; ++c)
      copy_block(g.data() + static_cast<std::size_t>(c) * sp_out, de,
                 ga.data() + static_cast<std::size_t>(c) * sp_in, se, off, true);
  });
}

GradGrid to_tokens(const GradGrid& features) {
  int c = features.channels();
  std::size_t sp = spatial_numel(features.shape());
  Tape* t = common_tape({&features});
  std::vector<float> out(features.size());
  const float* src = features.data();
  for (std::size_t p = 0; p < sp; ++p)
    for (int ch = 0; ch < c; ++ch)
      out[p * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)] =
          src[static_cast<std::size_t>(ch) * sp + p];
  Shape s{static_cast<int>(sp), c};
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = features.node(), on = next_node_id(t);
  return t->emit(std::move(s), std::move(out), [an, on, c, sp](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t p = 0; p < sp; ++p)
      for (int ch = 0; ch < c; ++ch)
        ga[static_cast<std::size_t>(ch) * sp + p] +=
            g[p * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];
  });
}

GradGrid from_tokens(const GradGrid& tokens, std::vector<int> spatial) {
  if (tokens.shape().size() != 2) throw ShapeError("from_tokens: expected {tokens, channels}");
  std::size_t sp = 1;
  for (int e : spatial) sp *= static_cast<std::size_t>(e);
  if (sp != static_cast<std::size_t>(tokens.shape()[0]))
    throw ShapeError("from_tokens: token count does not match spatial extents");
  int c = tokens.shape()[1];
  Tape* t = common_tape({&tokens});
  std::vector<float> out(tokens.size());
  const float* src = tokens.data();
  for (std::size_t p = 0; p < sp; ++p)
    for (int ch = 0; ch < c; ++ch)
      out[static_cast<std::size_t>(ch) * sp + p] =
          src[p * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];
  Shape s;
  s.push_back(c);
  for (int e : spatial) s.push_back(e);
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = tokens.node(), on = next_node_id(t);
  return t->emit(std::move(s), std::move(out), [an, on, c, sp](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t p = 0; p < sp; ++p)
      for (int ch = 0; ch < c; ++ch)
        ga[p * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)] +=
            g[static_cast<std::size_t>(ch) * sp + p];
  });
}

GradGrid select_channel(const GradGrid& a, int channel) {
  if (channel < 0 || channel >= a.channels())
    throw ShapeError("select_channel: channel " + std::to_string(channel) + " out of " +
                     std::to_string(a.channels()));
  std::size_t sp = spatial_numel(a.shape());
  Tape* t = common_tape({&a});
  std::vector<float> out(a.data() + static_cast<std::size_t>(channel) * sp,
                         a.data() + static_cast<std::size_t>(channel + 1) * sp);
  Shape s = a.shape();
  s[0] = 1;
  if (!t) return GradGrid(std::move(s), std::move(out));
  int an = a.node(), on = next_node_id(t);
  return t->emit(std::move(s), std::move(out), [an, on, channel, sp](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    float* ga = tp.grad_buf(an).data() + static_cast<std::size_t>(channel) * sp;
    for (std::size_t i = 0; i < sp; ++i) ga[i] += g[i];
  });
}

namespace {

// index map for one quarter turn: out(i,j) = in(j, n-1-i)
std::size_t rot90_src_index(int i, int j, int n) {
  return static_cast<std::size_t>(j) * static_cast<std::size_t>(n) +
         static_cast<std::size_t>(n - 1 - i);
}

}  // namespace

GradGrid rot90(const GradGrid& a, int quarter_turns) {
  if (a.dim() != 2 || a.shape()[1] != a.shape()[2])
    throw ShapeError("rot90: expected square 2D grid, got " + shape_str(a.shape()));
  int q = ((quarter_turns % 4) + 4) % 4;
  int n = a.shape()[1];
  std::size_t sp = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  Tape* t = common_tape({&a});
  std::vector<float> out(a.size());
  // build the composed permutation once
  std::vector<std::size_t> perm(sp);
  for (std::size_t p = 0; p < sp; ++p) perm[p] = p;
  for (int k = 0; k < q; ++k) {
    std::vector<std::size_t> next(sp);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        next[static_cast<std::size_t>(i) * n + j] = perm[rot90_src_index(i, j, n)];
    perm.swap(next);
  }
  for (int c = 0; c < a.channels(); ++c) {
    const float* src = a.data() + static_cast<std::size_t>(c) * sp;
    float* dst = out.data() + static_cast<std::size_t>(c) * sp;
    for (std::size_t p = 0; p < sp; ++p) dst[p] = src[perm[p]];
  }
  if (!t) return GradGrid(a.shape(), std::move(out));
  int an = a.node(), on = next_node_id(t);
  int ch = a.channels();
  return t->emit(a.shape(), std::move(out), [an, on, ch, sp, perm](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    for (int c = 0; c < ch; ++c) {
      const float* gs = g.data() + static_cast<std::size_t>(c) * sp;
      float* gd = ga.data() + static_cast<std::size_t>(c) * sp;
      for (std::size_t p = 0; p < sp; ++p) gd[perm[p]] += gs[p];
    }
  });
}

// ---------------------------------------------------------------------------
// conv
// ---------------------------------------------------------------------------

namespace {

struct ConvPlan {
  int cin = 0, cout = 0, dilation = 1;
  std::vector<int> sp;       // spatial extents
  std::vector<int> k;        // kernel extents
  std::size_t positions = 1; // prod(sp)
  std::size_t patch = 1;     // cin * prod(k)
  std::vector<std::vector<int>> offsets;  // per kernel tap, spatial offset
};

ConvPlan make_conv_plan(const GradGrid& input, const GradGrid& kernel, int dilation) {
  if (dilation < 1) throw ContractError("conv: dilation must be positive");
  int d = input.dim();
  if (static_cast<int>(kernel.shape().size()) != d + 2)
    throw ShapeError("conv: kernel rank " + shape_str(kernel.shape()) + " does not fit input " +
                     shape_str(input.shape()));
  ConvPlan p;
  p.cin = input.channels();
  p.cout = kernel.shape()[0];
  p.dilation = dilation;
  if (kernel.shape()[1] != p.cin)
    throw ShapeError("conv: input channels " + std::to_string(p.cin) + " vs kernel " +
                     std::to_string(kernel.shape()[1]));
  p.sp = input.spatial();
  p.k.assign(kernel.shape().begin() + 2, kernel.shape().end());
  std::size_t ktaps = 1;
  for (int ke : p.k) {
    if (ke % 2 == 0) throw ShapeError("conv: kernel extents must be odd");
    ktaps *= static_cast<std::size_t>(ke);
  }
  for (int e : p.sp) p.positions *= static_cast<std::size_t>(e);
  p.patch = static_cast<std::size_t>(p.cin) * ktaps;
  // enumerate kernel taps in row-major order
  std::vector<int> idx(p.k.size(), 0);
  for (std::size_t tap = 0; tap < ktaps; ++tap) {
    std::vector<int> off(p.k.size());
    for (std::size_t a = 0; a < p.k.size(); ++a) off[a] = dilation * (idx[a] - (p.k[a] - 1) / 2);
    p.offsets.push_back(std::move(off));
    for (int a = static_cast<int>(p.k.size()) - 1; a >= 0; --a) {
      if (++idx[static_cast<std::size_t>(a)] < p.k[static_cast<std::size_t>(a)]) break;
      idx[static_cast<std::size_t>(a)] = 0;
    }
  }
  return p;
}

// col[patch][positions]: row (cin,tap) holds the input plane shifted by -offset.
void im2col(const float* input, const ConvPlan& p, float* col) {
  std::size_t ktaps = p.offsets.size();
  for (int c = 0; c < p.cin; ++c) {
    const float* plane = input + static_cast<std::size_t>(c) * p.positions;
    for (std::size_t tap = 0; tap < ktaps; ++tap) {
      float* row = col + (static_cast<std::size_t>(c) * ktaps + tap) * p.positions;
      std::fill(row, row + p.positions, 0.0f);
      // row[pos] = plane[pos + off]  ==  copy_block with offset -off
      std::vector<int> off(p.offsets[tap].size());
      for (std::size_t a = 0; a < off.size(); ++a) off[a] = -p.offsets[tap][a];
      copy_block(plane, p.sp, row, p.sp, off, false);
    }
  }
}

// scatter-add transpose of im2col: dInput[pos + off] += dcol[row][pos]
void col2im_add(const float* dcol, const ConvPlan& p, float* dinput) {
  std::size_t ktaps = p.offsets.size();
  for (int c = 0; c < p.cin; ++c) {
    float* plane = dinput + static_cast<std::size_t>(c) * p.positions;
    for (std::size_t tap = 0; tap < ktaps; ++tap) {
      const float* row = dcol + (static_cast<std::size_t>(c) * ktaps + tap) * p.positions;
      copy_block(row, p.sp, plane, p.sp, p.offsets[tap], true);
    }
  }
}

}  // namespace

GradGrid conv(const GradGrid& input, const GradGrid& kernel, int dilation) {
  ConvPlan plan = make_conv_plan(input, kernel, dilation);
  Tape* t = common_tape({&input, &kernel});

  std::vector<float> col(plan.patch * plan.positions);
  im2col(input.data(), plan, col.data());
  std::vector<float> out(static_cast<std::size_t>(plan.cout) * plan.positions);
  {
    CMapRM w(kernel.data(), plan.cout, static_cast<Eigen::Index>(plan.patch));
    CMapRM cm(col.data(), static_cast<Eigen::Index>(plan.patch),
              static_cast<Eigen::Index>(plan.positions));
    MapRM om(out.data(), plan.cout, static_cast<Eigen::Index>(plan.positions));
    om.noalias() = w * cm;
  }
  Shape out_shape;
  out_shape.push_back(plan.cout);
  for (int e : plan.sp) out_shape.push_back(e);
  if (!t) return GradGrid(std::move(out_shape), std::move(out));

  int in_node = input.node(), k_node = kernel.node(), on = next_node_id(t);
  GradGrid in_v = input.detach(), k_v = kernel.detach();
  return t->emit(std::move(out_shape), std::move(out),
                 [plan, in_node, k_node, on, in_v, k_v](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    CMapRM gm(g.data(), plan.cout, static_cast<Eigen::Index>(plan.positions));
    if (k_node >= 0) {
      // dW = dOut * col^T ; rebuild col rather than saving it
      std::vector<float> col(plan.patch * plan.positions);
      im2col(in_v.data(), plan, col.data());
      CMapRM cm(col.data(), static_cast<Eigen::Index>(plan.patch),
                static_cast<Eigen::Index>(plan.positions));
      std::vector<float>& gk = tp.grad_buf(k_node);
      MapRM gkm(gk.data(), plan.cout, static_cast<Eigen::Index>(plan.patch));
      gkm.noalias() += gm * cm.transpose();
    }
    if (in_node >= 0) {
      std::vector<float> dcol(plan.patch * plan.positions);
      CMapRM w(k_v.data(), plan.cout, static_cast<Eigen::Index>(plan.patch));
      MapRM dcm(dcol.data(), static_cast<Eigen::Index>(plan.patch),
                static_cast<Eigen::Index>(plan.positions));
      dcm.noalias() = w.transpose() * gm;
      col2im_add(dcol.data(), plan, tp.grad_buf(in_node).data());
    }
  });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

namespace {

void check_attention_shapes(const GradGrid& q, const GradGrid& k, const GradGrid& v) {
  if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
    throw ShapeError("attention: q/k/v must be {tokens, features}");
  if (q.shape()[1] != k.shape()[1])
    throw ShapeError("attention: feature dims differ, q " + shape_str(q.shape()) + " k " +
                     shape_str(k.shape()));
  if (k.shape()[0] != v.shape()[0])
    throw ShapeError("attention: key/value token counts differ, k " + shape_str(k.shape()) +
                     " v " + shape_str(v.shape()));
}

constexpr int kAttnBlock = 64;

// Softmax(scale * Qblk K^T) for one block of query rows, written into W (bq x tk).
void attn_weights_block(const float* q, int bq, const float* k, int tk, int f,
                        float scale, float* w) {
  CMapRM qm(q, bq, f);
  CMapRM km(k, tk, f);
  MapRM wm(w, bq, tk);
  wm.noalias() = scale * (qm * km.transpose());
  for (int r = 0; r < bq; ++r) {
    float* row = w + static_cast<std::size_t>(r) * tk;
    float mx = row[0];
    for (int c = 1; c < tk; ++c) mx = std::max(mx, row[c]);
    float denom = 0.0f;
    for (int c = 0; c < tk; ++c) {
      row[c] = std::exp(row[c] - mx);
      denom += row[c];
    }
    float inv = 1.0f / denom;
    for (int c = 0; c < tk; ++c) row[c] *= inv;
  }
}

}  // namespace

GradGrid attention(const GradGrid& queries, const GradGrid& keys, const GradGrid& values,
                   float logit_scale) {
  check_attention_shapes(queries, keys, values);
  if (logit_scale <= 0.0f) throw ContractError("attention: logit scale must be positive");
  int tq = queries.shape()[0], f = queries.shape()[1];
  int tk = keys.shape()[0], dv = values.shape()[1];
  Tape* t = common_tape({&queries, &keys, &values});

  std::vector<float> out(static_cast<std::size_t>(tq) * dv);
  std::vector<float> wblk(static_cast<std::size_t>(kAttnBlock) * tk);
  for (int r0 = 0; r0 < tq; r0 += kAttnBlock) {
    int bq = std::min(kAttnBlock, tq - r0);
    attn_weights_block(queries.data() + static_cast<std::size_t>(r0) * f, bq, keys.data(), tk,
                       f, logit_scale, wblk.data());
    CMapRM wm(wblk.data(), bq, tk);
    CMapRM vm(values.data(), tk, dv);
    MapRM om(out.data() + static_cast<std::size_t>(r0) * dv, bq, dv);
    om.noalias() = wm * vm;
  }
  Shape out_shape{tq, dv};
  if (!t) return GradGrid(std::move(out_shape), std::move(out));

  int qn = queries.node(), kn = keys.node(), vn = values.node(), on = next_node_id(t);
  GradGrid qv = queries.detach(), kv = keys.detach(), vv = values.detach();
  return t->emit(std::move(out_shape), std::move(out),
                 [qn, kn, vn, on, qv, kv, vv, tq, tk, f, dv, logit_scale](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    float* gq = qn >= 0 ? tp.grad_buf(qn).data() : nullptr;
    float* gk = kn >= 0 ? tp.grad_buf(kn).data() : nullptr;
    float* gv = vn >= 0 ? tp.grad_buf(vn).data() : nullptr;
    std::vector<float> wblk(static_cast<std::size_t>(kAttnBlock) * tk);
    std::vector<float> dwblk(static_cast<std::size_t>(kAttnBlock) * tk);
    CMapRM km(kv.data(), tk, f);
    CMapRM vm(vv.data(), tk, dv);
    for (int r0 = 0; r0 < tq; r0 += kAttnBlock) {
      int bq = std::min(kAttnBlock, tq - r0);
      attn_weights_block(qv.data() + static_cast<std::size_t>(r0) * f, bq, kv.data(), tk, f,
                         logit_scale, wblk.data());
      MapRM wm(wblk.data(), bq, tk);
      CMapRM gom(g.data() + static_cast<std::size_t>(r0) * dv, bq, dv);
      MapRM dwm(dwblk.data(), bq, tk);
      dwm.noalias() = gom * vm.transpose();
      if (gv) {
        MapRM gvm(gv, tk, dv);
        gvm.noalias() += wm.transpose() * gom;
      }
      // softmax backward: dz = w .* (dw - rowdot(dw, w))
      for (int r = 0; r < bq; ++r) {
        float* wr = wblk.data() + static_cast<std::size_t>(r) * tk;
        float* dr = dwblk.data() + static_cast<std::size_t>(r) * tk;
        float dot = 0.0f;
        for (int c = 0; c < tk; ++c) dot += wr[c] * dr[c];
        for (int c = 0; c < tk; ++c) dr[c] = wr[c] * (dr[c] - dot);
      }
      if (gq) {
        MapRM gqm(gq + static_cast<std::size_t>(r0) * f, bq, f);
        gqm.noalias() += logit_scale * (dwm * km);
      }
      if (gk) {
        CMapRM qm(qv.data() + static_cast<std::size_t>(r0) * f, bq, f);
        MapRM gkm(gk, tk, f);
        gkm.noalias() += logit_scale * (dwm.transpose() * qm);
      }
    }
  });
}

std::vector<float> attention_weights(const GradGrid& queries, const GradGrid& keys,
                                     float logit_scale) {
  if (queries.shape().size() != 2 || keys.shape().size() != 2 ||
      queries.shape()[1] != keys.shape()[1])
    throw ShapeError("attention_weights: bad token shapes");
  int tq = queries.shape()[0], f = queries.shape()[1], tk = keys.shape()[0];
  std::vector<float> w(static_cast<std::size_t>(tq) * tk);
  for (int r0 = 0; r0 < tq; r0 += kAttnBlock) {
    int bq = std::min(kAttnBlock, tq - r0);
    attn_weights_block(queries.data() + static_cast<std::size_t>(r0) * f, bq, keys.data(), tk,
                       f, logit_scale, w.data() + static_cast<std::size_t>(r0) * tk);
  }
  return w;
}

// ---------------------------------------------------------------------------
// grid sampling
// ---------------------------------------------------------------------------

namespace {

struct SamplePlan {
  int d = 0;                 // coordinate dimension = values spatial rank
  int c = 0;                 // value channels
  std::vector<int> vn;       // value spatial extents
  std::size_t vp = 1;        // prod(vn)
  std::size_t samples = 1;   // points per coordinate channel
  std::vector<std::size_t> vstride;
};

SamplePlan make_sample_plan(const GradGrid& values, const GradGrid& points) {
  SamplePlan p;
  p.d = values.dim();
  p.c = values.channels();
  p.vn = values.spatial();
  if (points.channels() != p.d)
    throw ShapeError("grid_sample: points have " + std::to_string(points.channels()) +
                     " channels, values are " + std::to_string(p.d) + "-dimensional");
  for (int e : p.vn) p.vp *= static_cast<std::size_t>(e);
  p.samples = spatial_numel(points.shape());
  p.vstride = row_major_strides(p.vn);
  return p;
}

// Multilinear sampling core shared by the strict and zero-padded variants.
// strict: clamp continuous index into [0, n-1] (plateau in the half-voxel
// band), reject points outside [0,1]. zero: missing neighbors read as 0.
template <bool kZeroPad>
void sample_forward(const SamplePlan& p, const float* values, const float* points,
                    float* out) {
  std::vector<int> i0(static_cast<std::size_t>(p.d));
  std::vector<float> fr(static_cast<std::size_t>(p.d));
  std::vector<bool> clamped(static_cast<std::size_t>(p.d));
  for (std::size_t s = 0; s < p.samples; ++s) {
    for (int a = 0; a < p.d; ++a) {
      float x = points[static_cast<std::size_t>(a) * p.samples + s];
      int n = p.vn[static_cast<std::size_t>(a)];
      float u = x * static_cast<float>(n) - 0.5f;
      if constexpr (!kZeroPad) {
        if (x < -1e-5f || x > 1.0f + 1e-5f)
          throw ContractError("grid_sample: point outside [0,1]^D (coordinate " +
                              std::to_string(x) + ")");
        clamped[static_cast<std::size_t>(a)] = (u <= 0.0f || u >= static_cast<float>(n - 1));
        u = std::clamp(u, 0.0f, static_cast<float>(n - 1));
      } else {
        clamped[static_cast<std::size_t>(a)] = false;
      }
      float fl = std::floor(u);
      i0[static_cast<std::size_t>(a)] = static_cast<int>(fl);
      fr[static_cast<std::size_t>(a)] = u - fl;
      if constexpr (!kZeroPad) {
        if (i0[static_cast<std::size_t>(a)] > n - 2) {
          i0[static_cast<std::size_t>(a)] = n >= 2 ? n - 2 : 0;
          fr[static_cast<std::size_t>(a)] = n >= 2 ? 1.0f : 0.0f;
        }
      }
    }
    for (int corner = 0; corner < (1 << p.d); ++corner) {
      float w = 1.0f;
      std::size_t base = 0;
      bool valid = true;
      for (int a = 0; a < p.d; ++a) {
        int bit = (corner >> a) & 1;
        int idx = i0[static_cast<std::size_t>(a)] + bit;
        float wa = bit ? fr[static_cast<std::size_t>(a)] : 1.0f - fr[static_cast<std::size_t>(a)];
        int n = p.vn[static_cast<std::size_t>(a)];
        if (idx < 0 || idx >= n) {
          valid = false;
          break;
        }
        w *= wa;
        base += static_cast<std::size_t>(idx) * p.vstride[static_cast<std::size_t>(a)];
      }
      if (!valid || w == 0.0f) continue;
      for (int ch = 0; ch < p.c; ++ch)
        out[static_cast<std::size_t>(ch) * p.samples + s] +=
            w * values[static_cast<std::size_t>(ch) * p.vp + base];
    }
  }
}

template <bool kZeroPad>
void sample_backward(const SamplePlan& p, const float* values, const float* points,
                     const float* gout, float* gvalues, float* gpoints) {
  std::vector<int> i0(static_cast<std::size_t>(p.d));
  std::vector<float> fr(static_cast<std::size_t>(p.d));
  std::vector<bool> clamped(static_cast<std::size_t>(p.d));
  for (std::size_t s = 0; s < p.samples; ++s) {
    for (int a = 0; a < p.d; ++a) {
      float x = points[static_cast<std::size_t>(a) * p.samples + s];
      int n = p.vn[static_cast<std::size_t>(a)];
      float u = x * static_cast<float>(n) - 0.5f;
      if constexpr (!kZeroPad) {
        clamped[static_cast<std::size_t>(a)] = (u <= 0.0f || u >= static_cast<float>(n - 1));
        u = std::clamp(u, 0.0f, static_cast<float>(n - 1));
      } else {
        clamped[static_cast<std::size_t>(a)] = false;
      }
      float fl = std::floor(u);
      i0[static_cast<std::size_t>(a)] = static_cast<int>(fl);
      fr[static_cast<std::size_t>(a)] = u - fl;
      if constexpr (!kZeroPad) {
        if (i0[static_cast<std::size_t>(a)] > n - 2) {
          i0[static_cast<std::size_t>(a)] = n >= 2 ? n - 2 : 0;
          fr[static_cast<std::size_t>(a)] = n >= 2 ? 1.0f : 0.0f;
        }
      }
    }
    for (int corner = 0; corner < (1 << p.d); ++corner) {
      float w = 1.0f;
      std::size_t base = 0;
      bool valid = true;
      for (int a = 0; a < p.d; ++a) {
        int bit = (corner >> a) & 1;
        int idx = i0[static_cast<std::size_t>(a)] + bit;
        int n = p.vn[static_cast<std::size_t>(a)];
        if (idx < 0 || idx >= n) {
          valid = false;
          break;
        }
        w *= bit ? fr[static_cast<std::size_t>(a)] : 1.0f - fr[static_cast<std::size_t>(a)];
        base += static_cast<std::size_t>(idx) * p.vstride[static_cast<std::size_t>(a)];
      }
      if (!valid) continue;
      if (gvalues && w != 0.0f) {
        for (int ch = 0; ch < p.c; ++ch)
          gvalues[static_cast<std::size_t>(ch) * p.vp + base] +=
              w * gout[static_cast<std::size_t>(ch) * p.samples + s];
      }
      if (gpoints) {
        // d out / d x_a = n_a * (prod_{b != a} w_b) * (+-1) * value
        for (int a = 0; a < p.d; ++a) {
          if (clamped[static_cast<std::size_t>(a)]) continue;
          int bit = (corner >> a) & 1;
          float wother = 1.0f;
          for (int b = 0; b < p.d; ++b) {
            if (b == a) continue;
            int bbit = (corner >> b) & 1;
            wother *= bbit ? fr[static_cast<std::size_t>(b)] : 1.0f - fr[static_cast<std::size_t>(b)];
          }
          float sign = bit ? 1.0f : -1.0f;
          float scale = sign * wother * static_cast<float>(p.vn[static_cast<std::size_t>(a)]);
          if (scale == 0.0f) continue;
          float acc = 0.0f;
          for (int ch = 0; ch < p.c; ++ch)
            acc += gout[static_cast<std::size_t>(ch) * p.samples + s] *
                   values[static_cast<std::size_t>(ch) * p.vp + base];
          gpoints[static_cast<std::size_t>(a) * p.samples + s] += scale * acc;
        }
      }
    }
  }
}

template <bool kZeroPad>
GradGrid grid_sample_impl(const GradGrid& values, const GradGrid& points) {
  SamplePlan plan = make_sample_plan(values, points);
  Tape* t = common_tape({&values, &points});
  Shape out_shape = points.shape();
  out_shape[0] = plan.c;
  std::vector<float> out(shape_numel(out_shape), 0.0f);
  sample_forward<kZeroPad>(plan, values.data(), points.data(), out.data());
  if (!t) return GradGrid(std::move(out_shape), std::move(out));
  int vn = values.node(), pn = points.node(), on = next_node_id(t);
  GradGrid vv = values.detach(), pv = points.detach();
  return t->emit(std::move(out_shape), std::move(out), [plan, vn, pn, on, vv, pv](Tape& tp) {
    const std::vector<float>& g = tp.grad_buf(on);
    float* gv = vn >= 0 ? tp.grad_buf(vn).data() : nullptr;
    float* gp = pn >= 0 ? tp.grad_buf(pn).data() : nullptr;
    if (!gv && !gp) return;
    sample_backward<kZeroPad>(plan, vv.data(), pv.data(), g.data(), gv, gp);
  });
}

}  // namespace

GradGrid grid_sample(const GradGrid& values, const GradGrid& points) {
  return grid_sample_impl<false>(values, points);
}

GradGrid grid_sample_zero(const GradGrid& values, const GradGrid& points) {
  return grid_sample_impl<true>(values, points);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

GradGrid average_pool2(const GradGrid& a) {
  std::vector<int> sp = a.spatial();
  for (int e : sp)
    if (e % 2 != 0) throw ShapeError("average_pool2: odd spatial extent in " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  for (std::size_t i = 1; i < out_shape.size(); ++i) out_shape[i] /= 2;
  std::vector<int> osp(out_shape.begin() + 1, out_shape.end());
  int d = a.dim();
  std::size_t in_sp = spatial_numel(a.shape()), out_sp = shape_numel(out_shape) / static_cast<std::size_t>(out_shape[0]);
  std::vector<std::size_t> ist = row_major_strides(sp), ost = row_major_strides(osp);
  int block = 1 << d;
  float inv = 1.0f / static_cast<float>(block);

  Tape* t = common_tape({&a});
  std::vector<float> out(shape_numel(out_shape), 0.0f);
  std::vector<int> oidx(static_cast<std::size_t>(d), 0);
  for (std::size_t op = 0; op < out_sp; ++op) {
    // decode output position
    std::size_t rem = op;
    std::size_t ibase = 0;
    for (int ax = 0; ax < d; ++ax) {
      std::size_t q = rem / ost[static_cast<std::size_t>(ax)];
      rem %= ost[static_cast<std::size_t>(ax)];
      ibase += 2 * q * ist[static_cast<std::size_t>(ax)];
    }
    for (int c = 0; c < a.channels(); ++c) {
      const float* plane = a.data() + static_cast<std::size_t>(c) * in_sp;
      float acc = 0.0f;
      for (int b = 0; b < block; ++b) {
        std::size_t off = 0;
        for (int ax = 0; ax < d; ++ax)
          if ((b >> ax) & 1) off += ist[static_cast<std::size_t>(ax)];
        acc += plane[ibase + off];
      }
      out[static_cast<std::size_t>(c) * out_sp + op] = acc * inv;
    }
  }
  if (!t) return GradGrid(std::move(out_shape), std::move(out));
  int an = a.node(), on = next_node_id(t);
  int ch = a.channels();
  return t->emit(std::move(out_shape), std::move(out),
                 [an, on, ch, d, in_sp, out_sp, ist, ost, inv, block](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t op = 0; op < out_sp; ++op) {
      std::size_t rem = op, ibase = 0;
      for (int ax = 0; ax < d; ++ax) {
        std::size_t q = rem / ost[static_cast<std::size_t>(ax)];
        rem %= ost[static_cast<std::size_t>(ax)];
        ibase += 2 * q * ist[static_cast<std::size_t>(ax)];
      }
      for (int c = 0; c < ch; ++c) {
        float gv = g[static_cast<std::size_t>(c) * out_sp + op] * inv;
        float* plane = ga.data() + static_cast<std::size_t>(c) * in_sp;
        for (int b = 0; b < block; ++b) {
          std::size_t off = 0;
          for (int ax = 0; ax < d; ++ax)
            if ((b >> ax) & 1) off += ist[static_cast<std::size_t>(ax)];
          plane[ibase + off] += gv;
        }
      }
    }
  });
}

GradGrid upsample2_nearest(const GradGrid& a) {
  std::vector<int> sp = a.spatial();
  Shape out_shape = a.shape();
  for (std::size_t i = 1; i < out_shape.size(); ++i) out_shape[i] *= 2;
  std::vector<int> osp(out_shape.begin() + 1, out_shape.end());
  int d = a.dim();
  std::size_t in_sp = spatial_numel(a.shape());
  std::size_t out_sp = shape_numel(out_shape) / static_cast<std::size_t>(out_shape[0]);
  std::vector<std::size_t> ist = row_major_strides(sp), ost = row_major_strides(osp);

  Tape* t = common_tape({&a});
  std::vector<float> out(shape_numel(out_shape));
  for (std::size_t op = 0; op < out_sp; ++op) {
    std::size_t rem = op, ibase = 0;
    for (int ax = 0; ax < d; ++ax) {
      std::size_t q = rem / ost[static_cast<std::size_t>(ax)];
      rem %= ost[static_cast<std::size_t>(ax)];
      ibase += (q / 2) * ist[static_cast<std::size_t>(ax)];
    }
    for (int c = 0; c < a.channels(); ++c)
      out[static_cast<std::size_t>(c) * out_sp + op] =
          a.data()[static_cast<std::size_t>(c) * in_sp + ibase];
  }
  if (!t) return GradGrid(std::move(out_shape), std::move(out));
  int an = a.node(), on = next_node_id(t);
  int ch = a.channels();
  return t->emit(std::move(out_shape), std::move(out),
                 [an, on, ch, d, in_sp, out_sp, ist, ost](Tape& tp) {
    if (an < 0) return;
    const std::vector<float>& g = tp.grad_buf(on);
    std::vector<float>& ga = tp.grad_buf(an);
    for (std::size_t op = 0; op < out_sp; ++op) {
      std::size_t rem = op, ibase = 0;
      for (int ax = 0; ax < d; ++ax) {
        std::size_t q = rem / ost[static_cast<std::size_t>(ax)];
        rem %= ost[static_cast<std::size_t>(ax)];
        ibase += (q / 2) * ist[static_cast<std::size_t>(ax)];
      }
      for (int c = 0; c < ch; ++c)
        ga[static_cast<std::size_t>(c) * in_sp + ibase] +=
            g[static_cast<std::size_t>(c) * out_sp + op];
    }
  });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void AdamState::step(const std::vector<Param*>& params,
                     const std::vector<std::vector<float>>& grads) {
  if (params.size() != grads.size())
    throw ContractError("adam: params/grads count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    const std::vector<float>& g = grads[i];
    if (g.size() != p.value.size())
      throw ShapeError("adam: gradient size mismatch for " + p.name);
    Moments& mo = moments_[&p];
    if (mo.m.empty()) {
      mo.m.assign(p.value.size(), 0.0f);
      mo.v.assign(p.value.size(), 0.0f);
    }
    mo.t += 1;
    float b1t = 1.0f - std::pow(cfg_.beta1, static_cast<float>(mo.t));
    float b2t = 1.0f - std::pow(cfg_.beta2, static_cast<float>(mo.t));
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      mo.m[j] = cfg_.beta1 * mo.m[j] + (1.0f - cfg_.beta1) * g[j];
      mo.v[j] = cfg_.beta2 * mo.v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
      float mhat = mo.m[j] / b1t;
      float vhat = mo.v[j] / b2t;
      p.value[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamState::step_from_tape(const std::vector<Param*>& params, const Tape& tape) {
  std::vector<std::vector<float>> grads;
  grads.reserve(params.size());
  for (Param* p : params) grads.push_back(tape.param_grad(*p));
  step(params, grads);
}

int AdamState::step_count(const Param& p) const {
  auto it = moments_.find(&p);
  return it == moments_.end() ? 0 : it->second.t;
}

void AdamState::reset() { moments_.clear(); }

}  // namespace equireg
