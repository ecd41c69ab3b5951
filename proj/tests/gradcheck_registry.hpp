#pragma once

// Named finite-difference gradient checks, one per differentiable primitive.
// Shared by the unit tests and the acceptance suite.

#include <string>
#include <vector>

#include "equireg/ndgrad.hpp"
#include "oracle.hpp"

namespace testref {

using equireg::GradGrid;
using equireg::Rng;
using equireg::Shape;
using equireg::Tape;

struct NamedCheck {
  std::string name;
  std::function<GradCheck(std::uint64_t seed)> run;
};

namespace detail {

inline GradGrid away_from(Shape shape, Rng& rng, double lo, double hi) {
  GradGrid g(shape);
  for (std::size_t i = 0; i < g.size(); ++i)
    g.raw()[i] = static_cast<float>((rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi));
  return g;
}

inline GradGrid weights(const Shape& shape, Rng& rng) {
  GradGrid w(shape);
  for (std::size_t i = 0; i < w.size(); ++i)
    w.raw()[i] = static_cast<float>((rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5));
  return w;
}

inline double wsum(const dvec& w, const dvec& v) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += w[i] * v[i];
  return s;
}

}  // namespace detail

inline std::vector<NamedCheck> primitive_gradchecks() {
  using namespace detail;
  std::vector<NamedCheck> checks;

  auto simple = [](const char* name, auto make_inputs, auto f32, auto ref) {
    return NamedCheck{name, [=](std::uint64_t seed) {
                        Rng rng(seed * 7919 + 13);
                        auto inputs = make_inputs(rng);
                        return check_gradients(inputs, f32, ref);
                      }};
  };

  // -- binary pointwise --
  for (int which = 0; which < 3; ++which) {
    const char* names[] = {"add", "sub", "mul"};
    checks.push_back(simple(
        names[which],
        [](Rng& rng) {
          Shape s{2, 3, 4};
          std::vector<GradGrid> in{GradGrid::random_normal(s, rng, 1.0f),
                                   GradGrid::random_normal(s, rng, 1.0f),
                                   weights(s, rng)};
          return in;
        },
        [which](Tape&, const std::vector<GradGrid>& l) {
          GradGrid r = which == 0   ? equireg::add(l[0], l[1])
                       : which == 1 ? equireg::sub(l[0], l[1])
                                    : equireg::mul(l[0], l[1]);
          return equireg::sum(equireg::mul(r, l[2]));
        },
        [which](const std::vector<dvec>& x) {
          double s = 0.0;
          for (std::size_t i = 0; i < x[0].size(); ++i) {
            double r = which == 0 ? x[0][i] + x[1][i] : which == 1 ? x[0][i] - x[1][i] : x[0][i] * x[1][i];
            s += r * x[2][i];
          }
          return s;
        }));
  }

  checks.push_back(simple(
      "scalar_mul",
      [](Rng& rng) {
        Shape s{1, 5};
        return std::vector<GradGrid>{GradGrid::random_normal(s, rng, 1.0f), weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::scalar_mul(l[0], 1.7f), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) s += 1.7 * x[0][i] * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "scalar_add",
      [](Rng& rng) {
        Shape s{1, 5};
        return std::vector<GradGrid>{GradGrid::random_normal(s, rng, 1.0f), weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::scalar_add(l[0], 0.3f), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) s += (x[0][i] + 0.3) * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "sine",
      [](Rng& rng) {
        Shape s{2, 6};
        return std::vector<GradGrid>{GradGrid::random_normal(s, rng, 2.0f), weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::sine(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) s += std::sin(x[0][i]) * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "leaky_relu",
      [](Rng& rng) {
        Shape s{2, 6};
        return std::vector<GradGrid>{away_from(s, rng, 0.05, 2.0), weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::leaky_relu(l[0], 0.01f), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i)
          s += (x[0][i] >= 0 ? x[0][i] : 0.01 * x[0][i]) * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "sqrt",
      [](Rng& rng) {
        Shape s{1, 8};
        return std::vector<GradGrid>{GradGrid::random_uniform(s, rng, 0.2f, 3.0f),
                                     weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::sqrt_op(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) s += std::sqrt(x[0][i]) * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "reciprocal_eps",
      [](Rng& rng) {
        Shape s{1, 8};
        return std::vector<GradGrid>{GradGrid::random_uniform(s, rng, 0.3f, 3.0f),
                                     weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::reciprocal_eps(l[0], 1e-5f), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) s += x[1][i] / (x[0][i] + 1e-5);
        return s;
      }));

  checks.push_back(simple(
      "clip01",
      [](Rng& rng) {
        Shape s{1, 12};
        GradGrid g(s);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double r = rng.uniform();
          g.raw()[i] = static_cast<float>(r < 0.4 ? rng.uniform(0.05, 0.95)
                                          : r < 0.7 ? rng.uniform(-1.5, -0.05)
                                                    : rng.uniform(1.05, 2.5));
        }
        return std::vector<GradGrid>{g, weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::clip01(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i)
          s += std::min(std::max(x[0][i], 0.0), 1.0) * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "reflect01",
      [](Rng& rng) {
        Shape s{1, 12};
        GradGrid g(s);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double r = rng.uniform();
          g.raw()[i] = static_cast<float>(r < 0.4 ? rng.uniform(0.05, 0.95)
                                          : r < 0.7 ? rng.uniform(-0.95, -0.05)
                                                    : rng.uniform(1.05, 1.95));
        }
        return std::vector<GradGrid>{g, weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::reflect01(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) {
          double v = x[0][i];
          v = v < 0 ? -v : (v > 1 ? 2 - v : v);
          s += v * x[1][i];
        }
        return s;
      }));

  checks.push_back(simple(
      "bias_add",
      [](Rng& rng) {
        Shape s{3, 4};
        return std::vector<GradGrid>{GradGrid::random_normal(s, rng, 1.0f),
                                     GradGrid::random_normal({3}, rng, 1.0f), weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::bias_add(l[0], l[1]), l[2]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c)
          for (int i = 0; i < 4; ++i)
            s += (x[0][static_cast<std::size_t>(c) * 4 + i] + x[1][static_cast<std::size_t>(c)]) *
                 x[2][static_cast<std::size_t>(c) * 4 + i];
        return s;
      }));

  // -- reductions --
  checks.push_back(simple(
      "sum",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({2, 5}, rng, 1.0f)};
      },
      [](Tape&, const std::vector<GradGrid>& l) { return equireg::sum(l[0]); },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (double v : x[0]) s += v;
        return s;
      }));

  checks.push_back(simple(
      "mean",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({2, 5}, rng, 1.0f)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        // mean(x^2): the spec's 2x/N example generalized
        return equireg::mean(equireg::mul(l[0], l[0]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (double v : x[0]) s += v * v;
        return s / static_cast<double>(x[0].size());
      }));

  checks.push_back(simple(
      "softmax_rows",
      [](Rng& rng) {
        Shape s{3, 5};
        return std::vector<GradGrid>{GradGrid::random_normal(s, rng, 1.5f), weights(s, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::softmax_rows(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (int r = 0; r < 3; ++r) {
          double mx = -1e300, denom = 0.0;
          for (int c = 0; c < 5; ++c) mx = std::max(mx, x[0][static_cast<std::size_t>(r) * 5 + c]);
          for (int c = 0; c < 5; ++c) denom += std::exp(x[0][static_cast<std::size_t>(r) * 5 + c] - mx);
          for (int c = 0; c < 5; ++c)
            s += std::exp(x[0][static_cast<std::size_t>(r) * 5 + c] - mx) / denom *
                 x[1][static_cast<std::size_t>(r) * 5 + c];
        }
        return s;
      }));

  // -- shape ops (linear; one representative each) --
  checks.push_back(simple(
      "pad_crop_tokens_rot90",
      [](Rng& rng) {
        Shape s{2, 4, 4};
        return std::vector<GradGrid>{GradGrid::random_normal(s, rng, 1.0f),
                                     weights({2, 4, 4}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        GradGrid x = equireg::pad_spatial_zero(l[0], 2);
        x = equireg::crop_spatial(x, 2);
        x = equireg::rot90(x, 1);
        x = equireg::rot90(x, 3);
        GradGrid tok = equireg::to_tokens(x);
        x = equireg::from_tokens(tok, {4, 4});
        x = equireg::reshape(x, {2, 16});
        x = equireg::reshape(x, {2, 4, 4});
        return equireg::sum(equireg::mul(x, l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x[0].size(); ++i) s += x[0][i] * x[1][i];
        return s;
      }));

  checks.push_back(simple(
      "concat_select_channels",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({1, 3, 3}, rng, 1.0f),
                                     GradGrid::random_normal({2, 3, 3}, rng, 1.0f),
                                     weights({3, 3, 3}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        GradGrid cat = equireg::concat_channels(l[0], l[1]);
        // shuffle channels through select + concat to cover both ops
        GradGrid shuffled = equireg::concat_channels(
            equireg::concat_channels(equireg::select_channel(cat, 2),
                                     equireg::select_channel(cat, 0)),
            equireg::select_channel(cat, 1));
        return equireg::sum(equireg::mul(shuffled, l[2]));
      },
      [](const std::vector<dvec>& x) {
        dvec cat;
        cat.insert(cat.end(), x[0].begin(), x[0].end());
        cat.insert(cat.end(), x[1].begin(), x[1].end());
        int order[3] = {2, 0, 1};
        double s = 0.0;
        for (int c = 0; c < 3; ++c)
          for (std::size_t i = 0; i < 9; ++i)
            s += cat[static_cast<std::size_t>(order[c]) * 9 + i] * x[2][static_cast<std::size_t>(c) * 9 + i];
        return s;
      }));

  // -- conv --
  checks.push_back(simple(
      "conv1d",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({2, 7}, rng, 1.0f),
                                     GradGrid::random_normal({3, 2, 3}, rng, 0.7f),
                                     weights({3, 7}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::conv(l[0], l[1], 1), l[2]));
      },
      [](const std::vector<dvec>& x) {
        return wsum(x[2], conv1d_ref(x[0], 2, 7, x[1], 3, 3, 1));
      }));

  checks.push_back(simple(
      "conv2d_dilated",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({2, 5, 5}, rng, 1.0f),
                                     GradGrid::random_normal({2, 2, 3, 3}, rng, 0.7f),
                                     weights({2, 5, 5}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::conv(l[0], l[1], 2), l[2]));
      },
      [](const std::vector<dvec>& x) {
        return wsum(x[2], conv2d_ref(x[0], 2, 5, 5, x[1], 2, 3, 3, 2));
      }));

  // -- attention --
  checks.push_back(simple(
      "attention",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({4, 3}, rng, 1.0f),
                                     GradGrid::random_normal({5, 3}, rng, 1.0f),
                                     GradGrid::random_normal({5, 2}, rng, 1.0f),
                                     weights({4, 2}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::attention(l[0], l[1], l[2], 0.8f), l[3]));
      },
      [](const std::vector<dvec>& x) {
        return wsum(x[3], attention_ref(x[0], 4, 3, x[1], 5, x[2], 2, 0.8));
      }));

  // -- sampling --
  checks.push_back(simple(
      "grid_sample",
      [](Rng& rng) {
        int n = 6;
        GradGrid vals = GradGrid::random_normal({2, n, n}, rng, 1.0f);
        GradGrid pts({2, 3, 3});
        for (std::size_t i = 0; i < pts.size(); ++i) {
          // keep points off the interpolation kinks and the clamp plateau
          int cell = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(n - 3)));
          double fr = rng.uniform(0.15, 0.85);
          pts.raw()[i] = static_cast<float>((cell + 0.5 + fr) / n);
        }
        return std::vector<GradGrid>{vals, pts, weights({2, 3, 3}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::grid_sample(l[0], l[1]), l[2]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        int n = 6;
        for (int ch = 0; ch < 2; ++ch) {
          dvec plane(x[0].begin() + ch * n * n, x[0].begin() + (ch + 1) * n * n);
          for (int i = 0; i < 9; ++i)
            s += sample2d_ref(plane, n, n, x[1][static_cast<std::size_t>(i)],
                              x[1][static_cast<std::size_t>(9 + i)], false) *
                 x[2][static_cast<std::size_t>(ch) * 9 + i];
        }
        return s;
      }));

  checks.push_back(simple(
      "grid_sample_zero",
      [](Rng& rng) {
        int n = 6;
        GradGrid vals = GradGrid::random_normal({1, n, n}, rng, 1.0f);
        GradGrid pts({2, 4, 2});
        for (std::size_t i = 0; i < pts.size(); ++i) {
          // spread points inside and outside the domain, off the kinks
          int cell = -2 + static_cast<int>(rng.index(static_cast<std::uint64_t>(n + 3)));
          double fr = rng.uniform(0.15, 0.85);
          pts.raw()[i] = static_cast<float>((cell + 0.5 + fr) / n);
        }
        return std::vector<GradGrid>{vals, pts, weights({1, 4, 2}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::grid_sample_zero(l[0], l[1]), l[2]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        int n = 6;
        for (int i = 0; i < 8; ++i)
          s += sample2d_ref(x[0], n, n, x[1][static_cast<std::size_t>(i)],
                            x[1][static_cast<std::size_t>(8 + i)], true) *
               x[2][static_cast<std::size_t>(i)];
        return s;
      }));

  checks.push_back(simple(
      "average_pool2",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({2, 4, 4}, rng, 1.0f),
                                     weights({2, 2, 2}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::average_pool2(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        return wsum(x[1], avgpool2d_ref(x[0], 2, 4, 4));
      }));

  checks.push_back(simple(
      "upsample2_nearest",
      [](Rng& rng) {
        return std::vector<GradGrid>{GradGrid::random_normal({1, 3, 3}, rng, 1.0f),
                                     weights({1, 6, 6}, rng)};
      },
      [](Tape&, const std::vector<GradGrid>& l) {
        return equireg::sum(equireg::mul(equireg::upsample2_nearest(l[0]), l[1]));
      },
      [](const std::vector<dvec>& x) {
        double s = 0.0;
        for (int y = 0; y < 6; ++y)
          for (int xx = 0; xx < 6; ++xx)
            s += x[0][static_cast<std::size_t>(y / 2) * 3 + xx / 2] *
                 x[1][static_cast<std::size_t>(y) * 6 + xx];
        return s;
      }));

  return checks;
}

}  // namespace testref
