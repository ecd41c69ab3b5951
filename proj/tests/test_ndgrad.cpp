#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "equireg/ndgrad.hpp"
#include "gradcheck_registry.hpp"
#include "oracle.hpp"

using namespace equireg;

TEST_SUITE_BEGIN("ndgrad");

TEST_CASE("conv: 1D box sum with zero pad") {
  GradGrid in({1, 3}, {0, 1, 0});
  GradGrid ker({1, 1, 3}, {1, 1, 1});
  GradGrid out = conv(in, ker, 1);
  REQUIRE(out.shape() == Shape{1, 3});
  CHECK(out.at(0) == doctest::Approx(1.0f));
  CHECK(out.at(1) == doctest::Approx(1.0f));
  CHECK(out.at(2) == doctest::Approx(1.0f));
}

TEST_CASE("conv: identity kernel leaves input unchanged") {
  Rng rng(4);
  GradGrid in = GradGrid::random_normal({2, 4, 5}, rng, 1.0f);
  GradGrid ker({2, 2, 3, 3});
  // center tap of the matching channel = 1
  for (int c = 0; c < 2; ++c) ker.raw()[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0f;
  GradGrid out = conv(in, ker, 1);
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(out.at(i) == doctest::Approx(in.at(i)));
}

TEST_CASE("conv: dilated random case matches nested-loop oracle") {
  Rng rng(11);
  GradGrid in = GradGrid::random_normal({1, 5, 5}, rng, 1.0f);
  GradGrid ker = GradGrid::random_normal({1, 1, 3, 3}, rng, 1.0f);
  GradGrid out = conv(in, ker, 2);
  auto ref = testref::conv2d_ref(testref::to_double(in), 1, 5, 5, testref::to_double(ker), 1,
                                 3, 3, 2);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(out.at(i) == doctest::Approx(ref[i]).epsilon(1e-5));
}

TEST_CASE("conv: shape errors") {
  GradGrid in({2, 4, 4});
  CHECK_THROWS_AS(conv(in, GradGrid({1, 3, 3, 3})), ShapeError);  // channel mismatch
  CHECK_THROWS_AS(conv(in, GradGrid({1, 2, 2, 2})), ShapeError);  // even kernel
  CHECK_THROWS_AS(conv(in, GradGrid({1, 2, 3, 3}), 0), ContractError);
}

TEST_CASE("conv: translation equivariance on the interior") {
  // shifting the input by one voxel shifts the output by one voxel, on
  // voxels whose receptive field avoids the boundary
  Rng rng(7);
  int n = 12;
  GradGrid in = GradGrid::random_normal({1, n, n}, rng, 1.0f);
  GradGrid shifted({1, n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      shifted.raw()[y * n + x] =
          (y + 1 < n && x + 1 < n) ? in.at(static_cast<std::size_t>(y + 1) * n + x + 1) : 0.0f;
  GradGrid ker = GradGrid::random_normal({1, 1, 3, 3}, rng, 1.0f);
  GradGrid a = conv(in, ker, 2);
  GradGrid b = conv(shifted, ker, 2);
  int m = 3;  // one past the dilated receptive radius
  for (int y = m; y < n - m - 1; ++y)
    for (int x = m; x < n - m - 1; ++x)
      CHECK(b.at(static_cast<std::size_t>(y) * n + x) ==
            doctest::Approx(a.at(static_cast<std::size_t>(y + 1) * n + x + 1)).epsilon(1e-5));
}

TEST_CASE("attention: near-permutation with sharp one-hot logits") {
  GradGrid q({3, 3}, {30, 0, 0, 0, 30, 0, 0, 0, 30});
  GradGrid v({3, 1}, {1, 2, 3});
  GradGrid out = attention(q, q, v, 1.0f);
  CHECK(out.at(0) == doctest::Approx(1.0f).epsilon(1e-4));
  CHECK(out.at(1) == doctest::Approx(2.0f).epsilon(1e-4));
  CHECK(out.at(2) == doctest::Approx(3.0f).epsilon(1e-4));
}

TEST_CASE("attention: uniform logits average the values") {
  GradGrid q({2, 2});  // zeros -> all logits equal
  GradGrid k({3, 2});
  GradGrid v({3, 2}, {1, 10, 2, 20, 3, 30});
  GradGrid out = attention(q, k, v, 1.0f);
  CHECK(out.at(0) == doctest::Approx(2.0f));
  CHECK(out.at(1) == doctest::Approx(20.0f));
  CHECK(out.at(2) == doctest::Approx(2.0f));
}

TEST_CASE("attention: random 4-token case matches dense oracle") {
  Rng rng(21);
  GradGrid q = GradGrid::random_normal({4, 3}, rng, 1.0f);
  GradGrid k = GradGrid::random_normal({4, 3}, rng, 1.0f);
  GradGrid v = GradGrid::random_normal({4, 2}, rng, 1.0f);
  GradGrid out = attention(q, k, v, 0.57735f);
  auto ref = testref::attention_ref(testref::to_double(q), 4, 3, testref::to_double(k), 4,
                                    testref::to_double(v), 2, 0.57735);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(std::abs(out.at(i) - ref[i]) < 1e-6);
}

TEST_CASE("attention: permutation equivariance") {
  Rng rng(3);
  int tq = 5, tk = 6, f = 4, dv = 3;
  GradGrid q = GradGrid::random_normal({tq, f}, rng, 1.0f);
  GradGrid k = GradGrid::random_normal({tk, f}, rng, 1.0f);
  GradGrid v = GradGrid::random_normal({tk, dv}, rng, 1.0f);
  GradGrid base = attention(q, k, v, 0.5f);

  // permuting query rows permutes output rows identically
  std::vector<int> pq{3, 0, 4, 1, 2};
  GradGrid qp({tq, f});
  for (int r = 0; r < tq; ++r)
    for (int c = 0; c < f; ++c)
      qp.raw()[r * f + c] = q.at(static_cast<std::size_t>(pq[r]) * f + c);
  GradGrid outp = attention(qp, k, v, 0.5f);
  for (int r = 0; r < tq; ++r)
    for (int c = 0; c < dv; ++c)
      CHECK(outp.at(static_cast<std::size_t>(r) * dv + c) ==
            doctest::Approx(base.at(static_cast<std::size_t>(pq[r]) * dv + c)).epsilon(1e-5));

  // jointly permuting key and value rows leaves output unchanged
  std::vector<int> pk{5, 2, 0, 4, 1, 3};
  GradGrid kp({tk, f}), vp({tk, dv});
  for (int r = 0; r < tk; ++r) {
    for (int c = 0; c < f; ++c) kp.raw()[r * f + c] = k.at(static_cast<std::size_t>(pk[r]) * f + c);
    for (int c = 0; c < dv; ++c) vp.raw()[r * dv + c] = v.at(static_cast<std::size_t>(pk[r]) * dv + c);
  }
  GradGrid outkv = attention(q, kp, vp, 0.5f);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(outkv.at(i) == doctest::Approx(base.at(i)).epsilon(1e-5));
}

TEST_CASE("attention: commutes with affine maps of the values") {
  Rng rng(9);
  int tq = 4, tk = 5, f = 3, dv = 2;
  GradGrid q = GradGrid::random_normal({tq, f}, rng, 1.0f);
  GradGrid k = GradGrid::random_normal({tk, f}, rng, 1.0f);
  GradGrid v = GradGrid::random_normal({tk, dv}, rng, 1.0f);
  float A[2][2] = {{1.3f, -0.4f}, {0.2f, 0.9f}};
  float b[2] = {0.7f, -1.1f};
  GradGrid av({tk, dv});
  for (int r = 0; r < tk; ++r)
    for (int i = 0; i < dv; ++i) {
      float acc = b[i];
      for (int j = 0; j < dv; ++j) acc += A[i][j] * v.at(static_cast<std::size_t>(r) * dv + j);
      av.raw()[r * dv + i] = acc;
    }
  GradGrid lhs = attention(q, k, av, 0.7f);
  GradGrid rhs_in = attention(q, k, v, 0.7f);
  for (int r = 0; r < tq; ++r)
    for (int i = 0; i < dv; ++i) {
      float acc = b[i];
      for (int j = 0; j < dv; ++j) acc += A[i][j] * rhs_in.at(static_cast<std::size_t>(r) * dv + j);
      CHECK(std::abs(lhs.at(static_cast<std::size_t>(r) * dv + i) - acc) < 1e-5);
    }
}

TEST_CASE("attention: feature-dimension mismatch is a shape error") {
  CHECK_THROWS_AS(attention(GradGrid({2, 3}), GradGrid({2, 4}), GradGrid({2, 1}), 1.0f),
                  ShapeError);
  CHECK_THROWS_AS(attention(GradGrid({2, 3}), GradGrid({4, 3}), GradGrid({2, 1}), 1.0f),
                  ShapeError);
}

TEST_CASE("grid_sample: nodes, midpoint, oracle") {
  // sampling exactly at grid nodes returns node values
  GradGrid vals({1, 4}, {3, -1, 2, 5});
  GradGrid pts({1, 4});
  for (int i = 0; i < 4; ++i) pts.raw()[i] = (i + 0.5f) / 4.0f;
  GradGrid out = grid_sample(vals, pts);
  for (int i = 0; i < 4; ++i) CHECK(out.at(i) == doctest::Approx(vals.at(i)));

  // 1D values [0,1], sample at 0.5 -> 0.5
  GradGrid v2({1, 2}, {0, 1});
  GradGrid p2({1, 1}, {0.5f});
  CHECK(grid_sample(v2, p2).item() == doctest::Approx(0.5f));

  // random 2D grid vs per-point bilinear oracle
  Rng rng(31);
  GradGrid v3 = GradGrid::random_normal({1, 5, 7}, rng, 1.0f);
  GradGrid p3({2, 10});
  for (int i = 0; i < 10; ++i) {
    p3.raw()[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    p3.raw()[10 + i] = static_cast<float>(rng.uniform(0.0, 1.0));
  }
  GradGrid o3 = grid_sample(v3, p3);
  auto dv = testref::to_double(v3);
  for (int i = 0; i < 10; ++i)
    CHECK(o3.at(static_cast<std::size_t>(i)) ==
          doctest::Approx(testref::sample2d_ref(dv, 5, 7, p3.at(static_cast<std::size_t>(i)),
                                                p3.at(static_cast<std::size_t>(10 + i)), false))
              .epsilon(1e-5));

  // out-of-range point is a contract violation
  GradGrid bad({1, 1}, {1.2f});
  CHECK_THROWS_AS(grid_sample(v2, bad), ContractError);
}

TEST_CASE("average_pool2: pairwise means and oracle") {
  GradGrid in({1, 4}, {1, 3, 5, 7});
  GradGrid out = average_pool2(in);
  REQUIRE(out.shape() == Shape{1, 2});
  CHECK(out.at(0) == doctest::Approx(2.0f));
  CHECK(out.at(1) == doctest::Approx(6.0f));

  GradGrid c = GradGrid::full({1, 6, 6}, 2.5f);
  GradGrid oc = average_pool2(c);
  REQUIRE(oc.shape() == Shape{1, 3, 3});
  for (std::size_t i = 0; i < oc.size(); ++i) CHECK(oc.at(i) == doctest::Approx(2.5f));

  Rng rng(5);
  GradGrid r = GradGrid::random_normal({2, 4, 4}, rng, 1.0f);
  GradGrid orr = average_pool2(r);
  auto ref = testref::avgpool2d_ref(testref::to_double(r), 2, 4, 4);
  for (std::size_t i = 0; i < orr.size(); ++i)
    CHECK(orr.at(i) == doctest::Approx(ref[i]).epsilon(1e-6));

  CHECK_THROWS_AS(average_pool2(GradGrid({1, 5})), ShapeError);
}

TEST_CASE("pointwise basics") {
  CHECK(sine(GradGrid::scalar(0.0f)).item() == doctest::Approx(0.0f));

  // d/dx of mean(x^2) at x=[1,2] -> [1,2]
  Tape tape;
  GradGrid x = tape.leaf(GradGrid({1, 2}, {1, 2}));
  GradGrid loss = mean(mul(x, x));
  tape.backward(loss);
  GradGrid g = tape.grad(x);
  CHECK(g.at(0) == doctest::Approx(1.0f));
  CHECK(g.at(1) == doctest::Approx(2.0f));
}

TEST_CASE("tape: contract errors") {
  Tape tape;
  GradGrid x = tape.leaf(GradGrid({1, 3}, {1, 2, 3}));
  GradGrid y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);  // non-scalar loss
  GradGrid loss = sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);  // backward twice

  // two tapes may not mix
  Tape other;
  GradGrid z = other.leaf(GradGrid({1, 3}, {1, 2, 3}));
  CHECK_THROWS_AS(add(y, z), ContractError);
}

TEST_CASE("tape: gradient accumulates over repeated param bindings") {
  Param p("w", {1, 2}, {1.0f, 2.0f});
  Tape tape;
  GradGrid a = tape.leaf(p);
  GradGrid b = tape.leaf(p);
  GradGrid loss = sum(add(a, scalar_mul(b, 2.0f)));
  tape.backward(loss);
  auto g = tape.param_grad(p);
  CHECK(g[0] == doctest::Approx(3.0f));
  CHECK(g[1] == doctest::Approx(3.0f));
}

TEST_CASE("finite outputs on finite inputs") {
  Rng rng(17);
  GradGrid a = GradGrid::random_normal({2, 8, 8}, rng, 100.0f);
  GradGrid k = GradGrid::random_normal({2, 2, 3, 3}, rng, 10.0f);
  CHECK(conv(a, k, 1).all_finite());
  GradGrid q = GradGrid::random_normal({16, 8}, rng, 50.0f);  // large logits
  GradGrid v = GradGrid::random_normal({16, 2}, rng, 1.0f);
  CHECK(attention(q, q, v, 1.0f).all_finite());
  CHECK(softmax_rows(GradGrid::random_normal({4, 9}, rng, 80.0f)).all_finite());
}

TEST_CASE("gradient check: every primitive vs finite differences, 20 seeds") {
  for (const auto& check : testref::primitive_gradchecks()) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
      worst = std::max(worst, check.run(seed).max_rel);
    INFO(check.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("adam: converges on a quadratic and keeps moment shapes") {
  Param p("x", {1, 3}, {5.0f, -4.0f, 2.0f});
  AdamState opt(AdamConfig{0.05f, 0.9f, 0.999f, 1e-8f});
  for (int i = 0; i < 400; ++i) {
    Tape tape;
    GradGrid x = tape.leaf(p);
    GradGrid loss = sum(mul(x, x));
    tape.backward(loss);
    opt.step_from_tape({&p}, tape);
  }
  for (float v : p.value) CHECK(std::abs(v) < 1e-2f);
  CHECK(opt.step_count(p) == 400);
}

TEST_SUITE_END();
