#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "equireg/gridio.hpp"
#include "equireg/transform.hpp"

using namespace equireg;

namespace {

GradGrid points1d(std::vector<float> xs) {
  int n = static_cast<int>(xs.size());
  return GradGrid({1, n}, std::move(xs));
}

GradGrid points2d(const std::vector<std::array<float, 2>>& ps) {
  int n = static_cast<int>(ps.size());
  GradGrid g({2, n});
  for (int i = 0; i < n; ++i) {
    g.raw()[i] = ps[static_cast<std::size_t>(i)][0];
    g.raw()[n + i] = ps[static_cast<std::size_t>(i)][1];
  }
  return g;
}

double max_abs_diff(const GradGrid& a, const GradGrid& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.at(i)) - b.at(i)));
  return m;
}

// Frobenius norm of the difference between per-point Jacobians at sample s.
double jac_diff(const GradGrid& j, std::size_t s1, std::size_t s2, std::size_t samples) {
  double acc = 0.0;
  for (int c = 0; c < j.channels(); ++c) {
    double d = double(j.at(static_cast<std::size_t>(c) * samples + s1)) -
               j.at(static_cast<std::size_t>(c) * samples + s2);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_SUITE_BEGIN("transform");

TEST_CASE("displacement evaluation: zero field, constant field, interior equality") {
  // zero displacement: x -> x everywhere, including x = 1.3
  GradGrid zero({1, 8});
  Transform t = Transform::displacement_field(zero, Transform::Extrap::ClipReflect);
  GradGrid pts = points1d({0.1f, 0.5f, 0.99f, 1.3f, -0.2f});
  GradGrid out = t(pts);
  CHECK(max_abs_diff(out, pts) < 1e-7);

  // constant displacement d: x -> x + d (2d - d = d outside too)
  GradGrid constd = GradGrid::full({1, 8}, 0.07f);
  Transform tc = Transform::displacement_field(constd, Transform::Extrap::ClipReflect);
  GradGrid outc = tc(pts);
  for (std::size_t i = 0; i < pts.size(); ++i)
    CHECK(outc.at(i) == doctest::Approx(pts.at(i) + 0.07f));

  // inside [0,1]^D the two modes agree exactly
  Rng rng(2);
  GradGrid disp = GradGrid::random_normal({2, 6, 6}, rng, 0.05f);
  Transform cr = Transform::displacement_field(disp, Transform::Extrap::ClipReflect);
  Transform cl = Transform::displacement_field(disp, Transform::Extrap::Clip);
  std::vector<std::array<float, 2>> ps;
  for (int i = 0; i < 50; ++i)
    ps.push_back({static_cast<float>(rng.uniform(0.0, 1.0)), static_cast<float>(rng.uniform(0.0, 1.0))});
  GradGrid p2 = points2d(ps);
  CHECK(max_abs_diff(cr(p2), cl(p2)) == 0.0);
}

TEST_CASE("compose: shifts add, identity neutral, rotation cancels") {
  Transform a = Transform::translation({0.1f, 0.0f});
  Transform b = Transform::translation({0.2f, 0.0f});
  GradGrid origin = points2d({{0.0f, 0.0f}});
  GradGrid out = compose(a, b)(origin);
  CHECK(out.at(0) == doctest::Approx(0.3f));
  CHECK(out.at(1) == doctest::Approx(0.0f));

  Rng rng(3);
  GradGrid disp = GradGrid::random_normal({2, 5, 5}, rng, 0.04f);
  Transform phi = Transform::displacement_field(disp);
  Transform phi_id = compose(phi, Transform::identity(2));
  std::vector<std::array<float, 2>> ps;
  for (int i = 0; i < 40; ++i)
    ps.push_back({static_cast<float>(rng.uniform(0.0, 1.0)), static_cast<float>(rng.uniform(0.0, 1.0))});
  GradGrid p2 = points2d(ps);
  CHECK(max_abs_diff(phi(p2), phi_id(p2)) < 1e-7);

  Transform rot = Transform::rotation2d(0.7f);
  Transform unrot = Transform::rotation2d(-0.7f);
  CHECK(max_abs_diff(compose(rot, unrot)(p2), p2) < 1e-6);

  CHECK_THROWS_AS(compose(Transform::identity(2), Transform::identity(1)), ShapeError);
}

TEST_CASE("compose is associative on sampled points") {
  Rng rng(5);
  Transform f = Transform::displacement_field(GradGrid::random_normal({2, 6, 6}, rng, 0.03f));
  Transform g = Transform::rotation2d(0.3f);
  Transform h = Transform::translation({0.05f, -0.02f});
  std::vector<std::array<float, 2>> ps;
  for (int i = 0; i < 1000; ++i)
    ps.push_back({static_cast<float>(rng.uniform(0.0, 1.0)), static_cast<float>(rng.uniform(0.0, 1.0))});
  GradGrid p = points2d(ps);
  GradGrid left = compose(compose(f, g), h)(p);
  GradGrid right = compose(f, compose(g, h))(p);
  CHECK(max_abs_diff(left, right) < 1e-6);
}

TEST_CASE("warp: identity, constants, 1D reversal") {
  Rng rng(7);
  Image img(GradGrid::random_normal({1, 8, 8}, rng, 1.0f));
  Image warped = warp(img, Transform::identity(2));
  CHECK(max_abs_diff(warped.grid, img.grid) < 1e-6);

  // constant image: same constant where sampling stays inside, zero where
  // the transform reads far outside the domain
  Image flat(GradGrid::full({1, 8, 8}, 3.0f));
  Image shifted = warp(flat, Transform::translation({0.25f, 0.0f}));
  // node (1, 4): reads x = 0.1875 + 0.25 inside -> constant
  CHECK(shifted.grid.at(1 * 8 + 4) == doctest::Approx(3.0f));
  // node (7, 4): reads x = 0.9375 + 0.25 > 1 + half voxel -> zero
  CHECK(shifted.grid.at(7 * 8 + 4) == doctest::Approx(0.0f));

  Image line(GradGrid({1, 3}, {0.0f, 0.5f, 1.0f}));
  Transform rev = Transform::affine(1, {-1.0f}, {1.0f});  // x -> 1 - x
  Image rline = warp(line, rev);
  CHECK(rline.grid.at(0) == doctest::Approx(1.0f));
  CHECK(rline.grid.at(1) == doctest::Approx(0.5f));
  CHECK(rline.grid.at(2) == doctest::Approx(0.0f));
}

TEST_CASE("warp respects composition within interpolation tolerance") {
  // smooth blob, tolerance = (max gradient) * one voxel
  int n = 32;
  GradGrid g({1, n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double dy = (y + 0.5) / n - 0.5, dx = (x + 0.5) / n - 0.5;
      g.raw()[y * n + x] = static_cast<float>(std::exp(-25.0 * (dx * dx + dy * dy)));
    }
  Image img(g);
  double max_grad = 0.0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x + 1 < n; ++x)
      max_grad = std::max(max_grad, std::abs(double(g.at(static_cast<std::size_t>(y) * n + x + 1)) -
                                             g.at(static_cast<std::size_t>(y) * n + x)) * n);
  Transform phi = Transform::rotation2d(0.2f);
  Transform psi = Transform::translation({0.04f, -0.03f});
  Image two = warp(warp(img, phi), psi);
  Image one = warp(img, compose(phi, psi));
  CHECK(max_abs_diff(two.grid, one.grid) < max_grad / n);
}

TEST_CASE("jacobian: identity, pure scaling, affine exactness") {
  GradGrid pts = points2d({{0.3f, 0.4f}, {0.7f, 0.2f}, {0.5f, 0.5f}});
  float h = 0.5f / 16.0f;

  GradGrid ji = transform_jacobian(Transform::identity(2), pts, h);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(ji.at(0 * 3 + s) == doctest::Approx(1.0f));
    CHECK(ji.at(1 * 3 + s) == doctest::Approx(0.0f));
    CHECK(ji.at(2 * 3 + s) == doctest::Approx(0.0f));
    CHECK(ji.at(3 * 3 + s) == doctest::Approx(1.0f));
  }

  Transform dbl = Transform::affine(2, {2, 0, 0, 2}, {0, 0});
  GradGrid jd = transform_jacobian(dbl, pts, h);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(jd.at(0 * 3 + s) == doctest::Approx(2.0f));
    CHECK(jd.at(3 * 3 + s) == doctest::Approx(2.0f));
  }

  // general affine: finite differences recover the matrix to 1e-4
  Transform aff = Transform::affine(2, {1.1f, -0.3f, 0.25f, 0.8f}, {0.01f, -0.02f});
  GradGrid ja = transform_jacobian(aff, pts, h);
  float expect[4] = {1.1f, -0.3f, 0.25f, 0.8f};
  for (int c = 0; c < 4; ++c)
    for (std::size_t s = 0; s < 3; ++s)
      CHECK(std::abs(ja.at(static_cast<std::size_t>(c) * 3 + s) - expect[c]) < 1e-4);
}

TEST_CASE("extrapolation continuity: ClipReflect smooth across the boundary, Clip jumps") {
  // displacement field representing a rotation by 0.5 rad
  int n = 24;
  float theta = 0.5f;
  GradGrid coords = coord_grid({n, n});
  Transform rot = Transform::rotation2d(theta);
  GradGrid disp = sub(rot(coords), coords);
  Transform cr = Transform::displacement_field(disp, Transform::Extrap::ClipReflect);
  Transform cl = Transform::displacement_field(disp, Transform::Extrap::Clip);

  float h = 0.5f / n;
  float dlt = 2.0f / n;  // clear of the clamp plateau half-voxel band
  // boundary pairs straddling x = 1 at several heights, plus interior lines
  std::vector<std::array<float, 2>> bpts, ipts;
  int ny = 10, nx = 12;
  for (int iy = 0; iy < ny; ++iy) {
    float y = 0.25f + 0.5f * static_cast<float>(iy) / (ny - 1);
    bpts.push_back({1.0f - dlt, y});
    bpts.push_back({1.0f + dlt, y});
    for (int ix = 0; ix < nx; ++ix)
      ipts.push_back({0.2f + (0.8f - 3.0f / n - 0.2f) * static_cast<float>(ix) / (nx - 1), y});
  }
  auto boundary_jump = [&](const Transform& t) {
    GradGrid j = transform_jacobian(t, points2d(bpts), h);
    double worst = 0.0;
    for (int iy = 0; iy < ny; ++iy)
      worst = std::max(worst, jac_diff(j, static_cast<std::size_t>(2 * iy),
                                       static_cast<std::size_t>(2 * iy + 1), bpts.size()));
    return worst;
  };
  auto interior_variation = [&](const Transform& t) {
    GradGrid j = transform_jacobian(t, points2d(ipts), h);
    double worst = 0.0;
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix + 1 < nx; ++ix)
        worst = std::max(worst, jac_diff(j, static_cast<std::size_t>(iy * nx + ix),
                                         static_cast<std::size_t>(iy * nx + ix + 1), ipts.size()));
    return worst;
  };

  double var_cr = interior_variation(cr);
  CHECK(boundary_jump(cr) <= 10.0 * var_cr);
  CHECK(boundary_jump(cl) > 10.0 * interior_variation(cl));
}

TEST_CASE("analytic makers: zero translation, quarter turn, scale inverse") {
  Rng rng(9);
  std::vector<std::array<float, 2>> ps;
  for (int i = 0; i < 30; ++i)
    ps.push_back({static_cast<float>(rng.uniform(0.0, 1.0)), static_cast<float>(rng.uniform(0.0, 1.0))});
  GradGrid p = points2d(ps);

  CHECK(max_abs_diff(Transform::translation({0.0f, 0.0f})(p), p) < 1e-7);

  // rotation by pi/2 about the center takes (1, 0.5) to (0.5, 1)
  Transform q = Transform::rotation2d(3.14159265358979f / 2.0f);
  GradGrid corner = q(points2d({{1.0f, 0.5f}}));
  CHECK(corner.at(0) == doctest::Approx(0.5f).epsilon(1e-5));
  CHECK(corner.at(1) == doctest::Approx(1.0f).epsilon(1e-5));

  Transform sc = Transform::scaling(2, 0.8f, {0.5f, 0.5f});
  Transform inv = *sc.inverse();
  CHECK(max_abs_diff(compose(sc, inv)(p), p) < 1e-6);
  CHECK(max_abs_diff(compose(inv, sc)(p), p) < 1e-6);
}

TEST_CASE("grid file round trip and malformed files") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "equireg_gridio_test";
  fs::create_directories(dir);
  Rng rng(13);
  GradGrid g = GradGrid::random_normal({2, 5, 3}, rng, 1.0f);
  std::string path = (dir / "a.grid").string();
  write_grid(path, g);
  GradGrid back = read_grid(path);
  CHECK(back.shape() == g.shape());
  CHECK(max_abs_diff(back, g) == 0.0);

  std::string badpath = (dir / "bad.grid").string();
  {
    std::ofstream f(badpath, std::ios::binary);
    f << "GRID 2 1 4 4\n";
    float vals[3] = {1, 2, 3};  // 16 floats promised, 3 delivered
    f.write(reinterpret_cast<const char*>(vals), sizeof(vals));
  }
  CHECK_THROWS_WITH_AS(read_grid(badpath), doctest::Contains("byte"), DataError);

  std::string nomagic = (dir / "nomagic.grid").string();
  {
    std::ofstream f(nomagic, std::ios::binary);
    f << "GRUD 2 1 4 4\n";
  }
  CHECK_THROWS_AS(read_grid(nomagic), DataError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint save/load round trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "equireg_ckpt_test";
  Rng rng(17);
  Param w("enc.w0", {4, 2, 3, 3}, GradGrid::random_normal({4, 2, 3, 3}, rng, 1.0f).vec());
  Param b("enc.b0", {4}, {1, 2, 3, 4});
  save_checkpoint(dir.string(), {&w, &b});
  Param w2("enc.w0", {4, 2, 3, 3}, std::vector<float>(72, 0.0f));
  Param b2("enc.b0", {4}, std::vector<float>(4, 0.0f));
  load_checkpoint(dir.string(), {&w2, &b2});
  CHECK(w2.value == w.value);
  CHECK(b2.value == b.value);
  fs::remove_all(dir);
}

TEST_SUITE_END();
