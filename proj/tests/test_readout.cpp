#include "epgeom/geometry.hpp"
#include "epgeom/readout.hpp"
#include "epgeom/toy_model.hpp"

#include <gtest/gtest.h>

namespace {

ep::ReadoutSpectrum random_spectrum(std::uint64_t seed, Eigen::Index v = 64, Eigen::Index d = 32) {
  ep::Rng rng(seed);
  return ep::svd_readout(rng.normal_matrix(v, d));
}

TEST(Svd, Identity) {
  const auto s = ep::svd_readout(ep::Matrix::Identity(5, 5));
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_NEAR(s.sigma[i], 1.0, 1e-15);
  EXPECT_LT((s.basis.transpose() * s.basis - ep::Matrix::Identity(5, 5)).norm(), 1e-12);
}

TEST(Svd, PaddedDiagonal) {
  ep::Matrix w = ep::Matrix::Zero(6, 3);
  w(0, 0) = 3;
  w(1, 1) = 2;
  w(2, 2) = 1;
  const auto s = ep::svd_readout(w);
  ASSERT_EQ(s.rank(), 3u);
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
  EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
}

TEST(Svd, RandomReconstruction) {
  ep::Rng rng(3);
  const ep::Matrix w = rng.normal_matrix(64, 32);
  Eigen::BDCSVD<ep::Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto s = ep::svd_readout(w);
  const ep::Matrix rec = svd.matrixU() * s.sigma.asDiagonal() * s.basis.transpose();
  EXPECT_LE((w - rec).norm() / w.norm(), 1e-5);
  EXPECT_LT((s.basis.transpose() * s.basis - ep::Matrix::Identity(32, 32)).cwiseAbs().maxCoeff(), 1e-5);
  for (Eigen::Index i = 1; i < s.sigma.size(); ++i) EXPECT_GE(s.sigma[i - 1], s.sigma[i]);
}

TEST(Svd, NonFiniteRejected) {
  ep::Matrix w = ep::Matrix::Ones(3, 3);
  w(1, 1) = std::nan("");
  EXPECT_THROW(ep::svd_readout(w), ep::ValidationError);
}

TEST(Visibility, TopAndBottomSingularVectors) {
  const auto s = random_spectrum(4);
  const ep::Vector v1 = s.basis.col(0), vr = s.basis.col(31);
  for (std::size_t m = 1; m <= 32; ++m) EXPECT_NEAR(ep::visibility(v1, s, m).vis, 1.0, 1e-12);
  for (std::size_t m = 1; m < 32; ++m) {
    const auto v = ep::visibility(vr, s, m);
    EXPECT_NEAR(v.vis, 0.0, 1e-12);
    EXPECT_NEAR(v.low_sens, 1.0, 1e-12);
  }
  EXPECT_THROW(ep::visibility(v1, s, 0), ep::ConfigError);
  EXPECT_THROW(ep::visibility(v1, s, 33), ep::ConfigError);
  EXPECT_THROW(ep::visibility(ep::Vector::Zero(32), s, 3), ep::DegenerateError);
}

TEST(Visibility, CurveExamples) {
  const auto s = random_spectrum(5);
  const auto c = ep::visibility_curve(s.basis.col(0), s, {1, 2, 4});
  for (double v : c.vis) EXPECT_NEAR(v, 1.0, 1e-12);
  const ep::Vector uniform = s.basis.rowwise().sum();
  std::vector<std::size_t> grid(32);
  std::iota(grid.begin(), grid.end(), 1);
  const auto u = ep::visibility_curve(uniform, s, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(u.vis[i], std::sqrt(static_cast<double>(grid[i]) / 32.0), 1e-12);
  EXPECT_THROW(ep::visibility_curve(uniform, s, {2, 2}), ep::ConfigError);
}

TEST(Visibility, DesignedBoundaryJumpsAtTwo) {
  // W_U with right-singular vectors e_0..e_5 and the boundary inside span(e_0, e_1).
  ep::Matrix w = ep::Matrix::Zero(10, 6);
  for (Eigen::Index i = 0; i < 6; ++i) w(i, i) = 6.0 - static_cast<double>(i);
  const auto s = ep::svd_readout(w);
  ep::Matrix xf = ep::Matrix::Zero(3, 6), xu = ep::Matrix::Zero(3, 6);
  xu.col(0).setConstant(1.0);
  xu.col(1).setConstant(2.0);
  const auto c = ep::class_centroids(xf, xu);
  const auto b = ep::boundary_vector(c.factual, c.uncertain);
  const auto curve = ep::visibility_curve(b.direction, s, {1, 2, 3, 6});
  EXPECT_LT(curve.vis[0], 0.99);
  EXPECT_NEAR(curve.vis[1], 1.0, 1e-12);
  EXPECT_NEAR(curve.vis[2], 1.0, 1e-12);
}

TEST(Visibility, PythagorasMonotoneScaleInvariant) {
  const auto s = random_spectrum(6);
  const auto grid = ep::default_m_grid(s);
  ep::Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const ep::Vector x = rng.normal_vector(32);
    const auto c = ep::visibility_curve(x, s, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      EXPECT_NEAR(c.vis[i] * c.vis[i] + c.low_sens[i] * c.low_sens[i], 1.0, 1e-6);
      if (i > 0) EXPECT_GE(c.vis[i], c.vis[i - 1] - 1e-15);
    }
    EXPECT_NEAR(c.vis.back(), 1.0, 1e-12);
    const auto scaled = ep::visibility(x, s, grid[1]);
    const auto ref = ep::visibility(Eigen::VectorXd(7.5 * x), s, grid[1]);
    EXPECT_NEAR(scaled.vis, ref.vis, 1e-14);
  }
}

TEST(Visibility, DefaultGridAndEnergyCutoff) {
  ep::Matrix w = ep::Matrix::Zero(100, 100);
  for (Eigen::Index i = 0; i < 100; ++i) w(i, i) = 1.0;
  const auto s = ep::svd_readout(w);
  EXPECT_EQ(ep::energy_cutoff(s), 90u);
  EXPECT_EQ(ep::default_m_grid(s), (std::vector<std::size_t>{1, 5, 10, 25, 50, 90, 100}));
}

TEST(LowSens, Examples) {
  const auto s = random_spectrum(8);
  EXPECT_NEAR(ep::lowsens_ratio(s.basis.col(0), s, 4), 0.0, 1e-12);
  EXPECT_NEAR(ep::lowsens_ratio(Eigen::VectorXd(s.basis.col(0) + s.basis.col(31)), s, 4), 1.0, 1e-12);
  EXPECT_EQ(ep::lowsens_ratio(s.basis.col(31), s, 4), ep::kInf);
  EXPECT_THROW(ep::lowsens_ratio(ep::Vector::Zero(32), s, 4), ep::DegenerateError);
}

TEST(Lens, ZeroStateIsUniform) {
  ep::Rng rng(9);
  const ep::Matrix w = rng.normal_matrix(50, 8);
  const auto r = ep::logit_lens(ep::Vector::Zero(8), w);
  EXPECT_NEAR(r.entropy, std::log(50.0), 1e-12);
  EXPECT_NEAR(r.confidence, 1.0 / 50.0, 1e-15);
  ASSERT_EQ(r.top_k.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.top_k[i].id, i);
}

TEST(Lens, DominantLogit) {
  ep::Vector z = ep::Vector::Zero(64);
  z[17] = 20.0;
  const auto r = ep::lens_from_logits(z);
  EXPECT_GT(r.confidence, 0.999);
  EXPECT_LT(r.entropy, 0.01);
  EXPECT_EQ(r.top_k[0].id, 17u);
}

TEST(Lens, ShiftInvarianceAndBounds) {
  ep::Rng rng(10);
  for (int t = 0; t < 100; ++t) {
    const ep::Vector z = 3.0 * rng.normal_vector(40);
    const auto a = ep::lens_from_logits(z);
    const auto b = ep::lens_from_logits(Eigen::VectorXd(z.array() + 123.0));
    EXPECT_NEAR(a.entropy, b.entropy, 1e-6);
    EXPECT_NEAR(a.confidence, b.confidence, 1e-6);
    ASSERT_EQ(a.top_k.size(), b.top_k.size());
    for (std::size_t i = 0; i < a.top_k.size(); ++i) EXPECT_EQ(a.top_k[i].id, b.top_k[i].id);
    EXPECT_GE(a.entropy, 0.0);
    EXPECT_LE(a.entropy, std::log(40.0) + 1e-12);
  }
  ep::Vector bad = ep::Vector::Zero(3);
  bad[1] = ep::kInf;
  EXPECT_THROW(ep::lens_from_logits(bad), ep::ValidationError);
  EXPECT_THROW(ep::logit_lens(ep::Vector::Zero(3), ep::Matrix::Zero(4, 2)), ep::ValidationError);
}

TEST(Lens, FinalLayerEqualsModelOutput) {
  const auto m = ep::init_toy(ep::ToyConfig{});
  const std::vector<std::size_t> toks = {1, 5, 9, 33, 2};
  const auto t = ep::forward(m, toks);
  const auto r = ep::logit_lens(t.final_state(m.layers.size()), m.unembed);
  EXPECT_EQ(r.confidence, ep::softmax(t.logits).maxCoeff());
}

}  // namespace
