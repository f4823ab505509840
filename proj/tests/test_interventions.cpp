#include "epgeom/geometry.hpp"
#include "epgeom/interventions.hpp"
#include "epgeom/synth.hpp"

#include <gtest/gtest.h>

namespace {

struct Classes {
  ep::Matrix xf, xu;
};

Classes synth_classes(const std::string& spec, std::uint64_t seed) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec(spec, seed));
  return {ep::select(s, 0, ep::BucketLabel::Factual), ep::select_uncertain(s, 0, ep::UncertainGroup::Both)};
}

TEST(Steer, Identities) {
  ep::Rng rng(1);
  const ep::Vector h = rng.normal_vector(6), v = rng.normal_vector(6);
  EXPECT_EQ(ep::steer(h, v, 0.0), h);
  ep::Vector mf(3), mu(3);
  mf << 0.5, -1.25, 2.0;
  mu << 3.0, 0.75, -4.5;
  EXPECT_EQ(ep::steer(mf, ep::Vector(mu - mf), 1.0), mu);
  EXPECT_THROW(ep::steer(h, ep::Vector::Zero(2), 1.0), ep::ValidationError);
}

TEST(Probe, SeparableSynthReachesNinetyNine) {
  const auto c = synth_classes("two_class_separated", 3);
  const auto p = ep::train_linear_probe(c.xf, c.xu);
  EXPECT_GE(p.train_acc, 0.99);
  EXPECT_TRUE(p.converged);
  EXPECT_EQ(p.epochs, 500u);
  const auto q = ep::train_linear_probe(c.xf, c.xu);
  EXPECT_EQ(p.w, q.w);
  EXPECT_EQ(p.bias, q.bias);
}

TEST(Probe, IdenticalClassesAtChance) {
  ep::Rng rng(4);
  const ep::Matrix xf = rng.normal_matrix(2000, 2), xu = rng.normal_matrix(2000, 2);
  const auto p = ep::train_linear_probe(xf, xu);
  EXPECT_NEAR(p.train_acc, 0.5, 0.05);
}

TEST(Probe, DecisionInvariantToPositiveRescaling) {
  const auto c = synth_classes("two_class_separated:n=50", 5);
  const auto p = ep::train_linear_probe(c.xf, c.xu);
  ep::LinearProbe s = p;
  s.w *= 7.5;
  s.bias *= 7.5;
  ep::Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const ep::Vector h = 5.0 * rng.normal_vector(8);
    EXPECT_EQ(p.decide(h), s.decide(h));
  }
}

TEST(Probe, Errors) {
  ep::Rng rng(7);
  EXPECT_THROW(ep::train_linear_probe(rng.normal_matrix(9, 2), rng.normal_matrix(20, 2)), ep::ValidationError);
  EXPECT_THROW(ep::train_linear_probe(rng.normal_matrix(20, 2), rng.normal_matrix(20, 3)), ep::ValidationError);
  ep::ProbeHyper hp;
  hp.lr = 0.0;
  EXPECT_THROW(ep::train_linear_probe(rng.normal_matrix(20, 2), rng.normal_matrix(20, 2), hp), ep::ConfigError);
}

TEST(Bypass, Examples) {
  ep::Rng rng(8);
  const ep::Vector z = rng.normal_vector(10);
  EXPECT_EQ(ep::readout_bypass(z, 0.7, 0.0, 3), z);
  const double margin = ep::refusal_margin(z, 9);
  const ep::Vector forced = ep::readout_bypass(z, 1.0, margin + 1e-6, 9);
  EXPECT_EQ(ep::argmax(forced), 9);
  EXPECT_THROW(ep::readout_bypass(z, 1.5, 1.0, 0), ep::ConfigError);
  EXPECT_THROW(ep::readout_bypass(z, 0.5, 1.0, 10), ep::ConfigError);
}

TEST(Bypass, OnlyTheUnsureComponentChanges) {
  ep::Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    const ep::Vector z = rng.normal_vector(12);
    const ep::Vector out = ep::readout_bypass(z, rng.uniform(), 3.0 * rng.uniform(), 5);
    const ep::Vector p0 = ep::softmax(z), p1 = ep::softmax(out);
    for (Eigen::Index i = 0; i < 12; ++i) {
      if (i == 5) continue;
      EXPECT_EQ(out[i], z[i]);
      EXPECT_LE(p1[i], p0[i] + 1e-15);
    }
  }
}

TEST(Bypass, MarginCalibratedGamma) {
  std::vector<double> m(100);
  std::iota(m.begin(), m.end(), 0.0);
  EXPECT_NEAR(ep::margin_calibrated_gamma(m), 2.0 * ep::quantile_of(m, 0.95), 1e-15);
  EXPECT_THROW(ep::margin_calibrated_gamma({}), ep::ValidationError);
}

TEST(Bypass, SyntheticRefusalRate) {
  const auto c = synth_classes("two_class_separated", 10);
  const auto probe = ep::train_linear_probe(c.xf, c.xu);
  ASSERT_GE(probe.train_acc, 0.99);
  // Readout blind to the class boundary: both classes then share one margin distribution.
  const auto cent = ep::class_centroids(c.xf, c.xu);
  const ep::Vector b = ep::boundary_vector(cent.factual, cent.uncertain).direction;
  ep::Rng rng(11);
  const ep::Matrix w_u = rng.normal_matrix(32, 8) * (ep::Matrix::Identity(8, 8) - b * b.transpose()) / std::sqrt(8.0);
  const std::size_t unsure = 31;
  std::vector<double> margins;
  for (Eigen::Index i = 0; i < c.xf.rows(); ++i) margins.push_back(ep::refusal_margin(w_u * c.xf.row(i).transpose(), unsure));
  const double gamma = ep::margin_calibrated_gamma(margins);
  std::size_t refused = 0;
  for (Eigen::Index i = 0; i < c.xu.rows(); ++i) {
    const ep::Vector h = c.xu.row(i).transpose();
    refused += static_cast<std::size_t>(ep::argmax(ep::readout_bypass(w_u * h, probe.prob(h), gamma, unsure))) == unsure ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(refused) / static_cast<double>(c.xu.rows()), 0.95);
}

TEST(Subspace, PlaneAndRank) {
  ep::Rng rng(12);
  const ep::Matrix frame = ep::random_frame(6, 2, rng);
  ep::Matrix x = rng.normal_matrix(300, 2) * frame.transpose();
  x.rowwise() += rng.normal_vector(6).transpose();
  const auto s = ep::factual_subspace(x, 0.95);
  EXPECT_EQ(s.k(), 2u);
  EXPECT_NEAR(s.captured, 1.0, 1e-9);
  EXPECT_LT((s.basis.transpose() * s.basis - ep::Matrix::Identity(2, 2)).norm(), 1e-12);

  const ep::Matrix low = rng.normal_matrix(200, 4) * ep::random_frame(10, 4, rng).transpose();
  EXPECT_EQ(ep::factual_subspace(low, 1.0).k(), 4u);
  EXPECT_THROW(ep::factual_subspace(low, 0.0), ep::ConfigError);
  EXPECT_THROW(ep::factual_subspace(ep::Matrix::Ones(5, 3), 0.9), ep::DegenerateError);
}

TEST(Subspace, IsotropicNeedsNearlyAllDims) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ep::Rng rng(seed);
    const auto k = ep::factual_subspace(rng.normal_matrix(5000, 10), 0.95).k();
    EXPECT_TRUE(k == 9 || k == 10) << "k=" << k;
  }
}

TEST(Repair, Properties) {
  ep::Rng rng(13);
  const ep::Matrix x = rng.normal_matrix(400, 3) * ep::random_frame(8, 3, rng).transpose();
  const auto sub = ep::factual_subspace(x, 0.95);
  for (int t = 0; t < 50; ++t) {
    const ep::Vector h = 3.0 * rng.normal_vector(8);
    EXPECT_EQ(ep::manifold_repair(h, sub, 0.0), h);
    const ep::Vector once = ep::manifold_repair(h, sub, 1.0);
    EXPECT_LT((ep::manifold_repair(once, sub, 1.0) - once).norm(), 1e-6);
    const ep::Vector inside = sub.project(h);
    const double lam = rng.uniform();
    EXPECT_LT((ep::manifold_repair(inside, sub, lam) - inside).norm(), 1e-12);
    const double before = sub.distance(h);
    const double after = sub.distance(ep::manifold_repair(h, sub, lam));
    EXPECT_NEAR(after, (1.0 - lam) * before, 1e-12 * std::max(1.0, before));
    EXPECT_LE(after, before + 1e-12);
  }
  EXPECT_THROW(ep::manifold_repair(ep::Vector::Zero(8), sub, 1.5), ep::ConfigError);
  EXPECT_THROW(ep::manifold_repair(ep::Vector::Zero(3), sub, 0.5), ep::ValidationError);
}

TEST(Loops, Definition) {
  const std::vector<std::size_t> three = {9, 1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4, 7};
  EXPECT_TRUE(ep::has_loop(three));
  const std::vector<std::size_t> two = {1, 2, 3, 4, 1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_FALSE(ep::has_loop(two));
  EXPECT_TRUE(ep::has_loop(std::vector<std::size_t>(12, 5)));
  EXPECT_FALSE(ep::has_loop(std::vector<std::size_t>(11, 5)));
}

class ToyBehaviour : public ::testing::Test {
 protected:
  void SetUp() override {
    model = ep::init_toy(ep::ToyConfig{});
    const auto prompts = ep::toy_prompts(64, 12, 2);
    const auto s = ep::export_activations(model, prompts);
    const std::size_t li = 1;  // mid-depth block of four
    xf = ep::select(s, li, ep::BucketLabel::Factual);
    xu = ep::select_uncertain(s, li, ep::UncertainGroup::Both);
    stream = li + 1;
    for (const auto& p : prompts) (p.label == ep::BucketLabel::Factual ? fprompts : uprompts).push_back(p.tokens);
  }
  ep::ToyTransformer model;
  ep::Matrix xf, xu;
  std::size_t stream = 0;
  ep::Generations fprompts, uprompts;
};

TEST_F(ToyBehaviour, GenerateIsGreedy) {
  const auto& p = fprompts[0];
  const auto out = ep::generate(model, p, 5);
  ASSERT_EQ(out.size(), 5u);
  std::vector<std::size_t> seq = p;
  for (auto t : out) {
    EXPECT_EQ(static_cast<std::size_t>(ep::argmax(ep::forward(model, seq).logits)), t);
    seq.push_back(t);
  }
  EXPECT_THROW(ep::generate(model, std::vector<std::size_t>{}, 3), ep::ConfigError);
}

TEST_F(ToyBehaviour, NullInterventionChangesNothing) {
  const auto r = ep::behavioral_eval(model, fprompts, ep::Intervention{}, 63);
  EXPECT_EQ(r.output_change, 0.0);
  EXPECT_EQ(r.n_samples, fprompts.size());
  ep::Intervention zero;
  zero.kind = ep::InterventionKind::Steer;
  zero.stream = stream;
  zero.v_steer = ep::Vector::Ones(32);
  zero.alpha = 0.0;
  EXPECT_EQ(ep::behavioral_eval(model, fprompts, zero, 63).output_change, 0.0);
  EXPECT_THROW(ep::behavioral_eval(model, fprompts, ep::Intervention{}, std::nullopt), ep::ConfigError);
}

TEST_F(ToyBehaviour, InfiniteGammaAlwaysRefuses) {
  ep::LinearProbe certain;
  certain.w = ep::Vector::Zero(32);
  certain.bias = 1e3;
  ep::Intervention iv;
  iv.kind = ep::InterventionKind::Bypass;
  iv.stream = stream;
  iv.probe = &certain;
  iv.gamma = 1e12;
  iv.unsure_id = 63;
  const auto r = ep::behavioral_eval(model, uprompts, iv, 63);
  EXPECT_EQ(r.refusal_rate, 1.0);
  iv.probe = nullptr;
  EXPECT_THROW(ep::generate(model, uprompts[0], 3, iv), ep::ConfigError);
}

TEST_F(ToyBehaviour, SteeringChangeGrowsWithAlpha) {
  const ep::Vector v = xu.colwise().mean().transpose() - xf.colwise().mean().transpose();
  const auto base = ep::generate_all(model, fprompts);
  double prev = -1.0;
  for (double a : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    ep::Intervention iv;
    iv.kind = a == 0.0 ? ep::InterventionKind::None : ep::InterventionKind::Steer;
    iv.stream = stream;
    iv.v_steer = v;
    iv.alpha = a;
    const auto r = ep::behavioral_eval(model, fprompts, iv, 63, ep::kDefaultMaxNewTokens, &base);
    EXPECT_GE(r.output_change, prev) << "alpha " << a;
    prev = r.output_change;
  }
  EXPECT_GT(prev, 0.0);
}

TEST_F(ToyBehaviour, FullRepairOnFactualPromptsIsFixedPointAtStream) {
  const auto sub = ep::factual_subspace(xf, 1.0);
  for (Eigen::Index i = 0; i < xf.rows(); ++i) EXPECT_LT(sub.distance(xf.row(i).transpose()), 1e-9);
}

}  // namespace
