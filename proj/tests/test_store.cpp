#include "epgeom/synth.hpp"
#include "epgeom/toy_model.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "epgeom_test_store";
  fs::create_directories(dir);
  return dir / name;
}

ep::ActivationSet minimal_set() {
  ep::ActivationSet s;
  s.model_id = "minimal";
  s.n_layers = 1;
  s.hidden_dim = 3;
  s.n_samples = 2;
  s.labels = {ep::BucketLabel::Factual, ep::BucketLabel::Impossible};
  ep::MatrixF h(2, 3);
  h << 1.0f, -2.5f, 3.25f, 0.125f, 1e-7f, -4.0f;
  s.hidden = {h};
  return s;
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) { return ep::read_bytes(p); }

// Rewrites the JSON manifest in place and re-packs the file at the new
// header length, keeping the payload bytes.
std::vector<std::uint8_t> with_manifest(const std::vector<std::uint8_t>& b, const std::function<void(nlohmann::json&)>& edit) {
  const auto hl = ep::detail::get_u64(b.data() + 8);
  auto m = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hl));
  const auto old_start = ep::detail::align_up(16 + hl);
  edit(m);
  const auto header = m.dump();
  std::vector<std::uint8_t> out(b.begin(), b.begin() + 8);
  ep::detail::put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  out.resize(ep::detail::align_up(out.size()), 0);
  out.insert(out.end(), b.begin() + static_cast<std::ptrdiff_t>(old_start), b.end());
  return out;
}

template <class F>
std::string validation_message(F&& f) {
  try {
    f();
  } catch (const ep::ValidationError& e) {
    return e.what();
  }
  return "";
}

TEST(Adf, MinimalRoundTripIsBitExact) {
  const auto s = minimal_set();
  const auto p = temp_path("minimal.adf");
  ep::write_dump(s, p);
  const auto back = ep::load_dump(p);
  EXPECT_TRUE(back == s);
  EXPECT_EQ(ep::encode_dump(back), bytes_of(p));
}

TEST(Adf, HeaderLayout) {
  const auto b = ep::encode_dump(minimal_set());
  ASSERT_GE(b.size(), 16u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "ADF1");
  EXPECT_EQ(ep::detail::get_u32(b.data() + 4), 1u);
  const auto hl = ep::detail::get_u64(b.data() + 8);
  const auto m = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hl));
  EXPECT_EQ(m["n_layers"], 1);
  EXPECT_EQ(m["hidden_dim"], 3);
  EXPECT_EQ(m["n_samples"], 2);
  for (const auto& r : m["tensors"]) EXPECT_EQ(r["offset"].get<std::uint64_t>() % 64, 0u);
  EXPECT_EQ(ep::detail::align_up(16 + hl) % 64, 0u);
}

TEST(Adf, OptionalUnembedAbsentFromManifest) {
  const auto b = ep::encode_dump(minimal_set());
  const auto hl = ep::detail::get_u64(b.data() + 8);
  const auto m = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hl));
  EXPECT_FALSE(m.contains("vocab_size"));
  for (const auto& r : m["tensors"]) EXPECT_NE(r["name"], "unembed");
}

TEST(Adf, FullSetRoundTrip) {
  ep::ToyConfig c;
  c.n_layers = 2;
  c.hidden_dim = 8;
  c.vocab = 24;
  c.heads = 2;
  c.ff_dim = 8;
  c.seed = 3;
  const auto m = ep::init_toy(c);
  const auto s = ep::export_activations(m, ep::toy_prompts(c.vocab, 3, 11, 2, 5));
  ASSERT_TRUE(s.unembed && s.embed0);
  ASSERT_EQ(s.attn.size(), 2u);
  const auto b = ep::encode_dump(s);
  const auto back = ep::decode_dump(b);
  EXPECT_TRUE(back == s);
  EXPECT_EQ(back.metadata, s.metadata);
  EXPECT_EQ(ep::encode_dump(back), b);
}

TEST(Adf, ToyExportWrittenTwiceIsByteIdentical) {
  ep::ToyConfig c;
  c.seed = 7;
  const auto a = temp_path("toy7a.adf"), b = temp_path("toy7b.adf");
  ep::export_dump(ep::init_toy(c), ep::toy_prompts(c.vocab, 10, 7), a);
  ep::export_dump(ep::init_toy(c), ep::toy_prompts(c.vocab, 10, 7), b);
  EXPECT_EQ(bytes_of(a), bytes_of(b));
}

TEST(Adf, LabelCodeThreeNamesTheIndex) {
  auto b = ep::encode_dump(minimal_set());
  const auto hl = ep::detail::get_u64(b.data() + 8);
  const auto m = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hl));
  std::uint64_t off = 0;
  for (const auto& r : m["tensors"])
    if (r["name"] == "labels") off = r["offset"];
  b[ep::detail::align_up(16 + hl) + off + 1] = 3;
  const auto msg = validation_message([&] { ep::decode_dump(b); });
  EXPECT_NE(msg.find("index 1"), std::string::npos) << msg;
  EXPECT_NE(msg.find("code 3"), std::string::npos) << msg;
}

TEST(Adf, ShapeMismatchIsAnError) {
  ep::ActivationSet s;
  s.model_id = "shape";
  s.n_layers = 1;
  s.hidden_dim = 8;
  s.n_samples = 10;
  s.labels.assign(10, ep::BucketLabel::Factual);
  s.hidden = {ep::MatrixF::Ones(10, 8)};
  const auto b = with_manifest(ep::encode_dump(s), [](nlohmann::json& m) { m["hidden_dim"] = 7; });
  const auto msg = validation_message([&] { ep::decode_dump(b); });
  EXPECT_NE(msg.find("shape"), std::string::npos) << msg;
  EXPECT_NE(msg.find("10x8"), std::string::npos) << msg;
  EXPECT_NE(msg.find("10x7"), std::string::npos) << msg;
}

TEST(Adf, BadMagicAndVersion) {
  auto b = ep::encode_dump(minimal_set());
  auto bad = b;
  bad[0] = 'X';
  EXPECT_NE(validation_message([&] { ep::decode_dump(bad); }).find("magic"), std::string::npos);
  bad = b;
  bad[4] = 2;
  EXPECT_NE(validation_message([&] { ep::decode_dump(bad); }).find("version"), std::string::npos);
}

TEST(Adf, TruncatedPayload) {
  auto b = ep::encode_dump(minimal_set());
  b.resize(b.size() - 4);
  EXPECT_NE(validation_message([&] { ep::decode_dump(b); }).find("truncated"), std::string::npos);
  b.resize(20);
  EXPECT_NE(validation_message([&] { ep::decode_dump(b); }).find("truncated"), std::string::npos);
}

TEST(Adf, NonFiniteRejectedOnWriteAndLoad) {
  auto s = minimal_set();
  s.hidden[0](1, 2) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(ep::encode_dump(s), ep::ValidationError);

  auto b = ep::encode_dump(minimal_set());
  const auto hl = ep::detail::get_u64(b.data() + 8);
  const auto m = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(hl));
  std::uint64_t off = 0;
  for (const auto& r : m["tensors"])
    if (r["name"] == "hidden/layer0") off = r["offset"];
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(b.data() + ep::detail::align_up(16 + hl) + off, &inf, 4);
  EXPECT_THROW(ep::decode_dump(b), ep::ValidationError);
}

TEST(Adf, UnwritablePath) {
  EXPECT_THROW(ep::write_dump(minimal_set(), "/nonexistent_dir_epgeom/x.adf"), ep::ConfigError);
}

TEST(Adf, DuplicateAndUnknownTensorNames) {
  const auto b = ep::encode_dump(minimal_set());
  const auto dup = with_manifest(b, [](nlohmann::json& m) { m["tensors"].push_back(m["tensors"][0]); });
  EXPECT_NE(validation_message([&] { ep::decode_dump(dup); }).find("duplicate"), std::string::npos);
  const auto unk = with_manifest(b, [](nlohmann::json& m) { m["tensors"][0]["name"] = "weird"; });
  EXPECT_NE(validation_message([&] { ep::decode_dump(unk); }).find("unknown tensor"), std::string::npos);
}

TEST(Adf, MisalignedOffsetRejected) {
  const auto b = with_manifest(ep::encode_dump(minimal_set()), [](nlohmann::json& m) { m["tensors"][0]["offset"] = 4; });
  EXPECT_NE(validation_message([&] { ep::decode_dump(b); }).find("aligned"), std::string::npos);
}

TEST(Select, RowsInOriginalOrder) {
  ep::ActivationSet s;
  s.model_id = "sel";
  s.n_layers = 1;
  s.hidden_dim = 2;
  s.n_samples = 3;
  s.labels = {ep::BucketLabel::Factual, ep::BucketLabel::Hallucination, ep::BucketLabel::Factual};
  ep::MatrixF h(3, 2);
  h << 0, 1, 2, 3, 4, 5;
  s.hidden = {h};
  const auto f = ep::select(s, 0, ep::BucketLabel::Factual);
  ASSERT_EQ(f.rows(), 2);
  EXPECT_EQ(f(0, 1), 1.0);
  EXPECT_EQ(f(1, 0), 4.0);
  EXPECT_THROW(ep::select(s, 0, ep::BucketLabel::Impossible), ep::EmptyBucket);
  EXPECT_THROW(ep::select(s, 1, ep::BucketLabel::Factual), ep::ValidationError);
}

TEST(Select, BucketsPartitionRows) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec("gaussian_clusters:k=3,n=40", 5));
  Eigen::Index total = 0;
  for (auto b : ep::kAllBuckets) total += ep::select(s, 0, b).rows();
  EXPECT_EQ(total, static_cast<Eigen::Index>(s.n_samples));
}

TEST(Select, TwoClassSeparatedCountsMatchGenerator) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec("two_class_separated:n=50", 9));
  EXPECT_EQ(ep::select(s, 0, ep::BucketLabel::Factual).rows(), 50);
  EXPECT_EQ(ep::select(s, 0, ep::BucketLabel::Hallucination).rows(), 25);
  EXPECT_EQ(ep::select(s, 0, ep::BucketLabel::Impossible).rows(), 25);
  EXPECT_EQ(ep::select_uncertain(s, 0, ep::UncertainGroup::Both).rows(), 50);
}

TEST(Synth, SameSeedBitIdentical) {
  for (const char* spec : {"gaussian_clusters", "manifold_plane", "circle", "line", "two_class_separated", "anisotropy_ratio"}) {
    const auto a = ep::synth_dataset(ep::parse_synth_spec(spec, 42));
    const auto b = ep::synth_dataset(ep::parse_synth_spec(spec, 42));
    EXPECT_TRUE(a == b) << spec;
    EXPECT_EQ(ep::encode_dump(a), ep::encode_dump(b)) << spec;
    const auto c = ep::synth_dataset(ep::parse_synth_spec(spec, 43));
    EXPECT_FALSE(a == c) << spec;
  }
}

TEST(Synth, LineIsRankOne) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec("line:n=500,D=10", 1));
  const ep::Matrix x = s.hidden[0].cast<double>();
  const ep::Matrix xc = x.rowwise() - x.colwise().mean();
  Eigen::JacobiSVD<ep::Matrix> svd(xc);
  const auto sv = svd.singularValues();
  EXPECT_LT(sv[1] / sv[0], 1e-3);
}

TEST(Synth, CircleNorms) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec("circle:n=400,D=3,r=1", 2));
  for (Eigen::Index i = 0; i < s.hidden[0].rows(); ++i) {
    const double r = std::hypot(static_cast<double>(s.hidden[0](i, 0)), static_cast<double>(s.hidden[0](i, 1)));
    EXPECT_NEAR(r, 1.0, 1e-3);
  }
}

TEST(Synth, ClusterCentroidsAtLeastSeparation) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec("gaussian_clusters:k=3,n=200,sep=20,sigma=1", 3));
  std::vector<ep::Vector> mu;
  for (auto b : ep::kAllBuckets) mu.push_back(ep::select(s, 0, b).colwise().mean().transpose());
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b) EXPECT_GE((mu[a] - mu[b]).norm(), 20.0 - 3.0 * std::sqrt(2.0 / 200.0));
}

TEST(Synth, IntrinsicAboveAmbientRejected) {
  EXPECT_THROW(ep::synth_dataset(ep::parse_synth_spec("manifold_plane:intrinsic=5,D=3", 0)), ep::ConfigError);
  EXPECT_THROW(ep::parse_synth_spec("circle:bogus=1", 0), ep::ConfigError);
  EXPECT_THROW(ep::parse_synth_spec("nope", 0), ep::ConfigError);
}

TEST(Synth, AnisotropyDesignedDims) {
  const auto s = ep::synth_dataset(ep::parse_synth_spec("anisotropy_ratio:ratio=2.5,m=2,n=300", 4));
  const auto rank = [](const ep::Matrix& x) {
    const ep::Matrix xc = x.rowwise() - x.colwise().mean();
    Eigen::JacobiSVD<ep::Matrix> svd(xc);
    return static_cast<int>((svd.singularValues().array() > 1e-3 * svd.singularValues()[0]).count());
  };
  EXPECT_EQ(rank(ep::select(s, 0, ep::BucketLabel::Factual)), 2);
  EXPECT_EQ(rank(ep::select_uncertain(s, 0, ep::UncertainGroup::Both)), 5);
}

}  // namespace
