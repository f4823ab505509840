#include "epgeom/pipeline.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace {

namespace fs = std::filesystem;

const char* kSmallToy = "layers=2,dim=16,vocab=32,heads=2,ff=16,per_bucket=10";

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("epgeom_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ep::PipelineConfig toy_config(std::size_t jobs) {
  ep::PipelineConfig c;
  c.source = ep::SourceKind::Toy;
  c.source_spec = kSmallToy;
  c.seed = 11;
  c.jobs = jobs;
  c.behavior_samples = 8;
  c.max_new_tokens = 12;
  return c;
}

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(const std::string& args, const std::string& env = "") {
  const auto dir = scratch("run");
  const std::string cmd = env + " '" EPGEOM_CLI "' " + args + " > '" + (dir / "o").string() + "' 2> '" + (dir / "e").string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(dir / "o");
  r.err = slurp(dir / "e");
  return r;
}

TEST(Pipeline, ToyReportIsDeterministicAcrossJobs) {
  const auto a = ep::to_json(ep::run_pipeline(toy_config(1)));
  const auto b = ep::to_json(ep::run_pipeline(toy_config(1)));
  const auto c = ep::to_json(ep::run_pipeline(toy_config(3)));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  const auto doc = nlohmann::json::parse(a);
  for (const auto* s : {"boundary", "lid", "spectrum", "topology", "readout", "probes", "components", "selectivity", "interventions"})
    EXPECT_TRUE(doc["sections"].contains(s)) << s;
  EXPECT_FALSE(doc["sections"]["probes"]["probes"].empty());
  EXPECT_FALSE(doc["sections"]["interventions"]["bypass"].empty());
}

TEST(Pipeline, AnisotropyRatioInRange) {
  ep::PipelineConfig c;
  c.source = ep::SourceKind::Synth;
  c.source_spec = "anisotropy_ratio:ratio=2.5";
  c.seed = 1;
  c.sections = {"lid"};
  const auto r = ep::run_pipeline(c);
  const auto& rows = r.doc["sections"]["lid"]["ratio"];
  ASSERT_FALSE(rows.empty());
  for (const auto& row : rows) {
    const double v = ep::json_to_double(row["lid_ratio"]);
    EXPECT_GE(v, 2.0);
    EXPECT_LE(v, 3.0);
  }
}

TEST(Pipeline, ToyDumpReloadMatchesLiveSource) {
  const auto dir = scratch("reload");
  const auto cfg = toy_config(1);
  const auto spec = ep::parse_toy_spec(cfg.source_spec, cfg.seed);
  const auto model = ep::init_toy(spec.model);
  const auto prompts = ep::toy_prompts(spec.model.vocab, spec.per_bucket, ep::derive_seed(cfg.seed, {0x960}), spec.min_len, spec.max_len);
  ep::export_dump(model, prompts, dir / "toy.adf");
  auto dump_cfg = cfg;
  dump_cfg.source = ep::SourceKind::Dump;
  dump_cfg.source_spec = (dir / "toy.adf").string();
  const auto live = ep::run_pipeline(cfg), loaded = ep::run_pipeline(dump_cfg);
  EXPECT_EQ(live.doc["sections"], loaded.doc["sections"]);
}

TEST(Pipeline, MissingGradientTensorIsNamed) {
  const auto dir = scratch("nograd");
  auto s = ep::export_activations(ep::init_toy(ep::parse_toy_spec(kSmallToy, 3).model), ep::toy_prompts(32, 10, 3));
  s.grad_unc.clear();
  ep::write_dump(s, dir / "nograd.adf");
  ep::PipelineConfig c;
  c.source = ep::SourceKind::Dump;
  c.source_spec = (dir / "nograd.adf").string();
  c.metrics = std::vector<std::string>{"probes.blockage"};
  try {
    ep::run_pipeline(c);
    FAIL() << "accepted a dump without gradients";
  } catch (const ep::ValidationError& e) {
    EXPECT_EQ(std::string(e.what()), "metric 'probes.blockage' requires tensor 'grad_unc/layer0' (absent from input)");
  }
  c.metrics.reset();
  c.sections = {"probes"};
  const auto r = ep::run_pipeline(c);
  for (const auto& row : r.doc["sections"]["probes"]["probes"]) EXPECT_TRUE(row["blockage"].is_null());
}

TEST(Pipeline, SynthWithoutReadoutSkipsReadoutSections) {
  ep::PipelineConfig c;
  c.source = ep::SourceKind::Synth;
  c.source_spec = "two_class_separated:n=60";
  c.seed = 2;
  const auto r = ep::run_pipeline(c);
  EXPECT_FALSE(r.doc["sections"].contains("readout"));
  EXPECT_FALSE(r.doc["sections"].contains("interventions"));
  EXPECT_TRUE(r.doc["sections"].contains("boundary"));
  c.metrics = std::vector<std::string>{"interventions"};
  EXPECT_THROW(ep::run_pipeline(c), ep::ValidationError);
}

TEST(Pipeline, ConfigErrors) {
  auto c = toy_config(1);
  c.eps = 0.0;
  EXPECT_THROW(ep::run_pipeline(c), ep::ConfigError);
  c = toy_config(1);
  c.source_spec = "layers=2,per_bucket=5";
  EXPECT_THROW(ep::run_pipeline(c), ep::ConfigError);
  c = toy_config(1);
  c.metrics = std::vector<std::string>{"nonsense"};
  EXPECT_THROW(ep::run_pipeline(c), ep::ConfigError);
  c = toy_config(1);
  c.injection_layer = 9;
  EXPECT_THROW(ep::run_pipeline(c), ep::ConfigError);
}

TEST(Cli, SynthValidateAnalyze) {
  const auto dir = scratch("flow");
  const auto dump = (dir / "two.adf").string();
  ASSERT_EQ(cli("synth --synth two_class_separated:n=40 --seed 3 --out " + dump).code, 0);
  const auto v = cli("validate " + dump);
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("samples: 80 (factual 40, hallucination 20, impossible 20)"), std::string::npos) << v.out;
  EXPECT_NE(v.out.find("warnings: 0"), std::string::npos);
  const auto out1 = (dir / "r1").string(), out2 = (dir / "r2").string();
  ASSERT_EQ(cli("analyze --input " + dump + " --seed 5 --out " + out1).code, 0);
  ASSERT_EQ(cli("analyze --input " + dump + " --seed 5 --jobs 2 --out " + out2).code, 0);
  EXPECT_EQ(slurp(fs::path(out1) / "report.json"), slurp(fs::path(out2) / "report.json"));
  ASSERT_EQ(cli("analyze --input " + dump + " --seed 5 --format csv --metrics lid --out " + out1).code, 0);
  const auto csv = slurp(fs::path(out1) / "lid.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,bucket,mean_lid,median_lid,k,isotropy,spectral_entropy,n_eff,pca90");
}

TEST(Cli, ValidateWarnsOnEmptyBucket) {
  const auto dir = scratch("warn");
  const auto dump = (dir / "line.adf").string();
  ASSERT_EQ(cli("synth --synth line:n=50 --seed 1 --out " + dump).code, 0);
  const auto v = cli("validate " + dump);
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.err.find("warning: bucket 'hallucination' has no samples"), std::string::npos) << v.err;
  EXPECT_NE(v.out.find("warnings: 2"), std::string::npos);
}

TEST(Cli, ToyExportRoundTrip) {
  const auto dir = scratch("toy");
  const auto dump = (dir / "toy.adf").string();
  ASSERT_EQ(cli(std::string("toy export --toy ") + kSmallToy + " --seed 4 --out " + dump).code, 0);
  const auto v = cli("validate " + dump);
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("grad_unc"), std::string::npos);
  EXPECT_NE(v.out.find("warnings: 0"), std::string::npos);
  EXPECT_EQ(cli("intervene --input " + dump + " --seed 4 --out " + (dir / "iv").string()).code, 0);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("codes");
  EXPECT_EQ(cli("analyze --synth line --seed 1 --uncertain sometimes --out " + dir.string()).code, 2);
  EXPECT_EQ(cli("analyze --seed 1 --out " + dir.string()).code, 2);
  EXPECT_EQ(cli("analyze --synth line --out " + dir.string()).code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  std::ofstream(dir / "junk.adf") << "definitely not an ADF file";
  const auto bad = cli("validate " + (dir / "junk.adf").string());
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.err.find("input error"), std::string::npos);
  const auto cap = cli("analyze --synth two_class_separated:n=100 --seed 1 --metrics topology --out " + dir.string(), "EP_MEM_BUDGET_BYTES=1024");
  EXPECT_EQ(cap.code, 4) << cap.err;
  EXPECT_EQ(cli("--help").code, 0);
}

}  // namespace
