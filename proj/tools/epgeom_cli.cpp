// epgeom: command-line front end.
//
// Exit codes: 0 ok, 2 configuration error, 3 input validation error,
// 4 capacity error.

#include "epgeom/epgeom.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct SourceFlags {
  std::string input, synth, toy;
};

void add_source(CLI::App* cmd, SourceFlags& f) {
  auto* in = cmd->add_option("--input", f.input, "ADF dump to analyze");
  auto* sy = cmd->add_option("--synth", f.synth, "synthetic source, e.g. anisotropy_ratio:ratio=2.5");
  auto* ty = cmd->add_option("--toy", f.toy, "toy model source, e.g. layers=4,dim=32,vocab=64,heads=2,ff=64");
  in->excludes(sy)->excludes(ty);
  sy->excludes(ty);
}

void set_source(ep::PipelineConfig& cfg, const SourceFlags& f) {
  const int n = !f.input.empty() + !f.synth.empty() + !f.toy.empty();
  if (n != 1) throw ep::ConfigError("exactly one of --input, --synth, --toy is required");
  if (!f.input.empty()) cfg.source = ep::SourceKind::Dump, cfg.source_spec = f.input;
  if (!f.synth.empty()) cfg.source = ep::SourceKind::Synth, cfg.source_spec = f.synth;
  if (!f.toy.empty()) cfg.source = ep::SourceKind::Toy, cfg.source_spec = f.toy;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) out.push_back(static_cast<T>(std::stod(item, &used)));
      else out.push_back(static_cast<T>(std::stoull(item, &used)));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ep::ConfigError(std::string("bad value '") + item + "' in " + what);
    }
  }
  return out;
}

struct AnalysisFlags {
  SourceFlags src;
  std::string uncertain = "both";
  double eps = ep::kDefaultEps;
  std::string alphas, lambdas, m_grid, metrics, tokens;
  double quantile = 0.25;
  double max_scale = 0.0;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string format = "json";
  std::size_t jobs = 1;
  std::size_t lid_k = 0;
  long long injection = -1;
  double gamma = -1.0;
  bool normalize_steer = false;
};

void add_analysis(CLI::App* cmd, AnalysisFlags& f) {
  add_source(cmd, f.src);
  cmd->add_option("--uncertain", f.uncertain, "uncertain group: impossible, hallucination or both")->default_str("both");
  cmd->add_option("--eps", f.eps, "finite-difference step")->default_str("0.001");
  cmd->add_option("--alphas", f.alphas, "comma-separated steering strengths")->default_str("0,0.5,1,2,4");
  cmd->add_option("--lambdas", f.lambdas, "comma-separated repair strengths")->default_str("0.5,1");
  cmd->add_option("--quantile", f.quantile, "boundary band quantile")->default_str("0.25");
  cmd->add_option("--max-scale", f.max_scale, "Rips filtration cap (absolute; default: median band distance)");
  cmd->add_option("--m-grid", f.m_grid, "comma-separated readout cutoffs");
  cmd->add_option("--metrics", f.metrics, "comma-separated metrics or sections (default: all the input supports)");
  cmd->add_option("--tokens", f.tokens, "comma-separated uncertainty words");
  cmd->add_option("--seed", f.seed, "random seed")->required();
  cmd->add_option("--out", f.out, "output directory")->default_str("out");
  cmd->add_option("--format", f.format, "json or csv")->default_str("json");
  cmd->add_option("--jobs", f.jobs, "worker threads")->default_str("1");
  cmd->add_option("--lid-k", f.lid_k, "LID neighbour count (0: min(20, N-2))");
  cmd->add_option("--injection-layer", f.injection, "intervention layer (default: ceil(L/2) - 1)");
  cmd->add_option("--gamma", f.gamma, "bypass gain (default: margin-calibrated)");
  cmd->add_flag("--normalize-steer", f.normalize_steer, "use the unit boundary instead of the raw centroid difference");
}

ep::PipelineConfig to_config(const AnalysisFlags& f, std::vector<std::string> sections) {
  ep::PipelineConfig cfg;
  set_source(cfg, f.src);
  cfg.seed = f.seed;
  cfg.uncertain = ep::parse_uncertain(f.uncertain);
  cfg.eps = f.eps;
  if (!f.alphas.empty()) cfg.alphas = parse_list<double>(f.alphas, "--alphas");
  if (!f.lambdas.empty()) cfg.lambdas = parse_list<double>(f.lambdas, "--lambdas");
  cfg.quantile = f.quantile;
  if (f.max_scale != 0.0) cfg.max_scale = f.max_scale;
  if (!f.m_grid.empty()) cfg.m_grid = parse_list<std::size_t>(f.m_grid, "--m-grid");
  if (!f.metrics.empty()) {
    std::vector<std::string> m;
    std::stringstream ss(f.metrics);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) m.push_back(item);
    cfg.metrics = m;
  }
  if (!f.tokens.empty()) {
    cfg.token_set.clear();
    std::stringstream ss(f.tokens);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.token_set.push_back(item);
  }
  cfg.jobs = f.jobs;
  cfg.lid_k = f.lid_k;
  if (f.injection >= 0) cfg.injection_layer = static_cast<std::size_t>(f.injection);
  if (f.gamma >= 0.0) cfg.gamma = f.gamma;
  cfg.normalize_steer = f.normalize_steer;
  cfg.mem_budget = ep::mem_budget_from_env();
  cfg.sections = std::move(sections);
  return cfg;
}

int run_analysis(const AnalysisFlags& f, std::vector<std::string> sections) {
  const auto cfg = to_config(f, std::move(sections));
  const auto format = ep::parse_format(f.format);
  const auto report = ep::run_pipeline(cfg);
  for (const auto& p : ep::emit(report, format, f.out)) std::cout << p.string() << "\n";
  return 0;
}

int run_validate(const std::string& path) {
  const auto s = ep::load_dump(path);
  std::size_t warnings = 0;
  for (std::size_t l = 0; l < s.attn.size(); ++l)
    for (std::size_t i = 0; i < s.attn[l].n; ++i)
      for (std::size_t h = 0; h < s.attn[l].heads; ++h) {
        double sum = 0.0;
        for (float a : s.attn[l].row(i, h)) sum += a;
        if (std::abs(sum - 1.0) > 1e-4) throw ep::ValidationError("attn." + std::to_string(l) + ": row " + std::to_string(i) + " head " + std::to_string(h) + " sums to " + std::to_string(sum));
        if (std::abs(sum - 1.0) > 1e-5) {
          std::cerr << "warning: attn." << l << " row " << i << " head " << h << " sums to " << sum << "\n";
          ++warnings;
        }
      }
  for (auto b : ep::kAllBuckets)
    if (s.count(b) == 0) {
      std::cerr << "warning: bucket '" << ep::bucket_name(b) << "' has no samples\n";
      ++warnings;
    }
  std::cout << "ok: " << path << "\n"
            << "  model_id: " << s.model_id << "\n"
            << "  samples: " << s.n_samples << " (factual " << s.count(ep::BucketLabel::Factual) << ", hallucination "
            << s.count(ep::BucketLabel::Hallucination) << ", impossible " << s.count(ep::BucketLabel::Impossible) << ")\n"
            << "  layers: " << s.n_layers << ", hidden_dim: " << s.hidden_dim << "\n"
            << "  optional tensors:" << (s.unembed ? " unembed" : "") << (s.attn.empty() ? "" : " attn") << (s.grad_unc.empty() ? "" : " grad_unc")
            << (s.embed0 ? " embed0" : "") << (s.attn_out.empty() ? "" : " attn_out") << (s.mlp_out.empty() ? "" : " mlp_out") << "\n"
            << "  warnings: " << warnings << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometric analysis of hidden-state dumps, toy transformers and synthetic manifolds"};
  app.require_subcommand(1);

  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic ADF dump");
  synth->add_option("--synth", synth_spec, "kind:key=val,... (kinds: gaussian_clusters, manifold_plane, circle, line, two_class_separated, anisotropy_ratio)")->required();
  synth->add_option("--seed", synth_seed, "random seed")->required();
  synth->add_option("--out", synth_out, "output .adf path")->required();

  std::string toy_spec = "", toy_out;
  std::uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("toy", "toy transformer utilities");
  toy->require_subcommand(1);
  auto* toy_export = toy->add_subcommand("export", "run the toy model on bucketed prompts and write an ADF dump");
  toy_export->add_option("--toy", toy_spec, "layers=4,dim=32,vocab=64,heads=2,ff=64,per_bucket=100,min_len=6,max_len=10");
  toy_export->add_option("--seed", toy_seed, "random seed")->required();
  toy_export->add_option("--out", toy_out, "output .adf path")->required();

  AnalysisFlags analyze_f, probe_f, intervene_f, report_f;
  auto* analyze = app.add_subcommand("analyze", "boundary, dimensionality, spectrum, topology, readout and component metrics");
  add_analysis(analyze, analyze_f);
  auto* probe = app.add_subcommand("probe", "perturbation probes and steering sweeps");
  add_analysis(probe, probe_f);
  auto* intervene = app.add_subcommand("intervene", "steering, bypass and repair on the toy model");
  add_analysis(intervene, intervene_f);
  auto* report = app.add_subcommand("report", "every section the input supports");
  add_analysis(report, report_f);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "check an ADF dump without computing metrics");
  validate->add_option("path", validate_path, "ADF dump")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      ep::write_dump(ep::synth_dataset(ep::parse_synth_spec(synth_spec, synth_seed)), synth_out);
      std::cout << synth_out << "\n";
    } else if (*toy_export) {
      const auto spec = ep::parse_toy_spec(toy_spec, toy_seed);
      const auto model = ep::init_toy(spec.model);
      const auto prompts = ep::toy_prompts(spec.model.vocab, spec.per_bucket, ep::derive_seed(toy_seed, {0x960}), spec.min_len, spec.max_len);
      ep::export_dump(model, prompts, toy_out);
      std::cout << toy_out << "\n";
    } else if (*analyze) {
      return run_analysis(analyze_f, {"boundary", "lid", "spectrum", "topology", "readout", "components", "selectivity"});
    } else if (*probe) {
      return run_analysis(probe_f, {"probes"});
    } else if (*intervene) {
      return run_analysis(intervene_f, {"interventions"});
    } else if (*report) {
      return run_analysis(report_f, {});
    } else if (*validate) {
      return run_validate(validate_path);
    }
  } catch (const ep::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ep::CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << "\n";
    return 4;
  } catch (const ep::ValidationError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
