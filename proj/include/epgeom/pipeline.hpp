#pragma once

// End-to-end orchestration: resolve the input source, decide which metrics
// run, execute per-layer tasks on a bounded worker pool, and assemble the
// canonical report. Every task computes the same thing regardless of the
// worker count; assembly is in layer order.

#include "epgeom/components.hpp"
#include "epgeom/geometry.hpp"
#include "epgeom/interventions.hpp"
#include "epgeom/probes.hpp"
#include "epgeom/readout.hpp"
#include "epgeom/report.hpp"
#include "epgeom/synth.hpp"
#include "epgeom/topology.hpp"

#include <atomic>
#include <exception>
#include <set>
#include <sstream>
#include <thread>

namespace ep {

// ---------------------------------------------------------------------------
// Metric registry
// ---------------------------------------------------------------------------

enum class Need { BothClasses, Unembed, LiveModel, GradUnc, Attn, ComponentOutputs };

struct MetricInfo {
  const char* name;
  std::vector<Need> needs;
};

inline const std::vector<MetricInfo>& metric_registry() {
  static const std::vector<MetricInfo> r = {
      {"boundary", {Need::BothClasses}},
      {"lid", {}},
      {"spectrum", {}},
      {"topology", {Need::BothClasses}},
      {"readout", {Need::BothClasses, Need::Unembed}},
      {"probes.core", {Need::BothClasses, Need::Unembed}},
      {"probes.amplification", {Need::BothClasses, Need::LiveModel}},
      {"probes.blockage", {Need::BothClasses, Need::GradUnc}},
      {"probes.steering", {Need::BothClasses, Need::Unembed}},
      {"components.core", {}},
      {"components.attention", {Need::Attn}},
      {"components.alignment", {Need::BothClasses, Need::ComponentOutputs}},
      {"components.lens", {Need::Unembed}},
      {"selectivity", {Need::BothClasses}},
      {"interventions", {Need::BothClasses, Need::LiveModel}},
  };
  return r;
}

/// Expands section names ("probes") to all their metrics, and sub-metrics
/// ("probes.blockage") to themselves plus the section core.
inline std::set<std::string> expand_metrics(const std::vector<std::string>& names) {
  std::set<std::string> out;
  for (const auto& n : names) {
    bool hit = false;
    for (const auto& m : metric_registry()) {
      const std::string mn = m.name;
      if (mn == n || mn.rfind(n + ".", 0) == 0) {
        out.insert(mn);
        hit = true;
      }
    }
    if (!hit) throw ConfigError("unknown metric '" + n + "'");
    if (const auto dot = n.find('.'); dot != std::string::npos) out.insert(n.substr(0, dot) + ".core");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class SourceKind { Dump, Synth, Toy };

struct ToySourceSpec {
  ToyConfig model;
  std::size_t per_bucket = 100;
  std::size_t min_len = 6;
  std::size_t max_len = 10;
};

/// "layers=4,dim=32,vocab=64,heads=2,ff=64,per_bucket=100,min_len=6,max_len=10,seed=N";
/// the model seed defaults to `seed`.
inline ToySourceSpec parse_toy_spec(const std::string& text, std::uint64_t seed) {
  ToySourceSpec t;
  t.model.seed = seed;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("toy spec item '" + item + "' is not key=value");
    const auto key = item.substr(0, eq);
    const auto val = item.substr(eq + 1);
    std::uint64_t v = 0;
    try {
      std::size_t used = 0;
      v = std::stoull(val, &used);
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::exception&) {
      throw ConfigError("toy spec value for '" + key + "' must be a non-negative integer");
    }
    if (key == "layers") t.model.n_layers = v;
    else if (key == "dim") t.model.hidden_dim = v;
    else if (key == "vocab") t.model.vocab = v;
    else if (key == "heads") t.model.heads = v;
    else if (key == "ff") t.model.ff_dim = v;
    else if (key == "seed") t.model.seed = v;
    else if (key == "per_bucket") t.per_bucket = v;
    else if (key == "min_len") t.min_len = v;
    else if (key == "max_len") t.max_len = v;
    else throw ConfigError("unknown toy spec key '" + key + "'");
  }
  t.model.check();
  if (t.per_bucket < 10) throw ConfigError("toy spec: per_bucket must be >= 10");
  return t;
}

struct PipelineConfig {
  SourceKind source = SourceKind::Synth;
  std::string source_spec;  // path, synth spec or toy spec
  std::uint64_t seed = 0;
  UncertainGroup uncertain = UncertainGroup::Both;
  std::optional<std::vector<std::string>> metrics;  // absent: every metric the input supports
  std::vector<std::string> sections;  // restricts the automatic set; empty = all
  double eps = kDefaultEps;
  std::vector<double> alphas = {0.0, 0.5, 1.0, 2.0, 4.0};
  std::vector<double> lambdas = {0.5, 1.0};
  double quantile = 0.25;
  std::size_t band_max_per_class = 100;
  std::optional<double> max_scale;
  std::optional<std::vector<std::size_t>> m_grid;
  std::size_t lid_k = 0;
  std::vector<std::string> token_set = {"unsure", "unknown", "maybe", "approximately", "perhaps", "unclear", "cannot", "possibly"};
  std::optional<std::size_t> injection_layer;  // dump index; default ceil(L/2) - 1
  bool normalize_steer = false;
  std::size_t probe_samples = 256;
  std::size_t behavior_samples = 64;
  std::size_t max_new_tokens = kDefaultMaxNewTokens;
  std::optional<double> gamma;
  std::size_t top_k = 50;
  std::size_t jobs = 1;
  std::uint64_t mem_budget = kDefaultMemBudget;

  void check() const {
    if (source_spec.empty()) throw ConfigError("exactly one input source is required");
    if (!(eps > 0.0) || !std::isfinite(eps)) throw ConfigError("eps must be positive and finite");
    if (!(quantile > 0.0 && quantile <= 1.0)) throw ConfigError("quantile must be in (0, 1]");
    if (max_scale && !(*max_scale > 0.0)) throw ConfigError("max-scale must be positive");
    for (double a : alphas)
      if (!std::isfinite(a)) throw ConfigError("alphas must be finite");
    for (double l : lambdas)
      if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("repair lambdas must lie in [0, 1]");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (band_max_per_class < 1 || probe_samples < 1 || behavior_samples < 1) throw ConfigError("sample caps must be >= 1");
    if (m_grid)
      for (std::size_t i = 0; i < m_grid->size(); ++i)
        if ((*m_grid)[i] < 1 || (i > 0 && (*m_grid)[i] <= (*m_grid)[i - 1])) throw ConfigError("m-grid must be strictly increasing and >= 1");
  }
};

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

struct LoadedSource {
  ActivationSet set;
  std::optional<ToyTransformer> model;
  std::vector<ToyPrompt> prompts;
  std::vector<ForwardTrace> traces;  // one per sample when a live model is present
};

inline void attach_traces(LoadedSource& src) {
  if (!src.model) return;
  for (const auto& p : src.prompts) src.traces.push_back(forward(*src.model, p.tokens));
}

inline LoadedSource load_source(const PipelineConfig& cfg) {
  LoadedSource src;
  switch (cfg.source) {
    case SourceKind::Dump: {
      src.set = load_dump(cfg.source_spec);
      if (src.set.metadata.value("source", "") == "toy" && src.set.metadata.contains("toy_config")) {
        auto model = init_toy(toy_config_from_json(src.set.metadata["toy_config"]));
        if (!src.set.unembed || !detail::same_bits(*src.set.unembed, MatrixF(model.unembed.cast<float>())))
          throw ValidationError("dump claims a toy source but its unembed does not match the toy config");
        src.prompts = prompts_from_metadata(src.set);
        src.model = std::move(model);
      }
      break;
    }
    case SourceKind::Synth:
      src.set = synth_dataset(parse_synth_spec(cfg.source_spec, cfg.seed));
      break;
    case SourceKind::Toy: {
      const auto spec = parse_toy_spec(cfg.source_spec, cfg.seed);
      src.model = init_toy(spec.model);
      src.prompts = toy_prompts(spec.model.vocab, spec.per_bucket, derive_seed(cfg.seed, {0x960}), spec.min_len, spec.max_len);
      src.set = export_activations(*src.model, src.prompts);
      break;
    }
  }
  attach_traces(src);
  return src;
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Runs f(0..n-1) on up to `jobs` threads. If tasks throw, the exception of
/// the lowest-indexed failing task is rethrown after all workers finish.
template <class F>
void parallel_tasks(std::size_t n, std::size_t jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  const std::size_t extra = std::min(jobs, std::max<std::size_t>(n, 1)) - 1;
  for (std::size_t t = 0; t < extra; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

namespace detail {

inline const char* source_name(SourceKind k) {
  switch (k) {
    case SourceKind::Dump: return "dump";
    case SourceKind::Synth: return "synth";
    case SourceKind::Toy: return "toy";
  }
  return "?";
}

inline std::string need_message(Need n, const ActivationSet& s, UncertainGroup g) {
  switch (n) {
    case Need::BothClasses:
      return std::string("both the factual bucket and the '") + uncertain_name(g) + "' group to be non-empty";
    case Need::Unembed: return "tensor 'unembed' (absent from input)";
    case Need::LiveModel: return "a live toy model (input is not a toy source)";
    case Need::GradUnc: return "tensor 'grad_unc/layer" + std::to_string(s.grad_unc.size()) + "' (absent from input)";
    case Need::Attn: return "tensor 'attn/layer" + std::to_string(s.attn.size()) + "' (absent from input)";
    case Need::ComponentOutputs:
      return s.attn_out.empty() ? "tensor 'attn_out/layer0' (absent from input)" : "tensor 'mlp_out/layer0' (absent from input)";
  }
  return "?";
}

inline bool need_met(Need n, const LoadedSource& src, UncertainGroup g) {
  const auto& s = src.set;
  switch (n) {
    case Need::BothClasses: {
      const bool f = s.count(BucketLabel::Factual) > 0;
      const bool u = std::any_of(s.labels.begin(), s.labels.end(), [&](BucketLabel b) { return is_uncertain(b, g); });
      return f && u;
    }
    case Need::Unembed: return s.unembed.has_value();
    case Need::LiveModel: return src.model.has_value();
    case Need::GradUnc: return !s.grad_unc.empty();
    case Need::Attn: return !s.attn.empty();
    case Need::ComponentOutputs: return !s.attn_out.empty() && !s.mlp_out.empty();
  }
  return false;
}

inline std::vector<std::size_t> strided(std::span<const std::size_t> idx, std::size_t cap) {
  if (idx.size() <= cap) return {idx.begin(), idx.end()};
  std::vector<std::size_t> out;
  for (std::size_t q = 0; q < cap; ++q) out.push_back(idx[q * idx.size() / cap]);
  return out;
}

inline Vector row_of(const MatrixF& m, std::size_t i) { return m.row(static_cast<Eigen::Index>(i)).cast<double>().transpose(); }

inline std::optional<double> mean_opt(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return mean_of(v);
}

}  // namespace detail

/// The metrics that will run: the explicit list (every requirement must hold)
/// or every metric whose requirements hold, restricted to `cfg.sections`.
inline std::set<std::string> resolve_metrics(const PipelineConfig& cfg, const LoadedSource& src) {
  std::set<std::string> chosen;
  if (cfg.metrics) {
    chosen = expand_metrics(*cfg.metrics);
    for (const auto& m : metric_registry()) {
      if (!chosen.contains(m.name)) continue;
      for (auto n : m.needs)
        if (!detail::need_met(n, src, cfg.uncertain))
          throw ValidationError(std::string("metric '") + m.name + "' requires " + detail::need_message(n, src.set, cfg.uncertain));
    }
    return chosen;
  }
  for (const auto& m : metric_registry()) {
    const std::string name = m.name;
    const std::string section = name.substr(0, name.find('.'));
    if (!cfg.sections.empty() && std::find(cfg.sections.begin(), cfg.sections.end(), section) == cfg.sections.end()) continue;
    if (std::all_of(m.needs.begin(), m.needs.end(), [&](Need n) { return detail::need_met(n, src, cfg.uncertain); })) chosen.insert(name);
  }
  return chosen;
}

inline std::size_t default_injection_layer(std::size_t n_layers) { return (n_layers + 1) / 2 - 1; }

inline nlohmann::json config_echo(const PipelineConfig& cfg, const std::set<std::string>& metrics, const ActivationSet& s) {
  nlohmann::json j = {
      {"source", {{"kind", detail::source_name(cfg.source)}, {"spec", cfg.source_spec}, {"model_id", s.model_id}}},
      {"seed", cfg.seed},
      {"uncertain", uncertain_name(cfg.uncertain)},
      {"metrics", std::vector<std::string>(metrics.begin(), metrics.end())},
      {"eps", cfg.eps},
      {"alphas", cfg.alphas},
      {"lambdas", cfg.lambdas},
      {"quantile", cfg.quantile},
      {"band_max_per_class", cfg.band_max_per_class},
      {"max_scale", cfg.max_scale ? nlohmann::json(*cfg.max_scale) : nlohmann::json(nullptr)},
      {"m_grid", cfg.m_grid ? nlohmann::json(*cfg.m_grid) : nlohmann::json(nullptr)},
      {"lid_k", cfg.lid_k},
      {"token_set", cfg.token_set},
      {"injection_layer", cfg.injection_layer ? nlohmann::json(*cfg.injection_layer) : nlohmann::json(nullptr)},
      {"normalize_steer", cfg.normalize_steer},
      {"probe_samples", cfg.probe_samples},
      {"behavior_samples", cfg.behavior_samples},
      {"max_new_tokens", cfg.max_new_tokens},
      {"gamma", cfg.gamma ? nlohmann::json(*cfg.gamma) : nlohmann::json(nullptr)},
      {"top_k", cfg.top_k},
      {"n_layers", s.n_layers},
      {"n_samples", s.n_samples},
      {"hidden_dim", s.hidden_dim},
  };
  return j;
}

namespace detail {

using Rows = std::map<std::string, std::vector<nlohmann::json>>;  // "section.table" -> rows

/// Token ids for the configured uncertainty words, from the dump metadata.
inline std::vector<std::size_t> resolve_token_set(const PipelineConfig& cfg, const ActivationSet& s) {
  if (!s.metadata.contains("uncertainty_tokens")) throw ValidationError("input metadata has no uncertainty token map");
  std::vector<std::size_t> ids;
  for (const auto& w : cfg.token_set) {
    const auto& map = s.metadata["uncertainty_tokens"];
    if (!map.contains(w)) throw ConfigError("uncertainty token '" + w + "' is not in the input's token map");
    ids.push_back(map[w].get<std::size_t>());
  }
  if (ids.empty()) throw ConfigError("empty uncertainty token set");
  return ids;
}

struct Shared {
  const PipelineConfig* cfg = nullptr;
  const LoadedSource* src = nullptr;
  std::set<std::string> metrics;
  std::vector<std::size_t> factual, uncertain;  // sample indices
  std::vector<bool> is_unc;  // per sample; only meaningful inside factual + uncertain
  std::vector<BoundaryLayer> boundary;  // per layer, when both classes exist
  std::optional<Boundary> embed_boundary;
  std::optional<ReadoutSpectrum> readout;
  std::vector<std::size_t> m_grid;
  Matrix unembed;
  std::vector<std::size_t> anchor;  // final-layer argmax per sample
  std::vector<std::size_t> unc_tokens;  // live model only
  std::size_t injection = 0;

  bool on(const char* m) const { return metrics.contains(m); }
  const ActivationSet& set() const { return src->set; }
};

inline void lid_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& s = sh.set();
  std::optional<double> mean_f, mean_u;
  const auto emit = [&](const std::string& bucket, std::span<const std::size_t> idx, std::uint64_t tag) {
    if (idx.size() < 4) return;
    const Matrix x = gather_rows(s.hidden[l], idx);
    const auto k = sh.cfg->lid_k;
    if (k != 0 && idx.size() < k + 2) return;
    const auto lid = lid_mle(x, k, kDefaultLidNoise, derive_seed(sh.cfg->seed, {0x11d, l, tag}));
    nlohmann::json row = {{"layer", l}, {"bucket", bucket}, {"mean_lid", jnum(lid.mean)}, {"median_lid", jnum(lid.median)}, {"k", lid.k},
                          {"isotropy", nullptr}, {"spectral_entropy", nullptr}, {"n_eff", nullptr}, {"pca90", nullptr}};
    std::optional<SpectrumSummary> spec;
    try {
      spec = spectral_summary(x);
    } catch (const DegenerateError&) {
    }
    if (spec && sh.on("lid")) {
      row["isotropy"] = jnum(spec->isotropy);
      row["spectral_entropy"] = jnum(spec->spectral_entropy);
      row["n_eff"] = jnum(spec->n_eff);
      row["pca90"] = spec->pca90;
    }
    if (spec && sh.on("spectrum")) {
      const double total = std::accumulate(spec->eigenvalues.begin(), spec->eigenvalues.end(), 0.0);
      double acc = 0.0;
      for (std::size_t i = 0; i < spec->eigenvalues.size() && i < 64; ++i) {
        acc += spec->eigenvalues[i];
        out["spectrum.spectrum"].push_back(
            {{"layer", l}, {"bucket", bucket}, {"index", i}, {"eigenvalue", jnum(spec->eigenvalues[i])}, {"cumulative_fraction", jnum(acc / total)}});
      }
    }
    if (sh.on("lid")) out["lid.lid"].push_back(row);
    if (bucket == "factual") mean_f = lid.mean;
    if (bucket == "uncertain") mean_u = lid.mean;
  };
  for (auto b : kAllBuckets) {
    const auto idx = indices_where(s, [&](BucketLabel x) { return x == b; });
    emit(bucket_name(b), idx, static_cast<std::uint64_t>(b));
  }
  const auto unc = indices_where(s, [&](BucketLabel x) { return is_uncertain(x, sh.cfg->uncertain); });
  emit("uncertain", unc, 3);
  if (sh.on("lid") && mean_f && mean_u && *mean_f > 0.0)
    out["lid.ratio"].push_back({{"layer", l}, {"group", uncertain_name(sh.cfg->uncertain)}, {"lid_ratio", jnum(*mean_u / *mean_f)}});
}

inline void boundary_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& b = sh.boundary[l];
  nlohmann::json row = {{"layer", l}, {"norm", jnum(b.norm)}, {"stability", jnum(b.stability)}};
  for (auto bucket : kAllBuckets) {
    const std::string n = bucket_name(bucket);
    row["projection_" + n] = b.projection.contains(bucket) ? jnum(b.projection.at(bucket)) : nlohmann::json(nullptr);
    row["drift_" + n] = b.drift.contains(bucket) ? jnum(b.drift.at(bucket)) : nlohmann::json(nullptr);
  }
  out["boundary.boundary"].push_back(row);
}

inline void topology_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& s = sh.set();
  std::vector<std::size_t> idx = sh.factual;
  idx.insert(idx.end(), sh.uncertain.begin(), sh.uncertain.end());
  std::vector<bool> flags;
  for (auto i : idx) flags.push_back(sh.is_unc[i]);
  const Matrix x = gather_rows(s.hidden[l], idx);
  std::unique_ptr<bool[]> fl(new bool[flags.size()]);
  for (std::size_t i = 0; i < flags.size(); ++i) fl[i] = flags[i];
  const auto band = boundary_band_per_class(x, std::span<const bool>(fl.get(), flags.size()), sh.boundary[l].direction, sh.cfg->quantile,
                                            sh.cfg->band_max_per_class);
  if (band.points.rows() < 2) return;
  const double med = median_pairwise_distance(band.points);
  if (!(med > 0.0)) return;
  RipsOptions opt;
  opt.max_scale = sh.cfg->max_scale.value_or(med);
  opt.mem_budget = sh.cfg->mem_budget;
  const auto diag = rips_persistence(band.points, opt);
  const double scale = std::min(0.5 * med, opt.max_scale);
  const auto betti = betti_at_scale(diag, scale);
  std::size_t n0 = 0, n1 = 0;
  std::optional<double> maxp;
  const auto pairs = diag.sorted_pairs();
  for (const auto& p : pairs) {
    (p.dim == 0 ? n0 : n1)++;
    if (p.dim == 1) maxp = std::max(maxp.value_or(0.0), std::min(p.death, opt.max_scale) - p.birth);
    out["topology.diagrams"].push_back({{"layer", l}, {"dim", p.dim}, {"birth", jnum(p.birth)}, {"death", jnum(p.death)}});
  }
  out["topology.topology"].push_back({{"layer", l},
                                      {"n_points", band.points.rows()},
                                      {"scale", jnum(scale)},
                                      {"max_scale", jnum(opt.max_scale)},
                                      {"beta0", betti.beta0},
                                      {"beta1", betti.beta1},
                                      {"pairs_dim0", n0},
                                      {"pairs_dim1", n1},
                                      {"max_persistence_dim1", jnum(maxp)}});
}

inline void readout_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& s = sh.set();
  const auto& rs = *sh.readout;
  const Vector& b = sh.boundary[l].direction;
  for (auto m : sh.m_grid) {
    const auto v = visibility(b, rs, m);
    const auto ratio_median = [&](const std::vector<std::size_t>& idx) -> nlohmann::json {
      std::vector<double> r;
      for (auto i : detail::strided(idx, sh.cfg->probe_samples)) {
        const Vector h = row_of(s.hidden[l], i);
        if (h.norm() > 0.0) r.push_back(lowsens_ratio(h, rs, m));
      }
      if (r.empty()) return nullptr;
      return jnum(median_of(std::move(r)));
    };
    out["readout.readout"].push_back({{"layer", l},
                                      {"m", m},
                                      {"vis_b", jnum(v.vis)},
                                      {"lowsens_b", jnum(v.low_sens)},
                                      {"lowsens_ratio_factual", ratio_median(sh.factual)},
                                      {"lowsens_ratio_uncertain", ratio_median(sh.uncertain)}});
  }
  for (auto bucket : kAllBuckets) {
    const auto idx = indices_where(s, [&](BucketLabel x) { return x == bucket; });
    if (idx.empty()) continue;
    std::vector<double> ent, conf;
    for (auto i : idx) {
      const auto r = logit_lens(row_of(s.hidden[l], i), sh.unembed, 1);
      ent.push_back(r.entropy);
      conf.push_back(r.confidence);
    }
    out["readout.lens"].push_back({{"layer", l}, {"bucket", bucket_name(bucket)}, {"entropy_mean", jnum(mean_of(ent))}, {"confidence_mean", jnum(mean_of(conf))}});
  }
}

inline void probe_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& s = sh.set();
  const auto& cfg = *sh.cfg;
  const auto* src = sh.src;
  const bool live = src->model.has_value();
  std::vector<std::size_t> all(s.n_samples);
  std::iota(all.begin(), all.end(), 0);
  const auto samples = strided(all, cfg.probe_samples);
  const Vector b = sh.boundary[l].direction;
  const Vector r = random_control_direction(b, derive_seed(cfg.seed, {0x9b, l})).vector;

  const auto logits_fn = [&](std::size_t i) {
    return [&, i](const Vector& x) -> Vector {
      if (live) return forward_from(*src->model, src->traces[i], l + 1, x);
      return sh.unembed * x;
    };
  };

  std::vector<double> fb, fr, hb, hr, ab, ar, bl;
  for (auto i : samples) {
    const Vector h = live ? src->traces[i].final_state(l + 1) : row_of(s.hidden[l], i);
    auto fn = logits_fn(i);
    fb.push_back(fisher_sensitivity(fn, h, b, cfg.eps));
    fr.push_back(fisher_sensitivity(fn, h, r, cfg.eps));
    const auto nll = make_frozen_nll(fn, h);
    hb.push_back(hessian_curvature(nll, h, b, cfg.eps));
    hr.push_back(hessian_curvature(nll, h, r, cfg.eps));
  }
  if (sh.on("probes.amplification")) {
    const Vector b_in = l == 0 ? sh.embed_boundary->direction : sh.boundary[l - 1].direction;
    const Vector r_in = random_control_direction(b_in, derive_seed(cfg.seed, {0x9c, l})).vector;
    for (auto i : samples) {
      const auto& t = src->traces[i];
      const auto layer_fn = [&](const Vector& x) { return block_apply(*src->model, t, l, x); };
      const Vector h_in = t.final_state(l);
      ab.push_back(jacobian_amplification(layer_fn, h_in, b_in, cfg.eps));
      ar.push_back(jacobian_amplification(layer_fn, h_in, r_in, cfg.eps));
    }
  }
  if (sh.on("probes.blockage")) {
    for (auto i : samples) {
      const Vector g = live ? backward_logit_sum(*src->model, src->traces[i], sh.unc_tokens)[l + 1] : row_of(s.grad_unc[l], i);
      if (g.norm() > 0.0) bl.push_back(gradient_blockage(g, b));
    }
  }
  out["probes.probes"].push_back({{"layer", l},
                                  {"fisher_b", jnum(mean_of(fb))},
                                  {"fisher_r", jnum(mean_of(fr))},
                                  {"hessian_b", jnum(mean_of(hb))},
                                  {"hessian_r", jnum(mean_of(hr))},
                                  {"amp_b", jnum(mean_opt(ab))},
                                  {"amp_r", jnum(mean_opt(ar))},
                                  {"blockage", jnum(mean_opt(bl))}});

  if (sh.on("probes.steering") && l == sh.injection) {
    Vector v = sh.boundary[l].direction * sh.boundary[l].norm;
    if (cfg.normalize_steer) v.normalize();
    const Vector rv = random_control_direction(v, derive_seed(cfg.seed, {0x9d, l})).vector;
    std::vector<Vector> base;
    std::vector<Vector> hs;
    for (auto i : samples) {
      hs.push_back(live ? src->traces[i].final_state(l + 1) : row_of(s.hidden[l], i));
      base.push_back(logits_fn(i)(hs.back()));
    }
    const auto inject = [&](std::size_t q, const Vector& delta) { return logits_fn(samples[q])(Vector(hs[q] + delta)); };
    const auto sb = steering_sweep(base, inject, v, cfg.alphas);
    const auto sr = steering_sweep(base, inject, rv, cfg.alphas);
    for (std::size_t a = 0; a < sb.size(); ++a)
      out["probes.steering"].push_back({{"layer", l},
                                        {"alpha", jnum(sb[a].alpha)},
                                        {"kl_b", jnum(sb[a].kl)},
                                        {"flip_b", jnum(sb[a].flip_rate)},
                                        {"kl_r", jnum(sr[a].kl)},
                                        {"flip_r", jnum(sr[a].flip_rate)}});
  }
}

inline void component_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& s = sh.set();
  const bool attn = sh.on("components.attention");
  const bool align = sh.on("components.alignment");
  const bool lens = sh.on("components.lens");
  std::map<BucketLabel, std::vector<double>> head_sum;
  for (auto bucket : kAllBuckets) {
    const auto idx = indices_where(s, [&](BucketLabel x) { return x == bucket; });
    if (idx.empty()) continue;
    std::vector<double> ent, sink, aa, ma, kurt, gn, sur, pe;
    std::vector<double> per_head(attn ? s.attn[l].heads : 0, 0.0);
    for (auto i : idx) {
      if (attn) {
        const auto& a = s.attn[l];
        for (std::size_t h = 0; h < a.heads; ++h) {
          const auto row = a.row(i, h);
          const std::vector<double> rd(row.begin(), row.end());
          const double e = attention_entropy(rd);
          ent.push_back(e);
          per_head[h] += e;
          sink.push_back(sink_mass(rd));
        }
      }
      if (align) {
        const auto al = residual_alignment(row_of(s.attn_out[l], i), row_of(s.mlp_out[l], i), sh.boundary[l].direction);
        if (al.attn) aa.push_back(*al.attn);
        if (al.mlp) ma.push_back(*al.mlp);
      }
      const Vector h = row_of(s.hidden[l], i);
      const std::vector<double> hv(h.data(), h.data() + h.size());
      if (hv.size() >= 4) {
        try {
          kurt.push_back(kurtosis(hv));
        } catch (const DegenerateError&) {
        }
      }
      if (h.cwiseAbs().sum() > 0.0) gn.push_back(gini(hv));
      if (lens) {
        const auto se = surprisal_and_entropy(softmax(sh.unembed * h), sh.anchor[i]);
        sur.push_back(se.surprisal);
        pe.push_back(se.entropy);
      }
    }
    if (attn) {
      for (auto& v : per_head) v /= static_cast<double>(idx.size());
      head_sum[bucket] = per_head;
    }
    out["components.components"].push_back({{"layer", l},
                                             {"bucket", bucket_name(bucket)},
                                             {"attn_entropy", jnum(mean_opt(ent))},
                                             {"sink", jnum(mean_opt(sink))},
                                             {"attn_align", jnum(mean_opt(aa))},
                                             {"mlp_align", jnum(mean_opt(ma))},
                                             {"kurtosis_mean", jnum(mean_opt(kurt))},
                                             {"gini_mean", jnum(mean_opt(gn))},
                                             {"surprisal_mean", jnum(mean_opt(sur))},
                                             {"entropy_mean", jnum(mean_opt(pe))}});
  }
  if (attn && !sh.factual.empty() && !sh.uncertain.empty()) {
    const auto heads = s.attn[l].heads;
    std::vector<std::optional<double>> hu(heads), hf(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      double su = 0.0, sf = 0.0;
      for (auto i : sh.uncertain) su += attention_entropy(std::vector<double>(s.attn[l].row(i, h).begin(), s.attn[l].row(i, h).end()));
      for (auto i : sh.factual) sf += attention_entropy(std::vector<double>(s.attn[l].row(i, h).begin(), s.attn[l].row(i, h).end()));
      hu[h] = su / static_cast<double>(sh.uncertain.size());
      hf[h] = sf / static_cast<double>(sh.factual.size());
    }
    const auto div = head_entropy_divergence(hu, hf);
    for (std::size_t r = 0; r < div.size(); ++r)
      out["components.head_divergence"].push_back({{"layer", l}, {"rank", r}, {"head", div[r].head}, {"divergence", jnum(div[r].score)}});
  }
}

inline void selectivity_rows(const Shared& sh, std::size_t l, Rows& out) {
  const auto& s = sh.set();
  std::string source = "hidden";
  const MatrixF* acts = &s.hidden[l];
  MatrixF live;
  if (sh.src->model) {
    const auto ff = static_cast<Eigen::Index>(sh.src->model->config.ff_dim);
    live.resize(static_cast<Eigen::Index>(s.n_samples), ff);
    for (std::size_t i = 0; i < s.n_samples; ++i) live.row(static_cast<Eigen::Index>(i)) = sh.src->traces[i].mlp_act[l].transpose().cast<float>();
    acts = &live;
    source = "mlp_neurons";
  } else if (!s.mlp_out.empty()) {
    acts = &s.mlp_out[l];
    source = "mlp_out";
  }
  std::vector<std::size_t> idx = sh.factual;
  idx.insert(idx.end(), sh.uncertain.begin(), sh.uncertain.end());
  MatrixF x(static_cast<Eigen::Index>(idx.size()), acts->cols());
  std::unique_ptr<bool[]> flags(new bool[idx.size()]);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    x.row(static_cast<Eigen::Index>(r)) = acts->row(static_cast<Eigen::Index>(idx[r]));
    flags[r] = sh.is_unc[idx[r]];
  }
  const auto table = neuron_selectivity(x, std::span<const bool>(flags.get(), idx.size()), l);
  const auto top = table.top(sh.cfg->top_k);
  for (std::size_t r = 0; r < top.size(); ++r)
    out["selectivity.selectivity"].push_back({{"layer", l}, {"source", source}, {"rank", r}, {"neuron", top[r].neuron}, {"score", jnum(*top[r].score)}});
}

inline void intervention_rows(const Shared& sh, Rows& out) {
  const auto& s = sh.set();
  const auto& cfg = *sh.cfg;
  const auto& m = *sh.src->model;
  const std::size_t li = sh.injection;
  const std::size_t refusal = toy_refusal_token(m.config.vocab);

  const Matrix xf = gather_rows(s.hidden[li], sh.factual);
  const Matrix xu = gather_rows(s.hidden[li], sh.uncertain);
  ProbeHyper hp;
  hp.seed = cfg.seed;
  const auto probe = train_linear_probe(xf, xu, hp);
  out["interventions.probe"].push_back({{"layer", li}, {"train_acc", jnum(probe.train_acc)}, {"final_loss", jnum(probe.final_loss)}});

  Generations fprompts, uprompts;
  for (auto i : strided(sh.factual, cfg.behavior_samples)) fprompts.push_back(sh.src->prompts[i].tokens);
  for (auto i : strided(sh.uncertain, cfg.behavior_samples)) uprompts.push_back(sh.src->prompts[i].tokens);
  const auto fbase = generate_all(m, fprompts, cfg.max_new_tokens);
  const auto ubase = generate_all(m, uprompts, cfg.max_new_tokens);

  Intervention none;
  const auto ubase_metrics = behavioral_eval(m, uprompts, none, refusal, cfg.max_new_tokens, &ubase);

  double gamma = 0.0;
  if (cfg.gamma) {
    gamma = *cfg.gamma;
  } else {
    std::vector<double> margins;
    for (auto i : sh.factual) margins.push_back(refusal_margin(sh.src->traces[i].logits, refusal));
    gamma = margin_calibrated_gamma(margins);
  }
  Intervention byp;
  byp.kind = InterventionKind::Bypass;
  byp.stream = li + 1;
  byp.probe = &probe;
  byp.gamma = gamma;
  byp.unsure_id = refusal;
  const auto bm = behavioral_eval(m, uprompts, byp, refusal, cfg.max_new_tokens, &ubase);
  out["interventions.bypass"].push_back({{"gamma", jnum(gamma)}, {"baseline_refusal", jnum(ubase_metrics.refusal_rate)}, {"bypass_refusal", jnum(bm.refusal_rate)}});

  Vector v = xu.colwise().mean().transpose() - xf.colwise().mean().transpose();
  if (cfg.normalize_steer) v.normalize();
  for (double a : cfg.alphas) {
    Intervention st;
    st.kind = a == 0.0 ? InterventionKind::None : InterventionKind::Steer;
    st.stream = li + 1;
    st.v_steer = v;
    st.alpha = a;
    const auto sm = behavioral_eval(m, fprompts, st, refusal, cfg.max_new_tokens, &fbase);
    out["interventions.steering"].push_back({{"alpha", jnum(a)}, {"output_change", jnum(sm.output_change)}, {"loop_rate", jnum(sm.loop_rate)}});
  }

  const auto sub = factual_subspace(xf, 0.95);
  for (double lam : cfg.lambdas) {
    Intervention rp;
    rp.kind = lam == 0.0 ? InterventionKind::None : InterventionKind::Repair;
    rp.stream = li + 1;
    rp.subspace = &sub;
    rp.lambda = lam;
    const auto rm = behavioral_eval(m, uprompts, rp, refusal, cfg.max_new_tokens, &ubase);
    out["interventions.repair"].push_back(
        {{"lambda", jnum(lam)}, {"k", sub.k()}, {"baseline_loop", jnum(ubase_metrics.loop_rate)}, {"repaired_loop", jnum(rm.loop_rate)}});
  }
}

}  // namespace detail

inline ReportDocument run_pipeline(const PipelineConfig& cfg, const LoadedSource& src) {
  cfg.check();
  const auto& s = src.set;
  detail::Shared sh;
  sh.cfg = &cfg;
  sh.src = &src;
  sh.metrics = resolve_metrics(cfg, src);
  sh.is_unc.assign(s.n_samples, false);
  for (std::size_t i = 0; i < s.n_samples; ++i) {
    if (s.labels[i] == BucketLabel::Factual) sh.factual.push_back(i);
    else if (is_uncertain(s.labels[i], cfg.uncertain)) sh.uncertain.push_back(i), sh.is_unc[i] = true;
  }
  sh.injection = cfg.injection_layer.value_or(default_injection_layer(s.n_layers));
  if (sh.injection >= s.n_layers) throw ConfigError("injection layer " + std::to_string(sh.injection) + " out of range");

  const bool both = detail::need_met(Need::BothClasses, src, cfg.uncertain);
  if (both) {
    for (std::size_t l = 0; l < s.n_layers; ++l) sh.boundary.push_back(boundary_layer(s, l, cfg.uncertain));
    link_stability(sh.boundary);
    if (sh.on("probes.amplification")) {
      std::vector<std::size_t> f = sh.factual, u = sh.uncertain;
      const auto& m = *src.model;
      Matrix ef(static_cast<Eigen::Index>(f.size()), m.embed.cols()), eu(static_cast<Eigen::Index>(u.size()), m.embed.cols());
      for (std::size_t r = 0; r < f.size(); ++r) ef.row(static_cast<Eigen::Index>(r)) = src.traces[f[r]].final_state(0).transpose();
      for (std::size_t r = 0; r < u.size(); ++r) eu.row(static_cast<Eigen::Index>(r)) = src.traces[u[r]].final_state(0).transpose();
      const auto c = class_centroids(ef, eu);
      sh.embed_boundary = boundary_vector(c.factual, c.uncertain);
    }
  }
  if (s.unembed) {
    sh.unembed = s.unembed->cast<double>();
    if (sh.on("components.lens")) {
      for (std::size_t i = 0; i < s.n_samples; ++i)
        sh.anchor.push_back(static_cast<std::size_t>(argmax(Vector(sh.unembed * detail::row_of(s.hidden[s.n_layers - 1], i)))));
    }
    if (sh.on("readout")) {
      sh.readout = svd_readout(sh.unembed);
      sh.m_grid = cfg.m_grid.value_or(default_m_grid(*sh.readout));
      for (auto m : sh.m_grid)
        if (m > sh.readout->rank()) throw ConfigError("m-grid value " + std::to_string(m) + " exceeds readout rank " + std::to_string(sh.readout->rank()));
    }
  }
  if (sh.on("probes.blockage") && src.model) sh.unc_tokens = detail::resolve_token_set(cfg, s);

  std::vector<detail::Rows> per_layer(s.n_layers);
  parallel_tasks(s.n_layers, cfg.jobs, [&](std::size_t l) {
    auto& out = per_layer[l];
    if (sh.on("lid") || sh.on("spectrum")) detail::lid_rows(sh, l, out);
    if (sh.on("boundary")) detail::boundary_rows(sh, l, out);
    if (sh.on("topology")) detail::topology_rows(sh, l, out);
    if (sh.on("readout")) detail::readout_rows(sh, l, out);
    if (sh.on("probes.core")) detail::probe_rows(sh, l, out);
    if (sh.on("components.core")) detail::component_rows(sh, l, out);
    if (sh.on("selectivity")) detail::selectivity_rows(sh, l, out);
  });
  detail::Rows tail;
  if (sh.on("interventions")) detail::intervention_rows(sh, tail);
  if (sh.on("readout"))
    for (Eigen::Index i = 0; i < sh.readout->sigma.size(); ++i) tail["readout.singular_values"].push_back({{"index", i}, {"sigma", jnum(sh.readout->sigma[i])}});

  std::map<std::string, SectionBuilder> builders;
  const auto section_on = [&](const std::string& sec) {
    return std::any_of(sh.metrics.begin(), sh.metrics.end(), [&](const std::string& m) { return m == sec || m.rfind(sec + ".", 0) == 0; });
  };
  for (const auto& sec : report_schema())
    if (section_on(sec.name)) builders.emplace(sec.name, SectionBuilder(sec.name));
  const auto add_rows = [&](const detail::Rows& rows) {
    for (const auto& [key, list] : rows) {
      const auto dot = key.find('.');
      auto it = builders.find(key.substr(0, dot));
      if (it == builders.end()) continue;
      for (const auto& r : list) it->second.add(key.substr(dot + 1), r);
    }
  };
  for (const auto& rows : per_layer) add_rows(rows);
  add_rows(tail);

  nlohmann::json sections = nlohmann::json::object();
  for (const auto& [name, b] : builders) sections[name] = b.finish();
  return make_report(config_echo(cfg, sh.metrics, s), std::move(sections));
}

inline ReportDocument run_pipeline(const PipelineConfig& cfg) { return run_pipeline(cfg, load_source(cfg)); }

}  // namespace ep
