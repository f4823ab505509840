#pragma once

// Seeded synthetic activation sets with known geometry. These are the ground
// truth for the dimensionality, topology and probe tests.

#include "epgeom/activation_store.hpp"

#include <map>
#include <sstream>
#include <string>

namespace ep {

enum class SynthKind { GaussianClusters, ManifoldPlane, Circle, Line, TwoClassSeparated, AnisotropyRatio };

struct SynthSpec {
  SynthKind kind = SynthKind::ManifoldPlane;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;

  double get(const std::string& key, double fallback) const {
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  }
};

inline const char* synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::GaussianClusters: return "gaussian_clusters";
    case SynthKind::ManifoldPlane: return "manifold_plane";
    case SynthKind::Circle: return "circle";
    case SynthKind::Line: return "line";
    case SynthKind::TwoClassSeparated: return "two_class_separated";
    case SynthKind::AnisotropyRatio: return "anisotropy_ratio";
  }
  return "?";
}

namespace detail {

// Accepted parameter names and defaults per generator.
inline std::map<std::string, double> synth_defaults(SynthKind k) {
  switch (k) {
    case SynthKind::GaussianClusters: return {{"k", 3}, {"n", 100}, {"D", 10}, {"sep", 20}, {"sigma", 1}, {"layers", 1}};
    case SynthKind::ManifoldPlane:
      return {{"intrinsic", 2}, {"n", 1000}, {"D", 10}, {"noise", 1e-4}, {"layers", 1}};
    case SynthKind::Circle: return {{"n", 400}, {"D", 3}, {"r", 1}, {"noise", 1e-4}, {"layers", 1}};
    case SynthKind::Line: return {{"n", 500}, {"D", 10}, {"noise", 1e-4}, {"layers", 1}};
    case SynthKind::TwoClassSeparated: return {{"n", 200}, {"D", 8}, {"sep", 10}, {"sigma", 1}, {"layers", 1}};
    case SynthKind::AnisotropyRatio:
      return {{"ratio", 2.5}, {"m", 2}, {"n", 1000}, {"D", 16}, {"sep", 10}, {"sigma", 1}, {"layers", 1}};
  }
  return {};
}

inline std::size_t as_count(double v, const char* key, double min_value) {
  if (!(v >= min_value) || v != std::floor(v) || v > 1e9)
    throw ConfigError(std::string("synth parameter '") + key + "' must be an integer >= " + std::to_string(static_cast<long long>(min_value)));
  return static_cast<std::size_t>(v);
}

inline BucketLabel alternate_uncertain(std::size_t i) {
  return i % 2 == 0 ? BucketLabel::Hallucination : BucketLabel::Impossible;
}

}  // namespace detail

inline SynthKind parse_synth_kind(std::string_view s) {
  for (auto k : {SynthKind::GaussianClusters, SynthKind::ManifoldPlane, SynthKind::Circle, SynthKind::Line,
                 SynthKind::TwoClassSeparated, SynthKind::AnisotropyRatio})
    if (s == synth_kind_name(k)) return k;
  throw ConfigError("unknown synth kind '" + std::string(s) + "'");
}

/// Parses "kind" or "kind:key=value,key=value".
inline SynthSpec parse_synth_spec(const std::string& text, std::uint64_t seed) {
  SynthSpec spec;
  spec.seed = seed;
  const auto colon = text.find(':');
  spec.kind = parse_synth_kind(text.substr(0, colon));
  const auto defaults = detail::synth_defaults(spec.kind);
  if (colon == std::string::npos) return spec;
  std::stringstream ss(text.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("synth parameter '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq);
    if (!defaults.contains(key)) throw ConfigError("synth kind '" + std::string(synth_kind_name(spec.kind)) + "' has no parameter '" + key + "'");
    try {
      std::size_t used = 0;
      const double v = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing");
      spec.params[key] = v;
    } catch (const std::exception&) {
      throw ConfigError("synth parameter '" + key + "' has non-numeric value");
    }
  }
  return spec;
}

namespace detail {

struct SynthLayer {
  Matrix x;
  std::vector<BucketLabel> labels;
};

inline SynthLayer synth_layer(const SynthSpec& spec, Rng& rng) {
  const auto p = [&](const char* k) { return spec.get(k, synth_defaults(spec.kind).at(k)); };
  SynthLayer out;
  switch (spec.kind) {
    case SynthKind::GaussianClusters: {
      const auto k = as_count(p("k"), "k", 1);
      const auto n = as_count(p("n"), "n", 1);
      const auto dim = as_count(p("D"), "D", 1);
      const double sigma = p("sigma");
      const double sep = p("sep") * sigma;
      // Centres on scaled basis vectors are pairwise exactly `sep` apart;
      // with more clusters than dimensions they sit on a line `sep` apart.
      out.x.resize(static_cast<Eigen::Index>(k * n), static_cast<Eigen::Index>(dim));
      for (std::size_t c = 0; c < k; ++c) {
        Vector centre = Vector::Zero(static_cast<Eigen::Index>(dim));
        if (k <= dim) centre[static_cast<Eigen::Index>(c)] = sep / std::sqrt(2.0);
        else centre[0] = sep * static_cast<double>(c);
        for (std::size_t i = 0; i < n; ++i) {
          const auto row = static_cast<Eigen::Index>(c * n + i);
          out.x.row(row) = (centre + sigma * rng.normal_vector(static_cast<Eigen::Index>(dim))).transpose();
          out.labels.push_back(static_cast<BucketLabel>(c % 3));
        }
      }
      break;
    }
    case SynthKind::ManifoldPlane:
    case SynthKind::Line: {
      const auto m = spec.kind == SynthKind::Line ? std::size_t{1} : as_count(p("intrinsic"), "intrinsic", 1);
      const auto n = as_count(p("n"), "n", 1);
      const auto dim = as_count(p("D"), "D", 1);
      if (m > dim) throw ConfigError("intrinsic dimension " + std::to_string(m) + " exceeds ambient dimension " + std::to_string(dim));
      const Matrix frame = random_frame(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(m), rng);
      Matrix coords(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
      for (Eigen::Index i = 0; i < coords.rows(); ++i)
        for (Eigen::Index j = 0; j < coords.cols(); ++j) coords(i, j) = rng.uniform();
      out.x = coords * frame.transpose();
      add_relative_jitter(out.x, p("noise"), rng);
      out.labels.assign(n, BucketLabel::Factual);
      break;
    }
    case SynthKind::Circle: {
      const auto n = as_count(p("n"), "n", 1);
      const auto dim = as_count(p("D"), "D", 2);
      const double r = p("r");
      out.x = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
      for (std::size_t i = 0; i < n; ++i) {
        const double t = 2.0 * M_PI * rng.uniform();
        out.x(static_cast<Eigen::Index>(i), 0) = r * std::cos(t);
        out.x(static_cast<Eigen::Index>(i), 1) = r * std::sin(t);
      }
      add_relative_jitter(out.x, p("noise"), rng);
      out.labels.assign(n, BucketLabel::Factual);
      break;
    }
    case SynthKind::TwoClassSeparated: {
      const auto n = as_count(p("n"), "n", 1);
      const auto dim = as_count(p("D"), "D", 1);
      const double sigma = p("sigma");
      const Vector dir = unit(rng.normal_vector(static_cast<Eigen::Index>(dim)), "two_class_separated direction");
      out.x.resize(static_cast<Eigen::Index>(2 * n), static_cast<Eigen::Index>(dim));
      for (std::size_t i = 0; i < 2 * n; ++i) {
        const bool unc = i >= n;
        Vector v = sigma * rng.normal_vector(static_cast<Eigen::Index>(dim));
        if (unc) v += p("sep") * sigma * dir;
        out.x.row(static_cast<Eigen::Index>(i)) = v.transpose();
        out.labels.push_back(unc ? alternate_uncertain(i - n) : BucketLabel::Factual);
      }
      break;
    }
    case SynthKind::AnisotropyRatio: {
      const double ratio = p("ratio");
      const auto m = as_count(p("m"), "m", 1);
      const auto n = as_count(p("n"), "n", 1);
      const auto dim = as_count(p("D"), "D", 1);
      if (!(ratio >= 1.0)) throw ConfigError("anisotropy ratio must be >= 1");
      const auto mb = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(m) - 1e-9));
      if (mb + 1 > dim) throw ConfigError("anisotropy_ratio needs D >= ceil(ratio*m) + 1");
      const double sigma = p("sigma");
      const Matrix frame = random_frame(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(mb + 1), rng);
      const Vector offset = p("sep") * sigma * frame.col(static_cast<Eigen::Index>(mb));
      out.x.resize(static_cast<Eigen::Index>(2 * n), static_cast<Eigen::Index>(dim));
      for (std::size_t i = 0; i < 2 * n; ++i) {
        const bool unc = i >= n;
        const auto dims = static_cast<Eigen::Index>(unc ? mb : m);
        Vector v = frame.leftCols(dims) * (sigma * rng.normal_vector(dims));
        if (unc) v += offset;
        out.x.row(static_cast<Eigen::Index>(i)) = v.transpose();
        out.labels.push_back(unc ? alternate_uncertain(i - n) : BucketLabel::Factual);
      }
      break;
    }
  }
  return out;
}

}  // namespace detail

/// Deterministic synthetic ActivationSet; every layer is an independent draw
/// from the same generator.
inline ActivationSet synth_dataset(const SynthSpec& spec) {
  const auto defaults = detail::synth_defaults(spec.kind);
  for (const auto& [k, v] : spec.params)
    if (!defaults.contains(k)) throw ConfigError("synth kind '" + std::string(synth_kind_name(spec.kind)) + "' has no parameter '" + k + "'");
  const auto layers = detail::as_count(spec.get("layers", 1), "layers", 1);

  ActivationSet s;
  s.model_id = std::string("synth:") + synth_kind_name(spec.kind);
  s.n_layers = layers;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [k, v] : defaults) params[k] = spec.get(k, v);
  s.metadata = {{"source", "synth"}, {"kind", synth_kind_name(spec.kind)}, {"params", params}, {"seed", spec.seed}};
  for (std::size_t l = 0; l < layers; ++l) {
    Rng rng(derive_seed(spec.seed, {0x5e17, l}));
    auto layer = detail::synth_layer(spec, rng);
    if (l == 0) {
      s.labels = layer.labels;
      s.n_samples = layer.labels.size();
      s.hidden_dim = static_cast<std::size_t>(layer.x.cols());
    }
    s.hidden.push_back(layer.x.cast<float>());
  }
  validate(s);
  return s;
}

}  // namespace ep
