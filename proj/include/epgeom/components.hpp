#pragma once

// Component statistics: attention entropy and sink mass, residual-component
// alignment, activation shape (kurtosis, Gini), surprisal, and streaming
// per-neuron selectivity.

#include "epgeom/core.hpp"

#include <numeric>
#include <optional>

namespace ep {

namespace detail {

/// Validated copy of an attention row; renormalised when its sum is off by at
/// most 1e-4.
inline std::vector<double> checked_row(std::span<const double> row, const char* what) {
  if (row.empty()) throw ValidationError(std::string(what) + ": empty attention row");
  double sum = 0.0;
  for (double a : row) {
    if (!std::isfinite(a)) throw ValidationError(std::string(what) + ": non-finite attention weight");
    if (a < 0.0) throw ValidationError(std::string(what) + ": negative attention weight");
    sum += a;
  }
  if (std::abs(sum - 1.0) > 1e-4)
    throw ValidationError(std::string(what) + ": attention row sums to " + std::to_string(sum) + ", not 1");
  std::vector<double> out(row.begin(), row.end());
  for (auto& a : out) a /= sum;
  return out;
}

}  // namespace detail

inline double attention_entropy(std::span<const double> row) {
  double h = 0.0;
  for (double a : detail::checked_row(row, "attention_entropy"))
    if (a > 0.0) h -= a * std::log(a);
  return std::max(0.0, h);
}

inline double sink_mass(std::span<const double> row) { return detail::checked_row(row, "sink_mass")[0]; }

struct Alignment {
  std::optional<double> attn;  // absent when the component output is zero
  std::optional<double> mlp;
};

inline Alignment residual_alignment(const Vector& attn_out, const Vector& mlp_out, const Vector& b) {
  if (attn_out.size() != b.size() || mlp_out.size() != b.size()) throw ValidationError("residual_alignment: dimension mismatch");
  Alignment a;
  if (attn_out.norm() > 0.0) a.attn = cosine(attn_out, b, "residual_alignment");
  if (mlp_out.norm() > 0.0) a.mlp = cosine(mlp_out, b, "residual_alignment");
  return a;
}

/// Pearson (non-excess) kurtosis m4 / m2^2.
inline double kurtosis(std::span<const double> v) {
  if (v.size() < 4) throw ValidationError("kurtosis: need at least 4 values");
  const double mean = mean_of(v);
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  const auto n = static_cast<double>(v.size());
  m2 /= n;
  m4 /= n;
  if (!(m2 > 0.0)) throw DegenerateError("kurtosis: zero variance");
  return m4 / (m2 * m2);
}

/// Gini coefficient of |v|: sum_i (2i - n - 1) x_(i) / (n sum x), x ascending.
inline double gini(std::span<const double> v) {
  if (v.empty()) throw ValidationError("gini: empty vector");
  std::vector<double> x;
  x.reserve(v.size());
  for (double a : v) x.push_back(std::abs(a));
  std::sort(x.begin(), x.end());
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  if (!(total > 0.0)) throw DegenerateError("gini: all-zero vector");
  const auto n = static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (2.0 * static_cast<double>(i + 1) - n - 1.0) * x[i];
  return std::clamp(acc / (n * total), 0.0, 1.0 - 1.0 / n);
}

struct SurprisalEntropy {
  double surprisal = 0.0;  // kInf when p[token] = 0
  double entropy = 0.0;
};

inline SurprisalEntropy surprisal_and_entropy(const Vector& p, std::size_t token) {
  if (token >= static_cast<std::size_t>(p.size())) throw ConfigError("surprisal: token id out of range");
  if ((p.array() < 0.0).any() || std::abs(p.sum() - 1.0) > 1e-6) throw ValidationError("surprisal: not a probability distribution");
  const double pt = p[static_cast<Eigen::Index>(token)];
  return {pt > 0.0 ? -std::log(pt) : kInf, entropy(p)};
}

// ---------------------------------------------------------------------------
// Welford streaming moments
// ---------------------------------------------------------------------------

/// Per-coordinate running mean and sum of squared deviations.
struct WelfordState {
  std::size_t n = 0;
  Vector mean;
  Vector m2;

  explicit WelfordState(Eigen::Index dim = 0) : mean(Vector::Zero(dim)), m2(Vector::Zero(dim)) {}

  template <class Row>
  void push(const Row& x) {
    if (x.size() != mean.size()) throw ValidationError("welford: dimension mismatch");
    ++n;
    const Vector xd = x.template cast<double>();
    const Vector delta = xd - mean;
    mean += delta / static_cast<double>(n);
    m2.array() += delta.array() * (xd - mean).array();
  }

  /// Chan et al. pairwise combination; associative up to rounding.
  void merge(const WelfordState& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    if (o.mean.size() != mean.size()) throw ValidationError("welford merge: dimension mismatch");
    const auto na = static_cast<double>(n), nb = static_cast<double>(o.n);
    const double nt = na + nb;
    const Vector delta = o.mean - mean;
    mean += delta * (nb / nt);
    m2 += o.m2 + delta.cwiseAbs2() * (na * nb / nt);
    n += o.n;
  }

  Vector variance() const {
    if (n < 2) throw ValidationError("welford: variance needs n >= 2");
    return m2 / static_cast<double>(n - 1);
  }
};

/// Welford over the given rows in fixed-size chunks, merged as a balanced
/// binary tree in chunk order (the reduction shape is independent of how the
/// chunks were scheduled).
inline WelfordState welford_tree(const MatrixF& x, std::span<const std::size_t> rows, std::size_t chunk = 1024) {
  std::vector<WelfordState> parts;
  for (std::size_t s = 0; s < rows.size(); s += chunk) {
    WelfordState w(x.cols());
    for (std::size_t i = s; i < std::min(rows.size(), s + chunk); ++i) w.push(x.row(static_cast<Eigen::Index>(rows[i])).transpose());
    parts.push_back(std::move(w));
  }
  if (parts.empty()) return WelfordState(x.cols());
  while (parts.size() > 1) {
    std::vector<WelfordState> next;
    for (std::size_t i = 0; i + 1 < parts.size(); i += 2) {
      next.push_back(parts[i]);
      next.back().merge(parts[i + 1]);
    }
    if (parts.size() % 2) next.push_back(parts.back());
    parts = std::move(next);
  }
  return parts[0];
}

struct NeuronScore {
  std::size_t neuron = 0;
  std::optional<double> score;  // absent when sigma_U + sigma_F = 0
};

struct SelectivityTable {
  std::size_t layer = 0;
  std::vector<NeuronScore> neurons;  // index order

  /// Defined scores ranked by |score| descending, then index.
  std::vector<NeuronScore> top(std::size_t k) const {
    std::vector<NeuronScore> v;
    for (const auto& s : neurons)
      if (s.score) v.push_back(s);
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
      const double x = std::abs(*a.score), y = std::abs(*b.score);
      return x != y ? x > y : a.neuron < b.neuron;
    });
    if (v.size() > k) v.resize(k);
    return v;
  }
};

/// (mu_U - mu_F) / (sigma_U + sigma_F) per neuron from two Welford states.
inline SelectivityTable selectivity_from_states(const WelfordState& factual, const WelfordState& uncertain, std::size_t layer = 0) {
  if (factual.n < 2 || uncertain.n < 2) throw ValidationError("neuron_selectivity: each class needs at least 2 samples");
  const Vector sf = factual.variance().cwiseSqrt();
  const Vector su = uncertain.variance().cwiseSqrt();
  SelectivityTable t;
  t.layer = layer;
  for (Eigen::Index j = 0; j < sf.size(); ++j) {
    NeuronScore s{static_cast<std::size_t>(j), std::nullopt};
    const double denom = su[j] + sf[j];
    if (denom > 0.0) s.score = (uncertain.mean[j] - factual.mean[j]) / denom;
    t.neurons.push_back(s);
  }
  return t;
}

/// Single pass over rows of `x`; rows flagged in `uncertain` go to the U
/// state, the rest to F.
inline SelectivityTable neuron_selectivity(const MatrixF& x, std::span<const bool> uncertain, std::size_t layer = 0) {
  if (static_cast<std::size_t>(x.rows()) != uncertain.size()) throw ValidationError("neuron_selectivity: label count mismatch");
  std::vector<std::size_t> f, u;
  for (std::size_t i = 0; i < uncertain.size(); ++i) (uncertain[i] ? u : f).push_back(i);
  return selectivity_from_states(welford_tree(x, f), welford_tree(x, u), layer);
}

struct HeadDivergence {
  std::size_t head = 0;
  double score = 0.0;
};

/// |H_U - H_F| per head, ranked descending (ties by head index).
inline std::vector<HeadDivergence> head_entropy_divergence(const std::vector<std::optional<double>>& uncertain_mean,
                                                           const std::vector<std::optional<double>>& factual_mean) {
  if (uncertain_mean.size() != factual_mean.size()) throw ValidationError("head_entropy_divergence: head count mismatch");
  std::vector<HeadDivergence> out;
  for (std::size_t h = 0; h < uncertain_mean.size(); ++h) {
    if (!uncertain_mean[h] || !factual_mean[h])
      throw ValidationError("head_entropy_divergence: missing class mean for head " + std::to_string(h));
    out.push_back({h, std::abs(*uncertain_mean[h] - *factual_mean[h])});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

}  // namespace ep
