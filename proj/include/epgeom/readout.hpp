#pragma once

// Singular structure of the unembedding: how much of a direction (or a hidden
// state) lies in the top-m right-singular subspace, and the logit lens.

#include "epgeom/core.hpp"

#include <numeric>
#include <optional>

namespace ep {

struct ReadoutSpectrum {
  Vector sigma;  // descending, r = min(V, d) entries
  Matrix basis;  // d x r right-singular vectors (columns)
  std::size_t vocab = 0;
  std::size_t hidden = 0;

  std::size_t rank() const { return static_cast<std::size_t>(sigma.size()); }
};

inline ReadoutSpectrum svd_readout(const Matrix& w_u) {
  if (w_u.rows() < 1 || w_u.cols() < 1) throw ValidationError("svd_readout: empty unembedding");
  if (!w_u.allFinite()) throw ValidationError("svd_readout: non-finite entries in unembedding");
  Eigen::BDCSVD<Matrix> svd(w_u, Eigen::ComputeThinU | Eigen::ComputeThinV);
  ReadoutSpectrum s;
  s.sigma = svd.singularValues();
  s.basis = svd.matrixV();
  s.vocab = static_cast<std::size_t>(w_u.rows());
  s.hidden = static_cast<std::size_t>(w_u.cols());
  return s;
}

/// Smallest m with sum_{i<=m} sigma_i^2 >= frac * sum sigma_i^2.
inline std::size_t energy_cutoff(const ReadoutSpectrum& s, double frac = 0.9) {
  const double total = s.sigma.squaredNorm();
  if (!(total > 0.0)) return 1;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < s.sigma.size(); ++i) {
    acc += s.sigma[i] * s.sigma[i];
    if (acc >= frac * total * (1.0 - 1e-12)) return static_cast<std::size_t>(i + 1);
  }
  return s.rank();
}

/// {1%, 5%, 10%, 25%, 50%} of r, the 90%-energy cutoff, and r; deduplicated.
inline std::vector<std::size_t> default_m_grid(const ReadoutSpectrum& s) {
  const auto r = s.rank();
  std::vector<std::size_t> g;
  for (double f : {0.01, 0.05, 0.10, 0.25, 0.50})
    g.push_back(std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(f * static_cast<double>(r))), 1, r));
  g.push_back(energy_cutoff(s));
  g.push_back(r);
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

struct Visibility {
  double vis = 0.0;
  double low_sens = 0.0;
};

namespace detail {

inline void check_cutoff(const ReadoutSpectrum& s, std::size_t m) {
  if (m < 1 || m > s.rank()) throw ConfigError("visibility: cutoff m=" + std::to_string(m) + " outside [1, " + std::to_string(s.rank()) + "]");
}

struct Split {
  double visible;
  double hidden;
  double total;
};

inline Split split(const Vector& x, const ReadoutSpectrum& s, std::size_t m) {
  if (x.size() != static_cast<Eigen::Index>(s.hidden)) throw ValidationError("visibility: dimension mismatch");
  const double nx = x.norm();
  if (!(nx > 0.0)) throw DegenerateError("visibility: zero vector");
  const auto vm = s.basis.leftCols(static_cast<Eigen::Index>(m));
  const Vector coeff = vm.transpose() * x;
  const Vector rest = x - vm * coeff;
  return {coeff.norm(), rest.norm(), nx};
}

}  // namespace detail

/// vis_m = |P_{V_m} x| / |x|, low_sens_m = |P_{V_m^perp} x| / |x|.
inline Visibility visibility(const Vector& x, const ReadoutSpectrum& s, std::size_t m) {
  detail::check_cutoff(s, m);
  const auto sp = detail::split(x, s, m);
  return {sp.visible / sp.total, sp.hidden / sp.total};
}

struct VisibilityCurve {
  std::vector<std::size_t> m_grid;
  std::vector<double> vis;
  std::vector<double> low_sens;
};

inline VisibilityCurve visibility_curve(const Vector& x, const ReadoutSpectrum& s, const std::vector<std::size_t>& m_grid) {
  VisibilityCurve c;
  for (std::size_t i = 0; i < m_grid.size(); ++i) {
    if (i > 0 && m_grid[i] <= m_grid[i - 1]) throw ConfigError("visibility_curve: m grid must be strictly increasing");
    const auto v = visibility(x, s, m_grid[i]);
    c.m_grid.push_back(m_grid[i]);
    c.vis.push_back(v.vis);
    c.low_sens.push_back(v.low_sens);
  }
  return c;
}

/// |P_perp h| / |P h|; +inf when the visible part is below 1e-12 of |h|.
inline double lowsens_ratio(const Vector& h, const ReadoutSpectrum& s, std::size_t m) {
  detail::check_cutoff(s, m);
  const auto sp = detail::split(h, s, m);
  if (sp.visible < 1e-12 * sp.total) return kInf;
  return sp.hidden / sp.visible;
}

struct TokenProb {
  std::size_t id = 0;
  double prob = 0.0;
};

struct LensReading {
  double entropy = 0.0;  // nats
  double confidence = 0.0;  // top-1 probability
  std::vector<TokenProb> top_k;
};

inline LensReading lens_from_logits(const Vector& logits, std::size_t top_k = 5) {
  if (!logits.allFinite()) throw ValidationError("logit_lens: non-finite logits");
  const Vector p = softmax(logits);
  LensReading r;
  r.entropy = entropy(p);
  r.confidence = p.maxCoeff();
  std::vector<std::size_t> ids(static_cast<std::size_t>(p.size()));
  std::iota(ids.begin(), ids.end(), 0);
  const auto k = std::min<std::size_t>(top_k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](std::size_t a, std::size_t b) {
    const auto pa = p[static_cast<Eigen::Index>(a)], pb = p[static_cast<Eigen::Index>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  for (std::size_t i = 0; i < k; ++i) r.top_k.push_back({ids[i], p[static_cast<Eigen::Index>(ids[i])]});
  return r;
}

/// Softmax of W_U h read as a provisional next-token distribution.
inline LensReading logit_lens(const Vector& h, const Matrix& w_u, std::size_t top_k = 5) {
  if (h.size() != w_u.cols()) throw ValidationError("logit_lens: dimension mismatch");
  return lens_from_logits(w_u * h, top_k);
}

}  // namespace ep
