#pragma once

// Local intrinsic dimensionality (kNN maximum-likelihood estimate) and the
// covariance spectrum summaries: isotropy, spectral entropy, N_eff, PCA-90.

#include "epgeom/core.hpp"

#include <numeric>

namespace ep {

inline constexpr std::size_t kDefaultLidK = 20;
inline constexpr double kDefaultLidNoise = 1e-4;

struct LidSummary {
  std::vector<double> values;  // per point; NaN where the estimate is undefined
  double mean = 0.0;  // over finite values
  double median = 0.0;
  std::size_t k = 0;
  double noise_sigma = 0.0;
  std::size_t n_nonfinite = 0;
};

/// Exact k nearest neighbours (excluding the point itself) for every row.
/// Candidates come from a blocked Gram-matrix pass; the best 2k+1 are then
/// re-measured by direct differences and ordered by (distance, index).
inline std::vector<std::vector<double>> knn_distances(const Matrix& x, std::size_t k) {
  const Eigen::Index n = x.rows();
  if (static_cast<std::size_t>(n) <= k) throw ValidationError("knn: need more than k points");
  const Matrix xc = x.rowwise() - x.colwise().mean();
  const Vector sq = xc.rowwise().squaredNorm();
  const std::size_t pool = std::min<std::size_t>(2 * k + 1, static_cast<std::size_t>(n - 1));
  constexpr Eigen::Index kBlock = 256;
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
  std::vector<std::pair<double, Eigen::Index>> cand(static_cast<std::size_t>(n));
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index rows = std::min(kBlock, n - start);
    const Matrix g = xc.middleRows(start, rows) * xc.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index i = start + r;
      std::size_t c = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        cand[c++] = {std::max(0.0, sq[i] + sq[j] - 2.0 * g(r, j)), j};
      }
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(pool), cand.begin() + static_cast<std::ptrdiff_t>(c));
      std::vector<std::pair<double, Eigen::Index>> best(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(pool));
      for (auto& [d, j] : best) d = (x.row(i) - x.row(j)).norm();
      std::sort(best.begin(), best.end());
      auto& dst = out[static_cast<std::size_t>(i)];
      dst.resize(k);
      for (std::size_t q = 0; q < k; ++q) dst[q] = best[q].first;
    }
  }
  return out;
}

/// LID(x) = -( (1/k) sum_i log(r_i / r_k) )^-1 over the k nearest neighbours,
/// after seeded isotropic jitter. k = 0 selects min(20, N - 2).
inline LidSummary lid_mle(const Matrix& x, std::size_t k = 0, double noise_sigma = kDefaultLidNoise, std::uint64_t seed = 0) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (k == 0) {
    if (n < 4) throw ValidationError("lid_mle: need at least 4 points, got " + std::to_string(n));
    k = std::min(kDefaultLidK, n - 2);
  }
  if (k < 2) throw ConfigError("lid_mle: k must be >= 2");
  if (n < k + 2) throw ValidationError("lid_mle: need N >= k + 2 (N=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");

  Matrix xj = x;
  Rng rng(seed);
  add_relative_jitter(xj, noise_sigma, rng);
  const auto nn = knn_distances(xj, k);

  LidSummary s;
  s.k = k;
  s.noise_sigma = noise_sigma;
  s.values.resize(n);
  std::vector<double> finite;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = nn[i];
    const double rk = r[k - 1];
    double acc = 0.0;
    bool ok = rk > 0.0;
    for (std::size_t q = 0; ok && q < k; ++q) {
      if (!(r[q] > 0.0)) ok = false;
      else acc += std::log(r[q] / rk);
    }
    acc /= static_cast<double>(k);
    const double lid = ok && acc < 0.0 ? -1.0 / acc : std::numeric_limits<double>::quiet_NaN();
    s.values[i] = lid;
    if (std::isfinite(lid)) finite.push_back(lid);
    else ++s.n_nonfinite;
  }
  s.mean = mean_of(finite);
  s.median = median_of(finite);
  return s;
}

struct SpectrumSummary {
  std::vector<double> eigenvalues;  // covariance eigenvalues, descending, min(N, d) entries
  double isotropy = 0.0;  // lambda2 / lambda1
  double spectral_entropy = 0.0;  // over normalised singular values
  double n_eff = 1.0;  // exp(spectral_entropy)
  std::size_t pca90 = 1;
  std::size_t rank = 0;
};

/// Smallest component count whose cumulative eigenvalue share reaches `frac`.
inline std::size_t components_for_fraction(std::span<const double> eig_desc, double frac) {
  const double total = std::accumulate(eig_desc.begin(), eig_desc.end(), 0.0);
  if (!(total > 0.0)) throw DegenerateError("components_for_fraction: zero total variance");
  const double target = frac * total * (1.0 - 1e-12);
  double acc = 0.0;
  for (std::size_t i = 0; i < eig_desc.size(); ++i) {
    acc += eig_desc[i];
    if (acc >= target) return i + 1;
  }
  return eig_desc.size();
}

/// Eigenvalues (descending) of the 1/(N-1) covariance of the centred rows,
/// via whichever of the d x d covariance or N x N Gram matrix is smaller.
inline std::vector<double> covariance_eigenvalues(const Matrix& xc) {
  const Eigen::Index n = xc.rows();
  const Eigen::Index d = xc.cols();
  const double denom = static_cast<double>(n - 1);
  const Matrix m = n < d ? Matrix(xc * xc.transpose() / denom) : Matrix(xc.transpose() * xc / denom);
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw DegenerateError("covariance eigendecomposition failed");
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(ev.begin(), ev.end(), std::greater<>());
  ev.resize(static_cast<std::size_t>(std::min(n, d)));
  for (auto& v : ev) v = std::max(v, 0.0);
  return ev;
}

inline SpectrumSummary spectral_summary(const Matrix& x) {
  if (x.rows() < 2) throw ValidationError("spectral_summary: need at least 2 rows");
  const Matrix xc = x.rowwise() - x.colwise().mean();
  if ((xc.array() == 0.0).all()) throw DegenerateError("spectral_summary: rank-0 data (all rows identical)");

  SpectrumSummary s;
  s.eigenvalues = covariance_eigenvalues(xc);
  const double l1 = s.eigenvalues[0];
  if (!(l1 > 0.0)) throw DegenerateError("spectral_summary: rank-0 data");
  const double l2 = s.eigenvalues.size() > 1 ? s.eigenvalues[1] : 0.0;
  s.isotropy = std::clamp(l2 / l1, 0.0, 1.0);

  std::vector<double> sv;
  for (double l : s.eigenvalues) sv.push_back(std::sqrt(l * static_cast<double>(x.rows() - 1)));
  const double sv_total = std::accumulate(sv.begin(), sv.end(), 0.0);
  for (double v : sv)
    if (v > sv[0] * 1e-12) ++s.rank;
  double h = 0.0;
  for (double v : sv) {
    const double p = v / sv_total;
    if (p > 0.0) h -= p * std::log(p);
  }
  s.spectral_entropy = h;
  s.n_eff = std::exp(h);
  s.pca90 = components_for_fraction(s.eigenvalues, 0.9);
  return s;
}

}  // namespace ep
