#pragma once

// Shared vocabulary for the epgeom toolkit: error categories, dense matrix
// aliases, the seeded RNG, and small numeric helpers used by every module.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ep {

// ---------------------------------------------------------------------------
// Errors. Each category maps onto one CLI exit code.
// ---------------------------------------------------------------------------

/// Bad configuration or arguments (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data that violates a documented invariant (exit code 3).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A computation that would exceed a configured resource budget (exit code 4).
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mathematically undefined result for the given data (coincident centroids,
/// zero variance, zero vectors). Reported as input validation by the CLI.
class DegenerateError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// ---------------------------------------------------------------------------
// Matrices. Storage of dumped tensors is f32 row-major; analysis is f64.
// ---------------------------------------------------------------------------

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

// Row-normalised copy of a vector, throwing on (near-)zero norm.
inline Vector unit(const Vector& v, const char* what) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateError(std::string(what) + ": zero-norm vector");
  return v / n;
}

inline double cosine(const Vector& a, const Vector& b, const char* what) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateError(std::string(what) + ": zero-norm input");
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// RNG. mt19937_64 is bit-specified by the standard; the distributions below are
// written out so that streams are identical across standard libraries.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derive an independent stream seed from a base seed and a tag sequence.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(base);
  for (auto t : tags) s = splitmix64(s ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
  return s;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal (Box-Muller, cached pair).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

/// Numerically stable log-softmax.
inline Vector log_softmax(const Vector& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

inline Vector softmax(const Vector& z) { return log_softmax(z).array().exp().matrix(); }

/// Shannon entropy in nats; 0 log 0 = 0.
inline double entropy(const Vector& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

/// Symmetrised KL divergence KL(p||q) + KL(q||p) between softmax(za) and
/// softmax(zb), evaluated as sum (p - q)(log p - log q).
inline double sym_kl_logits(const Vector& za, const Vector& zb) {
  const Vector la = log_softmax(za);
  const Vector lb = log_softmax(zb);
  double s = 0.0;
  for (Eigen::Index i = 0; i < la.size(); ++i) s += (std::exp(la[i]) - std::exp(lb[i])) * (la[i] - lb[i]);
  return std::max(s, 0.0);
}

/// Index of the maximum entry, lowest index on ties.
inline Eigen::Index argmax(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(xs.size());
}

inline double median_of(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// Linear-interpolated quantile of xs, q in [0, 1].
inline double quantile_of(std::vector<double> xs, double q) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return xs[lo] + frac * (xs[hi] - xs[lo]);
}

/// Random orthonormal D x m frame (columns), from a seeded Gaussian QR.
inline Matrix random_frame(Eigen::Index ambient, Eigen::Index m, Rng& rng) {
  const Matrix g = rng.normal_matrix(ambient, m);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(ambient, m);
  return q;
}

/// Mean Euclidean distance over all pairs of a deterministic strided
/// subsample of at most `max_points` rows. Used as the reference scale for
/// relative jitter.
inline double mean_pairwise_distance(const Matrix& x, Eigen::Index max_points = 512) {
  const Eigen::Index n = x.rows();
  if (n < 2) return 0.0;
  const Eigen::Index stride = std::max<Eigen::Index>(1, (n + max_points - 1) / max_points);
  std::vector<Eigen::Index> pick;
  for (Eigen::Index i = 0; i < n; i += stride) pick.push_back(i);
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < pick.size(); ++a)
    for (std::size_t b = a + 1; b < pick.size(); ++b) {
      sum += (x.row(pick[a]) - x.row(pick[b])).norm();
      ++pairs;
    }
  return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

/// Adds isotropic Gaussian noise whose expected displacement norm is
/// `rel_sigma` times the mean pairwise distance of x (per coordinate:
/// rel_sigma * mpd / sqrt(D)). Falls back to unit scale for constant data.
inline void add_relative_jitter(Matrix& x, double rel_sigma, Rng& rng) {
  if (rel_sigma <= 0.0 || x.size() == 0) return;
  double scale = mean_pairwise_distance(x);
  if (!(scale > 0.0)) scale = 1.0;
  const double sd = rel_sigma * scale / std::sqrt(static_cast<double>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) += sd * rng.normal();
}

}  // namespace ep
