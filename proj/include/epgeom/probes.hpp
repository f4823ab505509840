#pragma once

// Finite-difference perturbation probes along a direction, and the matched
// random-direction controls they are compared against.

#include "epgeom/core.hpp"

#include <functional>
#include <optional>

namespace ep {

inline constexpr double kDefaultEps = 1e-3;

enum class DirectionKind { Boundary, RandomControl, Custom };

struct Direction {
  Vector vector;
  DirectionKind provenance = DirectionKind::Custom;
  double matched_norm = 0.0;
};

inline Direction make_direction(Vector v, DirectionKind kind) {
  if (!v.allFinite()) throw ValidationError("direction has non-finite entries");
  const double n = v.norm();
  return {std::move(v), kind, n};
}

namespace detail {

inline void check_probe_args(const Vector& h, const Vector& dir, double eps, const char* what) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ConfigError(std::string(what) + ": eps must be positive and finite");
  if (h.size() != dir.size()) throw ValidationError(std::string(what) + ": dimension mismatch");
  if (!dir.allFinite()) throw ValidationError(std::string(what) + ": non-finite direction");
}

}  // namespace detail

/// eps^-2 * symKL[p(h) || p(h + eps*dir)], with the readout given as logits.
template <class LogitsFn>
double fisher_sensitivity(LogitsFn&& logits_of, const Vector& h, const Vector& dir, double eps = kDefaultEps) {
  detail::check_probe_args(h, dir, eps, "fisher_sensitivity");
  const Vector z0 = logits_of(h);
  const Vector z1 = logits_of(Vector(h + eps * dir));
  if (!z0.allFinite() || !z1.allFinite()) throw ValidationError("fisher_sensitivity: non-finite distribution");
  return std::max(0.0, sym_kl_logits(z0, z1)) / (eps * eps);
}

/// NLL of the argmax token of the unperturbed readout, that token held fixed.
template <class LogitsFn>
std::function<double(const Vector&)> make_frozen_nll(LogitsFn logits_of, const Vector& h) {
  const Vector z = logits_of(h);
  if (!z.allFinite()) throw ValidationError("frozen NLL: non-finite logits");
  const auto y = argmax(z);
  return [fn = std::move(logits_of), y](const Vector& x) { return -log_softmax(fn(x))[y]; };
}

/// eps^-2 [L(h + eps dir) - 2 L(h) + L(h - eps dir)].
template <class LossFn>
double hessian_curvature(LossFn&& loss, const Vector& h, const Vector& dir, double eps = kDefaultEps) {
  detail::check_probe_args(h, dir, eps, "hessian_curvature");
  const double lp = loss(Vector(h + eps * dir));
  const double l0 = loss(h);
  const double lm = loss(Vector(h - eps * dir));
  if (!std::isfinite(lp) || !std::isfinite(l0) || !std::isfinite(lm)) throw ValidationError("hessian_curvature: non-finite loss");
  return ((lp - l0) + (lm - l0)) / (eps * eps);
}

/// eps^-1 |f(h + eps dir) - f(h)| for a unit direction.
template <class LayerFn>
double jacobian_amplification(LayerFn&& layer, const Vector& h, const Vector& dir, double eps = kDefaultEps) {
  detail::check_probe_args(h, dir, eps, "jacobian_amplification");
  if (std::abs(dir.norm() - 1.0) > 1e-6) throw ValidationError("jacobian_amplification: direction must be unit");
  const Vector y0 = layer(h);
  const Vector y1 = layer(Vector(h + eps * dir));
  if (!y0.allFinite() || !y1.allFinite()) throw ValidationError("jacobian_amplification: non-finite output");
  return (y1 - y0).norm() / eps;
}

inline double gradient_blockage(const Vector& grad, const Vector& b) {
  if (grad.size() != b.size()) throw ValidationError("gradient_blockage: dimension mismatch");
  if (!(grad.norm() > 0.0)) throw DegenerateError("gradient_blockage: zero gradient");
  return cosine(grad, b, "gradient_blockage");
}

/// Seeded Gaussian draw with the component along b removed, rescaled to |b|.
inline Direction random_control_direction(const Vector& b, std::uint64_t seed) {
  if (!b.allFinite()) throw ValidationError("random_control_direction: non-finite direction");
  const double nb = b.norm();
  if (!(nb > 0.0)) throw DegenerateError("random_control_direction: zero direction");
  if (b.size() < 2) throw DegenerateError("random_control_direction: d = 1 has no orthogonal complement");
  const Vector bu = b / nb;
  Rng rng(derive_seed(seed, {0xc0'7701}));
  for (int attempt = 0; attempt < 64; ++attempt) {
    Vector r = rng.normal_vector(b.size());
    r -= r.dot(bu) * bu;
    r -= r.dot(bu) * bu;
    const double nr = r.norm();
    if (nr > 1e-8 * std::sqrt(static_cast<double>(b.size()))) return {r * (nb / nr), DirectionKind::RandomControl, nb};
  }
  throw DegenerateError("random_control_direction: could not draw an orthogonal direction");
}

struct SteeringPoint {
  double alpha = 0.0;
  double kl = 0.0;  // mean symmetric KL vs the unperturbed output
  double flip_rate = 0.0;  // fraction of samples whose argmax changed
};

/// `logits_at(i, delta)` returns sample i's logits with `delta` injected at
/// the configured site; `base[i]` are the unperturbed logits.
template <class InjectFn>
std::vector<SteeringPoint> steering_sweep(const std::vector<Vector>& base, InjectFn&& logits_at, const Vector& dir,
                                          std::span<const double> alphas) {
  if (base.empty()) throw ValidationError("steering_sweep: no samples");
  std::vector<SteeringPoint> out;
  for (double a : alphas) {
    if (!std::isfinite(a)) throw ConfigError("steering_sweep: non-finite alpha");
    SteeringPoint pt{a, 0.0, 0.0};
    if (a != 0.0) {
      const Vector delta = a * dir;
      double kl = 0.0;
      std::size_t flips = 0;
      for (std::size_t i = 0; i < base.size(); ++i) {
        const Vector z = logits_at(i, delta);
        if (!z.allFinite()) throw ValidationError("steering_sweep: non-finite logits after injection (alpha=" + std::to_string(a) + ")");
        kl += std::max(0.0, sym_kl_logits(base[i], z));
        flips += argmax(z) != argmax(base[i]) ? 1 : 0;
      }
      pt.kl = kl / static_cast<double>(base.size());
      pt.flip_rate = static_cast<double>(flips) / static_cast<double>(base.size());
    }
    out.push_back(pt);
  }
  return out;
}

struct ProbeLayer {
  std::size_t layer = 0;
  double fisher_b = 0.0, fisher_r = 0.0;
  double hessian_b = 0.0, hessian_r = 0.0;
  std::optional<double> amp_b, amp_r;  // need a live model
  std::optional<double> blockage;  // needs gradients
};

struct ProbeReport {
  double eps = kDefaultEps;
  std::vector<ProbeLayer> layers;
};

}  // namespace ep
