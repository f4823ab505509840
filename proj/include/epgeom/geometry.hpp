#pragma once

// Boundary direction between factual and uncertain class centroids, and the
// projection / drift measurements built on it.

#include "epgeom/activation_store.hpp"

#include <optional>

namespace ep {

inline constexpr double kDegenerateSeparation = 1e-12;

struct Centroids {
  Vector factual;
  Vector uncertain;
};

inline Vector column_mean(const Matrix& x, const char* what) {
  if (x.rows() == 0) throw DegenerateError(std::string(what) + ": empty class");
  return x.colwise().mean().transpose();
}

inline Centroids class_centroids(const Matrix& x_factual, const Matrix& x_uncertain) {
  if (x_factual.cols() != x_uncertain.cols()) throw ValidationError("class_centroids: dimension mismatch");
  return {column_mean(x_factual, "class_centroids(factual)"), column_mean(x_uncertain, "class_centroids(uncertain)")};
}

struct Boundary {
  Vector direction;  // unit
  double norm = 0.0;  // |mu_U - mu_F|
};

inline Boundary boundary_vector(const Vector& mu_factual, const Vector& mu_uncertain) {
  const Vector diff = mu_uncertain - mu_factual;
  const double n = diff.norm();
  if (!(n >= kDegenerateSeparation))
    throw DegenerateError("degenerate boundary: class centroids coincide (separation " + std::to_string(n) + ")");
  return {diff / n, n};
}

inline double boundary_stability(const Vector& b, const Vector& b_prev) {
  if (b.size() != b_prev.size()) throw ValidationError("boundary_stability: dimension mismatch");
  if (std::abs(b.norm() - 1.0) > 1e-4 || std::abs(b_prev.norm() - 1.0) > 1e-4)
    throw ValidationError("boundary_stability: inputs must be unit vectors");
  return std::clamp(b.dot(b_prev), -1.0, 1.0);
}

/// Mean of h . b over the rows of H.
inline double residual_projection(const Matrix& h, const Vector& b) {
  if (h.rows() == 0) throw DegenerateError("residual_projection: empty matrix");
  if (h.cols() != b.size()) throw ValidationError("residual_projection: dimension mismatch");
  if (std::abs(b.norm() - 1.0) > 1e-6) throw ValidationError("residual_projection: direction must be unit");
  return (h * b).mean();
}

/// Cosine between the initial token embedding and a later representation.
inline double drift_cosine(const Vector& e0, const Vector& h) { return cosine(e0, h, "drift_cosine"); }

// ---------------------------------------------------------------------------
// Per-layer profile over an activation set
// ---------------------------------------------------------------------------

struct BoundaryLayer {
  std::size_t layer = 0;
  Vector direction;
  double norm = 0.0;
  std::optional<double> stability;  // absent at layer 0
  std::map<BucketLabel, double> projection;  // buckets with samples only
  std::map<BucketLabel, double> drift;  // requires embed0
};

struct BoundaryProfile {
  UncertainGroup group = UncertainGroup::Both;
  std::vector<BoundaryLayer> layers;
};

inline Boundary layer_boundary(const ActivationSet& s, std::size_t layer, UncertainGroup g) {
  const Matrix xf = select(s, layer, BucketLabel::Factual);
  const Matrix xu = select_uncertain(s, layer, g);
  const auto c = class_centroids(xf, xu);
  return boundary_vector(c.factual, c.uncertain);
}

inline BoundaryLayer boundary_layer(const ActivationSet& s, std::size_t layer, UncertainGroup g) {
  BoundaryLayer out;
  out.layer = layer;
  const auto b = layer_boundary(s, layer, g);
  out.direction = b.direction;
  out.norm = b.norm;
  for (auto bucket : kAllBuckets) {
    if (s.count(bucket) == 0) continue;
    const auto idx = indices_where(s, [&](BucketLabel x) { return x == bucket; });
    out.projection[bucket] = residual_projection(gather_rows(s.hidden[layer], idx), b.direction);
    if (s.embed0) {
      double sum = 0.0;
      std::size_t used = 0;
      for (auto i : idx) {
        const Vector e = s.embed0->row(static_cast<Eigen::Index>(i)).cast<double>().transpose();
        const Vector h = s.hidden[layer].row(static_cast<Eigen::Index>(i)).cast<double>().transpose();
        if (e.norm() == 0.0 || h.norm() == 0.0) continue;
        sum += drift_cosine(e, h);
        ++used;
      }
      if (used) out.drift[bucket] = sum / static_cast<double>(used);
    }
  }
  return out;
}

/// Stability is filled in afterwards because it couples adjacent layers.
inline void link_stability(std::vector<BoundaryLayer>& layers) {
  for (std::size_t l = 0; l < layers.size(); ++l)
    layers[l].stability = l == 0 ? std::nullopt
                                 : std::optional<double>(boundary_stability(layers[l].direction, layers[l - 1].direction));
}

inline BoundaryProfile boundary_profile(const ActivationSet& s, UncertainGroup g) {
  BoundaryProfile p;
  p.group = g;
  for (std::size_t l = 0; l < s.n_layers; ++l) p.layers.push_back(boundary_layer(s, l, g));
  link_stability(p.layers);
  return p;
}

}  // namespace ep
