#pragma once

// Vietoris-Rips persistence through dimension 1 on points near the boundary.
// Dimension 0 comes from union-find over the sorted edge filtration;
// dimension 1 from Z/2 column reduction of the edge-triangle boundary matrix.

#include "epgeom/core.hpp"

#include <compare>
#include <cstdlib>
#include <numeric>
#include <optional>

namespace ep {

inline constexpr std::uint64_t kDefaultMemBudget = 2ULL << 30;

/// Budget from EP_MEM_BUDGET_BYTES, or the 2 GiB default.
inline std::uint64_t mem_budget_from_env() {
  if (const char* v = std::getenv("EP_MEM_BUDGET_BYTES")) {
    char* end = nullptr;
    const auto parsed = std::strtoull(v, &end, 10);
    if (end == v || *end != '\0') throw ConfigError("EP_MEM_BUDGET_BYTES is not an integer byte count");
    return parsed;
  }
  return kDefaultMemBudget;
}

struct PersistencePair {
  int dim = 0;
  double birth = 0.0;
  double death = kInf;  // kInf: never dies within the filtration cap

  friend bool operator==(const PersistencePair&, const PersistencePair&) = default;
  friend std::partial_ordering operator<=>(const PersistencePair& a, const PersistencePair& b) {
    if (a.dim != b.dim) return a.dim <=> b.dim;
    if (a.birth != b.birth) return a.birth <=> b.birth;
    return a.death <=> b.death;
  }
};

struct PersistenceDiagram {
  std::vector<PersistencePair> pairs;
  std::size_t n_points = 0;
  double max_scale = 0.0;
  int max_dim = 1;

  /// Pairs sorted canonically (dim, birth, death).
  std::vector<PersistencePair> sorted_pairs() const {
    auto p = pairs;
    std::sort(p.begin(), p.end());
    return p;
  }
};

// ---------------------------------------------------------------------------
// Band selection
// ---------------------------------------------------------------------------

struct BandSelection {
  std::vector<std::size_t> indices;  // into the input rows, ascending score then index
  Matrix points;
};

namespace detail {

inline BandSelection take_band(const Matrix& x, const std::vector<std::size_t>& candidates, const Vector& b,
                               double midpoint, double quantile, std::size_t max_take = SIZE_MAX) {
  std::vector<std::pair<double, std::size_t>> scored;
  for (auto i : candidates) scored.emplace_back(std::abs(x.row(static_cast<Eigen::Index>(i)).dot(b) - midpoint), i);
  std::sort(scored.begin(), scored.end());
  const auto take = std::min(max_take, static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(scored.size()) - 1e-9)));
  BandSelection out;
  for (std::size_t q = 0; q < std::min(take, scored.size()); ++q) out.indices.push_back(scored[q].second);
  out.points.resize(static_cast<Eigen::Index>(out.indices.size()), x.cols());
  for (std::size_t r = 0; r < out.indices.size(); ++r)
    out.points.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(out.indices[r]));
  return out;
}

inline void check_band_args(const Matrix& x, std::span<const bool> uncertain, const Vector& b, double quantile) {
  if (x.rows() == 0) throw DegenerateError("boundary_band: empty input");
  if (!(quantile > 0.0 && quantile <= 1.0)) throw ConfigError("boundary_band: quantile must be in (0, 1]");
  if (static_cast<std::size_t>(x.rows()) != uncertain.size()) throw ValidationError("boundary_band: label count mismatch");
  if (x.cols() != b.size()) throw ValidationError("boundary_band: dimension mismatch");
}

inline double band_midpoint(const Matrix& x, std::span<const bool> uncertain, const Vector& b) {
  double sf = 0.0, su = 0.0;
  std::size_t nf = 0, nu = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double p = x.row(i).dot(b);
    if (uncertain[static_cast<std::size_t>(i)]) su += p, ++nu;
    else sf += p, ++nf;
  }
  if (nf == 0 || nu == 0) throw DegenerateError("boundary_band: both classes must be present");
  return 0.5 * (sf / static_cast<double>(nf) + su / static_cast<double>(nu));
}

}  // namespace detail

/// The `quantile` fraction of all points closest (in |h.b - midpoint|) to the
/// midpoint between the two class mean projections. Ties broken by index.
inline BandSelection boundary_band(const Matrix& x, std::span<const bool> uncertain, const Vector& b, double quantile) {
  detail::check_band_args(x, uncertain, b, quantile);
  const double mid = detail::band_midpoint(x, uncertain, b);
  std::vector<std::size_t> all(static_cast<std::size_t>(x.rows()));
  std::iota(all.begin(), all.end(), 0);
  return detail::take_band(x, all, b, mid, quantile);
}

/// Same score, but the fraction is taken within each class separately and
/// the two selections are concatenated (factual first). `max_per_class`
/// caps each class's share, keeping the best-ranked points.
inline BandSelection boundary_band_per_class(const Matrix& x, std::span<const bool> uncertain, const Vector& b,
                                             double quantile, std::size_t max_per_class = SIZE_MAX) {
  detail::check_band_args(x, uncertain, b, quantile);
  const double mid = detail::band_midpoint(x, uncertain, b);
  std::vector<std::size_t> f, u;
  for (std::size_t i = 0; i < uncertain.size(); ++i) (uncertain[i] ? u : f).push_back(i);
  auto bf = detail::take_band(x, f, b, mid, quantile, max_per_class);
  auto bu = detail::take_band(x, u, b, mid, quantile, max_per_class);
  BandSelection out;
  out.indices = bf.indices;
  out.indices.insert(out.indices.end(), bu.indices.begin(), bu.indices.end());
  out.points.resize(bf.points.rows() + bu.points.rows(), x.cols());
  out.points << bf.points, bu.points;
  return out;
}

// ---------------------------------------------------------------------------
// Rips persistence
// ---------------------------------------------------------------------------

/// Euclidean distance matrix, f64 accumulation in coordinate order.
inline Matrix pairwise_distances(const Matrix& p) {
  const Eigen::Index n = p.rows();
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double t = p(i, c) - p(j, c);
        s += t * t;
      }
      d(i, j) = d(j, i) = std::sqrt(s);
    }
  return d;
}

inline double median_pairwise_distance(const Matrix& p) {
  const Matrix d = pairwise_distances(p);
  std::vector<double> v;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = i + 1; j < d.cols(); ++j) v.push_back(d(i, j));
  return median_of(std::move(v));
}

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  /// Returns false if already joined. The smaller root survives.
  bool unite(std::size_t a, std::size_t b) {
    a = find(a), b = find(b);
    if (a == b) return false;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
};

struct Edge {
  double length;
  std::uint32_t i, j;
};

struct Triangle {
  double diameter;
  std::uint32_t a, b, c;
};

// Z/2 symmetric difference of two ascending index lists.
inline void add_column(std::vector<std::uint32_t>& dst, const std::vector<std::uint32_t>& src, std::vector<std::uint32_t>& scratch) {
  scratch.clear();
  std::set_symmetric_difference(dst.begin(), dst.end(), src.begin(), src.end(), std::back_inserter(scratch));
  dst.swap(scratch);
}

}  // namespace detail

struct RipsOptions {
  int max_dim = 1;
  double max_scale = kInf;
  std::uint64_t mem_budget = kDefaultMemBudget;
};

inline PersistenceDiagram rips_persistence(const Matrix& points, const RipsOptions& opt) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0) throw DegenerateError("rips_persistence: no points");
  if (!(opt.max_scale > 0.0)) throw ConfigError("rips_persistence: max_scale must be positive");
  if (opt.max_dim < 0 || opt.max_dim > 1) throw ConfigError("rips_persistence: max_dim must be 0 or 1");
  if (!points.allFinite()) throw ValidationError("rips_persistence: non-finite coordinates");

  const std::uint64_t n_pairs = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  if (n_pairs * (sizeof(detail::Edge) + 2 * sizeof(double)) > opt.mem_budget)
    throw CapacityError("rips_persistence: " + std::to_string(n_pairs) + " candidate edges exceed the memory budget of " +
                        std::to_string(opt.mem_budget) + " bytes");

  PersistenceDiagram diag;
  diag.n_points = n;
  diag.max_scale = opt.max_scale;
  diag.max_dim = opt.max_dim;

  const Matrix dist = pairwise_distances(points);
  std::vector<detail::Edge> edges;
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = i + 1; j < n; ++j)
      if (dist(i, j) <= opt.max_scale) edges.push_back({dist(i, j), i, j});
  std::sort(edges.begin(), edges.end(), [](const auto& x, const auto& y) {
    return std::tie(x.length, x.i, x.j) < std::tie(y.length, y.i, y.j);
  });

  // Dimension 0: every vertex is born at 0; a merging edge kills one class.
  detail::UnionFind uf(n);
  std::vector<bool> positive(edges.size(), false);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    if (uf.unite(edges[e].i, edges[e].j)) diag.pairs.push_back({0, 0.0, edges[e].length});
    else positive[e] = true;
  }
  std::size_t components = 0;
  for (std::size_t v = 0; v < n; ++v)
    if (uf.find(v) == v) ++components;
  for (std::size_t c = 0; c < components; ++c) diag.pairs.push_back({0, 0.0, kInf});
  if (opt.max_dim == 0) return diag;

  // Edge filtration index lookup.
  std::vector<std::int64_t> edge_index(n * n, -1);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    edge_index[edges[e].i * n + edges[e].j] = static_cast<std::int64_t>(e);
    edge_index[edges[e].j * n + edges[e].i] = static_cast<std::int64_t>(e);
  }

  constexpr std::uint64_t kTriangleBytes = sizeof(detail::Triangle) + 3 * sizeof(std::uint32_t) + 3 * sizeof(void*);
  const std::uint64_t fixed_bytes = n_pairs * (sizeof(detail::Edge) + 2 * sizeof(double)) + n * n * sizeof(std::int64_t);
  std::vector<detail::Triangle> tris;
  for (std::uint32_t a = 0; a < n; ++a)
    for (std::uint32_t b = a + 1; b < n; ++b) {
      if (dist(a, b) > opt.max_scale) continue;
      for (std::uint32_t c = b + 1; c < n; ++c) {
        if (dist(a, c) > opt.max_scale || dist(b, c) > opt.max_scale) continue;
        tris.push_back({std::max({dist(a, b), dist(a, c), dist(b, c)}), a, b, c});
        if (fixed_bytes + tris.size() * kTriangleBytes > opt.mem_budget)
          throw CapacityError("rips_persistence: triangle enumeration exceeds the memory budget of " +
                              std::to_string(opt.mem_budget) + " bytes");
      }
    }
  std::sort(tris.begin(), tris.end(), [](const auto& x, const auto& y) {
    return std::tie(x.diameter, x.a, x.b, x.c) < std::tie(y.diameter, y.a, y.b, y.c);
  });

  // Dimension 1: reduce triangle columns; the pivot (latest edge) pairs a
  // cycle-creating edge with the triangle that fills it.
  std::vector<std::int64_t> pivot_owner(edges.size(), -1);
  std::vector<std::vector<std::uint32_t>> reduced(tris.size());
  std::vector<bool> killed(edges.size(), false);
  std::vector<std::uint32_t> scratch;
  for (std::size_t t = 0; t < tris.size(); ++t) {
    const auto& tr = tris[t];
    auto& col = reduced[t];
    col = {static_cast<std::uint32_t>(edge_index[tr.a * n + tr.b]), static_cast<std::uint32_t>(edge_index[tr.a * n + tr.c]),
           static_cast<std::uint32_t>(edge_index[tr.b * n + tr.c])};
    std::sort(col.begin(), col.end());
    while (!col.empty() && pivot_owner[col.back()] >= 0) detail::add_column(col, reduced[static_cast<std::size_t>(pivot_owner[col.back()])], scratch);
    if (col.empty()) continue;
    const auto low = col.back();
    pivot_owner[low] = static_cast<std::int64_t>(t);
    killed[low] = true;
    if (tr.diameter > edges[low].length) diag.pairs.push_back({1, edges[low].length, tr.diameter});
  }
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (positive[e] && !killed[e]) diag.pairs.push_back({1, edges[e].length, kInf});
  return diag;
}

struct Betti {
  std::size_t beta0 = 0;
  std::size_t beta1 = 0;
};

/// beta_k = number of dim-k pairs with birth <= scale < death.
inline Betti betti_at_scale(const PersistenceDiagram& diag, double scale) {
  if (!(scale >= 0.0 && scale <= diag.max_scale))
    throw ConfigError("betti_at_scale: scale " + std::to_string(scale) + " outside [0, max_scale]");
  Betti b;
  for (const auto& p : diag.pairs) {
    if (!(p.birth <= scale && scale < p.death)) continue;
    (p.dim == 0 ? b.beta0 : b.beta1)++;
  }
  return b;
}

}  // namespace ep
