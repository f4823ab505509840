#pragma once

// Reference persistence by brute force: every simplex up to dimension 2 enters
// one dense Z/2 boundary matrix, ordered by (filtration value, dimension,
// vertex tuple), and is reduced by the textbook left-to-right algorithm. No
// union-find, no clearing, no sparse tricks.

#include "epgeom/topology.hpp"

#include <tuple>

namespace oracle {

struct Simplex {
  double value;
  int dim;
  std::vector<std::uint32_t> verts;
};

inline std::vector<ep::PersistencePair> brute_force_rips(const ep::Matrix& p, double max_scale) {
  const auto n = static_cast<std::uint32_t>(p.rows());
  const auto dist = [&](std::uint32_t a, std::uint32_t b) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double t = p(a, c) - p(b, c);
      s += t * t;
    }
    return std::sqrt(s);
  };
  std::vector<Simplex> cx;
  for (std::uint32_t a = 0; a < n; ++a) cx.push_back({0.0, 0, {a}});
  for (std::uint32_t a = 0; a < n; ++a)
    for (std::uint32_t b = a + 1; b < n; ++b)
      if (dist(a, b) <= max_scale) cx.push_back({dist(a, b), 1, {a, b}});
  for (std::uint32_t a = 0; a < n; ++a)
    for (std::uint32_t b = a + 1; b < n; ++b)
      for (std::uint32_t c = b + 1; c < n; ++c) {
        const double v = std::max({dist(a, b), dist(a, c), dist(b, c)});
        if (v <= max_scale) cx.push_back({v, 2, {a, b, c}});
      }
  std::sort(cx.begin(), cx.end(), [](const Simplex& x, const Simplex& y) {
    return std::tie(x.value, x.dim, x.verts) < std::tie(y.value, y.dim, y.verts);
  });

  const std::size_t m = cx.size();
  std::vector<std::vector<char>> col(m, std::vector<char>(m, 0));
  for (std::size_t j = 0; j < m; ++j) {
    if (cx[j].dim == 0) continue;
    for (std::size_t drop = 0; drop < cx[j].verts.size(); ++drop) {
      std::vector<std::uint32_t> face;
      for (std::size_t q = 0; q < cx[j].verts.size(); ++q)
        if (q != drop) face.push_back(cx[j].verts[q]);
      for (std::size_t i = 0; i < m; ++i)
        if (cx[i].dim == cx[j].dim - 1 && cx[i].verts == face) col[j][i] = 1;
    }
  }
  const auto low = [&](std::size_t j) -> std::ptrdiff_t {
    for (std::size_t i = m; i-- > 0;)
      if (col[j][i]) return static_cast<std::ptrdiff_t>(i);
    return -1;
  };
  std::vector<std::ptrdiff_t> lows(m, -1);
  for (std::size_t j = 0; j < m; ++j) {
    for (;;) {
      const auto l = low(j);
      if (l < 0) break;
      std::ptrdiff_t other = -1;
      for (std::size_t k = 0; k < j; ++k)
        if (lows[k] == l) other = static_cast<std::ptrdiff_t>(k);
      if (other < 0) break;
      for (std::size_t i = 0; i < m; ++i) col[j][i] ^= col[static_cast<std::size_t>(other)][i];
    }
    lows[j] = low(j);
  }

  std::vector<bool> paired(m, false);
  std::vector<ep::PersistencePair> out;
  for (std::size_t j = 0; j < m; ++j) {
    if (lows[j] < 0) continue;
    const auto i = static_cast<std::size_t>(lows[j]);
    paired[i] = paired[j] = true;
    const int d = cx[i].dim;
    if (d == 1 && cx[j].value == cx[i].value) continue;
    out.push_back({d, cx[i].value, cx[j].value});
  }
  for (std::size_t i = 0; i < m; ++i)
    if (!paired[i] && cx[i].dim <= 1) out.push_back({cx[i].dim, cx[i].value, ep::kInf});
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace oracle
