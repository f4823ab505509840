#pragma once

// Boundary steering, probe-gated readout bypass, factual-manifold repair, and
// the behavioural metrics used to score them on the toy model.

#include "epgeom/dimensionality.hpp"
#include "epgeom/toy_model.hpp"

namespace ep {

inline Vector steer(const Vector& h, const Vector& v_steer, double alpha) {
  if (h.size() != v_steer.size()) throw ValidationError("steer: dimension mismatch");
  if (alpha == 0.0) return h;
  return h + alpha * v_steer;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeHyper {
  double lr = 0.1;
  std::size_t epochs = 500;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

struct LinearProbe {
  Vector w;
  double bias = 0.0;
  std::size_t epochs = 0;
  double final_loss = 0.0;
  double train_acc = 0.0;
  bool converged = true;  // false when the loss did not drop over the last 10% of epochs

  double logit(const Vector& h) const { return w.dot(h) + bias; }
  double prob(const Vector& h) const {
    const double z = logit(h);
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  bool decide(const Vector& h) const { return logit(h) >= 0.0; }
};

namespace detail {

inline double log1pexp(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace detail

/// Full-batch gradient descent on L2-regularised logistic loss, computed on
/// standardised features and folded back to the raw coordinates. Zero init,
/// so the result is fully determined by the data and hyperparameters.
inline LinearProbe train_linear_probe(const Matrix& x_factual, const Matrix& x_uncertain, const ProbeHyper& hp = {}) {
  if (x_factual.rows() < 10 || x_uncertain.rows() < 10) throw ValidationError("train_linear_probe: each class needs at least 10 samples");
  if (x_factual.cols() != x_uncertain.cols()) throw ValidationError("train_linear_probe: dimension mismatch");
  if (!(hp.lr > 0.0) || hp.epochs < 1 || hp.l2 < 0.0) throw ConfigError("train_linear_probe: bad hyperparameters");
  const Eigen::Index nf = x_factual.rows(), n = nf + x_uncertain.rows(), d = x_factual.cols();
  Matrix x(n, d);
  x << x_factual, x_uncertain;
  Vector y(n);
  y.head(nf).setZero();
  y.tail(n - nf).setOnes();

  const Eigen::RowVectorXd mu = x.colwise().mean();
  Eigen::RowVectorXd sd = ((x.rowwise() - mu).colwise().squaredNorm() / static_cast<double>(n)).cwiseSqrt();
  for (Eigen::Index j = 0; j < d; ++j)
    if (!(sd[j] > 0.0)) sd[j] = 1.0;
  const Matrix xs = (x.rowwise() - mu).array().rowwise() / sd.array();

  Vector w = Vector::Zero(d);
  double b = 0.0;
  const std::size_t tail_start = hp.epochs - std::max<std::size_t>(1, hp.epochs / 10);
  double loss = 0.0, tail_loss = 0.0;
  for (std::size_t e = 0; e <= hp.epochs; ++e) {
    const Vector z = (xs * w).array() + b;
    loss = 0.0;
    Vector r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      loss += detail::log1pexp(z[i]) - y[i] * z[i];
      r[i] = (z[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]))) - y[i];
    }
    loss = loss / static_cast<double>(n) + 0.5 * hp.l2 * w.squaredNorm();
    if (e == tail_start) tail_loss = loss;
    if (e == hp.epochs) break;
    const Vector gw = xs.transpose() * r / static_cast<double>(n) + hp.l2 * w;
    const double gb = r.mean();
    w -= hp.lr * gw;
    b -= hp.lr * gb;
  }

  LinearProbe p;
  p.w = (w.array() / sd.transpose().array()).matrix();
  p.bias = b - p.w.dot(mu.transpose());
  p.epochs = hp.epochs;
  p.final_loss = loss;
  p.converged = loss < tail_loss;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) correct += (p.decide(x.row(i).transpose()) == (y[i] > 0.5)) ? 1 : 0;
  p.train_acc = static_cast<double>(correct) / static_cast<double>(n);
  return p;
}

inline Vector readout_bypass(const Vector& logits, double p_unc, double gamma, std::size_t unsure_id) {
  if (!(p_unc >= 0.0 && p_unc <= 1.0)) throw ConfigError("readout_bypass: p_unc must lie in [0, 1]");
  if (unsure_id >= static_cast<std::size_t>(logits.size())) throw ConfigError("readout_bypass: unsure id out of range");
  Vector out = logits;
  if (gamma != 0.0) out[static_cast<Eigen::Index>(unsure_id)] += gamma * p_unc;
  return out;
}

/// max logit - logit[unsure_id] (0 when unsure is already the argmax).
inline double refusal_margin(const Vector& logits, std::size_t unsure_id) {
  return logits.maxCoeff() - logits[static_cast<Eigen::Index>(unsure_id)];
}

/// 2 x the 95th percentile of the given margins.
inline double margin_calibrated_gamma(std::vector<double> margins) {
  if (margins.empty()) throw ValidationError("margin_calibrated_gamma: no margins");
  return 2.0 * quantile_of(std::move(margins), 0.95);
}

// ---------------------------------------------------------------------------
// Factual subspace and repair
// ---------------------------------------------------------------------------

struct FactualSubspace {
  Vector mean;
  Matrix basis;  // d x k, orthonormal columns
  double captured = 0.0;

  std::size_t k() const { return static_cast<std::size_t>(basis.cols()); }
  Vector project(const Vector& h) const { return basis * (basis.transpose() * (h - mean)) + mean; }
  double distance(const Vector& h) const { return (h - project(h)).norm(); }
};

inline FactualSubspace factual_subspace(const Matrix& x_factual, double var_frac = 0.95) {
  if (!(var_frac > 0.0 && var_frac <= 1.0)) throw ConfigError("factual_subspace: var_frac must lie in (0, 1]");
  if (x_factual.rows() < 2) throw ValidationError("factual_subspace: need at least 2 samples");
  FactualSubspace s;
  s.mean = x_factual.colwise().mean().transpose();
  const Matrix xc = x_factual.rowwise() - s.mean.transpose();
  Eigen::BDCSVD<Matrix> svd(xc, Eigen::ComputeThinV);
  const Vector sv = svd.singularValues();
  if (!(sv.size() > 0 && sv[0] > 0.0)) throw DegenerateError("factual_subspace: rank-0 data");
  std::vector<double> ev;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv[i] > sv[0] * 1e-10) ev.push_back(sv[i] * sv[i]);
  const auto k = components_for_fraction(ev, var_frac);
  s.basis = svd.matrixV().leftCols(static_cast<Eigen::Index>(k));
  const double total = sv.squaredNorm();
  s.captured = std::min(1.0, sv.head(static_cast<Eigen::Index>(k)).squaredNorm() / total);
  return s;
}

/// (1 - lambda) h + lambda [Proj_S(h - mu_F) + mu_F].
inline Vector manifold_repair(const Vector& h, const FactualSubspace& sub, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("manifold_repair: lambda must lie in [0, 1]");
  if (h.size() != sub.mean.size()) throw ValidationError("manifold_repair: dimension mismatch");
  if (lambda == 0.0) return h;
  const Vector p = sub.project(h);
  if (lambda == 1.0) return p;
  return (1.0 - lambda) * h + lambda * p;
}

// ---------------------------------------------------------------------------
// Toy generation and behavioural metrics
// ---------------------------------------------------------------------------

enum class InterventionKind { None, Steer, Bypass, Repair };

struct Intervention {
  InterventionKind kind = InterventionKind::None;
  std::size_t stream = 0;  // residual stream index the hook acts on (block l output = l + 1)
  Vector v_steer;
  double alpha = 0.0;
  const LinearProbe* probe = nullptr;
  double gamma = 0.0;
  std::size_t unsure_id = 0;
  const FactualSubspace* subspace = nullptr;
  double lambda = 0.0;
};

/// Greedy decoding with the intervention applied at every position on every
/// step; returns the generated continuation only.
inline std::vector<std::size_t> generate(const ToyTransformer& m, std::span<const std::size_t> prompt, std::size_t max_new,
                                         const Intervention& iv = {}) {
  std::vector<std::size_t> seq(prompt.begin(), prompt.end());
  StreamHook hook;
  if (iv.kind == InterventionKind::Steer && iv.alpha != 0.0) {
    hook = [&](std::size_t s, Matrix& h) {
      if (s == iv.stream) h.rowwise() += (iv.alpha * iv.v_steer).transpose();
    };
  } else if (iv.kind == InterventionKind::Repair && iv.lambda != 0.0) {
    if (!iv.subspace) throw ConfigError("repair intervention without a subspace");
    hook = [&](std::size_t s, Matrix& h) {
      if (s != iv.stream) return;
      for (Eigen::Index i = 0; i < h.rows(); ++i) h.row(i) = manifold_repair(h.row(i).transpose(), *iv.subspace, iv.lambda).transpose();
    };
  }
  if (iv.kind == InterventionKind::Bypass && !iv.probe) throw ConfigError("bypass intervention without a probe");
  if (prompt.empty()) throw ConfigError("generate: empty prompt");
  IncrementalDecoder dec(m, hook);
  Vector z;
  for (auto t : prompt) z = dec.append(t);
  for (std::size_t step = 0; step < max_new; ++step) {
    if (iv.kind == InterventionKind::Bypass) z = readout_bypass(z, iv.probe->prob(dec.final_state(iv.stream)), iv.gamma, iv.unsure_id);
    seq.push_back(static_cast<std::size_t>(argmax(z)));
    if (step + 1 < max_new) z = dec.append(seq.back());
  }
  return {seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end()};
}

/// True when some 4-gram occurs at least 3 times back to back.
inline bool has_loop(std::span<const std::size_t> seq, std::size_t gram = 4, std::size_t repeats = 3) {
  const std::size_t span_len = gram * repeats;
  for (std::size_t i = 0; i + span_len <= seq.size(); ++i) {
    bool ok = true;
    for (std::size_t r = 1; ok && r < repeats; ++r)
      for (std::size_t j = 0; ok && j < gram; ++j) ok = seq[i + j] == seq[i + r * gram + j];
    if (ok) return true;
  }
  return false;
}

struct BehavioralMetrics {
  double output_change = 0.0;
  double loop_rate = 0.0;
  double refusal_rate = 0.0;
  std::size_t n_samples = 0;
};

inline constexpr std::size_t kDefaultMaxNewTokens = 24;

using Generations = std::vector<std::vector<std::size_t>>;

inline Generations generate_all(const ToyTransformer& m, const Generations& prompts, std::size_t max_new = kDefaultMaxNewTokens,
                                const Intervention& iv = {}) {
  Generations out;
  for (const auto& p : prompts) out.push_back(generate(m, p, max_new, iv));
  return out;
}

/// Scores `iv` against un-intervened greedy decoding of the same prompts;
/// `baseline` may carry those reference generations precomputed.
inline BehavioralMetrics behavioral_eval(const ToyTransformer& m, const Generations& prompts, const Intervention& iv,
                                         std::optional<std::size_t> refusal_id, std::size_t max_new = kDefaultMaxNewTokens,
                                         const Generations* baseline = nullptr) {
  if (!refusal_id) throw ConfigError("behavioral_eval: refusal token id is required");
  if (*refusal_id >= m.config.vocab) throw ConfigError("behavioral_eval: refusal token id out of range");
  if (prompts.empty()) throw ValidationError("behavioral_eval: no prompts");
  if (baseline && baseline->size() != prompts.size()) throw ValidationError("behavioral_eval: baseline size mismatch");
  std::size_t changed = 0, loops = 0, refusals = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto out = generate(m, prompts[i], max_new, iv);
    if (iv.kind != InterventionKind::None) changed += out != (baseline ? (*baseline)[i] : generate(m, prompts[i], max_new)) ? 1 : 0;
    loops += has_loop(out) ? 1 : 0;
    refusals += std::find(out.begin(), out.end(), *refusal_id) != out.end() ? 1 : 0;
  }
  const auto n = static_cast<double>(prompts.size());
  return {static_cast<double>(changed) / n, static_cast<double>(loops) / n, static_cast<double>(refusals) / n, prompts.size()};
}

}  // namespace ep
