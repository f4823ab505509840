#pragma once

// A deterministic minimal transformer: token embedding, L parallel-residual
// blocks h' = h + Attn(h) + MLP(h) with causal multi-head softmax attention and
// a ReLU MLP, no normalisation, and an untied unembedding. Row-vector
// convention throughout: H is ctx x d, q = h * W_Q, logits = W_U * h.
//
// Everything is f64. The model exposes the final-position machinery the
// probes need: re-running the tail of the network from a perturbed state,
// and exact vector-Jacobian products through each block.

#include "epgeom/activation_store.hpp"

#include <functional>
#include <map>
#include <optional>

namespace ep {

struct ToyConfig {
  std::size_t n_layers = 4;
  std::size_t hidden_dim = 32;
  std::size_t vocab = 64;
  std::size_t heads = 2;
  std::size_t ff_dim = 64;
  std::uint64_t seed = 0;

  void check() const {
    if (hidden_dim < 1 || vocab < 1 || heads < 1 || ff_dim < 1) throw ConfigError("toy config: all dimensions must be >= 1");
    if (hidden_dim % heads != 0) throw ConfigError("toy config: hidden_dim must be divisible by heads");
  }
  std::size_t head_dim() const { return hidden_dim / heads; }
};

struct ToyLayer {
  Matrix wq, wk, wv, wo;  // d x d
  Matrix w_in;  // d x ff
  Matrix w_out;  // ff x d
};

struct ToyTransformer {
  ToyConfig config;
  Matrix embed;  // V x d
  std::vector<ToyLayer> layers;
  Matrix unembed;  // V x d

  std::size_t parameter_count() const {
    std::size_t n = static_cast<std::size_t>(embed.size() + unembed.size());
    for (const auto& l : layers)
      n += static_cast<std::size_t>(l.wq.size() + l.wk.size() + l.wv.size() + l.wo.size() + l.w_in.size() + l.w_out.size());
    return n;
  }

  Vector logits(const Vector& h_final) const { return unembed * h_final; }
};

/// Seeded Gaussian weights with standard deviation 1/sqrt(d); filled in a fixed
/// order (embed, each layer Q K V O in out, unembed) from one stream.
inline ToyTransformer init_toy(const ToyConfig& cfg) {
  cfg.check();
  Rng rng(derive_seed(cfg.seed, {0x70'7e}));
  const auto d = static_cast<Eigen::Index>(cfg.hidden_dim);
  const auto v = static_cast<Eigen::Index>(cfg.vocab);
  const auto ff = static_cast<Eigen::Index>(cfg.ff_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  ToyTransformer m;
  m.config = cfg;
  m.embed = scale * rng.normal_matrix(v, d);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    ToyLayer layer;
    layer.wq = scale * rng.normal_matrix(d, d);
    layer.wk = scale * rng.normal_matrix(d, d);
    layer.wv = scale * rng.normal_matrix(d, d);
    layer.wo = scale * rng.normal_matrix(d, d);
    layer.w_in = scale * rng.normal_matrix(d, ff);
    layer.w_out = scale * rng.normal_matrix(ff, d);
    m.layers.push_back(std::move(layer));
  }
  m.unembed = scale * rng.normal_matrix(v, d);
  return m;
}

struct ForwardTrace {
  std::vector<std::size_t> tokens;
  std::vector<Matrix> resid;  // L + 1 entries, ctx x d; resid[0] = embeddings, resid[l+1] = output of block l
  std::vector<std::vector<Matrix>> attn;  // [layer][head], ctx x ctx, rows sum to 1
  std::vector<Vector> attn_out;  // [layer], final position
  std::vector<Vector> mlp_out;  // [layer], final position
  std::vector<Vector> mlp_act;  // [layer], final position ReLU activations (ff)
  Vector logits;

  std::size_t ctx() const { return tokens.size(); }
  Vector final_state(std::size_t stream) const { return resid[stream].row(resid[stream].rows() - 1).transpose(); }
};

/// Called on the residual stream after position `stream` is produced
/// (0 = embeddings, l + 1 = output of block l); may modify it in place.
using StreamHook = std::function<void(std::size_t stream, Matrix& resid)>;

namespace detail {

template <class Row>
inline void masked_softmax_row(Row&& row, Eigen::Index upto) {
  double mx = -kInf;
  for (Eigen::Index j = 0; j <= upto; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    row[j] = j <= upto ? std::exp(row[j] - mx) : 0.0;
    sum += row[j];
  }
  row /= sum;
}

struct BlockParts {
  Matrix out;  // ctx x d
  std::vector<Matrix> attn;  // per head ctx x ctx
  Matrix attn_out;  // ctx x d
  Matrix mlp_out;  // ctx x d
  Matrix mlp_act;  // ctx x ff
};

inline BlockParts run_block(const ToyLayer& w, const Matrix& h, std::size_t heads) {
  const Eigen::Index ctx = h.rows();
  const Eigen::Index d = h.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix q = h * w.wq, k = h * w.wk, v = h * w.wv;
  BlockParts p;
  Matrix o(ctx, d);
  for (std::size_t a = 0; a < heads; ++a) {
    const auto c0 = static_cast<Eigen::Index>(a) * dh;
    Matrix s = inv * q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose();
    for (Eigen::Index i = 0; i < ctx; ++i) masked_softmax_row(s.row(i), i);
    o.middleCols(c0, dh) = s * v.middleCols(c0, dh);
    p.attn.push_back(std::move(s));
  }
  p.attn_out = o * w.wo;
  p.mlp_act = (h * w.w_in).cwiseMax(0.0);
  p.mlp_out = p.mlp_act * w.w_out;
  p.out = h + p.attn_out + p.mlp_out;
  return p;
}

/// Final-position output of a block whose input rows are `h` (the final row
/// is the position being probed; earlier rows are context).
inline Vector block_final(const ToyLayer& w, const Matrix& h, std::size_t heads) {
  const Eigen::Index f = h.rows() - 1;
  const Eigen::Index d = h.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::RowVectorXd hf = h.row(f);
  const Eigen::RowVectorXd q = hf * w.wq;
  const Matrix k = h * w.wk, v = h * w.wv;
  Eigen::RowVectorXd o(d);
  for (std::size_t a = 0; a < heads; ++a) {
    const auto c0 = static_cast<Eigen::Index>(a) * dh;
    Eigen::RowVectorXd s = inv * q.segment(c0, dh) * k.middleCols(c0, dh).transpose();
    masked_softmax_row(s, f);
    o.segment(c0, dh) = s * v.middleCols(c0, dh);
  }
  const Eigen::RowVectorXd mlp = (hf * w.w_in).cwiseMax(0.0) * w.w_out;
  return (hf + o * w.wo + mlp).transpose();
}

}  // namespace detail

inline void check_tokens(const ToyTransformer& m, std::span<const std::size_t> tokens) {
  if (tokens.empty()) throw ConfigError("toy forward: empty token sequence");
  for (auto t : tokens)
    if (t >= m.config.vocab) throw ConfigError("toy forward: token id " + std::to_string(t) + " out of range");
}

inline ForwardTrace forward(const ToyTransformer& m, std::span<const std::size_t> tokens, const StreamHook& hook = {}) {
  check_tokens(m, tokens);
  ForwardTrace t;
  t.tokens.assign(tokens.begin(), tokens.end());
  Matrix h(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(m.config.hidden_dim));
  for (std::size_t i = 0; i < tokens.size(); ++i) h.row(static_cast<Eigen::Index>(i)) = m.embed.row(static_cast<Eigen::Index>(tokens[i]));
  if (hook) hook(0, h);
  t.resid.push_back(h);
  const Eigen::Index f = h.rows() - 1;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto p = detail::run_block(m.layers[l], t.resid.back(), m.config.heads);
    if (hook) hook(l + 1, p.out);
    t.attn.push_back(std::move(p.attn));
    t.attn_out.push_back(p.attn_out.row(f).transpose());
    t.mlp_out.push_back(p.mlp_out.row(f).transpose());
    t.mlp_act.push_back(p.mlp_act.row(f).transpose());
    t.resid.push_back(std::move(p.out));
  }
  t.logits = m.logits(t.final_state(m.layers.size()));
  return t;
}

/// Causal decoding one position at a time. Earlier positions never change
/// when a token is appended, so each append runs only the new row through the
/// blocks. A hook sees each new row as a 1 x d matrix.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ToyTransformer& m, StreamHook hook = {}) : m_(m), hook_(std::move(hook)), resid_(m.layers.size() + 1) {
    for (auto& r : resid_) r.resize(0, static_cast<Eigen::Index>(m.config.hidden_dim));
  }

  /// Appends a token and returns the logits at the new final position.
  Vector append(std::size_t token) {
    if (token >= m_.config.vocab) throw ConfigError("toy decode: token id " + std::to_string(token) + " out of range");
    Matrix row = m_.embed.row(static_cast<Eigen::Index>(token));
    push(0, row);
    for (std::size_t l = 0; l < m_.layers.size(); ++l) {
      row = detail::block_final(m_.layers[l], resid_[l], m_.config.heads).transpose();
      push(l + 1, row);
    }
    return m_.logits(resid_.back().row(resid_.back().rows() - 1).transpose());
  }

  Vector final_state(std::size_t stream) const { return resid_[stream].row(resid_[stream].rows() - 1).transpose(); }

 private:
  void push(std::size_t stream, Matrix& row) {
    if (hook_) hook_(stream, row);
    auto& r = resid_[stream];
    r.conservativeResize(r.rows() + 1, Eigen::NoChange);
    r.row(r.rows() - 1) = row.row(0);
  }

  const ToyTransformer& m_;
  StreamHook hook_;
  std::vector<Matrix> resid_;
};

/// Logits after replacing the final-position state at `stream` with `h` and
/// re-running the remaining blocks (earlier positions are unaffected under the
/// causal mask, so their states are reused from the trace).
inline Vector forward_from(const ToyTransformer& m, const ForwardTrace& t, std::size_t stream, const Vector& h) {
  if (stream > m.layers.size()) throw ConfigError("forward_from: stream index out of range");
  Vector cur = h;
  for (std::size_t l = stream; l < m.layers.size(); ++l) {
    Matrix in = t.resid[l];
    in.row(in.rows() - 1) = cur.transpose();
    cur = detail::block_final(m.layers[l], in, m.config.heads);
  }
  return m.logits(cur);
}

/// Final-position output of block `layer` given a replacement input state.
inline Vector block_apply(const ToyTransformer& m, const ForwardTrace& t, std::size_t layer, const Vector& h_in) {
  if (layer >= m.layers.size()) throw ConfigError("block_apply: layer out of range");
  Matrix in = t.resid[layer];
  in.row(in.rows() - 1) = h_in.transpose();
  return detail::block_final(m.layers[layer], in, m.config.heads);
}

/// g_in = (d out_final / d in_final)^T g_out for block `layer`, with the other
/// positions held fixed at their trace values.
inline Vector block_vjp(const ToyTransformer& m, const Matrix& h_in, std::size_t layer, const Vector& g_out) {
  const auto& w = m.layers[layer];
  const Eigen::Index f = h_in.rows() - 1;
  const Eigen::Index d = h_in.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(m.config.heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const Vector hf = h_in.row(f).transpose();

  Vector g_h = g_out;

  const Vector pre = w.w_in.transpose() * hf;
  Vector g_pre = w.w_out * g_out;
  for (Eigen::Index i = 0; i < g_pre.size(); ++i)
    if (!(pre[i] > 0.0)) g_pre[i] = 0.0;
  g_h += w.w_in * g_pre;

  const Vector g_o = w.wo * g_out;
  const Vector q = w.wq.transpose() * hf;
  const Matrix k = h_in * w.wk, v = h_in * w.wv;
  Vector g_q = Vector::Zero(d), g_k = Vector::Zero(d), g_v = Vector::Zero(d);
  for (std::size_t a = 0; a < m.config.heads; ++a) {
    const auto c0 = static_cast<Eigen::Index>(a) * dh;
    Eigen::RowVectorXd s = inv * q.segment(c0, dh).transpose() * k.middleCols(c0, dh).transpose();
    detail::masked_softmax_row(s, f);
    const Vector go = g_o.segment(c0, dh);
    Vector g_alpha(f + 1);
    double mean = 0.0;
    for (Eigen::Index j = 0; j <= f; ++j) {
      g_alpha[j] = go.dot(v.row(j).segment(c0, dh).transpose());
      mean += s[j] * g_alpha[j];
    }
    for (Eigen::Index j = 0; j <= f; ++j) {
      const double g_s = s[j] * (g_alpha[j] - mean);
      g_q.segment(c0, dh) += inv * g_s * k.row(j).segment(c0, dh).transpose();
      if (j == f) g_k.segment(c0, dh) += inv * g_s * q.segment(c0, dh);
    }
    g_v.segment(c0, dh) += s[f] * go;
  }
  g_h += w.wq * g_q + w.wk * g_k + w.wv * g_v;
  return g_h;
}

/// Exact reverse-mode gradient of sum_{k in set} z_k with respect to the
/// final-position state at every stream index 0..L.
inline std::vector<Vector> backward_logit_sum(const ToyTransformer& m, const ForwardTrace& t, std::span<const std::size_t> token_set) {
  if (token_set.empty()) throw ConfigError("backward_logit_sum: empty token set");
  Vector g = Vector::Zero(static_cast<Eigen::Index>(m.config.hidden_dim));
  for (auto k : token_set) {
    if (k >= m.config.vocab) throw ConfigError("backward_logit_sum: token id out of range");
    g += m.unembed.row(static_cast<Eigen::Index>(k)).transpose();
  }
  std::vector<Vector> grads(m.layers.size() + 1);
  grads[m.layers.size()] = g;
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    g = block_vjp(m, t.resid[l], l, g);
    grads[l] = g;
  }
  return grads;
}

/// d CE / d z = softmax(z) - onehot(target).
inline Vector ce_logit_gradient(const Vector& logits, std::size_t target) {
  if (target >= static_cast<std::size_t>(logits.size())) throw ConfigError("ce_logit_gradient: target out of range");
  Vector g = softmax(logits);
  g[static_cast<Eigen::Index>(target)] -= 1.0;
  return g;
}

struct SimplexStep {
  double logit_norm = 0.0;
  double entropy = 0.0;
};

/// Gradient descent on one-hot cross-entropy with respect to the final
/// hidden state (through the unembedding). Returns steps + 1 records, the
/// first being the initial state. The target defaults to the initial argmax.
inline std::vector<SimplexStep> simplex_pressure_demo(const ToyTransformer& m, std::span<const std::size_t> tokens, std::size_t steps,
                                                      double lr, std::optional<std::size_t> target = std::nullopt) {
  const auto t = forward(m, tokens);
  Vector h = t.final_state(m.layers.size());
  Vector z = m.logits(h);
  const std::size_t y = target.value_or(static_cast<std::size_t>(argmax(z)));
  std::vector<SimplexStep> out;
  out.push_back({z.norm(), entropy(softmax(z))});
  for (std::size_t s = 1; s <= steps; ++s) {
    h -= lr * (m.unembed.transpose() * ce_logit_gradient(z, y));
    z = m.logits(h);
    if (!z.allFinite()) throw ValidationError("simplex_pressure_demo: divergent update at step " + std::to_string(s));
    out.push_back({z.norm(), entropy(softmax(z))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy vocabulary, prompt sets and dump export
// ---------------------------------------------------------------------------

/// Uncertainty words mapped onto the top of the toy vocabulary; "unsure" is
/// the refusal token V-1.
inline std::vector<std::pair<std::string, std::size_t>> toy_uncertainty_tokens(std::size_t vocab) {
  static const char* words[] = {"unsure", "unknown", "maybe", "approximately", "perhaps", "unclear", "cannot", "possibly"};
  std::vector<std::pair<std::string, std::size_t>> out;
  for (std::size_t i = 0; i < std::size(words) && i < vocab; ++i) out.emplace_back(words[i], vocab - 1 - i);
  return out;
}

inline std::size_t toy_refusal_token(std::size_t vocab) { return vocab - 1; }

inline std::vector<std::size_t> toy_uncertainty_ids(std::size_t vocab) {
  std::vector<std::size_t> ids;
  for (const auto& [w, id] : toy_uncertainty_tokens(vocab)) ids.push_back(id);
  return ids;
}

struct ToyPrompt {
  std::vector<std::size_t> tokens;
  BucketLabel label = BucketLabel::Factual;
};

/// Bucketed prompt sets drawn from disjoint token pools below the reserved
/// uncertainty ids: factual from the low third, impossible from the high
/// third, hallucination mixing both. Lengths in [min_len, max_len].
inline std::vector<ToyPrompt> toy_prompts(std::size_t vocab, std::size_t per_bucket, std::uint64_t seed, std::size_t min_len = 6,
                                          std::size_t max_len = 10) {
  const std::size_t reserved = std::min<std::size_t>(8, vocab / 2);
  const std::size_t usable = vocab - reserved;
  if (usable < 3) throw ConfigError("toy prompts: vocabulary too small");
  if (min_len < 1 || max_len < min_len) throw ConfigError("toy prompts: bad length range");
  const std::size_t third = usable / 3;
  Rng rng(derive_seed(seed, {0x9a0b}));
  std::vector<ToyPrompt> out;
  for (auto bucket : kAllBuckets)
    for (std::size_t i = 0; i < per_bucket; ++i) {
      ToyPrompt p;
      p.label = bucket;
      const auto len = min_len + rng.below(max_len - min_len + 1);
      for (std::size_t j = 0; j < len; ++j) {
        bool low = bucket == BucketLabel::Factual;
        if (bucket == BucketLabel::Hallucination) low = rng.uniform() < 0.5;
        p.tokens.push_back(low ? rng.below(third) : usable - third + rng.below(third));
      }
      out.push_back(std::move(p));
    }
  return out;
}

inline nlohmann::json toy_config_json(const ToyConfig& c) {
  return {{"n_layers", c.n_layers}, {"hidden_dim", c.hidden_dim}, {"vocab", c.vocab},
          {"heads", c.heads},       {"ff_dim", c.ff_dim},         {"seed", c.seed}};
}

inline ToyConfig toy_config_from_json(const nlohmann::json& j) {
  ToyConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ff_dim = j.at("ff_dim").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("toy config in metadata is malformed: ") + e.what());
  }
  c.check();
  return c;
}

/// Runs every prompt and collects the final-position tensors of each block
/// into an ActivationSet (layer l = output of block l).
inline ActivationSet export_activations(const ToyTransformer& m, const std::vector<ToyPrompt>& prompts) {
  const std::size_t L = m.layers.size();
  if (L == 0) throw ConfigError("toy export needs at least one layer");
  if (prompts.empty()) throw ConfigError("toy export: no prompts");
  const auto n = static_cast<Eigen::Index>(prompts.size());
  const auto d = static_cast<Eigen::Index>(m.config.hidden_dim);
  std::size_t ctx = 0;
  for (const auto& p : prompts) ctx = std::max(ctx, p.tokens.size());

  ActivationSet s;
  const auto& c = m.config;
  s.model_id = "toy:L" + std::to_string(c.n_layers) + "-d" + std::to_string(c.hidden_dim) + "-V" + std::to_string(c.vocab) + "-h" +
               std::to_string(c.heads) + "-ff" + std::to_string(c.ff_dim) + "-seed" + std::to_string(c.seed);
  s.n_layers = L;
  s.hidden_dim = c.hidden_dim;
  s.vocab_size = c.vocab;
  s.n_samples = prompts.size();
  s.hidden.assign(L, MatrixF(n, d));
  s.grad_unc.assign(L, MatrixF(n, d));
  s.attn_out.assign(L, MatrixF(n, d));
  s.mlp_out.assign(L, MatrixF(n, d));
  s.attn.assign(L, AttnTensor(prompts.size(), c.heads, ctx));
  s.embed0 = MatrixF(n, d);
  s.unembed = m.unembed.cast<float>();
  const auto unc = toy_uncertainty_ids(c.vocab);
  nlohmann::json prompt_list = nlohmann::json::array();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    const auto t = forward(m, p.tokens);
    const auto grads = backward_logit_sum(m, t, unc);
    const auto row = static_cast<Eigen::Index>(i);
    s.labels.push_back(p.label);
    s.embed0->row(row) = m.embed.row(static_cast<Eigen::Index>(p.tokens.back())).cast<float>();
    for (std::size_t l = 0; l < L; ++l) {
      s.hidden[l].row(row) = t.final_state(l + 1).transpose().cast<float>();
      s.grad_unc[l].row(row) = grads[l + 1].transpose().cast<float>();
      s.attn_out[l].row(row) = t.attn_out[l].transpose().cast<float>();
      s.mlp_out[l].row(row) = t.mlp_out[l].transpose().cast<float>();
      const auto f = static_cast<Eigen::Index>(p.tokens.size() - 1);
      for (std::size_t h = 0; h < c.heads; ++h)
        for (Eigen::Index j = 0; j <= f; ++j) s.attn[l].at(i, h, static_cast<std::size_t>(j)) = static_cast<float>(t.attn[l][h](f, j));
    }
    prompt_list.push_back(p.tokens);
  }
  nlohmann::json words = nlohmann::json::object();
  for (const auto& [w, id] : toy_uncertainty_tokens(c.vocab)) words[w] = id;
  s.metadata = {{"source", "toy"},
                {"toy_config", toy_config_json(c)},
                {"uncertainty_tokens", words},
                {"refusal_token", toy_refusal_token(c.vocab)},
                {"final_token_policy", "last prompt position"},
                {"prompts", prompt_list}};
  validate(s);
  return s;
}

inline void export_dump(const ToyTransformer& m, const std::vector<ToyPrompt>& prompts, const std::filesystem::path& path) {
  write_dump(export_activations(m, prompts), path);
}

/// Recovers the prompt list stored by export_activations.
inline std::vector<ToyPrompt> prompts_from_metadata(const ActivationSet& s) {
  if (!s.metadata.contains("prompts")) throw ValidationError("dump metadata has no toy prompts");
  std::vector<ToyPrompt> out;
  const auto& list = s.metadata["prompts"];
  if (!list.is_array() || list.size() != s.n_samples) throw ValidationError("toy prompt list does not match n_samples");
  for (std::size_t i = 0; i < list.size(); ++i) out.push_back({list[i].get<std::vector<std::size_t>>(), s.labels[i]});
  return out;
}

}  // namespace ep
