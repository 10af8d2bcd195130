#pragma once

// Pre-layernorm GPT-2 style decoder with per-head contribution capture.
//
// Head contribution: for head h of layer l at position p, the head's
// attention-weighted value vector multiplied by rows [h*d_head, (h+1)*d_head)
// of the attention output projection. The output-projection bias belongs to no
// head. Summing all contributions of a layer and adding the bias gives the
// attention block output before the residual add.

#include "config.hpp"
#include "distribution.hpp"
#include "error.hpp"
#include "io.hpp"
#include "tensor.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace attnlens {

template <class T>
struct layer_weights {
  matrix<T> ln1_g, ln1_b;
  matrix<T> w_qkv, b_qkv;  // d x 3d, columns [q | k | v], head h at h*d_head within each
  matrix<T> w_o, b_o;      // d x d
  matrix<T> ln2_g, ln2_b;
  matrix<T> w_fc, b_fc;      // d x 4d
  matrix<T> w_proj, b_proj;  // 4d x d
};

template <class T>
struct weights {
  matrix<T> wte;  // vocab x d
  matrix<T> wpe;  // max_seq_len x d
  std::vector<layer_weights<T>> layers;
  matrix<T> lnf_g, lnf_b;
  matrix<T> w_u;  // d x vocab

  static weights zeros(const model_config& c) {
    const int d = c.d_model;
    weights w;
    w.wte = matrix<T>::Zero(c.vocab_size, d);
    w.wpe = matrix<T>::Zero(c.max_seq_len, d);
    w.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& l : w.layers) {
      l.ln1_g = matrix<T>::Zero(1, d);
      l.ln1_b = matrix<T>::Zero(1, d);
      l.w_qkv = matrix<T>::Zero(d, 3 * d);
      l.b_qkv = matrix<T>::Zero(1, 3 * d);
      l.w_o = matrix<T>::Zero(d, d);
      l.b_o = matrix<T>::Zero(1, d);
      l.ln2_g = matrix<T>::Zero(1, d);
      l.ln2_b = matrix<T>::Zero(1, d);
      l.w_fc = matrix<T>::Zero(d, 4 * d);
      l.b_fc = matrix<T>::Zero(1, 4 * d);
      l.w_proj = matrix<T>::Zero(4 * d, d);
      l.b_proj = matrix<T>::Zero(1, d);
    }
    w.lnf_g = matrix<T>::Zero(1, d);
    w.lnf_b = matrix<T>::Zero(1, d);
    w.w_u = matrix<T>::Zero(d, c.vocab_size);
    return w;
  }

  // Every tensor in canonical order. The order defines the file layout and the
  // fingerprint, so append only.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <class U>
  weights<U> cast() const {
    weights<U> out;
    out.layers.resize(layers.size());
    std::vector<const matrix<T>*> src;
    visit([&](const std::string&, const matrix<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, matrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

 private:
  template <class W, class F>
  static void visit_impl(W& w, F& f) {
    f(std::string("wte"), w.wte);
    f(std::string("wpe"), w.wpe);
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
      auto& l = w.layers[i];
      const std::string p = "h" + std::to_string(i) + ".";
      f(p + "ln1.g", l.ln1_g);
      f(p + "ln1.b", l.ln1_b);
      f(p + "attn.w_qkv", l.w_qkv);
      f(p + "attn.b_qkv", l.b_qkv);
      f(p + "attn.w_o", l.w_o);
      f(p + "attn.b_o", l.b_o);
      f(p + "ln2.g", l.ln2_g);
      f(p + "ln2.b", l.ln2_b);
      f(p + "mlp.w_fc", l.w_fc);
      f(p + "mlp.b_fc", l.b_fc);
      f(p + "mlp.w_proj", l.w_proj);
      f(p + "mlp.b_proj", l.b_proj);
    }
    f(std::string("lnf.g"), w.lnf_g);
    f(std::string("lnf.b"), w.lnf_b);
    f(std::string("w_u"), w.w_u);
  }
};

// GPT-2 initialization: N(0, 0.02), residual projections scaled by 1/sqrt(2L),
// layernorm gains 1, biases 0.
template <class T>
weights<T> init_weights(const model_config& c, std::uint64_t seed) {
  c.validate();
  auto w = weights<T>::zeros(c);
  std::mt19937_64 rng(mix_seed(seed, 0x6d6f64656cull));
  const double std = 0.02;
  const double proj_std = std / std::sqrt(2.0 * c.n_layers);
  fill_normal(w.wte, std, rng);
  fill_normal(w.wpe, std, rng);
  for (auto& l : w.layers) {
    l.ln1_g.setOnes();
    l.ln2_g.setOnes();
    fill_normal(l.w_qkv, std, rng);
    fill_normal(l.w_o, proj_std, rng);
    fill_normal(l.w_fc, std, rng);
    fill_normal(l.w_proj, proj_std, rng);
  }
  w.lnf_g.setOnes();
  fill_normal(w.w_u, std, rng);
  return w;
}

namespace detail {

template <class T>
void layernorm_forward(const matrix<T>& x, const matrix<T>& g, const matrix<T>& b, double eps, matrix<T>& y,
                       matrix<T>& xhat, matrix<T>& rstd) {
  const auto n = x.rows();
  const auto d = x.cols();
  y.resize(n, d);
  xhat.resize(n, d);
  rstd.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).sum() / static_cast<T>(d);
    const T var = (x.row(i).array() - mean).square().sum() / static_cast<T>(d);
    const T r = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd(i, 0) = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
}

// Returns dx; accumulates dg, db.
template <class T>
matrix<T> layernorm_backward(const matrix<T>& dy, const matrix<T>& xhat, const matrix<T>& rstd, const matrix<T>& g,
                             matrix<T>& dg, matrix<T>& db) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  matrix<T> dx(n, d);
  dg.row(0) += dy.cwiseProduct(xhat).colwise().sum();
  db.row(0) += dy.colwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = dy.row(i).cwiseProduct(g.row(0));
    const T mean_dxhat = dxhat.sum() / static_cast<T>(d);
    const T mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).sum() / static_cast<T>(d);
    dx.row(i) = rstd(i, 0) * (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
  }
  return dx;
}

constexpr double gelu_c = 0.7978845608028654;  // sqrt(2/pi)

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(static_cast<T>(gelu_c) * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T u = static_cast<T>(gelu_c) * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t * t) * static_cast<T>(gelu_c) * (T(1) + T(3) * T(0.044715) * x * x);
}

}  // namespace detail

// Intermediate activations of one sequence, kept for capture and backprop.
template <class T>
struct layer_cache {
  matrix<T> ln1_xhat, ln1_rstd, h1, qkv;
  std::vector<matrix<T>> probs;  // per head, n x n causal attention weights
  matrix<T> z;                   // n x d, per-head weighted values concatenated
  matrix<T> attn_out;            // attention block output, before residual add
  matrix<T> ln2_xhat, ln2_rstd, h2, fc_pre, fc_act;
};

template <class T>
struct sequence_cache {
  std::vector<int> tokens;
  std::vector<layer_cache<T>> layers;
  matrix<T> lnf_xhat, lnf_rstd, hf;
  matrix<T> logits;  // n x vocab
};

inline void check_tokens(const model_config& c, std::span<const int> tokens) {
  if (tokens.empty()) throw input_error("token sequence is empty");
  if (tokens.size() > static_cast<std::size_t>(c.max_seq_len))
    throw input_error("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || tokens[i] >= c.vocab_size)
      throw input_error("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                        " is outside [0, " + std::to_string(c.vocab_size) + ")");
}

template <class T>
void forward_sequence(const model_config& c, const weights<T>& w, std::span<const int> tokens, sequence_cache<T>& cache) {
  check_tokens(c, tokens);
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const int d = c.d_model;
  const int dh = c.d_head;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(static_cast<std::size_t>(c.n_layers));

  matrix<T> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = w.wte.row(tokens[static_cast<std::size_t>(i)]) + w.wpe.row(i);

  for (int l = 0; l < c.n_layers; ++l) {
    auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const auto& lw = w.layers[static_cast<std::size_t>(l)];

    detail::layernorm_forward(x, lw.ln1_g, lw.ln1_b, c.layernorm_epsilon, lc.h1, lc.ln1_xhat, lc.ln1_rstd);
    lc.qkv.noalias() = lc.h1 * lw.w_qkv;
    lc.qkv.rowwise() += lw.b_qkv.row(0);

    lc.z.setZero(n, d);
    lc.probs.resize(static_cast<std::size_t>(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      matrix<T>& p = lc.probs[static_cast<std::size_t>(h)];
      p.noalias() = q * k.transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        T max = p(i, 0) * scale;
        for (Eigen::Index j = 1; j <= i; ++j) max = std::max(max, p(i, j) * scale);
        T sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) * scale - max);
          sum += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < n; ++j) p(i, j) = 0;
      }
      lc.z.middleCols(h * dh, dh).noalias() = p * v;
    }
    lc.attn_out.noalias() = lc.z * lw.w_o;
    lc.attn_out.rowwise() += lw.b_o.row(0);
    x += lc.attn_out;

    detail::layernorm_forward(x, lw.ln2_g, lw.ln2_b, c.layernorm_epsilon, lc.h2, lc.ln2_xhat, lc.ln2_rstd);
    lc.fc_pre.noalias() = lc.h2 * lw.w_fc;
    lc.fc_pre.rowwise() += lw.b_fc.row(0);
    lc.fc_act = lc.fc_pre.unaryExpr([](T v) { return detail::gelu(v); });
    matrix<T> mlp_out = lc.fc_act * lw.w_proj;
    mlp_out.rowwise() += lw.b_proj.row(0);
    x += mlp_out;
  }

  detail::layernorm_forward(x, w.lnf_g, w.lnf_b, c.layernorm_epsilon, cache.hf, cache.lnf_xhat, cache.lnf_rstd);
  cache.logits.noalias() = cache.hf * w.w_u;
}

// Backpropagates dlogits through the cached forward pass, accumulating into grads.
template <class T>
void backward_sequence(const model_config& c, const weights<T>& w, const sequence_cache<T>& cache,
                       const matrix<T>& dlogits, weights<T>& grads) {
  const int d = c.d_model;
  const int dh = c.d_head;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  grads.w_u.noalias() += cache.hf.transpose() * dlogits;
  matrix<T> dhf = dlogits * w.w_u.transpose();
  matrix<T> dx = detail::layernorm_backward(dhf, cache.lnf_xhat, cache.lnf_rstd, w.lnf_g, grads.lnf_g, grads.lnf_b);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lg = grads.layers[static_cast<std::size_t>(l)];

    // MLP branch
    lg.b_proj.row(0) += dx.colwise().sum();
    lg.w_proj.noalias() += lc.fc_act.transpose() * dx;
    matrix<T> dfc = dx * lw.w_proj.transpose();
    for (Eigen::Index i = 0; i < dfc.size(); ++i) dfc.data()[i] *= detail::gelu_grad(lc.fc_pre.data()[i]);
    lg.b_fc.row(0) += dfc.colwise().sum();
    lg.w_fc.noalias() += lc.h2.transpose() * dfc;
    matrix<T> dh2 = dfc * lw.w_fc.transpose();
    dx += detail::layernorm_backward(dh2, lc.ln2_xhat, lc.ln2_rstd, lw.ln2_g, lg.ln2_g, lg.ln2_b);

    // attention branch
    lg.b_o.row(0) += dx.colwise().sum();
    lg.w_o.noalias() += lc.z.transpose() * dx;
    const matrix<T> dz = dx * lw.w_o.transpose();
    matrix<T> dqkv = matrix<T>::Zero(lc.qkv.rows(), lc.qkv.cols());
    for (int h = 0; h < c.n_heads; ++h) {
      const auto& p = lc.probs[static_cast<std::size_t>(h)];
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      const auto dzh = dz.middleCols(h * dh, dh);
      const matrix<T> dp = dzh * v.transpose();
      dqkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * dzh;
      matrix<T> ds = p.cwiseProduct(dp);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
      ds -= (p.array().colwise() * row_dot.array()).matrix();
      ds *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = ds * k;
      dqkv.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
    }
    lg.b_qkv.row(0) += dqkv.colwise().sum();
    lg.w_qkv.noalias() += lc.h1.transpose() * dqkv;
    matrix<T> dh1 = dqkv * lw.w_qkv.transpose();
    dx += detail::layernorm_backward(dh1, lc.ln1_xhat, lc.ln1_rstd, lw.ln1_g, lg.ln1_g, lg.ln1_b);
  }

  for (std::size_t i = 0; i < cache.tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    grads.wte.row(cache.tokens[i]) += dx.row(r);
    grads.wpe.row(r) += dx.row(r);
  }
}

// Frozen model: configuration, float32 weights and a content fingerprint.
// There is no mutable access to the weights once constructed.
class model_bundle {
 public:
  model_bundle(model_config config, weights<float> w) : config_(config), weights_(std::move(w)) {
    config_.validate();
    const auto expected = weights<float>::zeros(config_);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
    expected.visit([&](const std::string&, const matrixf& m) { shapes.emplace_back(m.rows(), m.cols()); });
    if (weights_.layers.size() != static_cast<std::size_t>(config_.n_layers))
      throw input_error("weights have " + std::to_string(weights_.layers.size()) + " layers, config says " +
                        std::to_string(config_.n_layers));
    std::size_t i = 0;
    weights_.visit([&](const std::string& name, const matrixf& m) {
      if (m.rows() != shapes[i].first || m.cols() != shapes[i].second)
        throw input_error("tensor " + name + " has the wrong shape");
      ++i;
    });
    fingerprint_ = compute_fingerprint(config_, weights_);
  }

  const model_config& config() const { return config_; }
  const weights<float>& parameters() const { return weights_; }
  const std::string& fingerprint() const { return fingerprint_; }

  static std::string compute_fingerprint(const model_config& c, const weights<float>& w) {
    io::fnv1a h;
    h.update("attnlens-model");
    for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.vocab_size, c.max_seq_len}) h.update(&v, sizeof v);
    h.update(io::format_exact(c.layernorm_epsilon));
    w.visit([&](const std::string& name, const matrixf& m) {
      h.update(name);
      h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(float));
    });
    return io::to_hex(h.digest());
  }

 private:
  model_config config_;
  weights<float> weights_;
  std::string fingerprint_;
};

inline model_bundle random_model(const model_config& c, std::uint64_t seed) {
  return model_bundle(c, init_weights<float>(c, seed));
}

// Head contributions for every (layer, head, position).
class head_capture {
 public:
  head_capture(int n_layers, int n_heads, std::vector<matrixf> per_head)
      : n_layers_(n_layers), n_heads_(n_heads), per_head_(std::move(per_head)) {}

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  Eigen::Index seq_len() const { return per_head_.empty() ? 0 : per_head_.front().rows(); }

  // seq_len x d_model matrix of contributions for one head.
  const matrixf& head(int layer, int head) const {
    return per_head_[static_cast<std::size_t>(layer * n_heads_ + head)];
  }

 private:
  int n_layers_;
  int n_heads_;
  std::vector<matrixf> per_head_;
};

using hidden_vector = std::vector<float>;

struct forward_result {
  matrixf logits;  // seq_len x vocab_size, the model's final logits
  std::optional<head_capture> capture;

  Eigen::Index seq_len() const { return logits.rows(); }

  token_distribution distribution_at(Eigen::Index position) const {
    if (position < 0 || position >= logits.rows()) throw input_error("position out of range");
    const auto row = logits.row(position);
    return token_distribution::from_logits(std::vector<double>(row.data(), row.data() + row.size()));
  }
};

// Contribution of one head: that head's columns of z times its rows of w_o.
template <class T>
matrix<T> head_contribution_rows(const model_config& c, const layer_weights<T>& lw, const layer_cache<T>& lc, int head) {
  return lc.z.middleCols(head * c.d_head, c.d_head) * lw.w_o.middleRows(head * c.d_head, c.d_head);
}

inline forward_result forward_with_capture(const model_bundle& model, std::span<const int> tokens, bool capture_heads) {
  sequence_cache<float> cache;
  const auto& c = model.config();
  forward_sequence(c, model.parameters(), tokens, cache);
  forward_result out{std::move(cache.logits), std::nullopt};
  if (capture_heads) {
    std::vector<matrixf> per_head;
    per_head.reserve(static_cast<std::size_t>(c.n_layers * c.n_heads));
    for (int l = 0; l < c.n_layers; ++l)
      for (int h = 0; h < c.n_heads; ++h)
        per_head.push_back(head_contribution_rows(c, model.parameters().layers[static_cast<std::size_t>(l)],
                                                  cache.layers[static_cast<std::size_t>(l)], h));
    out.capture.emplace(c.n_layers, c.n_heads, std::move(per_head));
  }
  return out;
}

inline hidden_vector head_contribution(const forward_result& result, int layer, int head, Eigen::Index position) {
  if (!result.capture) throw state_error("forward result was produced without head capture");
  const auto& cap = *result.capture;
  if (layer < 0 || layer >= cap.n_layers())
    throw input_error("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(cap.n_layers()) + ")");
  if (head < 0 || head >= cap.n_heads())
    throw input_error("head " + std::to_string(head) + " out of range [0, " + std::to_string(cap.n_heads()) + ")");
  if (position < 0 || position >= cap.seq_len())
    throw input_error("position " + std::to_string(position) + " out of range [0, " + std::to_string(cap.seq_len()) + ")");
  const auto row = cap.head(layer, head).row(position);
  return hidden_vector(row.data(), row.data() + row.size());
}

}  // namespace attnlens
