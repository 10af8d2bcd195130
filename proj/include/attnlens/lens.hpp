#pragma once

#include "distribution.hpp"
#include "error.hpp"
#include "model.hpp"
#include "tensor.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>

namespace attnlens {

struct lens_train_meta {
  std::int64_t steps = 0;
  std::string corpus_id;
  std::uint64_t seed = 0;
  double initial_loss = std::numeric_limits<double>::quiet_NaN();
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

// Trainable d_model x vocab_size map for one (layer, head), bound to a model
// by fingerprint. The bias is off unless explicitly enabled.
struct lens {
  int layer = 0;
  int head = 0;
  matrixf weight;
  std::optional<matrixf> bias;  // 1 x vocab_size
  std::string model_fingerprint;
  lens_train_meta meta;

  Eigen::Index d_model() const { return weight.rows(); }
  Eigen::Index vocab_size() const { return weight.cols(); }
};

enum class init_mode { warm_start, random };

enum class baseline_variant {
  layernorm,  // final layernorm, then unembedding
  raw,        // unembedding only
};

inline void check_binding(const lens& l, const model_bundle& model) {
  if (l.model_fingerprint != model.fingerprint())
    throw binding_error("lens (" + std::to_string(l.layer) + ", " + std::to_string(l.head) + ") is bound to model " +
                        l.model_fingerprint + ", not " + model.fingerprint());
  if (l.weight.rows() != model.config().d_model || l.weight.cols() != model.config().vocab_size)
    throw binding_error("lens matrix shape does not match the model");
}

namespace detail {

inline void check_index(const model_config& c, int layer, int head) {
  if (layer < 0 || layer >= c.n_layers)
    throw input_error("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(c.n_layers) + ")");
  if (head < 0 || head >= c.n_heads)
    throw input_error("head " + std::to_string(head) + " out of range [0, " + std::to_string(c.n_heads) + ")");
}

// x . m accumulated in double, row by row in a fixed order.
inline std::vector<double> project(std::span<const float> x, const matrixf& m) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()), 0.0);
  for (Eigen::Index j = 0; j < m.rows(); ++j) {
    const double xj = x[static_cast<std::size_t>(j)];
    const float* row = m.row(j).data();
    for (std::size_t v = 0; v < out.size(); ++v) out[v] += xj * static_cast<double>(row[v]);
  }
  return out;
}

}  // namespace detail

// Logits = head_output . weight (+ bias).
inline token_distribution apply_lens(const lens& l, std::span<const float> head_output) {
  if (static_cast<Eigen::Index>(head_output.size()) != l.d_model())
    throw input_error("head output has length " + std::to_string(head_output.size()) + ", lens expects " +
                      std::to_string(l.d_model()));
  auto logits = detail::project(head_output, l.weight);
  if (l.bias)
    for (std::size_t v = 0; v < logits.size(); ++v) logits[v] += static_cast<double>((*l.bias)(0, static_cast<Eigen::Index>(v)));
  return token_distribution::from_logits(std::move(logits));
}

// Same as apply_lens, after verifying the lens is bound to `model`.
inline token_distribution apply_lens(const model_bundle& model, const lens& l, std::span<const float> head_output) {
  check_binding(l, model);
  return apply_lens(l, head_output);
}

// Logit-lens baseline: project a head output through the model's own
// (final layernorm +) unembedding.
inline token_distribution baseline_projection(const model_bundle& model, std::span<const float> head_output,
                                              baseline_variant variant = baseline_variant::layernorm) {
  const auto& c = model.config();
  const auto& w = model.parameters();
  if (static_cast<int>(head_output.size()) != c.d_model)
    throw input_error("head output has length " + std::to_string(head_output.size()) + ", model d_model is " +
                      std::to_string(c.d_model));
  if (variant == baseline_variant::raw) return token_distribution::from_logits(detail::project(head_output, w.w_u));
  matrixf x(1, c.d_model);
  for (int j = 0; j < c.d_model; ++j) x(0, j) = head_output[static_cast<std::size_t>(j)];
  matrixf y, xhat, rstd;
  detail::layernorm_forward(x, w.lnf_g, w.lnf_b, c.layernorm_epsilon, y, xhat, rstd);
  return token_distribution::from_logits(
      detail::project(std::span<const float>(y.data(), static_cast<std::size_t>(y.size())), w.w_u));
}

// warm_start copies the unembedding matrix; random draws N(0, 0.02^2).
inline lens init_lens(const model_bundle& model, int layer, int head, init_mode mode, std::uint64_t seed,
                      bool with_bias = false) {
  const auto& c = model.config();
  detail::check_index(c, layer, head);
  lens l;
  l.layer = layer;
  l.head = head;
  l.model_fingerprint = model.fingerprint();
  l.meta.seed = seed;
  if (mode == init_mode::warm_start) {
    l.weight = model.parameters().w_u;
  } else {
    l.weight.resize(c.d_model, c.vocab_size);
    std::mt19937_64 rng(mix_seed(seed, 0x6c656e73ull));
    fill_normal(l.weight, 0.02, rng);
  }
  if (with_bias) l.bias = matrixf::Zero(1, c.vocab_size);
  return l;
}

}  // namespace attnlens
