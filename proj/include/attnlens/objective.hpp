#pragma once

// Lens training objective: mean over selected positions of
// KL(softmax(lens(a)) || softmax(O)), where a is the head contribution and O the
// model's final logits at the same position. The lens distribution is the first
// argument.

#include "corpus.hpp"
#include "lens.hpp"
#include "model.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace attnlens {

enum class position_policy { last_position, all_positions };

// Rows pair a head contribution with the model's final logits at that position.
struct lens_samples {
  matrixf head_outputs;   // n x d_model
  matrixf target_logits;  // n x vocab_size
};

// One forward pass per sequence; samples for every requested head of `layer`.
inline std::vector<lens_samples> gather_samples(const model_bundle& model, int layer, std::span<const int> heads,
                                                const token_batch& batch, position_policy policy) {
  const auto& c = model.config();
  for (int h : heads) detail::check_index(c, layer, h);
  if (batch.batch_size < 1 || batch.seq_len < 1) throw input_error("batch selects no positions");
  const int per_seq = policy == position_policy::last_position ? 1 : batch.seq_len;
  const int n = per_seq * batch.batch_size;

  std::vector<lens_samples> out(heads.size());
  for (auto& s : out) {
    s.head_outputs.resize(n, c.d_model);
    s.target_logits.resize(n, c.vocab_size);
  }
  const auto& lw = model.parameters().layers[static_cast<std::size_t>(layer)];
  sequence_cache<float> cache;
  for (int b = 0; b < batch.batch_size; ++b) {
    forward_sequence(c, model.parameters(), batch.sequence(b), cache);
    const auto& lc = cache.layers[static_cast<std::size_t>(layer)];
    const int first = policy == position_policy::last_position ? batch.seq_len - 1 : 0;
    for (std::size_t k = 0; k < heads.size(); ++k) {
      const int h = heads[k];
      const auto z = lc.z.middleRows(first, per_seq).middleCols(h * c.d_head, c.d_head);
      out[k].head_outputs.middleRows(b * per_seq, per_seq).noalias() = z * lw.w_o.middleRows(h * c.d_head, c.d_head);
      out[k].target_logits.middleRows(b * per_seq, per_seq) = cache.logits.middleRows(first, per_seq);
    }
  }
  return out;
}

// Mean KL objective and, optionally, its gradient with respect to the lens
// parameters. With p = softmax(z), q fixed, dKL/dz_k = p_k (ln p_k - ln q_k - KL).
template <class T>
double kl_objective(const matrix<T>& weight, const matrix<T>* bias, const matrix<T>& inputs,
                    const matrix<T>& target_logits, matrix<T>* grad_weight = nullptr, matrix<T>* grad_bias = nullptr) {
  const auto n = inputs.rows();
  const auto v = weight.cols();
  if (n == 0) throw input_error("objective needs at least one selected position");
  matrix<T> z = inputs * weight;
  if (bias) z.rowwise() += bias->row(0);
  matrix<T> g(n, v);
  std::vector<T> lp(static_cast<std::size_t>(v)), lq(static_cast<std::size_t>(v));
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    log_softmax<T>(std::span<const T>(z.row(i).data(), static_cast<std::size_t>(v)), lp);
    log_softmax<T>(std::span<const T>(target_logits.row(i).data(), static_cast<std::size_t>(v)), lq);
    T kl = 0;
    for (Eigen::Index j = 0; j < v; ++j) {
      const auto k = static_cast<std::size_t>(j);
      kl += std::exp(lp[k]) * (lp[k] - lq[k]);
    }
    total += static_cast<double>(kl);
    for (Eigen::Index j = 0; j < v; ++j) {
      const auto k = static_cast<std::size_t>(j);
      g(i, j) = std::exp(lp[k]) * (lp[k] - lq[k] - kl) / static_cast<T>(n);
    }
  }
  if (grad_weight) grad_weight->noalias() = inputs.transpose() * g;
  if (grad_bias) *grad_bias = g.colwise().sum();
  return total / static_cast<double>(n);
}

inline double lens_loss(const lens& l, const lens_samples& samples) {
  const matrixd w = l.weight.cast<double>();
  std::optional<matrixd> b;
  if (l.bias) b = l.bias->cast<double>();
  return kl_objective<double>(w, b ? &*b : nullptr, samples.head_outputs.cast<double>(),
                              samples.target_logits.cast<double>());
}

inline double lens_loss(const lens& l, const model_bundle& model, const token_batch& batch, position_policy policy) {
  check_binding(l, model);
  const int heads[] = {l.head};
  const auto samples = gather_samples(model, l.layer, heads, batch, policy);
  return lens_loss(l, samples.front());
}

}  // namespace attnlens
