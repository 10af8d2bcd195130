#pragma once

// Next-token pretraining of the substrate model. Lenses need a model whose
// output distribution carries signal; this trains a small one from scratch.

#include "corpus.hpp"
#include "model.hpp"
#include "optimizer.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace attnlens {

struct pretrain_options {
  int batch_size = 16;
  int seq_len = 64;
  double learning_rate = 3e-3;
  std::function<void(std::int64_t step, double loss)> on_step;
};

// Mean next-token cross-entropy (nats) of one sequence; fills dlogits with the
// gradient of `weight * loss` if given.
template <class T>
double next_token_loss(const matrix<T>& logits, std::span<const int> targets, double weight, matrix<T>* dlogits) {
  const auto n = logits.rows();
  const auto v = logits.cols();
  double total = 0;
  if (dlogits) dlogits->resize(n, v);
  std::vector<T> lp(static_cast<std::size_t>(v));
  for (Eigen::Index i = 0; i < n; ++i) {
    log_softmax<T>(std::span<const T>(logits.row(i).data(), static_cast<std::size_t>(v)), lp);
    const int t = targets[static_cast<std::size_t>(i)];
    total -= static_cast<double>(lp[static_cast<std::size_t>(t)]);
    if (dlogits) {
      for (Eigen::Index j = 0; j < v; ++j)
        (*dlogits)(i, j) = static_cast<T>(weight / static_cast<double>(n)) * std::exp(lp[static_cast<std::size_t>(j)]);
      (*dlogits)(i, t) -= static_cast<T>(weight / static_cast<double>(n));
    }
  }
  return total / static_cast<double>(n);
}

// Mean held-out next-token cross-entropy over `windows` evenly spaced windows.
inline double heldout_cross_entropy(const model_bundle& model, const corpus& data, int seq_len, int windows) {
  const auto tokens = data.heldout();
  if (tokens.size() < static_cast<std::size_t>(seq_len) + 1) throw input_error("held-out slice is too short");
  const auto span = tokens.size() - static_cast<std::size_t>(seq_len) - 1;
  double total = 0;
  sequence_cache<float> cache;
  for (int w = 0; w < windows; ++w) {
    const std::size_t start = windows > 1 ? span * static_cast<std::size_t>(w) / static_cast<std::size_t>(windows - 1) : 0;
    const auto window = tokens.subspan(start, static_cast<std::size_t>(seq_len) + 1);
    forward_sequence(model.config(), model.parameters(), window.first(static_cast<std::size_t>(seq_len)), cache);
    total += next_token_loss<float>(cache.logits, window.subspan(1), 1.0, nullptr);
  }
  return total / windows;
}

// steps == 0 returns the seeded initialization.
inline model_bundle pretrain_base_model(const model_config& config, const corpus& data, std::int64_t steps,
                                        std::uint64_t seed, const pretrain_options& opt = {}) {
  config.validate();
  if (steps < 0) throw input_error("steps must be >= 0");
  if (opt.seq_len > config.max_seq_len) throw input_error("seq_len exceeds max_seq_len");
  for (int t : data.tokens())
    if (t >= config.vocab_size) throw input_error("corpus token id exceeds model vocab_size");

  auto params = init_weights<float>(config, seed);
  if (steps == 0) return model_bundle(config, std::move(params));

  auto zero_like = [&] {
    auto w = weights<float>::zeros(config);
    return w;
  };
  auto grads = zero_like();
  auto m = zero_like();
  auto v = zero_like();
  std::vector<matrixf*> p_list, g_list, m_list, v_list;
  params.visit([&](const std::string&, matrixf& x) { p_list.push_back(&x); });
  grads.visit([&](const std::string&, matrixf& x) { g_list.push_back(&x); });
  m.visit([&](const std::string&, matrixf& x) { m_list.push_back(&x); });
  v.visit([&](const std::string&, matrixf& x) { v_list.push_back(&x); });

  // windows carry one extra token for the shifted targets
  batch_stream stream(data.train(), opt.seq_len + 1, opt.batch_size, mix_seed(seed, 0x707265ull));
  const adam_params hp{opt.learning_rate, 0.9, 0.999, 1e-8};
  sequence_cache<float> cache;
  matrixf dlogits;
  for (std::int64_t step = 0; step < steps; ++step) {
    for (auto* g : g_list) g->setZero();
    const auto batch = stream.batch(static_cast<std::uint64_t>(step));
    double loss = 0;
    for (int s = 0; s < batch.batch_size; ++s) {
      const auto seq = batch.sequence(s);
      const auto inputs = seq.first(static_cast<std::size_t>(opt.seq_len));
      forward_sequence(config, params, inputs, cache);
      loss += next_token_loss<float>(cache.logits, seq.subspan(1), 1.0 / batch.batch_size, &dlogits);
      backward_sequence(config, params, cache, dlogits, grads);
    }
    loss /= batch.batch_size;
    if (!std::isfinite(loss)) throw divergence_error("pretraining loss is not finite", static_cast<std::size_t>(step));
    for (std::size_t i = 0; i < p_list.size(); ++i) adam_step(*p_list[i], *g_list[i], *m_list[i], *v_list[i], step + 1, hp);
    if (opt.on_step) opt.on_step(step, loss);
  }
  return model_bundle(config, std::move(params));
}

}  // namespace attnlens
