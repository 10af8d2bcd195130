#pragma once

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace attnlens {

enum class distribution_kind { logits, probabilities };

// Values over the vocabulary. Logits are unnormalized; probabilities are
// non-negative and sum to one within 1e-6.
class token_distribution {
 public:
  token_distribution() = default;

  static token_distribution from_logits(std::vector<double> values) {
    return token_distribution(std::move(values), distribution_kind::logits);
  }

  static token_distribution from_probabilities(std::vector<double> values) {
    double sum = 0;
    for (double v : values) {
      if (!(v >= 0)) throw input_error("probabilities must be non-negative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw input_error("probabilities must sum to 1 (got " + std::to_string(sum) + ")");
    return token_distribution(std::move(values), distribution_kind::probabilities);
  }

  template <class T>
  static token_distribution from_logits(std::span<const T> values) {
    return from_logits(std::vector<double>(values.begin(), values.end()));
  }

  distribution_kind kind() const { return kind_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  // Natural-log probabilities; -inf where a probability is exactly zero.
  std::vector<double> log_probs() const;
  std::vector<double> probs() const;

  friend bool operator==(const token_distribution&, const token_distribution&) = default;

 private:
  token_distribution(std::vector<double> v, distribution_kind k) : values_(std::move(v)), kind_(k) {}

  std::vector<double> values_;
  distribution_kind kind_ = distribution_kind::logits;
};

template <class T>
void log_softmax(std::span<const T> logits, std::span<T> out) {
  T max = -std::numeric_limits<T>::infinity();
  for (T v : logits) max = std::max(max, v);
  T sum = 0;
  for (T v : logits) sum += std::exp(v - max);
  const T lse = max + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

inline std::vector<double> token_distribution::log_probs() const {
  std::vector<double> out(values_.size());
  if (kind_ == distribution_kind::logits) {
    log_softmax<double>(values_, out);
  } else {
    for (std::size_t i = 0; i < values_.size(); ++i)
      out[i] = values_[i] > 0 ? std::log(values_[i]) : -std::numeric_limits<double>::infinity();
  }
  return out;
}

inline std::vector<double> token_distribution::probs() const {
  if (kind_ == distribution_kind::probabilities) return values_;
  auto lp = log_probs();
  for (double& v : lp) v = std::exp(v);
  return lp;
}

namespace detail {
inline void check_same_length(const token_distribution& p, const token_distribution& q) {
  if (p.size() != q.size())
    throw input_error("distribution lengths differ (" + std::to_string(p.size()) + " vs " + std::to_string(q.size()) + ")");
  if (p.size() == 0) throw input_error("empty distribution");
}
}  // namespace detail

// D_KL(p || q) in nats, computed in log space. Terms with p_i = 0 contribute 0.
inline double kl_divergence(const token_distribution& p, const token_distribution& q) {
  detail::check_same_length(p, q);
  const auto lp = p.log_probs();
  const auto lq = q.log_probs();
  double kl = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (std::isinf(lp[i]) && lp[i] < 0) continue;
    if (std::isinf(lq[i]) && lq[i] < 0)
      throw divergence_error("q assigns zero probability to token " + std::to_string(i) + " where p > 0");
    kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  }
  return std::max(kl, 0.0);
}

// H(p, q) = -sum p_i ln q_i in nats.
inline double cross_entropy(const token_distribution& p, const token_distribution& q) {
  detail::check_same_length(p, q);
  const auto lp = p.log_probs();
  const auto lq = q.log_probs();
  double ce = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (std::isinf(lp[i]) && lp[i] < 0) continue;
    if (std::isinf(lq[i]) && lq[i] < 0)
      throw divergence_error("q assigns zero probability to token " + std::to_string(i) + " where p > 0");
    ce -= std::exp(lp[i]) * lq[i];
  }
  return ce;
}

}  // namespace attnlens
