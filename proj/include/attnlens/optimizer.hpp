#pragma once

#include "tensor.hpp"

#include <cmath>
#include <cstdint>

namespace attnlens {

struct adam_params {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update, no weight decay. `step` is 1-based. Moment
// arithmetic runs in double and is rounded to the storage type afterwards.
template <class P, class G>
void adam_step(matrix<P>& param, const matrix<G>& grad, matrix<P>& m, matrix<P>& v, std::int64_t step,
               const adam_params& hp) {
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad.data()[i]);
    const double mi = hp.beta1 * static_cast<double>(m.data()[i]) + (1.0 - hp.beta1) * g;
    const double vi = hp.beta2 * static_cast<double>(v.data()[i]) + (1.0 - hp.beta2) * g * g;
    m.data()[i] = static_cast<P>(mi);
    v.data()[i] = static_cast<P>(vi);
    const double update = hp.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + hp.epsilon);
    param.data()[i] = static_cast<P>(static_cast<double>(param.data()[i]) - update);
  }
}

}  // namespace attnlens
