#pragma once

#include "error.hpp"

#include <string>

namespace attnlens {

struct model_config {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int vocab_size = 512;
  int max_seq_len = 128;
  double layernorm_epsilon = 1e-5;

  void validate() const {
    if (n_layers < 1) throw input_error("n_layers must be >= 1");
    if (n_heads < 1) throw input_error("n_heads must be >= 1");
    if (d_head < 1) throw input_error("d_head must be >= 1");
    if (d_model != n_heads * d_head)
      throw input_error("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                        std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
    if (vocab_size < 2) throw input_error("vocab_size must be >= 2");
    if (max_seq_len < 1) throw input_error("max_seq_len must be >= 1");
    if (!(layernorm_epsilon > 0)) throw input_error("layernorm_epsilon must be positive");
  }

  // Default desk-scale model: trains in minutes on one CPU core.
  static model_config desk() { return {}; }

  // GPT-2 small dimensions. Supported for shape checks and forward passes only.
  static model_config gpt2_small() { return {12, 12, 768, 64, 50257, 1024, 1e-5}; }

  friend bool operator==(const model_config&, const model_config&) = default;
};

}  // namespace attnlens
