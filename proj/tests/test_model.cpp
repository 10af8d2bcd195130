#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace attnlens;
using testutil::naive_forward;
using testutil::noisy_model;
using testutil::random_tokens;
using testutil::tiny_config;

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(model_config::desk().validate());
  EXPECT_NO_THROW(model_config::gpt2_small().validate());
  auto c = model_config::desk();
  c.d_model = 65;
  EXPECT_THROW(c.validate(), input_error);
  c = model_config::desk();
  c.vocab_size = 1;
  EXPECT_THROW(c.validate(), input_error);
  c = model_config::desk();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), input_error);
  EXPECT_EQ(model_config::gpt2_small().n_layers, 12);
  EXPECT_EQ(model_config::gpt2_small().n_heads, 12);
}

TEST(Forward, ShapesAndCaptureToggle) {
  const auto m = random_model(model_config::desk(), 1);
  const auto tokens = random_tokens(10, 512, 2);
  const auto with = forward_with_capture(m, tokens, true);
  const auto without = forward_with_capture(m, tokens, false);
  EXPECT_EQ(with.logits.rows(), 10);
  EXPECT_EQ(with.logits.cols(), 512);
  ASSERT_TRUE(with.capture.has_value());
  EXPECT_FALSE(without.capture.has_value());
  EXPECT_EQ(without.logits.cols(), 512);
  EXPECT_EQ(head_contribution(with, 0, 0, 0).size(), 64u);
  EXPECT_EQ(with.distribution_at(3).size(), 512u);
}

TEST(Forward, RejectsBadInput) {
  const auto m = random_model(tiny_config(1, 2, 2, 8, 4), 1);
  const std::vector<int> bad_id{0, 8};
  EXPECT_THROW(forward_with_capture(m, bad_id, false), input_error);
  const std::vector<int> negative{-1};
  EXPECT_THROW(forward_with_capture(m, negative, false), input_error);
  const std::vector<int> too_long{0, 1, 2, 3, 4};
  EXPECT_THROW(forward_with_capture(m, too_long, false), input_error);
  EXPECT_THROW(forward_with_capture(m, std::vector<int>{}, false), input_error);
}

TEST(Forward, ZeroValueProjectionGivesZeroHeads) {
  const auto c = tiny_config(2, 2, 4, 16);
  auto w = init_weights<float>(c, 3);
  for (auto& l : w.layers) {
    l.w_qkv.middleCols(2 * c.d_model, c.d_model).setZero();
    l.b_qkv.middleCols(2 * c.d_model, c.d_model).setZero();
  }
  const model_bundle m(c, std::move(w));
  const std::vector<int> one{5};
  const auto r = forward_with_capture(m, one, true);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h)
      for (float v : head_contribution(r, l, h, 0)) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, Deterministic) {
  const auto m = noisy_model(tiny_config(2, 2, 8, 32), 4);
  const auto tokens = random_tokens(12, 32, 5);
  const auto a = forward_with_capture(m, tokens, true);
  const auto b = forward_with_capture(m, tokens, true);
  EXPECT_TRUE(a.logits == b.logits);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) EXPECT_TRUE(a.capture->head(l, h) == b.capture->head(l, h));
  EXPECT_EQ(head_contribution(a, 1, 1, 3), head_contribution(a, 1, 1, 3));
}

TEST(Forward, MatchesNaiveOracle) {
  const auto m = noisy_model(tiny_config(2, 2, 4, 24), 6);
  const auto tokens = random_tokens(8, 24, 7);
  const auto r = forward_with_capture(m, tokens, false);
  const auto oracle = naive_forward(m, tokens);
  for (std::size_t p = 0; p < tokens.size(); ++p)
    for (int v = 0; v < 24; ++v) EXPECT_NEAR(r.logits(p, v), oracle.logits[p][v], 1e-4);
}

// Property: per-head contributions plus the output bias reconstruct the
// attention block output computed monolithically by the oracle.
TEST(Forward, HeadDecompositionReconstructsAttentionOutput) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const auto c = tiny_config(2, 2, 4, 20);
    const auto m = noisy_model(c, 100 + trial);
    const auto tokens = random_tokens(8, 20, 200 + trial);
    const auto r = forward_with_capture(m, tokens, true);
    const auto oracle = naive_forward(m, tokens);
    double worst = 0;
    for (int l = 0; l < c.n_layers; ++l)
      for (std::size_t p = 0; p < tokens.size(); ++p)
        for (int j = 0; j < c.d_model; ++j) {
          double sum = m.parameters().layers[l].b_o(0, j);
          for (int h = 0; h < c.n_heads; ++h) sum += r.capture->head(l, h)(p, j);
          worst = std::max(worst, std::abs(sum - oracle.attn_out[l][p][j]));
        }
    EXPECT_LT(worst, 1e-5) << "trial " << trial;
  }
}

TEST(HeadContribution, Errors) {
  const auto m = random_model(tiny_config(2, 2, 2, 8), 1);
  const std::vector<int> t{1, 2, 3};
  const auto no_capture = forward_with_capture(m, t, false);
  EXPECT_THROW(head_contribution(no_capture, 0, 0, 0), state_error);
  const auto r = forward_with_capture(m, t, true);
  EXPECT_THROW(head_contribution(r, 0, 2, 0), input_error);
  EXPECT_THROW(head_contribution(r, 2, 0, 0), input_error);
  EXPECT_THROW(head_contribution(r, 0, 0, 3), input_error);
  EXPECT_THROW(head_contribution(r, -1, 0, 0), input_error);
}

// Analytic backprop against central differences, in double precision.
TEST(Backward, MatchesFiniteDifferences) {
  const auto c = tiny_config(2, 2, 3, 7, 6);
  auto w = noisy_model(c, 11, 0.4).parameters().cast<double>();
  const auto tokens = random_tokens(5, 7, 12);
  const auto targets = random_tokens(5, 7, 13);

  auto loss = [&](const weights<double>& ww) {
    sequence_cache<double> cache;
    forward_sequence(c, ww, tokens, cache);
    return next_token_loss<double>(cache.logits, targets, 1.0, nullptr);
  };
  sequence_cache<double> cache;
  forward_sequence(c, w, tokens, cache);
  matrixd dlogits;
  next_token_loss<double>(cache.logits, targets, 1.0, &dlogits);
  auto grads = weights<double>::zeros(c);
  backward_sequence(c, w, cache, dlogits, grads);

  std::vector<std::pair<std::string, matrixd*>> params, gs;
  w.visit([&](const std::string& n, matrixd& m) { params.emplace_back(n, &m); });
  grads.visit([&](const std::string& n, matrixd& m) { gs.emplace_back(n, &m); });
  std::mt19937_64 rng(5);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = *params[t].second;
    for (int probe = 0; probe < 4; ++probe) {
      const auto i = Eigen::Index(rng() % std::uint64_t(p.size()));
      const double saved = p.data()[i];
      p.data()[i] = saved + 1e-5;
      const double up = loss(w);
      p.data()[i] = saved - 1e-5;
      const double down = loss(w);
      p.data()[i] = saved;
      const double numeric = (up - down) / 2e-5;
      const double analytic = gs[t].second->data()[i];
      EXPECT_NEAR(analytic, numeric, 1e-6 + 1e-5 * std::abs(numeric)) << params[t].first << "[" << i << "]";
    }
  }
}

TEST(ModelIo, RoundTripIsBitExact) {
  testutil::temp_dir dir("model");
  const auto m = noisy_model(tiny_config(2, 2, 4, 30), 21);
  save_model(m, dir / "m.bin");
  const auto loaded = load_model(dir / "m.bin");
  EXPECT_EQ(loaded.fingerprint(), m.fingerprint());
  EXPECT_EQ(loaded.config(), m.config());
  const auto tokens = random_tokens(9, 30, 22);
  EXPECT_TRUE(forward_with_capture(m, tokens, false).logits == forward_with_capture(loaded, tokens, false).logits);
  save_model(loaded, dir / "m2.bin");
  EXPECT_EQ(testutil::read_bytes(dir / "m.bin"), testutil::read_bytes(dir / "m2.bin"));
}

TEST(ModelIo, DistinctErrors) {
  testutil::temp_dir dir("model_err");
  EXPECT_THROW(load_model(dir / "missing.bin"), file_not_found_error);

  const auto m = random_model(tiny_config(1, 2, 2, 10), 3);
  save_model(m, dir / "m.bin");
  const auto bytes = testutil::read_bytes(dir / "m.bin");

  std::ofstream(dir / "trunc.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  EXPECT_THROW(load_model(dir / "trunc.bin"), corrupt_file_error);

  std::ofstream(dir / "junk.bin", std::ios::binary) << "hello world\n";
  EXPECT_THROW(load_model(dir / "junk.bin"), corrupt_file_error);

  auto tampered = bytes;
  tampered[tampered.size() - 2] ^= 0x40;
  std::ofstream(dir / "tampered.bin", std::ios::binary) << tampered;
  EXPECT_THROW(load_model(dir / "tampered.bin"), fingerprint_error);

  auto future = bytes;
  future.replace(0, std::string("attnlens-model 1").size(), "attnlens-model 9");
  std::ofstream(dir / "future.bin", std::ios::binary) << future;
  EXPECT_THROW(load_model(dir / "future.bin"), version_error);
}

TEST(ModelBundle, FingerprintTracksContent) {
  const auto c = tiny_config(1, 2, 2, 10);
  const auto a = random_model(c, 1);
  const auto b = random_model(c, 1);
  const auto other = random_model(c, 2);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), other.fingerprint());
}

TEST(Pretrain, ZeroStepsIsSeededInit) {
  const auto c = tiny_config(1, 2, 4, 16);
  const auto data = testutil::random_corpus(2000, 16, 1);
  pretrain_options opt;
  opt.seq_len = 8;
  const auto m = pretrain_base_model(c, data, 0, 9, opt);
  EXPECT_EQ(m.fingerprint(), random_model(c, 9).fingerprint());
}

TEST(Pretrain, DeterministicAndLearns) {
  const auto c = tiny_config(1, 2, 8, 16);
  const auto data = testutil::random_corpus(6000, 16, 2);
  pretrain_options opt;
  opt.seq_len = 16;
  opt.batch_size = 4;
  const auto a = pretrain_base_model(c, data, 150, 3, opt);
  const auto b = pretrain_base_model(c, data, 150, 3, opt);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_LT(heldout_cross_entropy(a, data, 16, 20), std::log(16.0));
}

TEST(Pretrain, RejectsBadInput) {
  const auto c = tiny_config(1, 2, 4, 16);
  const auto data = testutil::random_corpus(500, 16, 1);
  EXPECT_THROW(pretrain_base_model(c, data, -1, 0), input_error);
  EXPECT_THROW(corpus("empty", {}), input_error);
  const corpus wide("wide", std::vector<int>(100, 40));
  EXPECT_THROW(pretrain_base_model(c, wide, 1, 0), input_error);
}
