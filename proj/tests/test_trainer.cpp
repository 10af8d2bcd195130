#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace attnlens;
using testutil::tiny_config;

namespace {

struct fixture {
  model_bundle model;
  corpus data;
};

fixture small(std::uint64_t seed = 1) {
  const auto c = tiny_config(2, 2, 4, 24, 16);
  return {testutil::noisy_model(c, seed), testutil::random_corpus(4000, 24, seed + 1)};
}

train_config quick(std::int64_t steps) {
  train_config cfg;
  cfg.steps = steps;
  cfg.batch_size = 4;
  cfg.seq_len = 8;
  cfg.checkpoint_every = 10;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  return cfg;
}

std::string serialize(const lens_checkpoint& ck) {
  std::ostringstream out;
  write_checkpoint(out, ck);
  return out.str();
}

}  // namespace

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(train_config{}.validate());
  auto c = train_config{};
  c.steps = 0;
  EXPECT_THROW(c.validate(), input_error);
  c = train_config{};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), input_error);
  c = train_config{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), input_error);
  c = train_config{};
  EXPECT_EQ(c.steps, 2000);
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.policy, position_policy::last_position);
  EXPECT_EQ(c.init, init_mode::warm_start);
  EXPECT_FALSE(c.use_bias);
}

TEST(TrainLens, ZeroLearningRateKeepsInit) {
  auto f = small();
  auto cfg = quick(1);
  cfg.learning_rate = 0;
  for (auto mode : {init_mode::warm_start, init_mode::random}) {
    cfg.init = mode;
    const auto r = train_lens(f.model, 1, 0, f.data, cfg);
    const auto init = init_lens(f.model, 1, 0, mode, lens_init_seed(cfg.seed, 1, 0));
    EXPECT_TRUE(r.lens.weight == init.weight);
    EXPECT_EQ(r.lens.meta.steps, 1);
    EXPECT_EQ(r.lens.meta.initial_loss, r.lens.meta.final_loss);
  }
}

TEST(TrainLens, ToyLossHalvesIn500Steps) {
  const auto c = tiny_config(1, 2, 2, 8, 16);  // d_model 4, vocab 8
  const auto model = testutil::noisy_model(c, 4, 0.8);
  const auto data = testutil::random_corpus(3000, 8, 5);
  auto cfg = quick(500);
  cfg.init = init_mode::random;
  cfg.learning_rate = 1e-2;
  cfg.checkpoint_every = 50;
  const auto r = train_lens(model, 0, 1, data, cfg);
  ASSERT_EQ(r.history.size(), 10u);
  EXPECT_TRUE(std::isfinite(r.lens.meta.initial_loss));
  EXPECT_LT(r.lens.meta.final_loss, 0.5 * r.lens.meta.initial_loss);
  EXPECT_LT(r.history.back().mean_loss, r.history.front().mean_loss);
  EXPECT_EQ(r.lens.meta.final_loss, r.history.back().mean_loss);
}

TEST(TrainLens, WarmStartInitialLossEqualsRawBaselineLoss) {
  const auto model = testutil::noisy_model(model_config::desk(), 6, 0.05);
  const auto data = testutil::random_corpus(5000, 512, 7);
  auto cfg = quick(1);
  cfg.learning_rate = 0;
  const auto r = train_lens(model, 0, 2, data, cfg);
  // oracle: KL of the raw-unembedding projection of each head output, averaged
  lens_trainer t(model, data, 0, 2, cfg);
  const auto batch = t.make_stream().batch(0);
  double sum = 0;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const auto seq = batch.sequence(b);
    const auto fr = forward_with_capture(model, std::vector<int>(seq.begin(), seq.end()), true);
    const auto a = head_contribution(fr, 0, 2, cfg.seq_len - 1);
    sum += kl_divergence(baseline_projection(model, a, baseline_variant::raw), fr.distribution_at(cfg.seq_len - 1));
  }
  EXPECT_NEAR(r.lens.meta.initial_loss, sum / cfg.batch_size, 1e-6);
}

TEST(TrainLens, MetadataAndErrors) {
  auto f = small();
  const auto r = train_lens(f.model, 0, 1, f.data, quick(25));
  EXPECT_EQ(r.lens.layer, 0);
  EXPECT_EQ(r.lens.head, 1);
  EXPECT_EQ(r.lens.model_fingerprint, f.model.fingerprint());
  EXPECT_EQ(r.lens.meta.corpus_id, f.data.id());
  EXPECT_EQ(r.lens.meta.steps, 25);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.history[1].step, 20);
  EXPECT_THROW(train_lens(f.model, 2, 0, f.data, quick(1)), input_error);
  auto too_long = quick(1);
  too_long.seq_len = 17;
  EXPECT_THROW(train_lens(f.model, 0, 0, f.data, too_long), input_error);
}

TEST(TrainLens, NonFiniteLossIsDivergenceWithStep) {
  auto f = small();
  lens_trainer t(f.model, f.data, 0, 0, quick(10));
  const auto stream = t.make_stream();
  const int heads[] = {0};
  for (int i = 0; i < 3; ++i) t.apply_step(gather_samples(f.model, 0, heads, stream.batch(i), position_policy::last_position).front());
  auto samples = gather_samples(f.model, 0, heads, stream.batch(3), position_policy::last_position).front();
  samples.head_outputs(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    t.apply_step(samples);
    FAIL() << "expected divergence_error";
  } catch (const divergence_error& e) {
    EXPECT_EQ(e.step(), 3u);
  }
}

TEST(TrainLens, BiasVariantTrains) {
  auto f = small();
  auto cfg = quick(30);
  cfg.use_bias = true;
  const auto r = train_lens(f.model, 1, 1, f.data, cfg);
  ASSERT_TRUE(r.lens.bias.has_value());
  EXPECT_FALSE(r.lens.bias->isZero());
  EXPECT_LT(r.lens.meta.final_loss, r.lens.meta.initial_loss);
}

TEST(TrainLayerGroup, AllModesIdentical) {
  auto f = small(8);
  auto cfg = quick(40);
  cfg.policy = position_policy::all_positions;
  const std::vector<int> heads{1, 0};
  const auto shared = train_layer_group(f.model, 1, heads, f.data, cfg, group_execution::shared_forward);
  const auto seq = train_layer_group(f.model, 1, heads, f.data, cfg, group_execution::sequential);
  const auto conc = train_layer_group(f.model, 1, heads, f.data, cfg, group_execution::concurrent);
  ASSERT_EQ(shared.size(), 2u);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    EXPECT_EQ(shared[i].lens.head, heads[i]);
    EXPECT_EQ(serialize(shared[i].checkpoint), serialize(seq[i].checkpoint));
    EXPECT_EQ(serialize(shared[i].checkpoint), serialize(conc[i].checkpoint));
  }
  EXPECT_FALSE(shared[0].lens.weight == shared[1].lens.weight);
}

TEST(TrainLayerGroup, SingletonEqualsTrainLens) {
  auto f = small(9);
  const auto group = train_layer_group(f.model, 0, {1}, f.data, quick(30));
  const auto single = train_lens(f.model, 0, 1, f.data, quick(30));
  EXPECT_EQ(serialize(group[0].checkpoint), serialize(single.checkpoint));
}

TEST(TrainLayerGroup, Errors) {
  auto f = small();
  EXPECT_THROW(train_layer_group(f.model, 0, {}, f.data, quick(1)), input_error);
  EXPECT_THROW(train_layer_group(f.model, 0, {0, 0}, f.data, quick(1)), input_error);
  EXPECT_THROW(train_layer_group(f.model, 0, {0, 5}, f.data, quick(1)), input_error);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  testutil::temp_dir dir("ckpt");
  auto f = small();
  for (bool bias : {false, true}) {
    auto cfg = quick(25);
    cfg.use_bias = bias;
    const auto r = train_lens(f.model, 1, 0, f.data, cfg);
    save_checkpoint(r.checkpoint, dir / "a.lens");
    const auto back = load_checkpoint(dir / "a.lens", f.model);
    save_checkpoint(back, dir / "b.lens");
    EXPECT_EQ(testutil::read_bytes(dir / "a.lens"), testutil::read_bytes(dir / "b.lens"));
    EXPECT_TRUE(back.lens.weight == r.lens.weight);
    EXPECT_EQ(back.history, r.history);
    EXPECT_EQ(back.lens.meta.final_loss, r.lens.meta.final_loss);
    EXPECT_EQ(back.lens.bias.has_value(), bias);
  }
}

TEST(Checkpoint, ResumeEqualsUninterrupted) {
  testutil::temp_dir dir("resume");
  auto f = small(10);
  auto cfg = quick(200);
  cfg.checkpoint_every = 30;
  const auto full = train_lens(f.model, 1, 1, f.data, cfg);

  auto half_cfg = cfg;
  half_cfg.steps = 100;
  const auto half = train_lens(f.model, 1, 1, f.data, half_cfg);
  save_checkpoint(half.checkpoint, dir / "h.lens");
  lens_trainer resumed(f.model, f.data, load_checkpoint(dir / "h.lens", f.model));
  EXPECT_EQ(resumed.step(), 100);
  resumed.set_total_steps(200);
  resumed.run();
  EXPECT_TRUE(resumed.state().lens.weight == full.lens.weight);
  EXPECT_TRUE(resumed.state().adam_m == full.checkpoint.adam_m);
  EXPECT_EQ(resumed.state().history, full.history);
  EXPECT_EQ(serialize(resumed.state()), serialize(full.checkpoint));
}

TEST(Checkpoint, DistinctErrors) {
  testutil::temp_dir dir("ckpt_err");
  auto f = small();
  const auto other = testutil::noisy_model(f.model.config(), 77);
  const auto r = train_lens(f.model, 0, 0, f.data, quick(5));
  save_checkpoint(r.checkpoint, dir / "a.lens");
  EXPECT_THROW(load_checkpoint(dir / "a.lens", other), binding_error);
  EXPECT_THROW(lens_trainer(other, f.data, load_checkpoint(dir / "a.lens")), binding_error);
  EXPECT_THROW(load_checkpoint(dir / "nope.lens"), file_not_found_error);

  const auto bytes = testutil::read_bytes(dir / "a.lens");
  std::ofstream(dir / "trunc.lens", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint(dir / "trunc.lens"), corrupt_file_error);
  auto future = bytes;
  future.replace(0, std::string("attnlens-checkpoint 1").size(), "attnlens-checkpoint 2");
  std::ofstream(dir / "future.lens", std::ios::binary) << future;
  EXPECT_THROW(load_checkpoint(dir / "future.lens"), version_error);
  std::ofstream(dir / "junk.lens", std::ios::binary) << "junk";
  EXPECT_THROW(load_checkpoint(dir / "junk.lens"), corrupt_file_error);
}

TEST(Checkpoint, LossLogAppendsOnlyNewRecords) {
  testutil::temp_dir dir("log");
  std::vector<loss_record> h{{10, 1.5}, {20, 1.25}};
  append_loss_log(dir / "l.log", h);
  h.push_back({30, 1.0});
  append_loss_log(dir / "l.log", h);
  append_loss_log(dir / "l.log", h);
  EXPECT_EQ(testutil::read_bytes(dir / "l.log"), "# step mean_loss\n10 1.5\n20 1.25\n30 1\n");
  EXPECT_EQ(lens_file_name(3, 11), "layer3_head11.lens");
}

TEST(GradCheck, PassesOnSmallInstance) {
  const auto model = testutil::noisy_model(tiny_config(1, 2, 2, 6, 8), 12);
  const auto r = grad_check(model, 0, 1, 24, 1e-4);
  EXPECT_EQ(r.probes.size(), 24u);
  EXPECT_TRUE(r.passed) << r.max_error;
  EXPECT_LT(r.max_error, 1e-4);
}

TEST(GradCheck, ZeroToleranceFailsWithReport) {
  const auto model = testutil::noisy_model(tiny_config(1, 2, 2, 6, 8), 12);
  grad_check_report r;
  EXPECT_NO_THROW(r = grad_check(model, 0, 0, 5, 0.0));
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.probes.size(), 5u);
  EXPECT_THROW(grad_check(model, 0, 0, 0, 1e-4), input_error);
  EXPECT_THROW(grad_check(model, 0, 2, 1, 1e-4), input_error);
}

// A vocabulary column with no probability mass under either distribution has
// an exactly zero gradient; the absolute criterion applies there.
TEST(GradCheck, ZeroMassColumnUsesAbsoluteCriterion) {
  const auto c = tiny_config(1, 2, 2, 6, 8);
  auto w = init_weights<float>(c, 13);
  auto& lw = w.layers[0];
  // constant value vectors make every head output the same vector
  lw.w_qkv.middleCols(2 * c.d_model, c.d_model).setZero();
  lw.b_qkv.middleCols(2 * c.d_model, c.d_model).setConstant(1.0f);
  // final layernorm outputs its bias, so column 5 of the targets is -4000
  w.lnf_g.setZero();
  w.lnf_b.setOnes();
  w.w_u.col(5).setConstant(-1000.0f);
  const model_bundle model(c, std::move(w));

  const std::vector<int> tok{1, 2, 3};
  const auto a = head_contribution(forward_with_capture(model, tok, true), 0, 0, 2);
  const Eigen::Map<const Eigen::RowVectorXf> av(a.data(), 4);
  grad_check_options opt;
  opt.weight = matrixd::Ones(4, 6);
  opt.weight->col(5) = -1e4 * av.transpose().cast<double>() / av.cast<double>().squaredNorm();

  const auto r = grad_check(model, 0, 0, 60, 1e-4, opt);
  int zero_col = 0;
  for (const auto& p : r.probes)
    if (p.col == 5) {
      ++zero_col;
      EXPECT_LT(std::abs(p.analytic), 1e-8);
      EXPECT_LT(std::abs(p.numeric), 1e-8);
      EXPECT_EQ(p.error, std::abs(p.analytic - p.numeric));
    }
  EXPECT_GT(zero_col, 0);
  EXPECT_TRUE(r.passed) << r.max_error;
}
