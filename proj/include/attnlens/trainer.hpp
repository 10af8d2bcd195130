#pragma once

#include "corpus.hpp"
#include "lens.hpp"
#include "model_io.hpp"
#include "objective.hpp"
#include "optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace attnlens {

struct train_config {
  std::int64_t steps = 2000;
  int batch_size = 16;
  int seq_len = 64;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  position_policy policy = position_policy::last_position;
  init_mode init = init_mode::warm_start;
  std::int64_t checkpoint_every = 100;
  bool use_bias = false;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (steps < 1) throw input_error("steps must be >= 1");
    if (!(learning_rate >= 0)) throw input_error("learning_rate must be non-negative");
    if (batch_size < 1) throw input_error("batch_size must be >= 1");
    if (seq_len < 1) throw input_error("seq_len must be >= 1");
    if (checkpoint_every < 1) throw input_error("checkpoint_every must be >= 1");
  }

  adam_params adam() const { return {learning_rate, beta1, beta2, epsilon}; }
};

// Batches are drawn from a stream seeded by cfg.seed alone, so every head of a
// layer sees the same batches; the random init seed is derived per head.
inline std::uint64_t lens_init_seed(std::uint64_t seed, int layer, int head) {
  return mix_seed(mix_seed(seed, static_cast<std::uint64_t>(layer)), static_cast<std::uint64_t>(head));
}
inline std::uint64_t lens_batch_seed(std::uint64_t seed) { return mix_seed(seed, 0x62617463ull); }

struct loss_record {
  std::int64_t step = 0;  // steps completed at the end of the interval
  double mean_loss = 0;
  friend bool operator==(const loss_record&, const loss_record&) = default;
};

// Complete training state for one lens: enough to resume bit-exactly.
struct lens_checkpoint {
  int format_version = 1;
  model_config model;
  train_config config;
  attnlens::lens lens;
  matrixf adam_m, adam_v;
  std::optional<matrixf> adam_m_bias, adam_v_bias;
  std::int64_t step = 0;
  std::vector<loss_record> history;
  double interval_loss_sum = 0;
  std::int64_t interval_steps = 0;
};

inline constexpr int checkpoint_format_version = 1;
inline constexpr const char* checkpoint_magic = "attnlens-checkpoint";

inline void check_binding(const lens_checkpoint& ckpt, const model_bundle& model) {
  if (ckpt.lens.model_fingerprint != model.fingerprint())
    throw binding_error("checkpoint for lens (" + std::to_string(ckpt.lens.layer) + ", " +
                        std::to_string(ckpt.lens.head) + ") was trained against model " + ckpt.lens.model_fingerprint +
                        ", not " + model.fingerprint());
  check_binding(ckpt.lens, model);
}

// Optimizes a single lens. Holds a reference to the model and corpus.
class lens_trainer {
 public:
  lens_trainer(const model_bundle& model, const corpus& data, int layer, int head, const train_config& cfg)
      : model_(model), corpus_(data) {
    cfg.validate();
    detail::check_index(model.config(), layer, head);
    if (cfg.seq_len > model.config().max_seq_len) throw input_error("seq_len exceeds the model's max_seq_len");
    state_.model = model.config();
    state_.config = cfg;
    state_.lens = init_lens(model, layer, head, cfg.init, lens_init_seed(cfg.seed, layer, head), cfg.use_bias);
    state_.lens.meta.corpus_id = data.id();
    state_.lens.meta.seed = cfg.seed;
    state_.adam_m = matrixf::Zero(state_.lens.weight.rows(), state_.lens.weight.cols());
    state_.adam_v = state_.adam_m;
    if (cfg.use_bias) {
      state_.adam_m_bias = matrixf::Zero(1, state_.lens.weight.cols());
      state_.adam_v_bias = state_.adam_m_bias;
    }
  }

  lens_trainer(const model_bundle& model, const corpus& data, lens_checkpoint ckpt)
      : model_(model), corpus_(data), state_(std::move(ckpt)) {
    check_binding(state_, model);
    if (state_.model != model.config()) throw binding_error("checkpoint model config differs from the loaded model");
    state_.config.validate();
  }

  const lens_checkpoint& state() const { return state_; }
  int layer() const { return state_.lens.layer; }
  int head() const { return state_.lens.head; }
  std::int64_t step() const { return state_.step; }
  bool done() const { return state_.step >= state_.config.steps; }

  // Extends the planned step count, e.g. to continue a finished run.
  void set_total_steps(std::int64_t steps) {
    if (steps < state_.step) throw input_error("total steps cannot be below the completed step count");
    state_.config.steps = steps;
  }

  batch_stream make_stream() const {
    return batch_stream(corpus_.train(), state_.config.seq_len, state_.config.batch_size,
                        lens_batch_seed(state_.config.seed));
  }

  // One Adam update from pre-gathered samples for the current step's batch.
  double apply_step(const lens_samples& samples) {
    auto& l = state_.lens;
    const matrixd w = l.weight.cast<double>();
    std::optional<matrixd> b;
    if (l.bias) b = l.bias->cast<double>();
    matrixd gw, gb;
    const double loss = kl_objective<double>(w, b ? &*b : nullptr, samples.head_outputs.cast<double>(),
                                             samples.target_logits.cast<double>(), &gw, b ? &gb : nullptr);
    if (!std::isfinite(loss))
      throw divergence_error("lens (" + std::to_string(l.layer) + ", " + std::to_string(l.head) +
                                 ") loss is not finite at step " + std::to_string(state_.step),
                             static_cast<std::size_t>(state_.step));
    if (state_.step == 0) l.meta.initial_loss = loss;
    const auto hp = state_.config.adam();
    adam_step(l.weight, gw, state_.adam_m, state_.adam_v, state_.step + 1, hp);
    if (l.bias) adam_step(*l.bias, gb, *state_.adam_m_bias, *state_.adam_v_bias, state_.step + 1, hp);

    ++state_.step;
    state_.interval_loss_sum += loss;
    ++state_.interval_steps;
    if (state_.step % state_.config.checkpoint_every == 0) {
      state_.history.push_back({state_.step, state_.interval_loss_sum / static_cast<double>(state_.interval_steps)});
      state_.interval_loss_sum = 0;
      state_.interval_steps = 0;
    }
    l.meta.steps = state_.step;
    l.meta.final_loss = state_.interval_steps > 0 ? state_.interval_loss_sum / static_cast<double>(state_.interval_steps)
                        : state_.history.empty() ? l.meta.initial_loss
                                                 : state_.history.back().mean_loss;
    return loss;
  }

  // Trains until `until` steps are complete (capped at the configured total).
  void run(std::int64_t until, const std::function<void(const lens_trainer&, double)>& on_step = {}) {
    until = std::min(until, state_.config.steps);
    const auto stream = make_stream();
    const int heads[] = {head()};
    while (state_.step < until) {
      const auto batch = stream.batch(static_cast<std::uint64_t>(state_.step));
      const auto samples = gather_samples(model_, layer(), heads, batch, state_.config.policy);
      const double loss = apply_step(samples.front());
      if (on_step) on_step(*this, loss);
    }
  }

  void run() { run(state_.config.steps); }

 private:
  const model_bundle& model_;
  const corpus& corpus_;
  lens_checkpoint state_;
};

struct train_result {
  attnlens::lens lens;
  std::vector<loss_record> history;
  lens_checkpoint checkpoint;
};

inline train_result train_lens(const model_bundle& model, int layer, int head, const corpus& data,
                               const train_config& cfg) {
  lens_trainer t(model, data, layer, head, cfg);
  t.run();
  return {t.state().lens, t.state().history, t.state()};
}

enum class group_execution {
  shared_forward,  // one forward pass per step feeds every head
  sequential,      // each head trained independently, one after another
  concurrent,      // each head trained independently on its own thread
};

// Trains several heads of one layer. All execution modes give bit-identical
// lenses because heads share the batch stream and never interact.
inline std::vector<train_result> train_layer_group(const model_bundle& model, int layer, const std::vector<int>& heads,
                                                   const corpus& data, const train_config& cfg,
                                                   group_execution mode = group_execution::shared_forward,
                                                   const std::function<void(int head, std::int64_t step, double loss)>&
                                                       on_step = {}) {
  if (heads.empty()) throw input_error("head list is empty");
  cfg.validate();
  for (int h : heads) detail::check_index(model.config(), layer, h);
  for (std::size_t i = 0; i < heads.size(); ++i)
    for (std::size_t j = i + 1; j < heads.size(); ++j)
      if (heads[i] == heads[j]) throw input_error("head " + std::to_string(heads[i]) + " listed twice");

  std::vector<lens_trainer> trainers;
  trainers.reserve(heads.size());
  for (int h : heads) trainers.emplace_back(model, data, layer, h, cfg);

  auto report = [&](const lens_trainer& t, double loss) {
    if (on_step) on_step(t.head(), t.step(), loss);
  };

  switch (mode) {
    case group_execution::shared_forward: {
      const auto stream = trainers.front().make_stream();
      for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const auto batch = stream.batch(static_cast<std::uint64_t>(step));
        const auto samples = gather_samples(model, layer, heads, batch, cfg.policy);
        for (std::size_t k = 0; k < trainers.size(); ++k) report(trainers[k], trainers[k].apply_step(samples[k]));
      }
      break;
    }
    case group_execution::sequential:
      for (auto& t : trainers) t.run(cfg.steps, report);
      break;
    case group_execution::concurrent: {
      std::vector<std::exception_ptr> errors(trainers.size());
      std::vector<std::thread> threads;
      for (std::size_t k = 0; k < trainers.size(); ++k)
        threads.emplace_back([&, k] {
          try {
            trainers[k].run(cfg.steps);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        });
      for (auto& th : threads) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
      break;
    }
  }

  std::vector<train_result> out;
  for (auto& t : trainers) out.push_back({t.state().lens, t.state().history, t.state()});
  return out;
}

// --- checkpoint persistence -------------------------------------------------

namespace detail {

inline const char* to_string(position_policy p) {
  return p == position_policy::last_position ? "last" : "all";
}
inline position_policy parse_policy(const std::string& s) {
  if (s == "last") return position_policy::last_position;
  if (s == "all") return position_policy::all_positions;
  throw corrupt_file_error("unknown position policy '" + s + "'");
}
inline const char* to_string(init_mode m) { return m == init_mode::warm_start ? "warm" : "random"; }
inline init_mode parse_init(const std::string& s) {
  if (s == "warm") return init_mode::warm_start;
  if (s == "random") return init_mode::random;
  throw corrupt_file_error("unknown init mode '" + s + "'");
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const lens_checkpoint& ck) {
  out << checkpoint_magic << ' ' << checkpoint_format_version << '\n';
  io::header h;
  detail::write_config(h, ck.model);
  h.set("layer", ck.lens.layer);
  h.set("head", ck.lens.head);
  h.set("step", ck.step);
  h.set("seed", std::to_string(ck.config.seed));
  h.set("fingerprint", ck.lens.model_fingerprint);
  h.set("corpus", ck.lens.meta.corpus_id.empty() ? "-" : ck.lens.meta.corpus_id);
  h.set("steps", ck.config.steps);
  h.set("batch_size", ck.config.batch_size);
  h.set("seq_len", ck.config.seq_len);
  h.set_real("learning_rate", ck.config.learning_rate);
  h.set_real("beta1", ck.config.beta1);
  h.set_real("beta2", ck.config.beta2);
  h.set_real("epsilon", ck.config.epsilon);
  h.set("position_policy", detail::to_string(ck.config.policy));
  h.set("init", detail::to_string(ck.config.init));
  h.set("checkpoint_every", ck.config.checkpoint_every);
  h.set("bias", ck.lens.bias ? 1 : 0);
  h.set("meta_steps", ck.lens.meta.steps);
  h.set("meta_seed", std::to_string(ck.lens.meta.seed));
  h.set_real("initial_loss", ck.lens.meta.initial_loss);
  h.set_real("final_loss", ck.lens.meta.final_loss);
  h.set_real("interval_loss_sum", ck.interval_loss_sum);
  h.set("interval_steps", ck.interval_steps);
  h.set("history", static_cast<long long>(ck.history.size()));
  h.write(out);
  for (const auto& r : ck.history) out << "loss " << r.step << ' ' << io::format_exact(r.mean_loss) << '\n';
  io::write_tensor(out, "lens.weight", ck.lens.weight);
  io::write_tensor(out, "adam.m", ck.adam_m);
  io::write_tensor(out, "adam.v", ck.adam_v);
  if (ck.lens.bias) {
    io::write_tensor(out, "lens.bias", *ck.lens.bias);
    io::write_tensor(out, "adam.m_bias", *ck.adam_m_bias);
    io::write_tensor(out, "adam.v_bias", *ck.adam_v_bias);
  }
}

inline void save_checkpoint(const lens_checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw input_error(path.string() + ": cannot open for writing");
  write_checkpoint(out, ck);
  if (!out) throw input_error(path.string() + ": write failed");
}

inline lens_checkpoint read_checkpoint(std::istream& in, const std::string& name) {
  detail::read_magic(in, checkpoint_magic, checkpoint_format_version, name);
  const auto h = io::header::read(in);
  lens_checkpoint ck;
  ck.format_version = checkpoint_format_version;
  ck.model = detail::read_config(h);
  auto& l = ck.lens;
  l.layer = static_cast<int>(h.get_int("layer"));
  l.head = static_cast<int>(h.get_int("head"));
  if (l.layer < 0 || l.layer >= ck.model.n_layers || l.head < 0 || l.head >= ck.model.n_heads)
    throw corrupt_file_error(name + ": lens index outside the model");
  ck.step = h.get_int("step");
  ck.config.seed = std::stoull(h.get("seed"));
  l.model_fingerprint = h.get("fingerprint");
  l.meta.corpus_id = h.get("corpus") == "-" ? "" : h.get("corpus");
  ck.config.steps = h.get_int("steps");
  ck.config.batch_size = static_cast<int>(h.get_int("batch_size"));
  ck.config.seq_len = static_cast<int>(h.get_int("seq_len"));
  ck.config.learning_rate = h.get_real("learning_rate");
  ck.config.beta1 = h.get_real("beta1");
  ck.config.beta2 = h.get_real("beta2");
  ck.config.epsilon = h.get_real("epsilon");
  ck.config.policy = detail::parse_policy(h.get("position_policy"));
  ck.config.init = detail::parse_init(h.get("init"));
  ck.config.checkpoint_every = h.get_int("checkpoint_every");
  ck.config.use_bias = h.get_int("bias") != 0;
  l.meta.steps = h.get_int("meta_steps");
  l.meta.seed = std::stoull(h.get("meta_seed"));
  l.meta.initial_loss = h.get_real("initial_loss");
  l.meta.final_loss = h.get_real("final_loss");
  ck.interval_loss_sum = h.get_real("interval_loss_sum");
  ck.interval_steps = h.get_int("interval_steps");
  const auto n_history = h.get_int("history");
  if (n_history < 0) throw corrupt_file_error(name + ": negative history length");
  for (long long i = 0; i < n_history; ++i) {
    std::string line;
    if (!std::getline(in, line)) throw corrupt_file_error(name + ": loss history is truncated");
    std::istringstream rec(line);
    std::string tag, step, loss;
    rec >> tag >> step >> loss;
    if (tag != "loss") throw corrupt_file_error(name + ": bad loss history record");
    ck.history.push_back({io::parse_int(step), io::parse_double(loss)});
  }
  const auto d = ck.model.d_model;
  const auto v = ck.model.vocab_size;
  l.weight.resize(d, v);
  ck.adam_m.resize(d, v);
  ck.adam_v.resize(d, v);
  io::read_tensor(in, "lens.weight", l.weight);
  io::read_tensor(in, "adam.m", ck.adam_m);
  io::read_tensor(in, "adam.v", ck.adam_v);
  if (ck.config.use_bias) {
    l.bias = matrixf(1, v);
    ck.adam_m_bias = matrixf(1, v);
    ck.adam_v_bias = matrixf(1, v);
    io::read_tensor(in, "lens.bias", *l.bias);
    io::read_tensor(in, "adam.m_bias", *ck.adam_m_bias);
    io::read_tensor(in, "adam.v_bias", *ck.adam_v_bias);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw corrupt_file_error(name + ": trailing bytes");
  return ck;
}

inline lens_checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  try {
    return read_checkpoint(in, path.string());
  } catch (const std::invalid_argument&) {
    throw corrupt_file_error(path.string() + ": malformed header value");
  } catch (const std::out_of_range&) {
    throw corrupt_file_error(path.string() + ": malformed header value");
  }
}

// Loads and verifies the checkpoint belongs to `model`.
inline lens_checkpoint load_checkpoint(const std::filesystem::path& path, const model_bundle& model) {
  auto ck = load_checkpoint(path);
  check_binding(ck, model);
  return ck;
}

inline std::string lens_file_name(int layer, int head) {
  return "layer" + std::to_string(layer) + "_head" + std::to_string(head) + ".lens";
}

// Appends loss records not already present in the log ("<step> <mean_loss>" lines).
inline void append_loss_log(const std::filesystem::path& path, const std::vector<loss_record>& history) {
  std::int64_t last = -1;
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      last = std::max<std::int64_t>(last, io::parse_int(std::string_view(line).substr(0, line.find(' '))));
    }
  }
  std::ofstream out(path, std::ios::app);
  if (last < 0) out << "# step mean_loss\n";
  for (const auto& r : history)
    if (r.step > last) out << r.step << ' ' << io::format_exact(r.mean_loss) << '\n';
}

// --- gradient check ---------------------------------------------------------

struct grad_probe {
  Eigen::Index row = 0, col = 0;
  double analytic = 0, numeric = 0, error = 0;
};

struct grad_check_report {
  std::vector<grad_probe> probes;
  double max_error = 0;  // relative, or absolute where both gradients are below abs_floor
  double tolerance = 0;
  bool passed = false;
};

struct grad_check_options {
  double step = 1e-4;
  double abs_floor = 1e-8;
  int batch_size = 2;
  int seq_len = 8;
  std::uint64_t seed = 0;
  position_policy policy = position_policy::all_positions;
  init_mode init = init_mode::random;
  std::optional<matrixd> weight;  // check at this lens matrix instead of an init
};

// Compares the analytic lens gradient against central finite differences at
// `probe_dims` random matrix entries. Runs in double precision on samples
// drawn from random token sequences.
inline grad_check_report grad_check(const model_bundle& model, int layer, int head, int probe_dims, double tolerance,
                                    const grad_check_options& opt = {}) {
  if (probe_dims < 1) throw input_error("probe_dims must be >= 1");
  const auto& c = model.config();
  detail::check_index(c, layer, head);
  const int seq_len = std::min(opt.seq_len, c.max_seq_len);

  std::mt19937_64 rng(mix_seed(opt.seed, 0x67726164ull));
  token_batch batch{seq_len, opt.batch_size, {}};
  for (int i = 0; i < seq_len * opt.batch_size; ++i) batch.ids.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(c.vocab_size)));
  const int heads[] = {head};
  const auto samples = gather_samples(model, layer, heads, batch, opt.policy);
  const matrixd inputs = samples.front().head_outputs.cast<double>();
  const matrixd targets = samples.front().target_logits.cast<double>();

  // random init at unit scale gives non-degenerate lens distributions
  matrixd w(c.d_model, c.vocab_size);
  if (opt.weight) {
    if (opt.weight->rows() != c.d_model || opt.weight->cols() != c.vocab_size)
      throw input_error("grad_check weight has the wrong shape");
    w = *opt.weight;
  } else if (opt.init == init_mode::random) {
    fill_normal(w, 1.0, rng);
  } else {
    w = model.parameters().w_u.cast<double>();
  }
  matrixd grad;
  kl_objective<double>(w, nullptr, inputs, targets, &grad);

  grad_check_report report;
  report.tolerance = tolerance;
  for (int p = 0; p < probe_dims; ++p) {
    grad_probe probe;
    probe.row = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(c.d_model));
    probe.col = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(c.vocab_size));
    const double saved = w(probe.row, probe.col);
    w(probe.row, probe.col) = saved + opt.step;
    const double up = kl_objective<double>(w, nullptr, inputs, targets);
    w(probe.row, probe.col) = saved - opt.step;
    const double down = kl_objective<double>(w, nullptr, inputs, targets);
    w(probe.row, probe.col) = saved;
    probe.analytic = grad(probe.row, probe.col);
    probe.numeric = (up - down) / (2 * opt.step);
    const double scale = std::max(std::abs(probe.analytic), std::abs(probe.numeric));
    const double diff = std::abs(probe.analytic - probe.numeric);
    probe.error = scale < opt.abs_floor ? diff : diff / scale;
    report.max_error = std::max(report.max_error, probe.error);
    report.probes.push_back(probe);
  }
  report.passed = report.max_error < tolerance;
  return report;
}

}  // namespace attnlens
