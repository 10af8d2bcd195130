// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include "test_util.hpp"

#include <attnlens/service.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <future>
#include <iostream>
#include <sstream>
#include <thread>

using namespace attnlens;
using njson = nlohmann::json;

namespace {

struct outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int failures = 0;

void report(const std::string& name, const std::function<outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " (" << fmt("%.1f", seconds_since(t0))
            << "s)" << std::endl;
}

std::vector<double> random_probs(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> p(n);
  double s = 0;
  for (auto& v : p) s += (v = u(rng));
  for (auto& v : p) v /= s;
  return p;
}

// The desk pipeline shared by the efficacy, transfer, resume and API checks.
struct desk {
  testutil::temp_dir dir{"acceptance"};
  tokenizer tok;
  std::optional<corpus> data;
  std::optional<model_bundle> model;
  std::vector<train_result> trained;
  double pretrain_seconds = 0, train_seconds = 0;

  void build() {
    const auto text = read_text_file(std::string(ATTNLENS_DATA_DIR) + "/corpus.txt");
    auto c = model_config::desk();
    tok = tokenizer::build(std::vector<std::string>{text}, c.vocab_size);
    c.vocab_size = tok.vocab_size();
    data.emplace("corpus.txt", tok.encode(text));
    auto t0 = std::chrono::steady_clock::now();
    model.emplace(pretrain_base_model(c, *data, 2000, 0));
    pretrain_seconds = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    train_config cfg;  // 2000 steps, warm start, last position
    for (int l = 0; l < c.n_layers; ++l) {
      std::vector<int> heads(c.n_heads);
      std::iota(heads.begin(), heads.end(), 0);
      for (auto& r : train_layer_group(*model, l, heads, *data, cfg)) trained.push_back(std::move(r));
    }
    train_seconds = seconds_since(t0);
  }

  std::vector<lens> lenses() const {
    std::vector<lens> out;
    for (const auto& r : trained) out.push_back(r.lens);
    return out;
  }
};

}  // namespace

int main() {
  report("decomposition", [] {
    const auto base = model_config::desk();
    double worst = 0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
      const auto m = testutil::noisy_model(base, 1000 + trial, 0.05);
      const auto tokens = testutil::random_tokens(4 + trial % 29, base.vocab_size, 5000 + trial);
      const auto r = forward_with_capture(m, tokens, true);
      const auto oracle = testutil::naive_forward(m, tokens);
      for (int l = 0; l < base.n_layers; ++l)
        for (std::size_t p = 0; p < tokens.size(); ++p)
          for (int j = 0; j < base.d_model; ++j) {
            double sum = m.parameters().layers[l].b_o(0, j);
            for (int h = 0; h < base.n_heads; ++h) sum += head_contribution(r, l, h, p)[j];
            worst = std::max(worst, std::abs(sum - oracle.attn_out[l][p][j]));
          }
    }
    return outcome{worst < 1e-5, "100 pairs, max abs error " + fmt("%.3g", worst) + " < 1e-5"};
  });

  report("grad_check", [] {
    const auto m = testutil::noisy_model(testutil::tiny_config(1, 2, 2, 6, 8), 21);
    const auto r = grad_check(m, 0, 1, 24, 1e-4);
    return outcome{r.passed && r.max_error < 1e-4,
                   "d=4 V=6, " + std::to_string(r.probes.size()) + " probes, max rel error " +
                       fmt("%.3g", r.max_error) + " < 1e-4"};
  });

  report("kl_oracle", [] {
    std::mt19937_64 rng(31);
    double worst = 0;
    for (int t = 0; t < 40; ++t) {
      const std::size_t n = 2 + rng() % 9;
      const auto p = random_probs(rng, n), q = random_probs(rng, n);
      double hand = 0;
      for (std::size_t i = 0; i < n; ++i) hand += p[i] * std::log(p[i] / q[i]);
      const double got =
          kl_divergence(token_distribution::from_probabilities(p), token_distribution::from_probabilities(q));
      worst = std::max(worst, std::abs(got - hand));
    }
    bool props = true;
    std::normal_distribution<double> nd(0, 3);
    for (int t = 0; t < 200; ++t) {
      std::vector<double> a(7), b(7);
      for (auto& v : a) v = nd(rng);
      for (auto& v : b) v = nd(rng);
      const auto p = token_distribution::from_logits(a), q = token_distribution::from_logits(b);
      props = props && kl_divergence(p, q) > 0 && kl_divergence(q, p) > 0 && kl_divergence(p, p) == 0;
    }
    return outcome{worst < 1e-9 && props, "40 hand sums, max error " + fmt("%.3g", worst) +
                                              "; 200 nonnegativity/identity cases " + (props ? "hold" : "violated")};
  });

  report("warm_start_equivalence", [] {
    const auto m = testutil::noisy_model(model_config::desk(), 41, 0.05);
    const tokenizer tok;
    std::mt19937_64 rng(42);
    int identical = 0;
    for (int t = 0; t < 50; ++t) {
      const int layer = t % 2, head = t % 4;
      const auto l = init_lens(m, layer, head, init_mode::warm_start, 0);
      matrixf a(1, m.config().d_model);
      fill_normal(a, 0.5, rng);
      const std::span<const float> av(a.data(), static_cast<std::size_t>(a.size()));
      const auto lens_top = top_k_tokens(apply_lens(l, av), tok, 20);
      const auto base_top = top_k_tokens(baseline_projection(m, av, baseline_variant::raw), tok, 20);
      bool same = lens_top.size() == base_top.size();
      for (std::size_t i = 0; same && i < lens_top.size(); ++i)
        same = lens_top[i].token_id == base_top[i].token_id && lens_top[i].logit == base_top[i].logit &&
               lens_top[i].probability == base_top[i].probability;
      identical += same;
    }
    return outcome{identical == 50, std::to_string(identical) + "/50 top-20 reports bit-identical"};
  });

  report("scan", [] {
    const std::string text = read_text_file(std::string(ATTNLENS_DATA_DIR) + "/corpus.txt").substr(0, 30000);
    const auto tok = tokenizer::build(std::vector<std::string>{text}, 300);
    const auto m = testutil::noisy_model(testutil::tiny_config(2, 4, 4, tok.vocab_size(), 32), 51, 0.2);
    const std::string prompt = "the river ran past the mill";
    const auto r = forward_with_capture(m, tok.encode(prompt), true);
    const auto flagged = tok.single_token("Z");
    if (!flagged) return outcome{false, "'Z' is not a single token"};
    std::vector<lens> lenses;
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 4; ++h) {
        const auto a = head_contribution(r, l, h, r.seq_len() - 1);
        const Eigen::Map<const Eigen::RowVectorXf> av(a.data(), static_cast<Eigen::Index>(a.size()));
        auto x = init_lens(m, l, h, init_mode::random, 60 + l * 4 + h);
        // (1, 2) puts 'Z' on top; every other head pushes it to the bottom
        x.weight.col(*flagged) = (l == 1 && h == 2 ? 10.0f : -50.0f) * av.transpose() / av.squaredNorm();
        lenses.push_back(std::move(x));
      }
    const auto hit = scan_prompt(m, tok, lenses, prompt, {"Z"}, 10);
    const auto none = scan_prompt(m, tok, lenses, prompt, {}, 10);
    const bool one = hit.total_hits == 1 && hit.heads.size() == 1 && hit.heads[0].layer == 1 &&
                     hit.heads[0].head == 2 && hit.heads[0].hits.size() == 1 && hit.heads[0].hits[0].rank == 1;
    return outcome{one && none.total_hits == 0, "crafted lens hits=" + std::to_string(hit.total_hits) +
                                                    (one ? " at rank 1" : "") + ", empty vocabulary hits=" +
                                                    std::to_string(none.total_hits)};
  });

  desk d;
  std::string desk_error;
  try {
    std::cout << "building desk model and lenses..." << std::endl;
    d.build();
  } catch (const std::exception& e) {
    desk_error = e.what();
  }
  auto need_desk = [&] {
    if (!desk_error.empty()) throw state_error("desk pipeline failed: " + desk_error);
  };

  report("desk_efficacy", [&] {
    need_desk();
    const auto t0 = std::chrono::steady_clock::now();
    const auto windows = eval_windows(d.data->heldout(), 64, 200);
    const auto sum = evaluate_lenses(*d.model, d.lenses(), windows);
    const double total = d.pretrain_seconds + d.train_seconds + seconds_since(t0);
    int halved = 0;
    std::ostringstream ratios;
    for (const auto& r : d.trained) {
      const double ratio = r.lens.meta.final_loss / r.lens.meta.initial_loss;
      halved += ratio < 0.5;
      ratios << ' ' << fmt("%.3f", ratio);
    }
    const bool better = sum.lens_better >= 6;
    return outcome{better && halved == 8 && total < 45 * 60,
                   "lens better on " + std::to_string(sum.lens_better) + "/8 heads (need >= 6); final/initial loss" +
                       ratios.str() + " (need all < 0.5, " + std::to_string(halved) + "/8); total " +
                       fmt("%.0f", total) + "s < 2700s"};
  });

  report("resume", [&] {
    need_desk();
    train_config cfg;
    cfg.steps = 200;
    cfg.checkpoint_every = 50;
    const auto full = train_lens(*d.model, 1, 2, *d.data, cfg);
    cfg.steps = 100;
    const auto half = train_lens(*d.model, 1, 2, *d.data, cfg);
    save_checkpoint(half.checkpoint, d.dir / "half.lens");
    lens_trainer resumed(*d.model, *d.data, load_checkpoint(d.dir / "half.lens", *d.model));
    resumed.set_total_steps(200);
    resumed.run();
    std::ostringstream a, b;
    write_checkpoint(a, resumed.state());
    write_checkpoint(b, full.checkpoint);
    const bool same = a.str() == b.str() && resumed.state().lens.weight == full.lens.weight;
    return outcome{same, std::string("100 + 100 resumed steps ") + (same ? "bit-identical" : "differ") +
                             " to 200 uninterrupted"};
  });

  report("transfer", [&] {
    need_desk();
    const auto lenses = d.lenses();
    const auto windows = eval_windows(d.data->heldout(), 64, 100);
    double self = 0;
    for (const auto& l : lenses)
      self = std::max(self, std::abs(transfer_divergence(l, l, collect_head_outputs(*d.model, l.layer, l.head, windows)).kl_ab));
    const auto rep = transfer_matrix(*d.model, lenses, windows);
    int finite = 0, same_layer = 0, cross_layer = 0;
    for (const auto& e : rep.entries) {
      finite += std::isfinite(e.kl_ab) && std::isfinite(e.kl_ba) && e.n_eval == 100;
      if (e.layer_a == e.layer_b && e.head_a != e.head_b) ++same_layer;
      if (e.layer_a != e.layer_b) ++cross_layer;
    }
    const bool ok = self < 1e-9 && finite == 64 && same_layer == 24 && cross_layer == 32;
    return outcome{ok, "self KL max " + fmt("%.3g", self) + " < 1e-9; " + std::to_string(finite) +
                           "/64 finite entries over 100 outputs (" + std::to_string(same_layer) + " same-layer, " +
                           std::to_string(cross_layer) + " cross-layer)"};
  });

  report("api_contract", [&] {
    need_desk();
    lens_catalog cat;
    for (const auto& r : d.trained)
      if (r.lens.layer == 0) cat.served[{r.lens.layer, r.lens.head}] = {r.lens, lens_file_name(r.lens.layer, r.lens.head)};
    inspection_service svc(*d.model, d.tok, cat, d.data);
    std::promise<int> bound;
    std::thread server([&] { svc.serve("127.0.0.1", 0, [&](int port) { bound.set_value(port); }); });
    const int port = bound.get_future().get();
    httplib::Client cli("127.0.0.1", port);
    const std::string req = R"({"prompt": "the old man said that", "layer": 0, "head": 2, "k": 7})";
    const auto a = cli.Post("/v1/inspect", req, "application/json");
    const auto b = cli.Post("/v1/inspect", req, "application/json");
    const auto missing = cli.Post("/v1/inspect", R"({"prompt": "the old man", "layer": 1, "head": 3, "k": 7})",
                                  "application/json");
    svc.stop();
    server.join();
    if (!a || !b || !missing) return outcome{false, "request failed"};
    const auto aj = njson::parse(a->body);
    const bool k_ok = a->status == 200 && aj["lens"].size() == 7 && aj["baseline"].size() == 7;
    const bool det = a->body == b->body;
    const auto mj = njson::parse(missing->body);
    const bool nf = missing->status == 404 && mj.contains("available") && mj["available"].size() == 4;
    return outcome{k_ok && det && nf, std::string("k entries per side ") + (k_ok ? "ok" : "wrong") +
                                          ", repeat " + (det ? "identical" : "differs") + ", untrained head " +
                                          std::to_string(missing->status) + (nf ? " with listing" : "")};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
