#pragma once

// attnlens command line: pretrain | train | inspect | scan | transfer | eval | serve.
// Failures print one line "error kind=<kind> message=<json string>" and exit 1;
// usage errors exit 2.

#include "analysis.hpp"
#include "corpus.hpp"
#include "model_io.hpp"
#include "pretrain.hpp"
#include "service.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

namespace attnlens::cli {

namespace fs = std::filesystem;

struct run_config {
  std::string model = "model.bin";
  std::string tokenizer = "tokenizer.txt";
  std::string lens_dir = "lenses";
  std::string corpus;
  std::string host = "127.0.0.1";
  int port = 8080;
};

namespace detail {

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw input_error(std::string(what) + " path is not set");
  if (!fs::exists(path)) throw file_not_found_error(std::string(what) + " '" + path + "' does not exist");
}

inline std::vector<lens> load_lens_dir(const model_bundle& model, const std::string& dir, std::ostream& err) {
  const auto cat = discover_lenses(model, dir);
  for (const auto& [file, reason] : cat.rejected) err << "warning: skipping " << file << " (" << reason << ")\n";
  std::vector<lens> out;
  for (const auto& [key, e] : cat.served) out.push_back(e.lens);
  return out;
}

inline lens find_lens(const model_bundle& model, const std::string& dir, int layer, int head) {
  attnlens::detail::check_index(model.config(), layer, head);
  const auto path = fs::path(dir) / lens_file_name(layer, head);
  if (!fs::exists(path))
    throw file_not_found_error("no trained lens for layer " + std::to_string(layer) + " head " + std::to_string(head) +
                               " in " + dir);
  return load_checkpoint(path, model).lens;
}

inline std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::size_t start = 0;
    while (true) {
      const auto comma = item.find(',', start);
      out.push_back(item.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

inline void print_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << "error kind=" << kind << " message=" << nlohmann::json(message).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)
      << '\n';
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-head lenses: train, inspect and scan per-head vocabulary projections", "attnlens"};
  app.set_config("--config", "", "key = value configuration file");
  app.require_subcommand(1);

  run_config rc;
  auto add_paths = [&](CLI::App* sub, bool lens_dir, bool corpus) {
    sub->add_option("--model", rc.model, "model file")->capture_default_str();
    sub->add_option("--tokenizer", rc.tokenizer, "tokenizer file")->capture_default_str();
    if (lens_dir) sub->add_option("--lens-dir", rc.lens_dir, "lens checkpoint directory")->capture_default_str();
    if (corpus) sub->add_option("--corpus", rc.corpus, "UTF-8 text corpus");
  };

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "train the base model and tokenizer on a corpus");
  model_config mc = model_config::desk();
  std::int64_t pre_steps = 2000;
  std::uint64_t pre_seed = 0;
  pretrain_options pre_opt;
  add_paths(pretrain, false, true);
  pretrain->add_option("--steps", pre_steps)->capture_default_str();
  pretrain->add_option("--seed", pre_seed)->capture_default_str();
  pretrain->add_option("--layers", mc.n_layers)->capture_default_str();
  pretrain->add_option("--heads", mc.n_heads)->capture_default_str();
  pretrain->add_option("--d-model", mc.d_model)->capture_default_str();
  pretrain->add_option("--vocab", mc.vocab_size)->capture_default_str();
  pretrain->add_option("--max-seq-len", mc.max_seq_len)->capture_default_str();
  pretrain->add_option("--batch-size", pre_opt.batch_size)->capture_default_str();
  pretrain->add_option("--seq-len", pre_opt.seq_len)->capture_default_str();
  pretrain->add_option("--lr", pre_opt.learning_rate)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "train lenses for one layer (all heads by default)");
  train_config tc;
  int train_layer = -1;
  std::vector<int> train_heads;
  std::string policy = "last", init = "warm";
  bool resume = false;
  add_paths(train, true, true);
  train->add_option("--layer", train_layer)->required();
  train->add_option("--heads", train_heads, "heads to train (default: all)");
  train->add_option("--steps", tc.steps)->capture_default_str();
  train->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train->add_option("--seq-len", tc.seq_len)->capture_default_str();
  train->add_option("--lr", tc.learning_rate)->capture_default_str();
  train->add_option("--seed", tc.seed)->capture_default_str();
  train->add_option("--policy", policy)->check(CLI::IsMember({"last", "all"}))->capture_default_str();
  train->add_option("--init", init)->check(CLI::IsMember({"warm", "random"}))->capture_default_str();
  train->add_option("--checkpoint-every", tc.checkpoint_every)->capture_default_str();
  train->add_flag("--bias", tc.use_bias, "add a bias vector to the lens");
  train->add_flag("--resume", resume, "continue from checkpoints in the lens directory");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "lens vs baseline top-k for one head");
  int layer = 0, head = 0, k = default_top_k;
  std::optional<int> position;
  std::string prompt, baseline = "layernorm";
  bool as_json = false;
  add_paths(inspect, true, false);
  inspect->add_option("--layer", layer)->required();
  inspect->add_option("--head", head)->required();
  inspect->add_option("--k", k)->capture_default_str();
  inspect->add_option("--prompt", prompt)->required();
  inspect->add_option("--position", position, "token position (default: last; negative counts from the end)");
  inspect->add_option("--baseline", baseline)->check(CLI::IsMember({"layernorm", "raw"}))->capture_default_str();
  inspect->add_flag("--json", as_json);

  // scan
  auto* scan = app.add_subcommand("scan", "sweep every lens's top-k for flagged tokens");
  std::vector<std::string> flagged;
  add_paths(scan, true, false);
  scan->add_option("--prompt", prompt)->required();
  scan->add_option("--flagged", flagged, "flagged token strings (repeat or comma separate)");
  scan->add_option("--k", k)->capture_default_str();
  scan->add_flag("--json", as_json);

  // transfer
  auto* transfer = app.add_subcommand("transfer", "pairwise lens divergence matrix");
  int n_eval = 100, eval_seq_len = 64;
  add_paths(transfer, true, true);
  transfer->add_option("--n-eval", n_eval)->capture_default_str();
  transfer->add_option("--seq-len", eval_seq_len)->capture_default_str();
  transfer->add_flag("--json", as_json);

  // eval
  auto* eval = app.add_subcommand("eval", "lens vs baseline KL to the model output on held-out text");
  add_paths(eval, true, true);
  eval->add_option("--n-eval", n_eval)->capture_default_str();
  eval->add_option("--seq-len", eval_seq_len)->capture_default_str();
  eval->add_flag("--json", as_json);

  // serve
  auto* serve = app.add_subcommand("serve", "start the HTTP API");
  add_paths(serve, true, true);
  serve->add_option("--host", rc.host)->capture_default_str();
  serve->add_option("--port", rc.port)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const bool no_command = app.get_subcommands().empty();
    detail::print_error(err, no_command ? "usage" : "config", e.what());
    if (no_command) {
      err << app.help();
      return 2;
    }
    return 1;
  }

  try {
    if (pretrain->parsed()) {
      detail::require_file(rc.corpus, "corpus");
      mc.d_head = mc.n_heads > 0 ? mc.d_model / mc.n_heads : 0;
      mc.validate();
      const auto text = read_text_file(rc.corpus);
      const std::vector<std::string> texts{text};
      const auto tok = tokenizer::build(texts, mc.vocab_size);
      mc.vocab_size = tok.vocab_size();
      const corpus data(fs::path(rc.corpus).filename().string(), tok.encode(text));
      const auto every = std::max<std::int64_t>(1, pre_steps / 20);
      pre_opt.on_step = [&](std::int64_t step, double loss) {
        if ((step + 1) % every == 0) out << "step " << step + 1 << " loss " << loss << '\n' << std::flush;
      };
      const auto model = pretrain_base_model(mc, data, pre_steps, pre_seed, pre_opt);
      save_model(model, rc.model);
      tok.save(rc.tokenizer);
      const double ce = heldout_cross_entropy(model, data, pre_opt.seq_len, 64);
      out << "model " << rc.model << " fingerprint " << model.fingerprint() << '\n'
          << "heldout_cross_entropy " << ce << " uniform " << std::log(static_cast<double>(mc.vocab_size)) << '\n';
      return 0;
    }

    if (train->parsed()) {
      detail::require_file(rc.model, "model");
      detail::require_file(rc.tokenizer, "tokenizer");
      detail::require_file(rc.corpus, "corpus");
      tc.policy = policy == "last" ? position_policy::last_position : position_policy::all_positions;
      tc.init = init == "warm" ? init_mode::warm_start : init_mode::random;
      tc.validate();
      const auto model = load_model(rc.model);
      const auto& c = model.config();
      if (train_heads.empty())
        for (int h = 0; h < c.n_heads; ++h) train_heads.push_back(h);
      for (int h : train_heads) attnlens::detail::check_index(c, train_layer, h);
      const auto tok = tokenizer::load(rc.tokenizer);
      const auto data = load_text_corpus(rc.corpus, tok);
      fs::create_directories(rc.lens_dir);

      std::vector<lens_trainer> trainers;
      for (int h : train_heads) {
        const auto path = fs::path(rc.lens_dir) / lens_file_name(train_layer, h);
        if (resume && fs::exists(path)) {
          auto ck = load_checkpoint(path, model);
          const auto& p = ck.config;
          if (p.seed != tc.seed || p.batch_size != tc.batch_size || p.seq_len != tc.seq_len || p.policy != tc.policy)
            throw input_error(path.string() + " was trained with a different batch configuration");
          trainers.emplace_back(model, data, std::move(ck));
          trainers.back().set_total_steps(std::max(tc.steps, trainers.back().step()));
        } else {
          trainers.emplace_back(model, data, train_layer, h, tc);
        }
      }
      auto save = [&](const lens_trainer& t) {
        const auto base = fs::path(rc.lens_dir) / lens_file_name(t.layer(), t.head());
        save_checkpoint(t.state(), base);
        append_loss_log(fs::path(base.string() + ".loss.log"), t.state().history);
      };
      const auto stream = trainers.front().make_stream();
      while (true) {
        std::int64_t step = -1;
        for (const auto& t : trainers)
          if (!t.done() && (step < 0 || t.step() < step)) step = t.step();
        if (step < 0) break;
        std::vector<int> heads;
        std::vector<lens_trainer*> active;
        for (auto& t : trainers)
          if (!t.done() && t.step() == step) {
            heads.push_back(t.head());
            active.push_back(&t);
          }
        const auto samples = gather_samples(model, train_layer, heads, stream.batch(static_cast<std::uint64_t>(step)), tc.policy);
        for (std::size_t i = 0; i < active.size(); ++i) {
          active[i]->apply_step(samples[i]);
          if (active[i]->step() % tc.checkpoint_every == 0) {
            save(*active[i]);
            out << "layer " << train_layer << " head " << active[i]->head() << " step " << active[i]->step()
                << " loss " << active[i]->state().history.back().mean_loss << '\n'
                << std::flush;
          }
        }
      }
      for (const auto& t : trainers) {
        save(t);
        out << "trained layer " << t.layer() << " head " << t.head() << " steps " << t.step() << " initial_loss "
            << t.state().lens.meta.initial_loss << " final_loss " << t.state().lens.meta.final_loss << '\n';
      }
      return 0;
    }

    if (inspect->parsed()) {
      detail::require_file(rc.model, "model");
      detail::require_file(rc.tokenizer, "tokenizer");
      const auto model = load_model(rc.model);
      const auto tok = tokenizer::load(rc.tokenizer);
      const auto l = detail::find_lens(model, rc.lens_dir, layer, head);
      const auto h = inspect_head(model, tok, l, prompt, position, k,
                                  baseline == "raw" ? baseline_variant::raw : baseline_variant::layernorm);
      if (as_json)
        out << to_jsonl("inspect", {to_json(h)});
      else
        out << format_table(h);
      return 0;
    }

    if (scan->parsed()) {
      detail::require_file(rc.model, "model");
      detail::require_file(rc.tokenizer, "tokenizer");
      const auto model = load_model(rc.model);
      const auto tok = tokenizer::load(rc.tokenizer);
      const auto lenses = detail::load_lens_dir(model, rc.lens_dir, err);
      const auto r = scan_prompt(model, tok, lenses, prompt, detail::split_list(flagged), k);
      if (as_json) {
        std::vector<json> records;
        for (const auto& hh : r.heads) {
          json hits = json::array();
          for (const auto& h : hh.hits) hits.push_back({{"token", h.token}, {"token_id", h.token_id}, {"rank", h.rank}});
          records.push_back({{"layer", hh.layer}, {"head", hh.head}, {"hits", hits}});
        }
        records.push_back({{"coverage", {{"heads_scanned", r.heads_scanned}, {"heads_with_hits", r.heads_with_hits},
                                         {"total_hits", r.total_hits}}},
                           {"warnings", r.warnings}});
        out << to_jsonl("scan", records);
      } else {
        out << format_table(r);
      }
      return 0;
    }

    if (transfer->parsed() || eval->parsed()) {
      detail::require_file(rc.model, "model");
      detail::require_file(rc.tokenizer, "tokenizer");
      detail::require_file(rc.corpus, "corpus");
      const auto model = load_model(rc.model);
      const auto tok = tokenizer::load(rc.tokenizer);
      const auto data = load_text_corpus(rc.corpus, tok);
      const auto lenses = detail::load_lens_dir(model, rc.lens_dir, err);
      if (lenses.empty()) throw input_error("no lenses bound to this model in " + rc.lens_dir);
      const auto windows = eval_windows(data.heldout(), std::min(eval_seq_len, model.config().max_seq_len), n_eval);
      if (transfer->parsed()) {
        const auto r = transfer_matrix(model, lenses, windows);
        if (as_json) {
          std::vector<json> records;
          for (const auto& e : r.entries) records.push_back(to_json(e));
          out << to_jsonl("transfer", records);
        } else {
          out << format_table(r);
        }
      } else {
        const auto s = evaluate_lenses(model, lenses, windows);
        if (as_json) {
          std::vector<json> records;
          for (const auto& h : s.heads) records.push_back(to_json(h));
          out << to_jsonl("eval", records);
        } else {
          out << format_table(s);
        }
        out << "summary lens_better=" << s.lens_better << " heads=" << s.heads.size()
            << " fraction=" << s.fraction_better() << '\n';
      }
      return 0;
    }

    if (serve->parsed()) {
      detail::require_file(rc.model, "model");
      detail::require_file(rc.tokenizer, "tokenizer");
      if (!rc.corpus.empty()) detail::require_file(rc.corpus, "corpus");
      const auto model = load_model(rc.model);
      auto tok = tokenizer::load(rc.tokenizer);
      std::optional<corpus> data;
      if (!rc.corpus.empty()) data = load_text_corpus(rc.corpus, tok);
      auto cat = discover_lenses(model, rc.lens_dir);
      for (const auto& [file, reason] : cat.rejected) err << "warning: not serving " << file << " (" << reason << ")\n";
      inspection_service svc(model, std::move(tok), std::move(cat), std::move(data));
      const bool ok = svc.serve(rc.host, rc.port, [&](int port) {
        out << "serving " << svc.lenses().served.size() << " lenses on http://" << rc.host << ':' << port << '\n'
            << std::flush;
      });
      if (!ok) throw input_error("cannot bind " + rc.host + ":" + std::to_string(rc.port));
      return 0;
    }
  } catch (const error& e) {
    detail::print_error(err, e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    detail::print_error(err, "internal", e.what());
    return 1;
  }
  return 2;
}

}  // namespace attnlens::cli
