#pragma once

// HTTP/JSON inspection API. Handlers are plain functions of (state, body) so
// they can be exercised without a socket; serve() binds them to cpp-httplib.

#include "analysis.hpp"
#include "corpus.hpp"
#include "lens.hpp"
#include "model.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"

#include <httplib.h>
#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace attnlens {

struct api_response {
  int status = 200;
  std::string body;
};

struct lens_entry {
  attnlens::lens lens;
  std::string file;
};

// Lenses found in a directory: those bound to the model are served, the rest
// are listed as rejected.
struct lens_catalog {
  std::map<std::pair<int, int>, lens_entry> served;
  std::vector<std::pair<std::string, std::string>> rejected;  // file, reason
};

inline lens_catalog discover_lenses(const model_bundle& model, const std::filesystem::path& dir) {
  lens_catalog cat;
  if (!std::filesystem::is_directory(dir)) throw file_not_found_error(dir.string() + ": not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".lens") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      auto ck = load_checkpoint(f, model);
      auto key = std::make_pair(ck.lens.layer, ck.lens.head);
      cat.served[key] = {std::move(ck.lens), f.filename().string()};
    } catch (const error& e) {
      cat.rejected.emplace_back(f.filename().string(), std::string(e.kind()) + ": " + e.what());
    }
  }
  return cat;
}

class inspection_service {
 public:
  inspection_service(const model_bundle& model, tokenizer tok, lens_catalog lenses,
                     std::optional<corpus> eval_corpus = std::nullopt)
      : model_(model), tok_(std::move(tok)), lenses_(std::move(lenses)), corpus_(std::move(eval_corpus)) {
    if (tok_.vocab_size() > model_.config().vocab_size)
      throw input_error("tokenizer vocabulary is larger than the model vocabulary");
  }

  const lens_catalog& lenses() const { return lenses_; }

  api_response get_model() const {
    const auto& c = model_.config();
    json j = envelope();
    j["config"] = {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"d_model", c.d_model},
                   {"d_head", c.d_head},         {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                   {"layernorm_epsilon", c.layernorm_epsilon}};
    return {200, dump(j)};
  }

  api_response get_lenses() const {
    json j = envelope();
    j["lenses"] = available();
    json rejected = json::array();
    for (const auto& [file, reason] : lenses_.rejected) rejected.push_back({{"file", file}, {"reason", reason}});
    j["rejected"] = rejected;
    return {200, dump(j)};
  }

  api_response post_inspect(const std::string& body) const {
    return guarded([&] {
      const auto req = parse(body);
      const auto prompt = field<std::string>(req, "prompt");
      const int layer = field<int>(req, "layer");
      const int head = field<int>(req, "head");
      const int k = optional_field<int>(req, "k").value_or(default_top_k);
      const auto position = optional_field<int>(req, "position");
      const auto* l = find_lens(layer, head);
      if (!l) return missing_lens(layer, head);
      if (auto bad = check_prompt(prompt)) return *bad;
      if (k < 1 || k > model_.config().vocab_size) return error_response(400, "input", "k out of range");
      const auto h = inspect_head(model_, tok_, *l, prompt, position, k);
      json j = envelope();
      j["prompt"] = prompt;
      j.update(to_json(h));
      return api_response{200, dump(j)};
    });
  }

  api_response post_scan(const std::string& body) const {
    return guarded([&] {
      const auto req = parse(body);
      const auto prompt = field<std::string>(req, "prompt");
      const auto flagged = optional_field<std::vector<std::string>>(req, "flagged_vocab").value_or(std::vector<std::string>{});
      const int k = optional_field<int>(req, "k").value_or(default_top_k);
      if (auto bad = check_prompt(prompt)) return *bad;
      if (k < 1 || k > model_.config().vocab_size) return error_response(400, "input", "k out of range");
      std::vector<lens> ls;
      for (const auto& [key, e] : lenses_.served) ls.push_back(e.lens);
      const auto r = scan_prompt(model_, tok_, ls, prompt, flagged, k);
      json j = envelope();
      j.update(to_json(r));
      return api_response{200, dump(j)};
    });
  }

  api_response post_transfer(const std::string& body) const {
    return guarded([&] {
      const auto req = parse(body);
      const int la = field<int>(req, "layer_a"), ha = field<int>(req, "head_a");
      const int lb = field<int>(req, "layer_b"), hb = field<int>(req, "head_b");
      const int n_eval = optional_field<int>(req, "n_eval").value_or(100);
      if (n_eval < 1 || n_eval > 10000) return error_response(400, "input", "n_eval must be in [1, 10000]");
      const auto* a = find_lens(la, ha);
      if (!a) return missing_lens(la, ha);
      const auto* b = find_lens(lb, hb);
      if (!b) return missing_lens(lb, hb);
      const auto inputs = collect_head_outputs(model_, la, ha, eval_set(n_eval));
      json j = envelope();
      j.update(to_json(transfer_divergence(*a, *b, inputs)));
      return api_response{200, dump(j)};
    });
  }

  // Binds the routes and blocks until stopped.
  bool serve(const std::string& host, int port, const std::function<void(int)>& on_bound = {}) {
    install(server_);
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) return false;
    if (on_bound) on_bound(bound);
    return server_.listen_after_bind();
  }

  void stop() { server_.stop(); }

  void install(httplib::Server& srv) const {
    auto send = [](httplib::Response& res, const api_response& r) {
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
    srv.Get("/v1/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_model()); });
    srv.Get("/v1/lenses", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_lenses()); });
    srv.Post("/v1/inspect",
             [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_inspect(req.body)); });
    srv.Post("/v1/scan",
             [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_scan(req.body)); });
    srv.Post("/v1/transfer",
             [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_transfer(req.body)); });
  }

 private:
  using json = nlohmann::ordered_json;

  struct bad_request : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  json envelope() const { return {{"version", "v1"}, {"model_fingerprint", model_.fingerprint()}}; }

  json available() const {
    json arr = json::array();
    for (const auto& [key, e] : lenses_.served)
      arr.push_back({{"layer", key.first},
                     {"head", key.second},
                     {"file", e.file},
                     {"steps", e.lens.meta.steps},
                     {"seed", e.lens.meta.seed},
                     {"corpus_id", e.lens.meta.corpus_id},
                     {"initial_loss", e.lens.meta.initial_loss},
                     {"final_loss", e.lens.meta.final_loss}});
    return arr;
  }

  api_response error_response(int status, const std::string& kind, const std::string& message) const {
    json j = envelope();
    j["error"] = {{"kind", kind}, {"message", message}};
    return {status, dump(j)};
  }

  api_response missing_lens(int layer, int head) const {
    json j = envelope();
    j["error"] = {{"kind", "not_found"},
                  {"message", "no lens for layer " + std::to_string(layer) + " head " + std::to_string(head)}};
    j["available"] = available();
    return {404, dump(j)};
  }

  std::optional<api_response> check_prompt(const std::string& prompt) const {
    if (prompt.empty()) return error_response(422, "tokenization", "prompt is empty");
    const auto n = tok_.encode(prompt).size();
    if (n > static_cast<std::size_t>(model_.config().max_seq_len))
      return error_response(422, "tokenization", "prompt is " + std::to_string(n) + " tokens, the model accepts " +
                                                     std::to_string(model_.config().max_seq_len));
    return std::nullopt;
  }

  const lens* find_lens(int layer, int head) const {
    const auto it = lenses_.served.find({layer, head});
    return it == lenses_.served.end() ? nullptr : &it->second.lens;
  }

  std::vector<std::vector<int>> eval_set(int n) const {
    const int seq_len = std::min(64, model_.config().max_seq_len);
    if (corpus_ && corpus_->heldout().size() >= static_cast<std::size_t>(seq_len))
      return eval_windows(corpus_->heldout(), seq_len, n);
    // no corpus: fixed pseudo-random token windows
    std::vector<std::vector<int>> out;
    std::mt19937_64 rng(0x7472616e73666572ull);
    for (int i = 0; i < n; ++i) {
      std::vector<int> w;
      for (int t = 0; t < seq_len; ++t) w.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(tok_.vocab_size())));
      out.push_back(std::move(w));
    }
    return out;
  }

  static json parse(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded()) throw bad_request("body is not valid JSON");
    if (!j.is_object()) throw bad_request("body must be a JSON object");
    return j;
  }

  template <class T>
  static T field(const json& j, const char* name) {
    if (!j.contains(name)) throw bad_request(std::string("missing field '") + name + "'");
    try {
      return j.at(name).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw bad_request(std::string("field '") + name + "' has the wrong type");
    }
  }

  template <class T>
  static std::optional<T> optional_field(const json& j, const char* name) {
    if (!j.contains(name) || j.at(name).is_null()) return std::nullopt;
    return field<T>(j, name);
  }

  template <class F>
  api_response guarded(F&& f) const {
    try {
      return f();
    } catch (const bad_request& e) {
      return error_response(400, "bad_request", e.what());
    } catch (const input_error& e) {
      return error_response(400, e.kind(), e.what());
    } catch (const binding_error& e) {
      return error_response(409, e.kind(), e.what());
    } catch (...) {
      return error_response(500, "internal", "internal error");
    }
  }

  const model_bundle& model_;
  tokenizer tok_;
  lens_catalog lenses_;
  std::optional<corpus> corpus_;
  httplib::Server server_;
};

}  // namespace attnlens
