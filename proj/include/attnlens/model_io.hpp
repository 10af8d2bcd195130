#pragma once

// Model file: text header (format version, config, fingerprint), then one
// named tensor record per weight in canonical order.

#include "model.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace attnlens {

inline constexpr int model_format_version = 1;
inline constexpr const char* model_magic = "attnlens-model";

namespace detail {

inline void write_config(io::header& h, const model_config& c) {
  h.set("n_layers", c.n_layers);
  h.set("n_heads", c.n_heads);
  h.set("d_model", c.d_model);
  h.set("d_head", c.d_head);
  h.set("vocab_size", c.vocab_size);
  h.set("max_seq_len", c.max_seq_len);
  h.set_real("layernorm_epsilon", c.layernorm_epsilon);
}

inline model_config read_config(const io::header& h) {
  model_config c;
  c.n_layers = static_cast<int>(h.get_int("n_layers"));
  c.n_heads = static_cast<int>(h.get_int("n_heads"));
  c.d_model = static_cast<int>(h.get_int("d_model"));
  c.d_head = static_cast<int>(h.get_int("d_head"));
  c.vocab_size = static_cast<int>(h.get_int("vocab_size"));
  c.max_seq_len = static_cast<int>(h.get_int("max_seq_len"));
  c.layernorm_epsilon = h.get_real("layernorm_epsilon");
  try {
    c.validate();
  } catch (const input_error& e) {
    throw corrupt_file_error(std::string("invalid config in header: ") + e.what());
  }
  return c;
}

inline void read_magic(std::istream& in, const char* magic, int version, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw corrupt_file_error(path + ": empty file");
  const std::string prefix = std::string(magic) + " ";
  if (line.rfind(prefix, 0) != 0) throw corrupt_file_error(path + ": not a " + magic + " file");
  const auto got = io::parse_int(std::string_view(line).substr(prefix.size()));
  if (got != version)
    throw version_error(path + ": format version " + std::to_string(got) + ", expected " + std::to_string(version));
}

inline std::ifstream open_for_read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw file_not_found_error(path.string() + ": no such file");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw file_not_found_error(path.string() + ": cannot open");
  return in;
}

}  // namespace detail

inline void save_model(const model_bundle& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw input_error(path.string() + ": cannot open for writing");
  out << model_magic << ' ' << model_format_version << '\n';
  io::header h;
  detail::write_config(h, model.config());
  h.set("fingerprint", model.fingerprint());
  h.write(out);
  model.parameters().visit([&](const std::string& name, const matrixf& m) { io::write_tensor(out, name, m); });
  if (!out) throw input_error(path.string() + ": write failed");
}

inline model_bundle load_model(const std::filesystem::path& path) {
  auto in = detail::open_for_read(path);
  detail::read_magic(in, model_magic, model_format_version, path.string());
  const auto h = io::header::read(in);
  const auto config = detail::read_config(h);
  auto w = weights<float>::zeros(config);
  w.visit([&](const std::string& name, matrixf& m) { io::read_tensor(in, name, m); });
  if (in.peek() != std::char_traits<char>::eof()) throw corrupt_file_error(path.string() + ": trailing bytes");
  const auto stored = h.get("fingerprint");
  const auto actual = model_bundle::compute_fingerprint(config, w);
  if (stored != actual)
    throw fingerprint_error(path.string() + ": fingerprint mismatch (header " + stored + ", content " + actual + ")");
  return model_bundle(config, std::move(w));
}

}  // namespace attnlens
