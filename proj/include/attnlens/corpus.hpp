#pragma once

#include "error.hpp"
#include "io.hpp"
#include "tensor.hpp"
#include "tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace attnlens {

// Token ids split into a training prefix and a disjoint held-out suffix.
class corpus {
 public:
  corpus(std::string source, std::vector<int> tokens, double heldout_fraction = 0.1)
      : source_(std::move(source)), tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw input_error("corpus '" + source_ + "' is empty");
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw input_error("heldout_fraction must be in [0, 1)");
    const auto heldout = static_cast<std::size_t>(static_cast<double>(tokens_.size()) * heldout_fraction);
    train_end_ = tokens_.size() - heldout;
  }

  const std::string& source() const { return source_; }
  std::span<const int> tokens() const { return tokens_; }
  std::span<const int> train() const { return std::span<const int>(tokens_).first(train_end_); }
  std::span<const int> heldout() const { return std::span<const int>(tokens_).subspan(train_end_); }

  // "<source>:<hash of token ids>"
  std::string id() const {
    io::fnv1a h;
    h.update(tokens_.data(), tokens_.size() * sizeof(int));
    return source_ + ":" + io::to_hex(h.digest());
  }

 private:
  std::string source_;
  std::vector<int> tokens_;
  std::size_t train_end_ = 0;
};

inline std::string read_text_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw file_not_found_error(path.string() + ": no such file");
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline corpus load_text_corpus(const std::filesystem::path& path, const tokenizer& tok, double heldout_fraction = 0.1) {
  const auto text = read_text_file(path);
  if (text.empty()) throw input_error(path.string() + ": corpus file is empty");
  return corpus(path.filename().string(), tok.encode(text), heldout_fraction);
}

struct token_batch {
  int seq_len = 0;
  int batch_size = 0;
  std::vector<int> ids;  // batch_size * seq_len, row-major

  std::span<const int> sequence(int i) const {
    return std::span<const int>(ids).subspan(static_cast<std::size_t>(i) * seq_len, static_cast<std::size_t>(seq_len));
  }
};

// Random-access stream of fixed-length windows. Batch i is a pure function of
// (tokens, seq_len, batch_size, seed, i), which lets training resume at any step.
// The stream views `tokens`; the owner must outlive it.
class batch_stream {
 public:
  batch_stream(std::span<const int> tokens, int seq_len, int batch_size, std::uint64_t seed)
      : tokens_(tokens), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len < 1) throw input_error("seq_len must be >= 1");
    if (batch_size < 1) throw input_error("batch_size must be >= 1");
    if (tokens.size() < static_cast<std::size_t>(seq_len))
      throw input_error("corpus has " + std::to_string(tokens.size()) + " tokens, fewer than seq_len " +
                        std::to_string(seq_len));
  }

  token_batch batch(std::uint64_t index) const {
    token_batch b{seq_len_, batch_size_, {}};
    b.ids.reserve(static_cast<std::size_t>(seq_len_) * batch_size_);
    std::mt19937_64 rng(mix_seed(seed_, index));
    const std::uint64_t windows = tokens_.size() - static_cast<std::size_t>(seq_len_) + 1;
    for (int s = 0; s < batch_size_; ++s) {
      // multiply-shift keeps the draw independent of the standard library's
      // distribution implementation
      const auto start = static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * windows) >> 64);
      b.ids.insert(b.ids.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(start),
                   tokens_.begin() + static_cast<std::ptrdiff_t>(start + seq_len_));
    }
    return b;
  }

  token_batch next() { return batch(position_++); }
  void seek(std::uint64_t index) { position_ = index; }
  std::uint64_t position() const { return position_; }

 private:
  std::span<const int> tokens_;
  int seq_len_;
  int batch_size_;
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
};

}  // namespace attnlens
