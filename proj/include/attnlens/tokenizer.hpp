#pragma once

// Byte-level tokenizer with frequency-ranked pair merges.
//
// Ids 0..255 are raw bytes, 256/257 are begin/end markers, and every further
// id is a merge of two earlier ids. encode() applies merges in rank order, so
// decode(encode(s)) == s for any byte string.

#include "error.hpp"
#include "io.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace attnlens {

class tokenizer {
 public:
  static constexpr int byte_count = 256;
  static constexpr int bos_id = 256;
  static constexpr int eos_id = 257;
  static constexpr int min_vocab_size = 258;
  static constexpr int format_version = 1;

  tokenizer() : tokenizer(std::vector<std::pair<int, int>>{}) {}

  static tokenizer build(std::span<const std::string> texts, int target_vocab_size) {
    if (target_vocab_size < min_vocab_size)
      throw input_error("target vocab size " + std::to_string(target_vocab_size) + " is below the minimum " +
                        std::to_string(min_vocab_size));
    std::vector<std::vector<int>> seqs;
    for (const auto& t : texts) seqs.push_back(bytes_of(t));

    std::vector<std::pair<int, int>> merges;
    const auto n = static_cast<std::size_t>(target_vocab_size);
    std::vector<std::int64_t> counts(n * n);
    for (int next = min_vocab_size; next < target_vocab_size; ++next) {
      std::fill(counts.begin(), counts.end(), 0);
      for (const auto& s : seqs)
        for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[static_cast<std::size_t>(s[i]) * n + s[i + 1]];
      // highest count wins; ties go to the smallest (left, right) pair
      std::size_t best = 0;
      for (std::size_t k = 1; k < counts.size(); ++k)
        if (counts[k] > counts[best]) best = k;
      if (counts[best] < 2) break;
      const std::pair<int, int> pair{static_cast<int>(best / n), static_cast<int>(best % n)};
      merges.push_back(pair);
      for (auto& s : seqs) apply_merge(s, pair, next);
    }
    return tokenizer(std::move(merges));
  }

  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  std::vector<int> encode(std::string_view text) const {
    auto ids = bytes_of(text);
    for (std::size_t r = 0; r < merges_.size() && ids.size() > 1; ++r)
      apply_merge(ids, merges_[r], min_vocab_size + static_cast<int>(r));
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      check_id(id);
      if (id != bos_id && id != eos_id) out += vocab_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  // Raw bytes of a token; markers render as "<|bos|>" / "<|eos|>".
  std::string token_string(int id) const {
    check_id(id);
    if (id == bos_id) return "<|bos|>";
    if (id == eos_id) return "<|eos|>";
    return vocab_[static_cast<std::size_t>(id)];
  }

  // Id of the token whose text is exactly s, if s encodes to one token.
  std::optional<int> single_token(std::string_view s) const {
    if (s.empty()) return std::nullopt;
    const auto ids = encode(s);
    if (ids.size() != 1) return std::nullopt;
    return ids.front();
  }

  std::string fingerprint() const {
    io::fnv1a h;
    for (const auto& [a, b] : merges_) {
      h.update(&a, sizeof a);
      h.update(&b, sizeof b);
    }
    return io::to_hex(h.digest());
  }

  // Text file: header line, then one line per id: "<id> bytes <hex>",
  // "<id> marker <name>" or "<id> merge <hex> <left> <right>".
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw input_error(path.string() + ": cannot open for writing");
    out << "attnlens-tokenizer " << format_version << '\n' << "vocab_size " << vocab_size() << '\n';
    for (int id = 0; id < vocab_size(); ++id) {
      out << id;
      if (id < byte_count)
        out << " bytes " << hex(vocab_[static_cast<std::size_t>(id)]);
      else if (id == bos_id)
        out << " marker bos";
      else if (id == eos_id)
        out << " marker eos";
      else {
        const auto& [a, b] = merges_[static_cast<std::size_t>(id - min_vocab_size)];
        out << " merge " << hex(vocab_[static_cast<std::size_t>(id)]) << ' ' << a << ' ' << b;
      }
      out << '\n';
    }
    if (!out) throw input_error(path.string() + ": write failed");
  }

  static tokenizer load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw file_not_found_error(path.string() + ": no such file");
    std::ifstream in(path);
    std::string magic;
    long long version = 0, size = 0;
    std::string key;
    if (!(in >> magic >> version) || magic != "attnlens-tokenizer")
      throw corrupt_file_error(path.string() + ": not a tokenizer file");
    if (version != format_version) throw version_error(path.string() + ": unsupported tokenizer version");
    if (!(in >> key >> size) || key != "vocab_size" || size < min_vocab_size)
      throw corrupt_file_error(path.string() + ": bad vocab_size");
    std::vector<std::pair<int, int>> merges;
    for (long long expect = 0; expect < size; ++expect) {
      long long id = -1;
      std::string kind, text;
      if (!(in >> id >> kind) || id != expect) throw corrupt_file_error(path.string() + ": bad vocabulary line");
      if (kind == "merge") {
        int a = -1, b = -1;
        if (!(in >> text >> a >> b) || a < 0 || b < 0 || a >= id || b >= id)
          throw corrupt_file_error(path.string() + ": bad merge line for id " + std::to_string(id));
        merges.emplace_back(a, b);
      } else if (!(in >> text)) {
        throw corrupt_file_error(path.string() + ": truncated vocabulary");
      }
    }
    tokenizer t(std::move(merges));
    return t;
  }

 private:
  explicit tokenizer(std::vector<std::pair<int, int>> merges) : merges_(std::move(merges)) {
    for (int b = 0; b < byte_count; ++b) vocab_.emplace_back(1, static_cast<char>(b));
    vocab_.emplace_back();  // bos
    vocab_.emplace_back();  // eos
    for (const auto& [a, b] : merges_) vocab_.push_back(vocab_[static_cast<std::size_t>(a)] + vocab_[static_cast<std::size_t>(b)]);
  }

  void check_id(int id) const {
    if (id < 0 || id >= vocab_size())
      throw input_error("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size()));
  }

  static std::vector<int> bytes_of(std::string_view s) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (unsigned char c : s) ids.push_back(c);
    return ids;
  }

  static void apply_merge(std::vector<int>& ids, std::pair<int, int> pair, int merged) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (r + 1 < ids.size() && ids[r] == pair.first && ids[r + 1] == pair.second) {
        ids[w++] = merged;
        ++r;
      } else {
        ids[w++] = ids[r];
      }
    }
    ids.resize(w);
  }

  static std::string hex(const std::string& bytes) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : bytes) {
      out += digits[c >> 4];
      out += digits[c & 0xF];
    }
    return out;
  }

  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> vocab_;
};

}  // namespace attnlens
