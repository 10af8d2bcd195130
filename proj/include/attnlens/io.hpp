#pragma once

#include "error.hpp"
#include "tensor.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace attnlens::io {

// 64-bit FNV-1a. Used for model fingerprints.
class fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001B3ull;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ull;
};

inline std::string to_hex(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[i] = digits[v & 0xF];
  return out;
}

// Shortest representation that parses back to the identical value.
inline std::string format_exact(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(std::string_view s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw corrupt_file_error("bad number '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw corrupt_file_error("bad integer '" + std::string(s) + "'");
  return v;
}

// Ordered "key value" header terminated by a line "end".
class header {
 public:
  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = std::move(value);
        return;
      }
    entries_.emplace_back(std::move(key), std::move(value));
  }
  void set(std::string key, long long value) { set(std::move(key), std::to_string(value)); }
  void set_real(std::string key, double value) { set(std::move(key), format_exact(value)); }

  bool has(std::string_view key) const {
    for (const auto& e : entries_)
      if (e.first == key) return true;
    return false;
  }
  const std::string& get(std::string_view key) const {
    for (const auto& e : entries_)
      if (e.first == key) return e.second;
    throw corrupt_file_error("header is missing '" + std::string(key) + "'");
  }
  long long get_int(std::string_view key) const { return parse_int(get(key)); }
  double get_real(std::string_view key) const { return parse_double(get(key)); }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  void write(std::ostream& out) const {
    for (const auto& [k, v] : entries_) out << k << ' ' << v << '\n';
    out << "end\n";
  }

  static header read(std::istream& in) {
    header h;
    std::string line;
    while (std::getline(in, line)) {
      if (line == "end") return h;
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0) throw corrupt_file_error("malformed header line");
      h.entries_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    throw corrupt_file_error("header is truncated");
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

inline void write_f32_le(std::ostream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                            static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

inline void read_f32_le(std::istream& in, float* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float)) throw corrupt_file_error("tensor data is truncated");
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char b[4];
      std::memcpy(b, &data[i], 4);
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t(b[3]) << 24);
      data[i] = std::bit_cast<float>(bits);
    }
  }
}

// Named tensor record: "tensor <name> <rows> <cols>\n" then rows*cols LE floats.
inline void write_tensor(std::ostream& out, std::string_view name, const matrixf& m) {
  out << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  write_f32_le(out, m.data(), static_cast<std::size_t>(m.size()));
}

inline void read_tensor(std::istream& in, std::string_view name, matrixf& m) {
  std::string line;
  if (!std::getline(in, line)) throw corrupt_file_error("missing tensor '" + std::string(name) + "'");
  std::istringstream rec(line);
  std::string tag, got;
  long long rows = -1, cols = -1;
  rec >> tag >> got >> rows >> cols;
  if (tag != "tensor" || got != name)
    throw corrupt_file_error("expected tensor '" + std::string(name) + "', found '" + line + "'");
  if (rows != m.rows() || cols != m.cols())
    throw corrupt_file_error("tensor '" + std::string(name) + "' has shape " + std::to_string(rows) + "x" +
                             std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" +
                             std::to_string(m.cols()));
  read_f32_le(in, m.data(), static_cast<std::size_t>(m.size()));
}

}  // namespace attnlens::io
