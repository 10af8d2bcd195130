#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace attnlens {

// Root of every error the library throws. kind() is a short stable tag used in
// CLI output and HTTP error bodies.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

// Caller supplied an invalid argument (shape, index, empty input, ...).
class input_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "input"; }
};

// Operation requires state the object does not have (e.g. capture absent).
class state_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "state"; }
};

// A lens or checkpoint is bound to a different model fingerprint.
class binding_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "binding"; }
};

// Non-finite loss or an undefined divergence.
class divergence_error : public error {
 public:
  divergence_error(const std::string& what, std::size_t step = 0)
      : error(what), step_(step) {}
  const char* kind() const noexcept override { return "divergence"; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class file_not_found_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "not_found"; }
};

class corrupt_file_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "corrupt"; }
};

class version_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "version"; }
};

// Stored fingerprint does not match the content it was computed over.
class fingerprint_error : public error {
 public:
  using error::error;
  const char* kind() const noexcept override { return "fingerprint"; }
};

}  // namespace attnlens
