#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsir {

using Shape = std::vector<std::int64_t>;

class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class IndexError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Row-major index matrix, used for gather indices and permutation plans.
struct IndexMat {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::int64_t> idx;

  IndexMat() = default;
  IndexMat(std::int64_t r, std::int64_t c)
      : rows(r), cols(c), idx(static_cast<std::size_t>(r * c), 0) {}

  std::int64_t& at(std::int64_t r, std::int64_t c) {
    return idx[static_cast<std::size_t>(r * cols + c)];
  }
  std::int64_t at(std::int64_t r, std::int64_t c) const {
    return idx[static_cast<std::size_t>(r * cols + c)];
  }
};

// Multiply-accumulate accounting. The matmul/linear kernels bump this
// counter; tests and the bench tool read it to cross-check the analytic
// FLOP model against what actually executed.
namespace macs {

inline std::int64_t& counter() {
  thread_local std::int64_t c = 0;
  return c;
}

inline void reset() { counter() = 0; }
inline void add(std::int64_t n) { counter() += n; }
inline std::int64_t total() { return counter(); }

}  // namespace macs

// Live tensor byte tally; feeds the bench peak_bytes column.
namespace memtrack {

inline std::int64_t& live() {
  thread_local std::int64_t b = 0;
  return b;
}

inline std::int64_t& peak() {
  thread_local std::int64_t b = 0;
  return b;
}

inline void on_alloc(std::int64_t n) {
  live() += n;
  if (live() > peak()) peak() = live();
}

inline void on_free(std::int64_t n) { live() -= n; }
inline void reset_peak() { peak() = live(); }

}  // namespace memtrack

}  // namespace rsir
