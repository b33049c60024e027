#ifndef MEMFCN_COMMON_HPP
#define MEMFCN_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace memfcn {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct DTypeError : std::runtime_error {
  explicit DTypeError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when an in-place ABN reconstruction would divide by a gamma below
// the configured floor.
struct GammaTooSmall : std::runtime_error {
  explicit GammaTooSmall(const std::string& what) : std::runtime_error(what) {}
};

struct InternalError : std::logic_error {
  explicit InternalError(const std::string& what) : std::logic_error(what) {}
};

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void check_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace memfcn

#endif  // MEMFCN_COMMON_HPP
