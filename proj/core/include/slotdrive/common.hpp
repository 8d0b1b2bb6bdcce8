#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace slotdrive {

// Typed errors. Config/usage mistakes derive from ConfigError, runtime
// failures from RuntimeError; the CLI maps them to exit codes 2 and 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RuntimeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeMismatch : ConfigError { using ConfigError::ConfigError; };
struct IndexOutOfRange : ConfigError { using ConfigError::ConfigError; };
struct ModeMismatch : ConfigError { using ConfigError::ConfigError; };
struct VocabOverflow : ConfigError { using ConfigError::ConfigError; };
struct OverlappingBlocks : ConfigError { using ConfigError::ConfigError; };
struct RolloutModeUnavailable : ConfigError { using ConfigError::ConfigError; };
struct MissingPerceptionCheckpoint : ConfigError { using ConfigError::ConfigError; };

struct InsufficientData : RuntimeError { using RuntimeError::RuntimeError; };
struct Unfitted : RuntimeError { using RuntimeError::RuntimeError; };
struct UntrainedModel : RuntimeError { using RuntimeError::RuntimeError; };
struct RouteExhausted : RuntimeError { using RuntimeError::RuntimeError; };
struct DivergenceError : RuntimeError { using RuntimeError::RuntimeError; };
struct IoError : RuntimeError { using RuntimeError::RuntimeError; };

namespace detail {
template <typename E>
[[noreturn]] inline void throw_msg(const char* cond, const char* file, int line,
                                   const std::string& extra) {
  std::ostringstream os;
  os << file << ":" << line << ": check failed: " << cond;
  if (!extra.empty()) os << " — " << extra;
  throw E(os.str());
}
}  // namespace detail

#define SD_CHECK(cond, Err, msg)                                        \
  do {                                                                  \
    if (!(cond))                                                        \
      ::slotdrive::detail::throw_msg<Err>(#cond, __FILE__, __LINE__,    \
                                          (std::ostringstream{} << msg).str()); \
  } while (0)

#define SD_REQUIRE(cond, msg) SD_CHECK(cond, ::slotdrive::RuntimeError, msg)
#define SD_SHAPE(cond, msg) SD_CHECK(cond, ::slotdrive::ShapeMismatch, msg)

}  // namespace slotdrive
