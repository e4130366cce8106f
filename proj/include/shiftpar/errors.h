#pragma once

#include <stdexcept>
#include <string>

namespace shiftpar {

// Raised when a caller breaks an operation's precondition (shape mismatch,
// out-of-range index, inconsistent collective inputs).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Raised for invalid model/run configuration (e.g. heads not divisible by
// the world size). The CLI maps this to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what)
      : std::invalid_argument(what) {}
};

#define SHIFTPAR_CHECK(cond, msg)                                  \
  do {                                                             \
    if (!(cond)) throw ::shiftpar::ContractError(std::string(msg)); \
  } while (0)

}  // namespace shiftpar
