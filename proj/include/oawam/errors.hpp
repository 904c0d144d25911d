#pragma once

#include <stdexcept>
#include <string>

namespace oawam {

// Bad user input: unknown config keys, out-of-range settings, malformed files.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A module API was called outside its contract (e.g. addr recomputed at t>0).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Non-finite values or failed generation/placement at runtime.
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace oawam
