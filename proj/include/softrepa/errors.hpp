#pragma once

#include <stdexcept>
#include <string>

namespace softrepa {

// Error taxonomy. Every throwing path in the library uses one of these so the
// CLI can map failure classes onto distinct exit codes.

struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error("shape: " + msg) {}
};

struct domain_error : std::runtime_error {
  explicit domain_error(const std::string& msg) : std::runtime_error("domain: " + msg) {}
};

// Violated API precondition (bad argument combination, wrong state).
struct contract_error : std::runtime_error {
  explicit contract_error(const std::string& msg) : std::runtime_error("contract: " + msg) {}
};

// Numerically ill-posed request, e.g. velocity recovery at t ~ 0.
struct singularity_error : std::runtime_error {
  explicit singularity_error(const std::string& msg) : std::runtime_error("singularity: " + msg) {}
};

// Missing or unreadable file.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error("io: " + msg) {}
};

// Present but malformed artifact (bad magic, version, checksum, truncation).
struct format_error : std::runtime_error {
  explicit format_error(const std::string& msg) : std::runtime_error("format: " + msg) {}
};

// Unknown key or ill-typed value in a run configuration.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error("config: " + msg) {}
};

template <class E = contract_error>
inline void check(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace softrepa
