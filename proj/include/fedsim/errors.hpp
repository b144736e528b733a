#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Error families. Each family maps to a distinct CLI exit code.
enum class ErrorKind {
  Config = 2,     // bad configuration file or option value
  Ingestion = 3,  // dataset files missing, truncated, or malformed
  Privacy = 4,    // privacy budget violations
  Numeric = 5,    // non-finite values in model arithmetic
  Protocol = 6,   // federation protocol violations (incl. share-policy caps)
  Domain = 7,     // precondition violations: shapes, indices, infeasible specs
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline Error config_error(const std::string& msg) { return Error(ErrorKind::Config, msg); }
inline Error ingestion_error(const std::string& msg) { return Error(ErrorKind::Ingestion, msg); }
inline Error privacy_error(const std::string& msg) { return Error(ErrorKind::Privacy, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::Numeric, msg); }
inline Error protocol_error(const std::string& msg) { return Error(ErrorKind::Protocol, msg); }
inline Error domain_error(const std::string& msg) { return Error(ErrorKind::Domain, msg); }

}  // namespace fedsim
