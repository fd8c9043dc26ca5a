#pragma once

#include <stdexcept>
#include <string>

namespace dtdy {

// Exit-code categories shared between the library and the CLI.
enum class ErrorCode : int {
    usage = 2,
    config = 3,
    io = 4,
    numeric = 5,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
};

inline Error usage_error(const std::string& msg) { return Error(ErrorCode::usage, msg); }
inline Error config_error(const std::string& msg) { return Error(ErrorCode::config, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorCode::io, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorCode::numeric, msg); }

}  // namespace dtdy
