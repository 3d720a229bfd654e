#pragma once

#include <stdexcept>
#include <string>

namespace cidet {

// Configuration / precondition problems: bad config keys, shape
// mismatches, schedule errors. CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid data content: malformed files, out-of-range boxes,
// invariant violations. CLI exit code 3.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : ValidationError {
  explicit ParseError(const std::string& msg) : ValidationError(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cidet
