#pragma once

#include <stdexcept>
#include <string>

namespace mpgat {

// Bad user-supplied inputs: malformed files, inconsistent configuration,
// out-of-range values. The CLI maps this to its validation exit code,
// separate from usage errors and runtime failures.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mpgat
