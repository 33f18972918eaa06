#pragma once

#include <stdexcept>
#include <string>

namespace im2sp {

/// Base of every error thrown by the library.
class error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A caller handed in arguments that violate an operation's preconditions.
class invalid_argument : public error {
public:
  using error::error;
};

/// Malformed, truncated or out-of-range data while decoding a file or stream.
class format_error : public error {
public:
  using error::error;
};

/// Training produced a non-finite value.
class numeric_error : public error {
public:
  using error::error;
};

namespace detail {

inline void require(bool ok, const std::string &what) {
  if (!ok)
    throw invalid_argument(what);
}

} // namespace detail
} // namespace im2sp
