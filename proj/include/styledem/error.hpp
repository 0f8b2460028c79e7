#pragma once

#include <stdexcept>
#include <string>

namespace styledem {

// Raised when an argument violates an operation's precondition. The CLI maps
// it to a usage-level failure and the service to HTTP 422.
class InvalidInput : public std::invalid_argument {
public:
    explicit InvalidInput(const std::string& what, std::string field = {})
        : std::invalid_argument(what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// I/O and format problems (missing files, corrupt PNG, bad headers).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class... Parts>
[[noreturn]] inline void fail_input(const std::string& field, const Parts&... parts) {
    std::string msg;
    ((msg += parts), ...);
    throw InvalidInput(msg, field);
}

}  // namespace styledem
