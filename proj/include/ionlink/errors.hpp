#pragma once

#include <stdexcept>
#include <string>

namespace ionlink {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad arguments or violated preconditions.
struct DomainError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    ConfigError(std::string key, const std::string& what)
        : Error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

// Integrator or fit did not converge.
struct NumericError : Error {
    using Error::Error;
};

// Correlation histogram has no significant peak above background.
struct BackgroundOnlyError : Error {
    BackgroundOnlyError() : Error("background only") {}
};

}  // namespace ionlink
