#pragma once

#include <stdexcept>
#include <string>

namespace petrep {

/// Malformed or inconsistent file contents (sidecars, raw arrays, manifests).
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid run configuration. `key` names the offending JSON path when known.
class ConfigError : public std::runtime_error {
  public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key))
    {}
    [[nodiscard]] const std::string& key() const noexcept { return key_; }

  private:
    std::string key_;
};

/// The measured data cannot be explained by the model (e.g. positive counts on a
/// bin whose expected value is exactly zero).
class ModelError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace petrep
