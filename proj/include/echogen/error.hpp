#pragma once

#include <stdexcept>
#include <string>

namespace echogen {

// Every error surfaced by the library carries a short machine-parseable
// category; the CLI prints "error: <category>: <message>".
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const { return category_; }

private:
    std::string category_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct ValueError : Error {
    explicit ValueError(const std::string& m) : Error("value", m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct StateError : Error {
    explicit StateError(const std::string& m) : Error("state", m) {}
};

struct DataError : Error {
    explicit DataError(const std::string& m) : Error("data", m) {}
};

}  // namespace echogen
