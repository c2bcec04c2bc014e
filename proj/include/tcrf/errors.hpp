#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tcrf {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad argument or violated precondition.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Ungrammatical BIOES sequence; position is the first offending token.
class GrammarError : public Error {
public:
    GrammarError(std::size_t position, const std::string& what)
        : Error("position " + std::to_string(position) + ": " + what), position_(position) {}

    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

// Malformed input file; line is 1-based.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what, const std::string& file = {})
        : Error((file.empty() ? "line " : file + ":") + std::to_string(line) + ": " + what), line_(line), detail_(what) {}

    std::size_t line() const noexcept { return line_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    std::size_t line_;
    std::string detail_;
};

// Loss or gradient went non-finite during training.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace tcrf
