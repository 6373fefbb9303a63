#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace optimas {

// Base of every error the library throws. Each module derives its own
// typed errors from this so callers can catch narrowly or broadly.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Precondition violated by the caller (bad threshold, empty input, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Error with a file position attached. line is 1-based, 0 when unknown.
class ParseError : public Error {
public:
    ParseError(std::string file, std::size_t line, const std::string& what)
        : Error(format(file, line, what)), file_(std::move(file)), line_(line) {}

    const std::string& file() const noexcept { return file_; }
    std::size_t line() const noexcept { return line_; }

private:
    static std::string format(const std::string& file, std::size_t line, const std::string& what) {
        std::string out = file.empty() ? std::string("<input>") : file;
        if (line > 0) out += ":" + std::to_string(line);
        return out + ": " + what;
    }

    std::string file_;
    std::size_t line_;
};

} // namespace optimas
