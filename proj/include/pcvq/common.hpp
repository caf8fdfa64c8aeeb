#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcvq {

// Error taxonomy shared by all modules. Everything derives from std::runtime_error
// so callers can catch coarsely; the CLI maps these to exit codes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& dims) {
    std::int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
}

inline std::string shape_str(const Shape& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

}  // namespace pcvq
