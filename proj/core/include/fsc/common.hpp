#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fsc {

// Typed failures; the CLI maps them onto process exit codes.
// ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

#define FSC_CHECK(cond, msg)                                        \
    do {                                                            \
        if (!(cond)) throw std::logic_error(std::string("internal: ") + (msg)); \
    } while (0)

inline int64_t idiv_ceil(int64_t a, int64_t b) { return (a + b - 1) / b; }

}  // namespace fsc
