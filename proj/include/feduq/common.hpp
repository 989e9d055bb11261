#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

namespace feduq {

// Error taxonomy used across the library. The CLI maps these onto named
// exit diagnostics.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& m) : std::runtime_error("DimensionError: " + m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("ConfigError: " + m) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error("ContractError: " + m) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error("DataError: " + m) {}
};
struct AggregationError : std::runtime_error {
    explicit AggregationError(const std::string& m) : std::runtime_error("AggregationError: " + m) {}
};
struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& m) : std::runtime_error("MetricError: " + m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("IoError: " + m) {}
};

// splitmix64; used to derive independent RNG streams from (seed, path...)
// so results do not depend on scheduling or evaluation order.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = splitmix64(base);
    for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p));
    return h;
}

inline std::mt19937_64 make_stream(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
    return std::mt19937_64(derive_seed(base, path));
}

}  // namespace feduq
