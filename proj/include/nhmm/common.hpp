// Shared error types, hashing and seeding utilities.

#pragma once

#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nhmm {

// Error taxonomy, mapped to CLI exit codes: usage 1, data/format 2, numeric 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension violations are data errors (bad model/corpus pairing).
struct ShapeError : DataError {
    using DataError::DataError;
};
struct FormatError : DataError {
    using DataError::DataError;
};
struct VocabError : DataError {
    using DataError::DataError;
};

template <class... Args>
std::string msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

// FNV-1a, used for corpus fingerprints, parameter checksums and model file integrity.
struct Fnv1a {
    std::uint64_t state = 1469598103934665603ULL;

    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            state ^= b[i];
            state *= 1099511628211ULL;
        }
    }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        u64(bits);
    }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    std::uint64_t value() const { return state; }
};

// splitmix64; used to derive independent RNG streams from (seed, indices)
// so results do not depend on thread scheduling or evaluation order.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix64(seed);
    for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x51ed2701a3291a1dULL));
    return s;
}

}  // namespace nhmm
