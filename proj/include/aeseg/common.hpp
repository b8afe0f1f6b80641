#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace aeseg {

// Bad inputs, malformed files, violated data invariants. CLI maps this to exit 2.
class data_error : public std::runtime_error {
public:
    explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite losses, activations, or gradients. CLI maps this to exit 3.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// FNV-1a over an explicit byte stream. Used wherever a seed must be a stable
// function of several values (e.g. per-pass MC seeds), so results do not
// depend on std::hash or platform.
class Fnv1a64 {
public:
    Fnv1a64& bytes(const void* data, std::size_t n) {
        auto p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ull;
        }
        return *this;
    }
    Fnv1a64& u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        return bytes(b, 8);
    }
    Fnv1a64& str(const std::string& s) { return bytes(s.data(), s.size()); }
    std::uint64_t value() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t n) {
    return Fnv1a64().u64(base).str(tag).u64(n).value();
}

}  // namespace aeseg
