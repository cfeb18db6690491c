#include "optrisk/random.hpp"

#include <cmath>
#include <numbers>

namespace optrisk {

namespace {

constexpr std::uint32_t philox_m0 = 0xD2511F53u;
constexpr std::uint32_t philox_m1 = 0xCD9E8D57u;
constexpr std::uint32_t philox_w0 = 0x9E3779B9u;
constexpr std::uint32_t philox_w1 = 0xBB67AE85u;

void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(product >> 32);
    lo = static_cast<std::uint32_t>(product);
}

}  // namespace

Philox4x32::Counter Philox4x32::generate(Counter c, Key k) {
    for (int round = 0; round < 10; ++round) {
        if (round > 0) {
            k[0] += philox_w0;
            k[1] += philox_w1;
        }
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(philox_m0, c[0], hi0, lo0);
        mulhilo(philox_m1, c[2], hi1, lo1);
        c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
    return c;
}

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t stream)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}

std::uint32_t RandomStream::next_u32() {
    if (used_ == 4) {
        buffer_ = Philox4x32::generate({static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                                        static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                                       key_);
        ++block_;
        used_ = 0;
    }
    return buffer_[static_cast<std::size_t>(used_++)];
}

std::uint64_t RandomStream::next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
}

double RandomStream::uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RandomStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double radius = std::sqrt(-2.0 * std::log(uniform()));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t RandomStream::below(std::size_t n) {
    const unsigned __int128 product = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::size_t>(product >> 64);
}

}  // namespace optrisk
