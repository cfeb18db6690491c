#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace optrisk {

// Philox4x32 with 10 rounds: a keyed bijection on 128-bit counters.
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter generate(Counter counter, Key key);
};

// Draw sequence determined only by (seed, stream) and the draw position, so
// streams can be handed to any thread in any order.
class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::uint64_t stream);

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    double uniform();  // open interval (0, 1), 53-bit resolution
    double normal();   // Box-Muller, second variate cached
    std::size_t below(std::size_t n);

private:
    Philox4x32::Key key_;
    std::uint64_t stream_;
    std::uint64_t block_ = 0;
    Philox4x32::Counter buffer_{};
    int used_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace optrisk
