#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace madt {

// FNV-1a mix of a root seed and a stream name. All randomness in a run flows
// from one root seed through named sub-streams so comparisons across runs
// share data/init/rollout streams explicitly.
inline uint64_t derive_seed(uint64_t root, std::string_view stream) {
  uint64_t h = 14695981039346656037ull;
  auto mix = [&h](uint64_t byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (int i = 0; i < 8; ++i) mix((root >> (8 * i)) & 0xffu);
  for (unsigned char c : stream) mix(c);
  if (h == 0) h = 0x9e3779b97f4a7c15ull;  // mt19937_64 dislikes seed 0
  return h;
}

// Deterministic generator. The engine is the portable mt19937_64; the
// distributions are hand-rolled because std:: distributions are
// implementation-defined and would break bitwise reproducibility across
// toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // [0, n)
  int uniform_int(int n) {
    // modulo bias is < 2^-40 for desk-scale n; acceptable and portable
    return static_cast<int>(engine_() % static_cast<uint64_t>(n));
  }

  // standard normal via Box-Muller; no cached spare so the draw count
  // per call is fixed
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  Rng substream(std::string_view name) { return Rng(derive_seed(engine_(), name)); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace madt
