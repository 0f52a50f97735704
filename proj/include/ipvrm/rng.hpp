#ifndef IPVRM_RNG_HPP_
#define IPVRM_RNG_HPP_

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace ipvrm {

// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Seeded generator whose draws do not depend on the standard library's
// distribution implementations, so streams are reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  // Draws an index from an (approximately) normalized probability vector.
  int categorical(std::span<const double> probs);

  Rng fork(std::uint64_t stream) { return Rng(derive_seed(next(), stream)); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ipvrm

#endif  // IPVRM_RNG_HPP_
