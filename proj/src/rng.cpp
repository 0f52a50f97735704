#include "ipvrm/rng.hpp"

#include <cmath>
#include <numbers>

namespace ipvrm {

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed ^ mix_seed(h));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix_seed(seed ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(engine_() % span);
}

double Rng::normal() {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::categorical(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) total += p;
  const double u = uniform() * total;
  double acc = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = static_cast<int>(i);
    if (u < acc) return static_cast<int>(i);
  }
  return last_positive;
}

}  // namespace ipvrm
