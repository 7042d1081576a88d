#include "treediff/rng.hpp"

#include <sstream>

namespace treediff {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

Rng Rng::split(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 1))); }

std::string Rng::state() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_ << ' ' << normal_;
  return os.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream is(state);
  is >> seed_ >> engine_ >> normal_;
}

Rng seed_all(std::uint64_t seed) { return Rng(seed); }

}  // namespace treediff
