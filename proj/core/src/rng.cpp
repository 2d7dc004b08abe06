#include "tcpdiff/rng.hpp"

#include <cmath>
#include <sstream>

#include "tcpdiff/error.hpp"

namespace tcpdiff {

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw RangeError("uniform_index over an empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  return u * std::sqrt(-2.0 * std::log(s) / s);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (is.fail()) throw CorruptionError("unreadable random-stream state");
}

}  // namespace tcpdiff
