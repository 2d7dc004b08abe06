#include <cmath>

#include "tcpdiff/diffusion.hpp"
#include "tcpdiff/verify.hpp"

int main() {
  const auto s = tcpdiff::diffusion::Schedule::cosine(200);
  tcpdiff::Tensor a({2, 2}, {7, 0, 0, 7}), b({2, 2}, {7, 7, 0, 0});
  const auto c = tcpdiff::verify::contingency(a, b, 6.0);
  return (s.steps == 200 && c.hits == 1 && c.misses == 1) ? 0 : 1;
}
