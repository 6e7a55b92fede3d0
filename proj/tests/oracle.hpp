#pragma once

// Independent reference evaluations for tests. Nothing here calls into the
// library's numerical code.

#include <boost/multiprecision/cpp_dec_float.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Big = boost::multiprecision::cpp_dec_float_50;

inline Big big_kl(const std::vector<double>& p, const std::vector<double>& q) {
  Big s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0) continue;
    s += Big(p[i]) * (log(Big(p[i])) - log(Big(q[i])));
  }
  return s;
}

// log of the Hoelder ratio computed through exp/log of each power.
inline Big big_hpd(const std::vector<double>& p, const std::vector<double>& q, const Big& alpha) {
  const Big beta = 1 / (1 - 1 / alpha);
  Big inner = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inner += Big(p[i]) * Big(q[i]);
    a += exp(alpha * log(Big(p[i])));
    b += exp(beta * log(Big(q[i])));
  }
  return log(a) / alpha + log(b) / beta - log(inner);
}

inline Big big_phd(const std::vector<double>& p, const std::vector<double>& q, const Big& alpha, const Big& gamma) {
  const Big beta = 1 / (1 - 1 / alpha);
  Big inner = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Big lp = log(Big(p[i])), lq = log(Big(q[i]));
    inner += exp(gamma / alpha * lp + gamma / beta * lq);
    a += exp(gamma * lp);
    b += exp(gamma * lq);
  }
  return log(a) / alpha + log(b) / beta - log(inner);
}

// Strictly positive random distribution, support 2..16, via std::mt19937.
inline std::vector<double> random_pmf(std::mt19937_64& g, std::size_t n = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (n == 0) n = 2 + static_cast<std::size_t>(g() % 15);
  std::vector<double> w(n);
  double s = 0;
  for (auto& v : w) s += (v = 0.005 + u(g));
  for (auto& v : w) v /= s;
  return w;
}

inline std::vector<double> softmax(const std::vector<double>& z, double tau = 1.0) {
  long double m = z[0];
  for (double v : z) m = std::max<long double>(m, v);
  std::vector<long double> e(z.size());
  long double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (e[i] = std::exp((z[i] - m) / tau));
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<double>(e[i] / s);
  return out;
}

}  // namespace oracle
