#include "robart/rng.hpp"

#include <boost/math/special_functions/erf.hpp>
#include <cmath>
#include <numeric>
#include <string>

#include "robart/error.hpp"

namespace robart {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw InvalidParameter(std::string(field) + " " + what);
}

double gamma_unit(RngStream& rng, double shape) {
  if (shape < 1.0) {
    return gamma_unit(rng, shape + 1.0) * std::pow(rng.uniform_open(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

// log of a Gamma(shape, 1) draw; stays finite for tiny shapes.
double log_gamma_unit(RngStream& rng, double shape) {
  if (shape < 1.0) {
    return std::log(gamma_unit(rng, shape + 1.0)) + std::log(rng.uniform_open()) / shape;
  }
  return std::log(gamma_unit(rng, shape));
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

RngStream::RngStream(std::uint64_t master_seed, std::uint64_t stream_id)
    : seed_(master_seed), stream_id_(stream_id) {}

void RngStream::refill() {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
      static_cast<std::uint32_t>(stream_id_), static_cast<std::uint32_t>(stream_id_ >> 32)};
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                            static_cast<std::uint32_t>(seed_ >> 32)};
  buffer_ = philox4x32_10(ctr, key);
  ++block_;
  pos_ = 0;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  double u;
  double v;
  double s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_normal_ = v * f;
  has_spare_ = true;
  return u * f;
}

RngStream RngStream::child(std::uint64_t k) const {
  const std::uint64_t key = splitmix64(seed_ ^ splitmix64(stream_id_ ^ splitmix64(k)));
  return RngStream(key, k);
}

RngStream derive_stream(std::uint64_t master_seed, std::uint64_t stream_id) {
  return RngStream(master_seed, stream_id);
}

// ---------------------------------------------------------------------------

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

double std_normal_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  return -M_SQRT2 * boost::math::erfc_inv(2.0 * p);
}

double std_normal_above(RngStream& rng, double a) {
  if (a > 4.0) {
    const double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
      const double z = a + rng.exponential() / lambda;
      const double diff = z - lambda;
      if (rng.uniform() <= std::exp(-0.5 * diff * diff)) return z;
    }
  }
  if (a < -4.0) {
    for (;;) {
      const double z = rng.normal();
      if (z > a) return z;
    }
  }
  // Inverse CDF on the upper tail: P(Z > x) = U * P(Z > a).
  const double tail = std::erfc(a * M_SQRT1_2);
  return M_SQRT2 * boost::math::erfc_inv(rng.uniform_open() * tail);
}

int draw_index(RngStream& rng, std::span<const double> weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  const double target = rng.uniform() * total;
  double acc = 0.0;
  int last_positive = -1;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] <= 0.0) continue;
    acc += weights[k];
    last_positive = static_cast<int>(k);
    if (target < acc) return last_positive;
  }
  return last_positive;
}

// ---------------------------------------------------------------------------

double draw(RngStream& rng, const Exponential& d) {
  require(d.rate > 0.0 && std::isfinite(d.rate), "Exponential.rate", "must be positive and finite");
  return rng.exponential() / d.rate;
}

double draw(RngStream& rng, const Normal& d) {
  require(std::isfinite(d.mean), "Normal.mean", "must be finite");
  require(d.sd > 0.0 && std::isfinite(d.sd), "Normal.sd", "must be positive and finite");
  return d.mean + d.sd * rng.normal();
}

double draw(RngStream& rng, const TruncatedNormal& d) {
  require(std::isfinite(d.mean), "TruncatedNormal.mean", "must be finite");
  require(d.sd > 0.0 && std::isfinite(d.sd), "TruncatedNormal.sd", "must be positive and finite");
  require(std::isfinite(d.bound), "TruncatedNormal.bound", "must be finite");
  const double a = (d.bound - d.mean) / d.sd;
  if (d.side == Side::Positive) return d.mean + d.sd * std_normal_above(rng, a);
  return d.mean - d.sd * std_normal_above(rng, -a);
}

int draw(RngStream& rng, const Bernoulli& d) {
  require(d.p >= 0.0 && d.p <= 1.0, "Bernoulli.p", "must lie in [0, 1]");
  return rng.uniform() < d.p ? 1 : 0;
}

int draw(RngStream& rng, const Categorical& d) {
  require(!d.weights.empty(), "Categorical.weights", "must be nonempty");
  double total = 0.0;
  for (double w : d.weights) {
    require(w >= 0.0 && std::isfinite(w), "Categorical.weights", "must be nonnegative and finite");
    total += w;
  }
  require(total > 0.0, "Categorical.weights", "must not all be zero");
  return draw_index(rng, d.weights);
}

std::vector<double> draw(RngStream& rng, const Dirichlet& d) {
  require(!d.alpha.empty(), "Dirichlet.alpha", "must be nonempty");
  for (double a : d.alpha) require(a > 0.0 && std::isfinite(a), "Dirichlet.alpha", "entries must be positive");
  std::vector<double> out(d.alpha.size());
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = log_gamma_unit(rng, d.alpha[k]);
    max_log = std::max(max_log, out[k]);
  }
  double total = 0.0;
  for (double& v : out) {
    v = std::exp(v - max_log);
    total += v;
  }
  for (double& v : out) v /= total;
  return out;
}

double draw(RngStream& rng, const ScaledInvChiSq& d) {
  require(d.df > 0.0 && std::isfinite(d.df), "ScaledInvChiSq.df", "must be positive");
  require(d.scale > 0.0 && std::isfinite(d.scale), "ScaledInvChiSq.scale", "must be positive");
  return d.df * d.scale / (2.0 * gamma_unit(rng, 0.5 * d.df));
}

double draw(RngStream& rng, const Uniform& d) {
  require(std::isfinite(d.lo) && std::isfinite(d.hi) && d.lo < d.hi, "Uniform.hi", "must exceed Uniform.lo");
  return d.lo + (d.hi - d.lo) * rng.uniform();
}

double draw(RngStream& rng, const Gamma& d) {
  require(d.shape > 0.0 && std::isfinite(d.shape), "Gamma.shape", "must be positive");
  require(d.scale > 0.0 && std::isfinite(d.scale), "Gamma.scale", "must be positive");
  return d.scale * gamma_unit(rng, d.shape);
}

double draw(RngStream& rng, const ChiSq& d) {
  require(d.df > 0.0 && std::isfinite(d.df), "ChiSq.df", "must be positive");
  return 2.0 * gamma_unit(rng, 0.5 * d.df);
}

void validate(const DistributionSpec& spec) {
  // Drawing from a throwaway stream runs the same checks as the samplers.
  RngStream scratch(0, 0);
  (void)sample(scratch, spec);
}

SampleValue sample(RngStream& rng, const DistributionSpec& spec) {
  return std::visit([&rng](const auto& d) -> SampleValue { return draw(rng, d); }, spec);
}

}  // namespace robart
