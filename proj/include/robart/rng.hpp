#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <variant>
#include <vector>

namespace robart {

/// Philox4x32 with 10 rounds. Counter-based: output is a pure function of
/// (counter, key).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

/// Reproducible random stream.
///
/// The key is the master seed and the upper 64 counter bits hold the stream
/// id, so streams with different ids never share a counter block; each
/// stream has 2^64 blocks (2^65 64-bit outputs) before wrapping. A stream is
/// single-owner: move it between threads, never share it.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t master_seed, std::uint64_t stream_id);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (pos_ >= 4) refill();
    const std::uint64_t hi = buffer_[pos_++];
    const std::uint64_t lo = buffer_[pos_++];
    return (hi << 32) | lo;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  /// Uniform on (0, 1).
  double uniform_open() {
    return (static_cast<double>((*this)() >> 12) + 0.5) * 0x1.0p-52;
  }
  double normal();
  double exponential() { return -std::log1p(-uniform()); }

  /// Independent child stream for a sub-task (component k of a replication).
  /// Deterministic in (seed, stream_id, k) and independent of how much of
  /// this stream has been consumed.
  RngStream child(std::uint64_t k) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int pos_ = 4;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

RngStream derive_stream(std::uint64_t master_seed, std::uint64_t stream_id);

// Distributions -------------------------------------------------------------

enum class Side { Positive, Negative };

struct Exponential { double rate = 1.0; };
struct Normal { double mean = 0.0; double sd = 1.0; };
/// Normal(mean, sd) restricted to (bound, inf) for Positive or (-inf, bound)
/// for Negative.
struct TruncatedNormal { double mean = 0.0; double sd = 1.0; Side side = Side::Positive; double bound = 0.0; };
struct Bernoulli { double p = 0.5; };
struct Categorical { std::vector<double> weights; };
struct Dirichlet { std::vector<double> alpha; };
/// sigma^2 = df * scale / X with X ~ chi^2_df.
struct ScaledInvChiSq { double df = 1.0; double scale = 1.0; };
struct Uniform { double lo = 0.0; double hi = 1.0; };
struct Gamma { double shape = 1.0; double scale = 1.0; };
struct ChiSq { double df = 1.0; };

using DistributionSpec = std::variant<Exponential, Normal, TruncatedNormal, Bernoulli, Categorical,
                                      Dirichlet, ScaledInvChiSq, Uniform, Gamma, ChiSq>;
/// Bernoulli and Categorical yield an int, Dirichlet a vector, the rest a real.
using SampleValue = std::variant<double, int, std::vector<double>>;

/// Throws InvalidParameter naming the offending field.
void validate(const DistributionSpec& spec);
SampleValue sample(RngStream& rng, const DistributionSpec& spec);

// Typed fast paths. They validate their arguments the same way.
double draw(RngStream& rng, const Exponential& d);
double draw(RngStream& rng, const Normal& d);
double draw(RngStream& rng, const TruncatedNormal& d);
int draw(RngStream& rng, const Bernoulli& d);
int draw(RngStream& rng, const Categorical& d);
std::vector<double> draw(RngStream& rng, const Dirichlet& d);
double draw(RngStream& rng, const ScaledInvChiSq& d);
double draw(RngStream& rng, const Uniform& d);
double draw(RngStream& rng, const Gamma& d);
double draw(RngStream& rng, const ChiSq& d);

/// Standard normal truncated to (a, inf); no validation, used in hot loops.
double std_normal_above(RngStream& rng, double a);

/// Categorical index from nonnegative weights that need not be normalized.
int draw_index(RngStream& rng, std::span<const double> weights);

// Normal helpers -------------------------------------------------------------

double std_normal_cdf(double x);
double std_normal_quantile(double p);

}  // namespace robart
