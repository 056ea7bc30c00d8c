#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <boost/math/distributions/beta.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/exponential.hpp>
#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <numbers>
#include <set>

#include "robart/error.hpp"
#include "robart/rng.hpp"
#include "test_support.hpp"

using namespace robart;
using robart::testing::ks_test;

namespace {

constexpr int kKsDraws = 100000;
constexpr double kKsLevel = 1e-3;

template <class Dist>
std::vector<double> draws_of(RngStream& rng, const Dist& d, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = draw(rng, d);
  return out;
}

}  // namespace

TEST_CASE("philox known-answer vectors") {
  using A4 = std::array<std::uint32_t, 4>;
  CHECK(philox4x32_10({0, 0, 0, 0}, {0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(philox4x32_10({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(philox4x32_10({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("streams are reproducible and separated") {
  auto a = derive_stream(42, 0);
  auto b = derive_stream(42, 0);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());

  auto c = derive_stream(42, 0);
  auto d = derive_stream(42, 1);
  CHECK(c.uniform() != d.uniform());

  auto e = derive_stream(43, 0);
  auto f = derive_stream(42, 0);
  CHECK(e() != f());
}

TEST_CASE("golden first uniform of stream (42, 7)") {
  auto s = derive_stream(42, 7);
  const double u = s.uniform();
  CHECK(u >= 0.0);
  CHECK(u < 1.0);
  CHECK(u == 0.40598196836556633);
  auto t = derive_stream(42, 7);
  CHECK(t() == 7489045468980449484ULL);
}

TEST_CASE("child streams ignore parent consumption") {
  auto p = derive_stream(9, 3);
  auto c1 = p.child(4);
  for (int i = 0; i < 1000; ++i) p();
  auto c2 = p.child(4);
  for (int i = 0; i < 50; ++i) CHECK(c1() == c2());
  CHECK(p.child(4)() != p.child(5)());
  CHECK(derive_stream(9, 3).child(4)() != derive_stream(9, 4).child(4)());
}

TEST_CASE("no repeated outputs across nearby streams") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t id = 0; id < 64; ++id) {
    auto s = derive_stream(1, id);
    for (int i = 0; i < 256; ++i) seen.insert(s());
  }
  CHECK(seen.size() == 64u * 256u);
}

TEST_CASE("uniform ranges") {
  auto rng = derive_stream(5, 0);
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    const double v = rng.uniform_open();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(v > 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("exponential mean over a million draws") {
  auto rng = derive_stream(11, 0);
  double s = 0.0;
  for (int i = 0; i < 1000000; ++i) s += draw(rng, Exponential{1.0});
  CHECK(std::abs(s / 1e6 - 1.0) < 0.005);
}

TEST_CASE("positive half-normal mean") {
  auto rng = derive_stream(11, 1);
  double s = 0.0;
  for (int i = 0; i < 1000000; ++i) {
    const double x = draw(rng, TruncatedNormal{0.0, 1.0, Side::Positive, 0.0});
    REQUIRE(x > 0.0);
    s += x;
  }
  CHECK(std::abs(s / 1e6 - std::sqrt(2.0 / std::numbers::pi)) < 0.005);
}

TEST_CASE("continuous samplers pass Kolmogorov-Smirnov") {
  namespace bm = boost::math;
  auto rng = derive_stream(2024, 0);

  SUBCASE("exponential") {
    const bm::exponential_distribution<> ref(2.5);
    auto x = draws_of(rng, Exponential{2.5}, kKsDraws);
    CHECK(ks_test(x, [&](double v) { return bm::cdf(ref, v); }).p_value > kKsLevel);
  }
  SUBCASE("normal") {
    const bm::normal_distribution<> ref(-1.0, 3.0);
    auto x = draws_of(rng, Normal{-1.0, 3.0}, kKsDraws);
    CHECK(ks_test(x, [&](double v) { return bm::cdf(ref, v); }).p_value > kKsLevel);
  }
  SUBCASE("uniform") {
    auto x = draws_of(rng, Uniform{-2.0, 5.0}, kKsDraws);
    CHECK(ks_test(x, [](double v) { return (v + 2.0) / 7.0; }).p_value > kKsLevel);
  }
  SUBCASE("gamma") {
    for (double shape : {0.3, 1.0, 4.5}) {
      const bm::gamma_distribution<> ref(shape, 2.0);
      auto x = draws_of(rng, Gamma{shape, 2.0}, kKsDraws);
      CHECK(ks_test(x, [&](double v) { return bm::cdf(ref, v); }).p_value > kKsLevel);
    }
  }
  SUBCASE("chi-square") {
    const bm::chi_squared_distribution<> ref(3.0);
    auto x = draws_of(rng, ChiSq{3.0}, kKsDraws);
    CHECK(ks_test(x, [&](double v) { return bm::cdf(ref, v); }).p_value > kKsLevel);
  }
  SUBCASE("scaled inverse chi-square") {
    const double df = 5.0, scale = 0.7;
    const bm::chi_squared_distribution<> ref(df);
    auto x = draws_of(rng, ScaledInvChiSq{df, scale}, kKsDraws);
    for (auto& v : x) v = df * scale / v;
    CHECK(ks_test(x, [&](double v) { return bm::cdf(ref, v); }).p_value > kKsLevel);
  }
}

TEST_CASE("truncated normal matches the conditional CDF in body and tail") {
  namespace bm = boost::math;
  auto rng = derive_stream(2024, 1);
  struct Case {
    double mean, sd;
    Side side;
    double bound;
  };
  // bounds within and beyond four sd of the mean
  for (const Case c : {Case{0.0, 1.0, Side::Positive, 0.0}, Case{1.0, 2.0, Side::Positive, -1.5},
                       Case{0.0, 1.0, Side::Positive, 5.5}, Case{0.5, 1.0, Side::Negative, 0.2},
                       Case{0.0, 1.0, Side::Negative, -6.0}, Case{-3.0, 0.5, Side::Negative, -3.5}}) {
    const bm::normal_distribution<> ref(c.mean, c.sd);
    auto x = draws_of(rng, TruncatedNormal{c.mean, c.sd, c.side, c.bound}, kKsDraws);
    std::function<double(double)> cdf;
    if (c.side == Side::Positive) {
      for (double v : x) REQUIRE(v > c.bound);
      const double z = (c.bound - c.mean) / c.sd;
      cdf = [=](double v) {
        const double t = (v - c.mean) / c.sd;
        // upper-tail form stays accurate far from the mean
        return 1.0 - std::erfc(t / std::sqrt(2.0)) / std::erfc(z / std::sqrt(2.0));
      };
    } else {
      for (double v : x) REQUIRE(v < c.bound);
      const double z = (c.bound - c.mean) / c.sd;
      cdf = [=](double v) {
        const double t = (v - c.mean) / c.sd;
        return std::erfc(-t / std::sqrt(2.0)) / std::erfc(-z / std::sqrt(2.0));
      };
    }
    CAPTURE(c.bound);
    CHECK(ks_test(x, cdf).p_value > kKsLevel);
  }
}

TEST_CASE("dirichlet draws lie on the simplex with beta marginals") {
  namespace bm = boost::math;
  auto rng = derive_stream(77, 0);
  std::vector<double> first;
  for (int i = 0; i < kKsDraws; ++i) {
    auto w = draw(rng, Dirichlet{{1.0, 1.0, 1.0}});
    double s = 0.0;
    for (double v : w) {
      REQUIRE(v >= 0.0);
      s += v;
    }
    REQUIRE(std::abs(s - 1.0) < 1e-12);
    first.push_back(w[0]);
  }
  const bm::beta_distribution<> ref(1.0, 2.0);
  CHECK(ks_test(first, [&](double v) { return bm::cdf(ref, v); }).p_value > kKsLevel);

  auto w = draw(rng, Dirichlet{{0.01, 0.01, 0.01, 0.01}});
  double s = 0.0;
  for (double v : w) s += v;
  CHECK(std::abs(s - 1.0) < 1e-12);
}

TEST_CASE("discrete samplers match their probabilities") {
  auto rng = derive_stream(78, 0);
  const std::vector<double> weights{1.0, 0.0, 3.0, 6.0};
  std::vector<double> counts(4, 0.0);
  for (int i = 0; i < 100000; ++i) counts[static_cast<std::size_t>(draw(rng, Categorical{weights}))] += 1.0;
  CHECK(counts[1] == 0.0);
  const auto gof = robart::testing::chi_square_gof({counts[0], counts[2], counts[3]}, {0.1, 0.3, 0.6});
  CHECK(gof.p_value > kKsLevel);

  double ones = 0.0;
  for (int i = 0; i < 100000; ++i) ones += draw(rng, Bernoulli{0.3});
  CHECK(robart::testing::chi_square_gof({100000.0 - ones, ones}, {0.7, 0.3}).p_value > kKsLevel);
  CHECK(draw(rng, Bernoulli{0.0}) == 0);
  CHECK(draw(rng, Bernoulli{1.0}) == 1);
}

TEST_CASE("variant dispatch returns the documented alternative") {
  auto rng = derive_stream(1, 1);
  CHECK(std::holds_alternative<double>(sample(rng, Normal{})));
  CHECK(std::holds_alternative<int>(sample(rng, Bernoulli{0.5})));
  CHECK(std::holds_alternative<int>(sample(rng, Categorical{{1.0, 2.0}})));
  CHECK(std::holds_alternative<std::vector<double>>(sample(rng, Dirichlet{{1.0, 2.0}})));
  auto a = derive_stream(3, 3);
  auto b = derive_stream(3, 3);
  CHECK(std::get<double>(sample(a, Gamma{2.0, 1.0})) == draw(b, Gamma{2.0, 1.0}));
}

TEST_CASE("invalid parameters name the field") {
  auto rng = derive_stream(1, 2);
  auto message = [&](const DistributionSpec& spec) -> std::string {
    try {
      sample(rng, spec);
    } catch (const InvalidParameter& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message(Exponential{0.0}).find("rate") != std::string::npos);
  CHECK(message(Normal{0.0, -1.0}).find("sd") != std::string::npos);
  CHECK(message(TruncatedNormal{0.0, 0.0}).find("sd") != std::string::npos);
  CHECK(message(Bernoulli{1.5}).find("p") != std::string::npos);
  CHECK(message(Categorical{{0.0, 0.0}}).find("weights") != std::string::npos);
  CHECK(message(Categorical{{1.0, -1.0}}).find("weights") != std::string::npos);
  CHECK(message(Dirichlet{{1.0, 0.0}}).find("alpha") != std::string::npos);
  CHECK(message(ScaledInvChiSq{0.0, 1.0}).find("df") != std::string::npos);
  CHECK(message(ScaledInvChiSq{1.0, 0.0}).find("scale") != std::string::npos);
  CHECK(message(Uniform{1.0, 1.0}).find("Uniform") != std::string::npos);
  CHECK(message(Gamma{-1.0, 1.0}).find("shape") != std::string::npos);
  CHECK(message(ChiSq{0.0}).find("df") != std::string::npos);
  CHECK_NOTHROW(validate(Normal{}));
}

TEST_CASE("normal cdf and quantile agree with boost") {
  namespace bm = boost::math;
  const bm::normal_distribution<> ref;
  for (double x : {-8.0, -3.0, -1.0, 0.0, 0.5, 2.0, 7.0}) {
    CHECK(std_normal_cdf(x) == doctest::Approx(bm::cdf(ref, x)).epsilon(1e-12));
  }
  for (double p : {1e-10, 0.001, 0.1, 0.5, 0.9, 0.999}) {
    CHECK(std_normal_quantile(p) == doctest::Approx(bm::quantile(ref, p)).epsilon(1e-9));
  }
}

TEST_CASE("draw_index follows unnormalized weights") {
  auto rng = derive_stream(8, 8);
  const std::vector<double> w{2.0, 2.0, 4.0};
  std::vector<double> counts(3, 0.0);
  for (int i = 0; i < 80000; ++i) counts[static_cast<std::size_t>(draw_index(rng, w))] += 1.0;
  CHECK(robart::testing::chi_square_gof(counts, {0.25, 0.25, 0.5}).p_value > kKsLevel);
}
