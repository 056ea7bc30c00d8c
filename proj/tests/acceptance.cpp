// Acceptance run: one PASS/FAIL line per criterion with pinned tolerances.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fmt/format.h>
#include <sstream>
#include <string_view>
#include <unistd.h>

#include "robart/cli.hpp"
#include "robart/correction.hpp"
#include "robart/dataio.hpp"
#include "robart/error.hpp"
#include "robart/pilot.hpp"
#include "robart/simlab.hpp"
#include "sampler_oracles.hpp"
#include "test_support.hpp"

using namespace robart;
using namespace robart::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

// Criteria 1-3
constexpr double kMaxRobartBias = 0.08;
constexpr double kCoverLo = 0.90;
constexpr double kCoverHi = 0.99;
constexpr double kPluginCoverGap = 0.05;
constexpr double kPluginCoverMaxIV = 0.75;
constexpr double kRobartCoverMinIV = 0.88;
constexpr double kBiasGainIV = 0.10;
constexpr double kCilRatioLo = 0.6;
constexpr double kCilRatioHi = 1.3;
// Criterion 4
constexpr double kShrinkLevel = 0.05;
constexpr int kShrinkReps = 50;
// Criterion 5
constexpr double kMaxSkew = 0.3;
constexpr double kKurtLo = 2.5;
constexpr double kKurtHi = 3.5;
constexpr double kVarianceTol = 0.35;
// Criterion 6
constexpr double kOracleZ = 3.0;
constexpr double kOracleLevel = 1e-3;
// Criterion 7
constexpr double kExactTol = 1e-12;
constexpr long kTruthDraws = 10000000;
constexpr double kTruthZ = 3.0;

constexpr std::uint64_t kSeed = 20240611;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

MCReport desk_run(DesignId id) {
  MCConfig c;
  c.design = id;
  c.n = 250;
  c.reps = 200;
  c.methods = {MCMethod::Plugin, MCMethod::RoBartLogit};
  c.bart = MCConfig::desk_bart();
  c.seed = kSeed;
  return run_mc(c);
}

const MCCell& cell(const MCReport& r, const std::string& method) {
  for (const auto& c : r.cells)
    if (c.method == method) return c;
  throw Error("missing cell " + method);
}

std::string describe(const MCCell& c) {
  return fmt::format("{} bias={:.4f} cp={:.3f} cil={:.4f}", c.method, c.bias, c.cp, c.cil);
}

Verdict criterion1(const MCReport& r) {
  const MCCell& p = cell(r, "plugin");
  const MCCell& rb = cell(r, "robart-logit");
  const bool ok = rb.bias <= kMaxRobartBias && rb.cp >= kCoverLo && rb.cp <= kCoverHi &&
                  p.cp <= rb.cp - kPluginCoverGap;
  return {ok, fmt::format("design II n=250 reps={}: {}; {}", rb.replications, describe(rb), describe(p))};
}

Verdict criterion2(const MCReport& r) {
  const MCCell& p = cell(r, "plugin");
  const MCCell& rb = cell(r, "robart-logit");
  const bool ok = p.cp <= kPluginCoverMaxIV && rb.cp >= kRobartCoverMinIV && rb.bias <= p.bias - kBiasGainIV;
  return {ok, fmt::format("design IV n=250 reps={}: {}; {}", rb.replications, describe(rb), describe(p))};
}

Verdict criterion3(const MCReport& two, const MCReport& four) {
  const double a = cell(two, "robart-logit").cil / cell(two, "plugin").cil;
  const double b = cell(four, "robart-logit").cil / cell(four, "plugin").cil;
  const bool ok = a >= kCilRatioLo && a <= kCilRatioHi && b >= kCilRatioLo && b <= kCilRatioHi;
  return {ok, fmt::format("CIL ratio robart/plugin: design II {:.3f}, design IV {:.3f}", a, b)};
}

/// Per-replication median over draws of sqrt(n) |b_hat - b_0| with
/// correctly specified parametric pilots.
std::vector<double> debias_gaps(Eigen::Index n, std::vector<double>& pooled) {
  const auto spec = design(DesignId::II);
  std::vector<double> medians;
  for (int rep = 0; rep < kShrinkReps; ++rep) {
    RngStream stream = derive_stream(kSeed + 4, static_cast<std::uint64_t>(n) * 1000 + rep);
    RngStream data_rng = stream.child(0);
    const auto sim = gen_missing_data(n, spec, data_rng);
    const auto& d = sim.data;
    const auto obs = d.observed_rows();

    RngStream chain_rng = stream.child(1);
    const auto chain = run_bart_regression(select_rows(d.X, obs), select_rows(d.y, obs), MCConfig::desk_bart(),
                                           chain_rng, &d.X);
    const Eigen::VectorXd pi_hat = predict_propensity(fit_logit_pilot(d.X, d.columns, d.r), d.X);
    OutcomePilotOptions opt;
    opt.method = OutcomePilotMethod::OlsExpansion;
    RngStream pilot_rng = stream.child(2);
    const Eigen::VectorXd m_hat =
        predict_outcome(fit_outcome_pilot(select_rows(d.X, obs), select_rows(d.y, obs), d.X, d.columns, opt, pilot_rng),
                        d.X);
    const Eigen::VectorXd gamma_hat = mean_response_gamma(d.r, pi_hat);
    const Eigen::VectorXd gamma0 = mean_response_gamma(d.r, sim.pi0);

    std::vector<double> gaps;
    for (Eigen::Index s = 0; s < chain.fitted_test.rows(); ++s) {
      const Eigen::VectorXd ms = chain.fitted_test.row(s).transpose();
      const double gap = debias_term(ms, m_hat, gamma_hat) - oracle_bias_term(sim.m0, ms, gamma0);
      gaps.push_back(std::sqrt(static_cast<double>(n)) * std::abs(gap));
    }
    pooled.insert(pooled.end(), gaps.begin(), gaps.end());
    medians.push_back(median_of(gaps));
  }
  return medians;
}

Verdict criterion4() {
  std::vector<double> pooled_small, pooled_large;
  const auto small = debias_gaps(250, pooled_small);
  const auto large = debias_gaps(1000, pooled_large);
  const double p = rank_sum_p_less(large, small);
  return {p < kShrinkLevel,
          fmt::format("median sqrt(n)|b_hat - b_0|: n=250 {:.4f}, n=1000 {:.4f}; one-sided rank-sum p={:.3g}",
                      median_of(pooled_small), median_of(pooled_large), p)};
}

Verdict criterion5() {
  const Eigen::Index n = 2000;
  RngStream stream = derive_stream(kSeed + 5, 0);
  RngStream data_rng = stream.child(0);
  const auto sim = gen_missing_data(n, design(DesignId::Linear), data_rng);
  const auto& d = sim.data;
  const auto obs = d.observed_rows();

  BartConfig config = MCConfig::paper_bart();
  config.num_draws = 4000;
  config.burn_in = 1000;
  RngStream chain_rng = stream.child(1);
  const auto chain = run_bart_regression(select_rows(d.X, obs), select_rows(d.y, obs), config, chain_rng, &d.X);

  PilotValues pilots;
  pilots.pi = predict_propensity(fit_logit_pilot(d.X, d.columns, d.r), d.X);
  const Eigen::VectorXd m_hat = chain.fitted_test.colwise().mean().transpose();
  pilots.m_hat = m_hat;
  const DrawSet ds = mean_response_draws(d, chain.fitted_test, Method::RoBart, &pilots, nullptr, stream.child(4));

  const double aipw = aipw_point_estimate(d, pilots.pi, m_hat);
  const Eigen::VectorXd gamma = mean_response_gamma(d.r, pilots.pi);
  double v0 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double phi = m_hat[i] - aipw;
    if (d.r[static_cast<std::size_t>(i)] == 1) phi += gamma[i] * (d.y[i] - m_hat[i]);
    v0 += phi * phi;
  }
  v0 /= static_cast<double>(n);

  std::vector<double> z;
  for (double v : ds.draws) z.push_back(std::sqrt(static_cast<double>(n)) * (v - aipw));
  const auto [skew, kurt] = skew_kurtosis(z);
  const double var = variance_of(z);
  const double rel = std::abs(var / v0 - 1.0);
  const bool ok = std::abs(skew) < kMaxSkew && kurt >= kKurtLo && kurt <= kKurtHi && rel <= kVarianceTol;
  return {ok, fmt::format("linear n=2000 S={}: skew={:.3f} kurtosis={:.3f} var={:.4f} v0={:.4f} (ratio {:.3f})",
                          z.size(), skew, kurt, var, v0, var / v0)};
}

Verdict criterion6() {
  const auto conj = conjugacy_oracle(kSeed + 61);
  const auto prior = prior_recovery_oracle(kSeed + 62);
  const auto sigma = sigma_update_oracle(kSeed + 63);
  const bool a = conj.max_z_mean <= kOracleZ && conj.max_z_var <= kOracleZ;
  const bool b = prior.size_test.p_value > kOracleLevel;
  const bool c = sigma.p_value > kOracleLevel;
  return {a && b && c,
          fmt::format("(a) leaf moments max z mean={:.2f} var={:.2f} [{}]; (b) tree-size chi2 p={:.3g} [{}]; "
                      "(c) sigma KS p={:.3g} [{}]",
                      conj.max_z_mean, conj.max_z_var, a ? "ok" : "fail", prior.size_test.p_value, b ? "ok" : "fail",
                      sigma.p_value, c ? "ok" : "fail")};
}

double m_raw(DesignId id, const double* x) {
  const double x1 = x[0], x2 = x[1], x3 = x[2], x4 = x[3];
  const double h = x[4] == 1.0 ? 2.0 : x[4] == 2.0 ? -1.0 : -0.5;
  switch (id) {
    case DesignId::I: return 1 - 2 * x1 - 0.5 * x1 * x1 + x2 + x3 + x4 + h;
    case DesignId::II: return 1 + x1 * x2 + x1 * x3 + x2 + x4 + h;
    case DesignId::III: return 1 + x1 * x3 + x2 * x3 + x1 + x4 + h;
    case DesignId::IV: return 1 + x1 * x3 + x2 * x3 + x2 * x4 + h;
    case DesignId::Linear: return 1 - 2 * x1 + x2 + x3 + x4 + h;
  }
  return NAN;
}

Verdict criterion7() {
  const Eigen::Vector3d W(0.2, 0.3, 0.5);
  const std::vector<int> r{1, 0, 1};
  const Eigen::Vector3d y(2.0, std::numeric_limits<double>::quiet_NaN(), 4.0);
  const double chi = chi_draw(Eigen::Vector3d::Ones(), mean_response_gamma(r, Eigen::Vector3d(0.5, 0.7, 0.8)), y, r, W);
  const double deb = debias_term(Eigen::Vector2d(0.0, 3.0), Eigen::Vector2d(1.0, 1.0), Eigen::Vector2d(2.0, 0.0));
  const double att = riesz_representer(RieszMode::Att, 0, 0.2, 0.4);
  bool ok = std::abs(chi - 3.275) <= kExactTol && std::abs(deb - 1.5) <= kExactTol && std::abs(att + 0.625) <= kExactTol;
  std::string detail = fmt::format("chi_draw={:.15g} debias={:.15g} riesz_att={:.15g};", chi, deb, att);

  const DesignId ids[4] = {DesignId::I, DesignId::II, DesignId::III, DesignId::IV};
  double sum[4] = {0, 0, 0, 0}, sq[4] = {0, 0, 0, 0};
  RngStream rng = derive_stream(kSeed + 7, 0);
  for (long k = 0; k < kTruthDraws; ++k) {
    const double x[5] = {rng.normal(), rng.normal(), rng.normal(), rng.uniform() < 0.5 ? 1.0 : 0.0,
                         1.0 + std::floor(3.0 * rng.uniform())};
    for (int j = 0; j < 4; ++j) {
      const double v = m_raw(ids[j], x);
      sum[j] += v;
      sq[j] += v * v;
    }
  }
  for (int j = 0; j < 4; ++j) {
    const double mean = sum[j] / kTruthDraws;
    const double se = std::sqrt((sq[j] / kTruthDraws - mean * mean) / kTruthDraws);
    const double truth = true_mean(design(ids[j]));
    const double z = std::abs(mean - truth) / se;
    ok = ok && z <= kTruthZ;
    detail += fmt::format(" {}: {:.6f} vs MC {:.6f} (z={:.2f})", design(ids[j]).name(), truth, mean, z);
  }
  return {ok, detail};
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / fmt::format("robart_acceptance_{}", ::getpid())) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

int cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  if (code != kExitOk) throw Error("cli failed: " + err.str());
  return code;
}

Verdict criterion8() {
  TempDir dir;
  const std::vector<std::string> chain{"--trees", "20", "--burn-in", "100", "--num-draws", "200"};
  auto sim = std::vector<std::string>{"simulate", "--design", "II,IV", "--n", "80", "--reps", "6", "--methods",
                                      "plugin,onestep,robart-logit,robart-stacked,robart-oracle", "--seed", "8",
                                      "--threads", "1", "--out", dir.file("sim1.csv")};
  sim.insert(sim.end(), chain.begin(), chain.end());
  cli(sim);
  cli({"simulate", "--config", dir.file("sim1.csv.manifest"), "--threads", "3", "--out", dir.file("sim3.csv")});
  cli({"simulate", "--config", dir.file("sim1.csv.manifest"), "--threads", "2", "--out", dir.file("sim2.csv")});
  const std::string base = read_text(dir.file("sim1.csv"));
  const bool sim_ok = base == read_text(dir.file("sim3.csv")) && base == read_text(dir.file("sim2.csv"));

  RngStream rng = derive_stream(kSeed + 8, 0);
  std::string csv = "y,r,x1,x2\n";
  for (int i = 0; i < 150; ++i) {
    const double x1 = rng.normal(), x2 = rng.uniform();
    const int r = rng.uniform() < 1.0 / (1.0 + std::exp(-0.8 * x1)) ? 1 : 0;
    csv += (r ? format_double(x1 + x2 + rng.normal()) : std::string()) + "," + std::to_string(r) + "," +
           format_double(x1) + "," + format_double(x2) + "\n";
  }
  write_text(dir.file("toy.csv"), csv);
  bool fit_ok = true;
  for (const char* method : {"robart", "onestep", "plugin-bart"}) {
    const std::string a = dir.file(fmt::format("fit_{}_a", method));
    const std::string b = dir.file(fmt::format("fit_{}_b", method));
    auto fit = std::vector<std::string>{"fit", "--input", dir.file("toy.csv"), "--outcome", "y", "--indicator", "r",
                                        "--method", method, "--pilot", "stacked", "--seed", "3", "--out", a};
    fit.insert(fit.end(), chain.begin(), chain.end());
    cli(fit);
    cli({"fit", "--config", a + ".manifest", "--out", b});
    for (const char* ext : {".draws.csv", ".summary.json", ".pilots.csv"})
      fit_ok = fit_ok && read_text(a + ext) == read_text(b + ext);
  }
  return {sim_ok && fit_ok, fmt::format("simulate threads 1/2/3 identical: {}; fit reruns from manifest identical: {}",
                                        sim_ok ? "yes" : "no", fit_ok ? "yes" : "no")};
}

void report(int id, const Verdict& v, double seconds) {
  fmt::print("criterion {} {} {} [{:.0f}s]\n", id, v.pass ? "PASS" : "FAIL", v.detail, seconds);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  bool strict = false;
  for (int i = 1; i < argc; ++i) {
    if (std::string_view(argv[i]) == "--strict") {
      strict = true;
    } else {
      only.push_back(std::atoi(argv[i]));
    }
  }
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  int failures = 0;
  int errors = 0;
  auto run = [&](int id, const std::function<Verdict()>& f) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    failures += v.pass ? 0 : 1;
    report(id, v, seconds_since(t0));
  };

  MCReport two, four;
  if (wanted(1) || wanted(2) || wanted(3)) {
    two = desk_run(DesignId::II);
    four = desk_run(DesignId::IV);
  }
  run(1, [&] { return criterion1(two); });
  run(2, [&] { return criterion2(four); });
  run(3, [&] { return criterion3(two, four); });
  run(4, criterion4);
  run(5, criterion5);
  run(6, criterion6);
  run(7, criterion7);
  run(8, criterion8);
  fmt::print("{} criteria failed, {} could not be evaluated\n", failures, errors);
  // A FAIL verdict is a measured outcome; only --strict turns it into a nonzero exit.
  return errors > 0 || (strict && failures > 0) ? 1 : 0;
}
