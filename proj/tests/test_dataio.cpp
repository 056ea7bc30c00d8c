#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unistd.h>

#include "robart/cli.hpp"
#include "robart/dataio.hpp"
#include "robart/error.hpp"
#include "robart/rng.hpp"

using namespace robart;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("robart_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

CsvSchema mean_schema() {
  CsvSchema s;
  s.outcome = "y";
  s.indicator = "r";
  return s;
}

/// Missing-outcome data with a logistic observation rule.
std::string toy_missing_csv(int n, std::uint64_t seed) {
  auto rng = derive_stream(seed, 0);
  std::string text = "y,r,x1,x2,g\n";
  const char* levels[] = {"a", "b", "c"};
  for (int i = 0; i < n; ++i) {
    const double x1 = rng.normal(), x2 = rng.uniform();
    const int g = static_cast<int>(3.0 * rng.uniform());
    const int r = rng.uniform() < 1.0 / (1.0 + std::exp(-(0.5 + 0.5 * x1))) ? 1 : 0;
    const double y = 1.0 + x1 + 0.5 * x2 + 0.3 * g + 0.5 * rng.normal();
    text += (r == 1 ? format_double(y) : std::string()) + "," + std::to_string(r) + "," + format_double(x1) + "," +
            format_double(x2) + "," + levels[g] + "\n";
  }
  return text;
}

std::string toy_treatment_csv(int n, std::uint64_t seed) {
  auto rng = derive_stream(seed, 0);
  std::string text = "y,d,x1,x2\n";
  for (int i = 0; i < n; ++i) {
    const double x1 = rng.normal(), x2 = rng.uniform();
    const int d = rng.uniform() < 1.0 / (1.0 + std::exp(-1.5 * x1)) ? 1 : 0;
    const double y = x1 + x2 + d + 0.5 * rng.normal();
    text += format_double(y) + "," + std::to_string(d) + "," + format_double(x1) + "," + format_double(x2) + "\n";
  }
  return text;
}

const std::vector<std::string> kSmallChain{"--trees", "10", "--burn-in", "50", "--num-draws", "100"};

std::vector<std::string> with_chain(std::vector<std::string> args) {
  args.insert(args.end(), kSmallChain.begin(), kSmallChain.end());
  return args;
}

}  // namespace

TEST_CASE("csv loading") {
  TempDir dir;
  SUBCASE("well-formed file") {
    write_text(dir.file("a.csv"), "y,r,x\n1.5,1,0.1\n,0,0.2\n-2,1,0.3\n");
    const MissingDataset d = load_missing_csv(dir.file("a.csv"), mean_schema());
    CHECK(d.n() == 3);
    CHECK(d.X.cols() == 1);
    CHECK(d.r == std::vector<int>{1, 0, 1});
    CHECK(d.y[0] == 1.5);
    CHECK(std::isnan(d.y[1]));
    CHECK(d.X(2, 0) == 0.3);
    CHECK_THROWS_AS(d.outcome(1), DataError);
  }
  SUBCASE("blank outcome where observed names the row") {
    write_text(dir.file("b.csv"), "y,r,x\n1.5,1,0.1\n,1,0.2\n");
    try {
      load_missing_csv(dir.file("b.csv"), mean_schema());
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
  }
  SUBCASE("categorical columns expand in order of appearance") {
    CsvSchema s = mean_schema();
    s.categorical = {"g"};
    const CsvTable t = parse_csv_table("y,r,g\n1,1,a\n2,1,b\n3,1,a\n");
    const MissingDataset d = to_missing_dataset(t, s);
    REQUIRE(d.X.cols() == 2);
    Eigen::MatrixXd expect(3, 2);
    expect << 1, 0, 0, 1, 1, 0;
    CHECK(d.X == expect);
    CHECK(d.columns[0].group == d.columns[1].group);
    CHECK(d.columns[0].name == "g=a");
  }
  SUBCASE("malformed cells report row and column") {
    try {
      to_missing_dataset(parse_csv_table("y,r,x\n1,1,abc\n"), mean_schema());
      FAIL("expected an error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("row 1") != std::string::npos);
      CHECK(msg.find("'x'") != std::string::npos);
    }
    CHECK_THROWS_AS(to_missing_dataset(parse_csv_table("y,r,x\n1,2,0\n"), mean_schema()), DataError);
    CHECK_THROWS_AS(to_missing_dataset(parse_csv_table("y,r\n1,1\n"), mean_schema()), DataError);
    CHECK_THROWS_AS(to_missing_dataset(parse_csv_table("y,q,x\n1,1,0\n"), mean_schema()), DataError);
    CHECK_THROWS_AS(parse_csv_table("y,r,x\n1,1\n"), DataError);
    CHECK_THROWS_AS(parse_csv_table(""), DataError);
    CHECK_THROWS_AS(read_csv_table(dir.file("missing.csv")), DataError);
  }
  SUBCASE("treatment files") {
    CsvSchema s;
    s.outcome = "y";
    s.indicator = "d";
    s.covariates = {"x2"};
    const TreatmentDataset t = to_treatment_dataset(parse_csv_table("y,d,x1,x2\n1,1,5,6\n2,0,7,8\n"), s);
    CHECK(t.n() == 2);
    CHECK(t.X.cols() == 1);
    CHECK(t.X(1, 0) == 8.0);
    CHECK(t.treated_share() == 0.5);
    CHECK_THROWS_AS(to_treatment_dataset(parse_csv_table("y,d,x\n,1,5\n2,0,7\n"), s), DataError);
  }
}

TEST_CASE("propensity trimming") {
  TreatmentDataset t;
  t.X = Eigen::Vector3d(1.0, 2.0, 3.0);
  t.columns = default_columns(1);
  t.y = Eigen::Vector3d(0.1, 0.2, 0.3);
  t.d = {1, 0, 1};
  const Eigen::Vector3d pi(0.02, 0.5, 0.97);

  const TrimResult none = trim_by_propensity(t, pi, 0.0);
  CHECK(none.effective_n == 3);
  CHECK(none.data.X == t.X);

  const TrimResult r = trim_by_propensity(t, pi, 0.05);
  CHECK(r.effective_n == 1);
  CHECK(r.kept == std::vector<Eigen::Index>{1});
  CHECK(r.data.X(0, 0) == 2.0);
  CHECK(r.data.d == std::vector<int>{0});

  // endpoints are kept
  CHECK(trim_by_propensity(t, pi, 0.02).effective_n == 3);
  CHECK(trim_by_propensity(t, pi, 0.0201).effective_n == 2);

  auto rng = derive_stream(80, 0);
  TreatmentDataset big;
  big.X.resize(500, 1);
  big.columns = default_columns(1);
  big.y.resize(500);
  big.d.resize(500);
  Eigen::VectorXd p(500);
  for (int i = 0; i < 500; ++i) {
    big.X(i, 0) = i;
    big.y[i] = rng.normal();
    big.d[static_cast<std::size_t>(i)] = i % 2;
    p[i] = rng.uniform();
  }
  Eigen::Index previous = 500;
  for (double level = 0.0; level < 0.5; level += 0.01) {
    const Eigen::Index kept = trim_by_propensity(big, p, level).effective_n;
    CHECK(kept <= previous);
    previous = kept;
  }
  CHECK_THROWS_AS(trim_by_propensity(t, pi, 0.5), InvalidParameter);
  CHECK_THROWS_AS(trim_by_propensity(t, pi, -0.1), InvalidParameter);
  CHECK_THROWS_AS(trim_by_propensity(t, Eigen::Vector3d(0.01, 0.01, 0.99), 0.1), DataError);
}

TEST_CASE("run configuration round-trips through key=value text") {
  RunConfig c;
  c.command = "ate";
  c.seed = 18446744073709551557ull;
  c.estimand = Estimand::Att;
  c.method = Method::OneStep;
  c.pilot = "stacked";
  c.features = "linear";
  c.m_hat = "ols";
  c.clip_eps = 0.025;
  c.ridge = 0.1 + 0.2;
  c.crossfit = 5;
  c.bart.num_trees = 37;
  c.bart.sparse = true;
  c.bart.split_base = 0.9;
  c.draws = 123;
  c.alpha = 0.1;
  c.trim = 0.05;
  c.input = "in.csv";
  c.output = "out/prefix";
  c.schema.outcome = "y";
  c.schema.indicator = "d";
  c.schema.covariates = {"a", "b"};
  c.schema.categorical = {"b"};
  c.design = "I,IV";
  c.n = "125,250";
  c.reps = 17;
  c.threads = 3;

  const auto kv = c.to_map();
  const RunConfig back = RunConfig::from_map(parse_key_values(format_key_values(kv)));
  CHECK(back.to_map() == kv);
  CHECK(back.seed == c.seed);
  CHECK(back.ridge == c.ridge);
  CHECK(back.bart.sparse);
  CHECK(back.schema.categorical == c.schema.categorical);

  const auto parsed = parse_key_values("# comment\n\nseed = 5\nalpha=0.2\n");
  CHECK(parsed.at("seed") == "5");
  CHECK(RunConfig::from_map(parsed).alpha == 0.2);
  CHECK_THROWS_AS(RunConfig::from_map({{"colour", "red"}}), InvalidParameter);
  CHECK_NOTHROW(RunConfig::from_map({{"manifest.version", "x"}}));
  CHECK_THROWS_AS(RunConfig::from_map({{"seed", "-1"}}), InvalidParameter);
  CHECK_THROWS_AS(RunConfig::from_map({{"alpha", "0.1x"}}), InvalidParameter);
  CHECK_THROWS_AS(parse_key_values("novalue\n"), InvalidParameter);

  RunConfig bad;
  bad.trim = 0.5;
  CHECK_THROWS_AS(bad.validate(), InvalidParameter);
  bad = RunConfig{};
  bad.alpha = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidParameter);
  bad = RunConfig{};
  bad.crossfit = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidParameter);
}

TEST_CASE("draw and pilot csv round-trip") {
  auto rng = derive_stream(81, 0);
  DrawSet d;
  d.method = Method::RoBart;
  for (int s = 0; s < 50; ++s) {
    const double chi = rng.normal() / 3.0, b = rng.normal() * 1e-7;
    d.chi.push_back(chi);
    d.b_hat.push_back(b);
    d.draws.push_back(chi - b);
  }
  const DrawSet back = parse_drawset_csv(drawset_csv(d));
  CHECK(back.draws == d.draws);
  CHECK(back.chi == d.chi);
  CHECK(back.b_hat == d.b_hat);
  CHECK_THROWS_AS(parse_drawset_csv("nope\n"), DataError);

  const std::string pilots = pilot_csv(Eigen::Vector2d(0.25, 0.5), Eigen::Vector2d(1.0 / 3.0, 2.0));
  CHECK(pilots.rfind("row,pi_hat,m_hat\n", 0) == 0);
  CHECK(pilots.find(format_double(1.0 / 3.0)) != std::string::npos);
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("summary record") {
  RunSummary s;
  s.method = "robart";
  s.estimand = "ate";
  s.interval = {0.5, 0.1, 0.9, 0.8};
  s.draws = 1000;
  s.seed = 3;
  s.n = 200;
  s.effective_n = 180;
  s.trim = 0.05;
  const auto j = nlohmann::json::parse(summary_json(s));
  CHECK(j["mean"] == 0.5);
  CHECK(j["lo"] == 0.1);
  CHECK(j["hi"] == 0.9);
  CHECK(j["cil"] == 0.8);
  CHECK(j["S"] == 1000);
  CHECK(j["n_eff"] == 180);
  CHECK(j["method"] == "robart");
}

TEST_CASE("command line exit codes") {
  CHECK(run_cli({}).code == kExitUsage);
  const CliRun unknown = run_cli({"fit", "--bogus", "1"});
  CHECK(unknown.code == kExitUsage);
  CHECK(unknown.err.find("Usage") != std::string::npos);
  CHECK(run_cli({"frobnicate"}).code == kExitUsage);
  CHECK(run_cli({"fit", "--alpha", "2", "--input", "x.csv", "--out", "o"}).code == kExitUsage);
  CHECK(run_cli({"fit", "--out", "o"}).code == kExitUsage);
  CHECK(run_cli({"--help"}).code == kExitOk);
  TempDir dir;
  CHECK(run_cli({"fit", "--input", dir.file("none.csv"), "--out", dir.file("o"), "--outcome", "y", "--indicator",
                 "r"})
            .code == kExitFailure);
  CHECK(run_cli({"report", "--input", dir.file("none.csv")}).code == kExitFailure);
}

TEST_CASE("fit writes a summary and reruns bit-exactly from its manifest") {
  TempDir dir;
  write_text(dir.file("toy.csv"), toy_missing_csv(120, 82));
  const auto args = with_chain({"fit", "--input", dir.file("toy.csv"), "--out", dir.file("run1"), "--outcome", "y",
                                "--indicator", "r", "--categorical", "g", "--method", "robart", "--pilot", "logit",
                                "--seed", "1"});
  const CliRun first = run_cli(args);
  REQUIRE_MESSAGE(first.code == kExitOk, first.err);
  const auto j = nlohmann::json::parse(read_text(dir.file("run1.summary.json")));
  CHECK(j["lo"].get<double>() <= j["mean"].get<double>());
  CHECK(j["mean"].get<double>() <= j["hi"].get<double>());
  CHECK(j["cil"].get<double>() == doctest::Approx(j["hi"].get<double>() - j["lo"].get<double>()));
  CHECK(j["S"] == 100);
  CHECK(fs::exists(dir.file("run1.draws.csv")));
  CHECK(fs::exists(dir.file("run1.pilots.csv")));
  const auto manifest = read_key_values(dir.file("run1.manifest"));
  CHECK(manifest.count("manifest.version") == 1);
  CHECK(manifest.count("manifest.runtime_seconds") == 1);

  const CliRun again = run_cli({"fit", "--config", dir.file("run1.manifest"), "--out", dir.file("run2")});
  REQUIRE_MESSAGE(again.code == kExitOk, again.err);
  CHECK(read_text(dir.file("run1.draws.csv")) == read_text(dir.file("run2.draws.csv")));
  CHECK(read_text(dir.file("run1.summary.json")) == read_text(dir.file("run2.summary.json")));
  CHECK(read_text(dir.file("run1.pilots.csv")) == read_text(dir.file("run2.pilots.csv")));

  // flags override the config file
  const CliRun other = run_cli({"fit", "--config", dir.file("run1.manifest"), "--out", dir.file("run3"), "--seed", "2"});
  REQUIRE(other.code == kExitOk);
  CHECK(read_text(dir.file("run1.draws.csv")) != read_text(dir.file("run3.draws.csv")));
}

TEST_CASE("ate and att with trimming report the effective sample size") {
  TempDir dir;
  write_text(dir.file("t.csv"), toy_treatment_csv(200, 83));
  for (const char* sub : {"ate", "att"}) {
    const std::string prefix = dir.file(std::string(sub) + "_trim");
    const CliRun r = run_cli(with_chain({sub, "--input", dir.file("t.csv"), "--out", prefix, "--outcome", "y",
                                         "--treatment", "d", "--trim", "0.1", "--seed", "4"}));
    REQUIRE_MESSAGE(r.code == kExitOk, r.err);
    const auto j = nlohmann::json::parse(read_text(prefix + ".summary.json"));
    CHECK(j["estimand"] == sub);
    CHECK(j["n"] == 200);
    CHECK(j["n_eff"].get<int>() < 200);
    CHECK(j["n_eff"].get<int>() > 50);
    CHECK(j["trim"] == 0.1);
    CHECK(j["lo"].get<double>() < j["hi"].get<double>());

    const CliRun full = run_cli(with_chain({sub, "--input", dir.file("t.csv"), "--out", prefix + "_full", "--outcome",
                                            "y", "--treatment", "d", "--seed", "4", "--method", "onestep"}));
    REQUIRE_MESSAGE(full.code == kExitOk, full.err);
    CHECK(nlohmann::json::parse(read_text(prefix + "_full.summary.json"))["n_eff"] == 200);
  }
}

TEST_CASE("simulate and report subcommands") {
  TempDir dir;
  const auto base = with_chain({"simulate", "--design", "I,II", "--n", "60", "--reps", "2", "--methods",
                                "plugin,robart-logit", "--seed", "9"});
  auto a = base;
  a.insert(a.end(), {"--out", dir.file("a.csv"), "--threads", "1"});
  const CliRun first = run_cli(a);
  REQUIRE_MESSAGE(first.code == kExitOk, first.err);
  CHECK(first.out.find("I Bias") != std::string::npos);

  const CliRun rerun = run_cli({"simulate", "--config", dir.file("a.csv.manifest"), "--out", dir.file("b.csv"),
                                "--threads", "2"});
  REQUIRE_MESSAGE(rerun.code == kExitOk, rerun.err);
  CHECK(read_text(dir.file("a.csv")) == read_text(dir.file("b.csv")));
  const std::string report = read_text(dir.file("a.csv"));
  CHECK(std::count(report.begin(), report.end(), '\n') == 5);

  const CliRun md = run_cli({"report", "--input", dir.file("a.csv")});
  CHECK(md.code == kExitOk);
  CHECK(md.out == read_text(dir.file("a.csv.md")));
  const CliRun csv = run_cli({"report", "--input", dir.file("a.csv"), "--style", "csv"});
  CHECK(csv.out == read_text(dir.file("a.csv")));
  CHECK(run_cli({"report", "--input", dir.file("a.csv"), "--style", "html"}).code == kExitUsage);
}
