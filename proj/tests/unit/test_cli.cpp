#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "kkl/cli/cli.hpp"
#include "kkl/error.hpp"
#include "kkl/io/container.hpp"

using namespace kkl;
using kkl::cli::Json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kkl_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

io::Container sample_container() {
  io::Container c;
  c.manifest = Json{{"kind", "test"}, {"note", "x"}};
  c.tensors.emplace_back("a", Tensor::matrix(2, 3, {1.0, -2.5, 3.0, 1e-300, -0.0, 7.25}));
  c.tensors.emplace_back("b", Tensor::vector({0.1, 0.2}));
  c.tensors.emplace_back("empty", Tensor(Shape{0, 4}));
  return c;
}

// tiny linear run: a couple of seconds end to end
std::vector<std::string> tiny(const fs::path& out, const std::string& cmd) {
  return {"kkl",
          "--out",
          out.string(),
          "--set",
          "system=linear",
          "--set",
          "matrices.a_diag=[-2.0]",
          "--set",
          "net.hidden_layers=0",
          "--set",
          "net.hidden=4",
          "--set",
          "net.omega=4",
          "--set",
          "net.gru_hidden=4",
          "--set",
          "net.phi_hidden=4",
          "--set",
          "net.backbone=4",
          "--set",
          "train.n_traj=2",
          "--set",
          "train.n_inp=3",
          "--set",
          "train.horizon=6",
          "--set",
          "train.epochs_a=2",
          "--set",
          "train.epochs_b=2",
          "--set",
          "train.epochs=2",
          "--set",
          "train.batch=32",
          "--set",
          "eval.n_trials=2",
          "--set",
          "eval.t_skip=1",
          "--set",
          "eval.bound_trials=2",
          "--set",
          "eval.grid_per_axis=5",
          cmd};
}

}  // namespace

TEST_CASE("container round trip is byte stable") {
  auto c = sample_container();
  const std::string bytes = io::encode_container(io::kCheckpointMagic, c);
  REQUIRE(bytes.compare(0, 8, "KKLCKPT1") == 0);
  auto d = io::decode_container(io::kCheckpointMagic, bytes);
  REQUIRE(d.tensors.size() == 3);
  CHECK(d.tensor("a").shape() == Shape{2, 3});
  CHECK(std::memcmp(d.tensor("a").data(), c.tensor("a").data(), 6 * sizeof(double)) == 0);
  CHECK(std::signbit(d.tensor("a")[4]));
  CHECK(d.tensor("empty").shape() == Shape{0, 4});
  CHECK(d.manifest.at("note") == "x");
  CHECK(io::encode_container(io::kCheckpointMagic, d) == bytes);
  CHECK_THROWS_AS(d.tensor("nope"), FormatError);
}

TEST_CASE("corrupted containers name a byte offset") {
  auto c = sample_container();
  const std::string good = io::encode_container(io::kDatasetMagic, c);
  auto expect_offset = [](const std::string& bytes, const std::string& where) {
    try {
      io::decode_container(io::kDatasetMagic, bytes);
      FAIL("decode accepted corrupted bytes");
    } catch (const FormatError& e) {
      INFO(std::string(e.what()));
      CHECK(std::string(e.what()).find("byte offset " + where) != std::string::npos);
    }
  };
  std::string bad = good;
  bad[3] = 'X';
  expect_offset(bad, "0");
  CHECK_THROWS_AS(io::decode_container(io::kCheckpointMagic, good), FormatError);  // wrong kind
  expect_offset(good.substr(0, good.size() - 8), "");                             // truncated payload
  expect_offset(good + "tail", "");
  bad = good;
  bad[16] = '#';  // first byte of the manifest
  expect_offset(bad, "16");
  bad = good;
  bad[8] = '\xff';  // absurd header length
  expect_offset(bad, "8");
  expect_offset(good.substr(0, 5), "5");
}

TEST_CASE("missing files are a missing prerequisite") {
  CHECK_THROWS_AS(io::read_file((scratch("missing") / "x.ckpt").string()), MissingPrerequisite);
}

TEST_CASE("checkpoint round trip keeps every weight bit") {
  const auto rc = cli::parse_config(cli::default_config("duffing"));
  ModelBundle b;
  b.variant = Variant::Dyn;
  b.system = "duffing";
  b.net = rc.net;
  b.mats = rc.mats;
  Rng rng(3);
  b.params = init_base(rc.net, rng);
  for (auto& [k, v] : init_hyper(rc.net, rng)) b.params.emplace(k, v);
  auto c = io::checkpoint_of(b, rc.doc, Json{{"loss", 1.5}});
  const auto bytes = io::encode_container(io::kCheckpointMagic, c);
  const auto back = io::bundle_of(io::decode_container(io::kCheckpointMagic, bytes));
  CHECK(back.variant == Variant::Dyn);
  CHECK(back.net.omega == rc.net.omega);
  CHECK(back.net.n_z == 5);
  CHECK(back.mats.A == b.mats.A);
  CHECK(back.mats.B == b.mats.B);
  REQUIRE(back.params.size() == b.params.size());
  for (const auto& [k, v] : b.params) {
    const auto& w = back.params.at(k);
    REQUIRE(w.shape() == v.shape());
    CHECK(std::memcmp(w.data(), v.data(), v.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("config layering and validation") {
  const Json d = cli::default_config("duffing");
  CHECK(d.at("net").at("hidden") == 150);
  CHECK(d.at("eval").at("grid_per_axis") == 50);
  CHECK(cli::default_config("rossler").at("eval").at("grid_per_axis") == 20);

  Json doc = d;
  cli::apply_set(doc, "train.lr=0.5");
  cli::apply_set(doc, "stages.obs.epochs=7");
  cli::apply_set(doc, "eval.bound_regime=constant");
  const auto rc = cli::parse_config(doc);
  CHECK(rc.train.lr == 0.5);
  CHECK(rc.stage("obs").epochs == 7);
  CHECK(rc.stage("obs").lr == 0.5);
  CHECK(rc.stage("dyn").epochs == 100);
  CHECK(rc.bound_regime == InputKind::Constant);
  CHECK(rc.net.n_z == 5);

  CHECK_THROWS_AS(cli::apply_set(doc, "train.learning_rate=1"), ConfigError);
  CHECK_THROWS_AS(cli::apply_set(doc, "stages.obs.omega=1"), ConfigError);
  CHECK_THROWS_AS(cli::apply_set(doc, "noequals"), ConfigError);
  Json bad = d;
  cli::apply_set(bad, "train.batch=0");
  CHECK_THROWS_AS(cli::parse_config(bad), ConfigError);
  bad = d;
  cli::apply_set(bad, "matrices.a_diag=[-1, 0.5, -2, -3, -4]");
  CHECK_THROWS_AS(cli::parse_config(bad), ConfigError);
  bad = d;
  cli::apply_set(bad, "train.lr=\"fast\"");
  CHECK_THROWS_AS(cli::parse_config(bad), ConfigError);

  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"system": "vdp", "train": {"epochs": 3}})";
  const auto r2 = cli::resolve_config((dir / "c.json").string(), {"train.epochs=4"}, 9);
  CHECK(r2.spec.name == "vdp");
  CHECK(r2.train.epochs == 4);
  CHECK(r2.seed == 9);
  CHECK(r2.doc.at("seed") == 9);
  std::ofstream(dir / "bad.json") << R"({"train": {"epoch": 3}})";
  CHECK_THROWS_AS(cli::resolve_config((dir / "bad.json").string(), {}, std::nullopt), ConfigError);
}

TEST_CASE("cli exit codes") {
  const auto out = scratch("exit");
  CHECK(cli::run(tiny(out, "train-obs")) == cli::kMissingPrerequisite);
  CHECK(cli::run(tiny(out, "train-dyn")) == cli::kMissingPrerequisite);
  CHECK(cli::run(tiny(out, "evaluate")) == cli::kMissingPrerequisite);
  CHECK(cli::run({"kkl", "--set", "train.bogus=1", "gen-data"}) == cli::kConfigError);
  CHECK(cli::run({"kkl", "--config", (out / "none.json").string(), "gen-data"}) == cli::kConfigError);
  CHECK(cli::run({"kkl", "no-such-command"}) == cli::kConfigError);
  CHECK(cli::run({"kkl", "--help"}) == cli::kOk);
}

TEST_CASE("cli pipeline is deterministic and records its config") {
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  for (const auto& out : {a, b})
    for (const char* cmd : {"gen-data", "train-phase1", "train-obs", "train-dyn", "train-curriculum", "evaluate", "bound"})
      REQUIRE(cli::run(tiny(out, cmd)) == cli::kOk);

  for (const char* f : {"data/autonomous.kds", "data/forced.kds", "ckpt/phase1.ckpt", "ckpt/obs.ckpt", "ckpt/dyn.ckpt",
                        "ckpt/curriculum.ckpt", "eval/report.csv", "eval/report.json", "bound/bound.json"}) {
    INFO(f);
    CHECK(slurp(a / f) == slurp(b / f));
  }

  // the embedded config is the invoking one
  auto args = tiny(a, "gen-data");
  std::vector<std::string> sets;
  for (std::size_t i = 0; i + 1 < args.size(); ++i)
    if (args[i] == "--set") sets.push_back(args[i + 1]);
  const auto rc = cli::resolve_config(std::nullopt, sets, std::nullopt);
  const auto ck = io::load_container((a / "ckpt/obs.ckpt").string(), io::kCheckpointMagic);
  CHECK(ck.manifest.at("config") == rc.doc);
  CHECK(ck.manifest.at("variant") == "obs");
  CHECK(ck.manifest.at("metrics").contains("aug_zero_injection_subset"));

  // base weights are untouched by the phase-2 trainers
  const auto base = io::bundle_of(io::load_container((a / "ckpt/phase1.ckpt").string(), io::kCheckpointMagic));
  for (const char* v : {"obs", "dyn"}) {
    const auto t = io::bundle_of(io::load_container((a / "ckpt" / (std::string(v) + ".ckpt")).string(), io::kCheckpointMagic));
    for (const auto& [k, w] : base.params) {
      INFO(v << " " << k);
      REQUIRE(t.params.count(k) == 1);
      CHECK(std::memcmp(t.params.at(k).data(), w.data(), w.size() * sizeof(double)) == 0);
    }
  }

  const std::string csv = slurp(a / "eval/report.csv");
  CHECK(csv.find("variant,linear/zero,linear/constant,linear/sinusoid,linear/square") != std::string::npos);

  // a dataset built with another config is rejected
  auto other = tiny(a, "train-phase1");
  other.insert(other.end() - 1, {"--seed", "5"});
  CHECK(cli::run(other) == cli::kConfigError);

  // report merges run directories
  const auto m = scratch("merge");
  REQUIRE(cli::run({"kkl", "--out", m.string(), "report", a.string(), b.string()}) == cli::kOk);
  const std::string merged = slurp(m / "report.csv");
  CHECK(merged.find("variant,linear/zero") != std::string::npos);
}
