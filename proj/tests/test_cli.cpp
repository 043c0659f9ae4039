#include <doctest.h>

#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "nconv/training.hpp"
#include "support.hpp"

using namespace nconv;
using nconv::cli::run_cli;
using testsupport::read_bytes;
using testsupport::TempDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_file(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string synth_config(const std::filesystem::path& out_dir, const std::string& extra = "") {
  return R"({
  "output_dir": ")" + out_dir.string() +
         R"(",
  "epochs": 1,
  "batch_size": 2,
  "synthetic": {"seed": 3, "samples": 4, "size": 16, "density": 0.2, "gt_coverage": 0.5})" +
         extra + "\n}\n";
}

/// OneScale4 whose applicability is (numerically) a centered delta in every bank.
Model identity_stub() {
  Model m = build_model({Variant::OneScale4, 0.0, 0});
  for (auto& b : m.banks) {
    WeightBank& w = b.layer.weights;
    const std::size_t k = w.shape().kh;
    for (std::size_t o = 0; o < w.shape().out_ch; ++o)
      for (std::size_t i = 0; i < w.shape().in_ch; ++i)
        for (std::size_t y = 0; y < k; ++y)
          for (std::size_t x = 0; x < k; ++x) w.at(o, i, y, x) = (y == k / 2 && x == k / 2) ? 40.0 : -40.0;
    b.layer.epsilon = 0.0;
  }
  return m;
}

}  // namespace

TEST_CASE("summary prints the parameter totals") {
  CHECK(run({"summary", "--variant", "OneScale16"}).out.find("total parameters: 25585") != std::string::npos);
  CHECK(run({"summary", "--variant", "OneScale4"}).out.find("total parameters: 1981") != std::string::npos);
  Run hms = run({"summary"});
  CHECK(hms.code == 0);
  CHECK(hms.out.find("model HMS") != std::string::npos);
  CHECK(hms.out.find("total parameters: 549") != std::string::npos);
  CHECK(run({"summary", "--variant", "SF_STD", "--scales", "2"}).out.find("total parameters: 549") !=
        std::string::npos);
  CHECK(run({"summary", "--variant", "nope"}).code == 1);
}

TEST_CASE("argument handling") {
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"summary", "--bogus"}).code == 1);
  CHECK(run({"eval", "--checkpoint", "x"}).code == 1);
  const std::vector<std::pair<std::string, std::vector<std::string>>> flags = {
      {"train", {"--config"}},
      {"eval", {"--checkpoint", "--data", "--split", "--out"}},
      {"infer", {"--checkpoint", "--in", "--out-depth", "--out-conf"}},
      {"gradcheck", {"--variant", "--seed", "--epsilon", "--probe-seed", "--size", "--max-params", "--step", "--corrupt"}},
      {"synth", {"--out", "--split", "--seed", "--samples", "--size", "--density", "--gt-coverage"}},
      {"summary", {"--variant", "--scales", "--checkpoint"}},
  };
  for (const auto& [cmd, names] : flags) {
    Run help = run({cmd, "--help"});
    CHECK(help.code == 0);
    for (const auto& f : names) {
      CAPTURE(cmd);
      CAPTURE(f);
      CHECK(help.out.find(f) != std::string::npos);
    }
  }
}

TEST_CASE("gradcheck subcommand") {
  Run ok = run({"gradcheck"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("worst relative error") != std::string::npos);
  CHECK(run({"gradcheck", "--corrupt", "0.1", "--max-params", "40"}).code == 3);
}

TEST_CASE("synth subcommand is deterministic") {
  TempDir a("synth_a"), b("synth_b");
  for (const TempDir* d : {&a, &b})
    CHECK(run({"synth", "--out", d->path().string(), "--samples", "2", "--size", "16", "--seed", "5"}).code == 0);
  for (const char* f : {"train/sparse/00000.png", "train/gt/00001.png"}) CHECK(read_bytes(a / f) == read_bytes(b / f));
  CHECK(run({"synth", "--out", a.path().string(), "--density", "0"}).code == 1);
  CHECK(run({"synth", "--out", a.path().string(), "--size", "18"}).code == 1);
}

TEST_CASE("train subcommand") {
  TempDir dir("cli_train");
  SUBCASE("synthetic smoke run") {
    write_file(dir / "cfg.json", synth_config(dir / "run"));
    Run r = run({"train", "--config", (dir / "cfg.json").string()});
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(dir / "run/history.csv"));
    CHECK(std::filesystem::exists(dir / "run/final.ncm"));
    CHECK(std::filesystem::exists(dir / "run/config.json"));
    Model m = load_checkpoint(dir / "run/final.ncm");
    CHECK(m.spec.variant == Variant::HMS);
    CHECK(m.spec.epsilon == kDefaultEpsilon);

    write_file(dir / "cfg2.json", synth_config(dir / "run2"));
    CHECK(run({"train", "--config", (dir / "cfg2.json").string()}).code == 0);
    CHECK(read_bytes(dir / "run/final.ncm") == read_bytes(dir / "run2/final.ncm"));
    CHECK(read_bytes(dir / "run/history.csv") == read_bytes(dir / "run2/history.csv"));
  }
  SUBCASE("dataset directory") {
    REQUIRE(run({"synth", "--out", (dir / "data").string(), "--samples", "3", "--size", "16"}).code == 0);
    write_file(dir / "cfg.json", R"({"output_dir": ")" + (dir / "run").string() + R"(", "data_dir": ")" +
                                     (dir / "data").string() + R"(", "epochs": 1, "variant": "SF_STD"})");
    CHECK(run({"train", "--config", (dir / "cfg.json").string()}).code == 0);
    CHECK(load_checkpoint(dir / "run/final.ncm").spec.variant == Variant::SF_STD);
  }
  SUBCASE("malformed JSON reports the position") {
    write_file(dir / "bad.json", "{\n  \"epochs\": 2,\n  \"lr\": ,\n}\n");
    Run r = run({"train", "--config", (dir / "bad.json").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("line 3") != std::string::npos);
    CHECK(r.err.find("column") != std::string::npos);
  }
  SUBCASE("schema violations are config errors") {
    const std::vector<std::string> extras = {
        R"(, "learning_rate": 0.1)", R"(, "epochs": -1)",       R"(, "lr": "fast")",
        R"(, "variant": "HMS2")",   R"(, "data_dir": "/tmp")", R"(, "batch_size": 0)",
    };
    for (const auto& extra : extras) {
      CAPTURE(extra);
      write_file(dir / "cfg.json", synth_config(dir / "run", extra));
      CHECK(run({"train", "--config", (dir / "cfg.json").string()}).code == 1);
    }
    write_file(dir / "cfg.json", R"({"synthetic": {"samples": 2}})");
    CHECK(run({"train", "--config", (dir / "cfg.json").string()}).code == 1);
    write_file(dir / "cfg.json", R"({"output_dir": "x", "synthetic": {"sample": 2}})");
    CHECK(run({"train", "--config", (dir / "cfg.json").string()}).code == 1);
    CHECK(run({"train", "--config", (dir / "absent.json").string()}).code == 1);
  }
  SUBCASE("missing dataset is a data error") {
    write_file(dir / "cfg.json", R"({"output_dir": ")" + (dir / "run").string() + R"(", "data_dir": ")" +
                                     (dir / "nowhere").string() + R"("})");
    CHECK(run({"train", "--config", (dir / "cfg.json").string()}).code == 2);
  }
}

TEST_CASE("config defaults") {
  cli::CliConfig cfg = cli::parse_config(nlohmann::json::parse(R"({"output_dir": "o", "synthetic": {}})"));
  CHECK(cfg.lr == 0.01);
  CHECK(cfg.batch_size == 8);
  CHECK(cfg.epsilon == 1e-8);
  CHECK(cfg.variant == Variant::HMS);
  CHECK(cfg.synthetic.has_value());
}

TEST_CASE("eval subcommand") {
  TempDir dir("cli_eval");
  REQUIRE(run({"synth", "--out", dir.path().string(), "--split", "test", "--samples", "2", "--size", "16", "--density",
               "1"})
              .code == 0);
  save_checkpoint(identity_stub(), dir / "stub.ncm");

  SUBCASE("identity model scores perfectly") {
    Run r = run({"eval", "--checkpoint", (dir / "stub.ncm").string(), "--data", dir.path().string(), "--out",
                 (dir / "report.json").string()});
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(read_bytes(dir / "report.json"));
    CHECK(j.at("mae").get<double>() < 1e-9);
    CHECK(j.at("delta1").get<double>() == 1.0);
    CHECK(j.at("params").get<std::size_t>() == 1981);
    CHECK(j.at("variant") == "OneScale4");
    CHECK(j.at("report_version") == 1);
    nlohmann::json metrics = MetricsReport{};
    for (const auto& [key, _] : metrics.items()) CHECK(j.contains(key));
    CHECK(j.size() == metrics.size() + 3);

    CHECK(run({"eval", "--checkpoint", (dir / "stub.ncm").string(), "--data", dir.path().string(), "--out",
               (dir / "again.json").string()})
              .code == 0);
    CHECK(read_bytes(dir / "report.json") == read_bytes(dir / "again.json"));
  }
  SUBCASE("data errors") {
    CHECK(run({"eval", "--checkpoint", (dir / "stub.ncm").string(), "--data", (dir / "none").string()}).code == 2);
    CHECK(run({"eval", "--checkpoint", (dir / "none.ncm").string(), "--data", dir.path().string()}).code == 2);

    Sample odd;
    odd.sparse_depth = Tensor4(Shape4{1, 1, 10, 10}, 5.0);
    odd.input_conf = Tensor4(Shape4{1, 1, 10, 10}, 1.0);
    odd.gt_depth = odd.sparse_depth;
    odd.gt_valid = odd.input_conf;
    write_dataset({odd}, dir / "odd", "test");
    save_checkpoint(build_model({Variant::HMS, kDefaultEpsilon, 0}), dir / "hms.ncm");
    CHECK(run({"eval", "--checkpoint", (dir / "hms.ncm").string(), "--data", (dir / "odd").string()}).code == 2);
  }
}

TEST_CASE("infer subcommand") {
  TempDir dir("cli_infer");
  save_checkpoint(build_model({Variant::HMS, kDefaultEpsilon, 0}), dir / "hms.ncm");
  SynthConfig sc;
  sc.seed = 4;
  sc.samples = 1;
  sc.size = 64;
  sc.density = 1.0;
  const Sample dense = gen_synthetic(sc).front();
  save_depth_png(dense.sparse_depth, dir / "dense.png");

  auto infer = [&](const std::string& in, const std::string& tag) {
    return run({"infer", "--checkpoint", (dir / "hms.ncm").string(), "--in", in, "--out-depth",
                (dir / (tag + "_d.png")).string(), "--out-conf", (dir / (tag + "_c.png")).string()});
  };
  REQUIRE(infer((dir / "dense.png").string(), "a").code == 0);
  REQUIRE(infer((dir / "dense.png").string(), "b").code == 0);
  CHECK(read_bytes(dir / "a_d.png") == read_bytes(dir / "b_d.png"));
  CHECK(read_bytes(dir / "a_c.png") == read_bytes(dir / "b_c.png"));

  DepthImage depth = load_depth_png(dir / "a_d.png");
  CHECK(depth.depth.shape() == dense.sparse_depth.shape());
  std::size_t h = 0, w = 0;
  const auto conf = load_gray8_png(dir / "a_c.png", h, w);
  REQUIRE(h == 64);
  REQUIRE(w == 64);
  // Zero padding lowers confidence near the border; the margin covers the receptive field.
  std::size_t high = 0, total = 0;
  for (std::size_t i = 16; i < 48; ++i)
    for (std::size_t j = 16; j < 48; ++j, ++total) high += conf[i * 64 + j] >= 250;
  CHECK(static_cast<double>(high) >= 0.99 * static_cast<double>(total));

  save_conf_png(dense.input_conf, dir / "gray8.png");
  CHECK(infer((dir / "gray8.png").string(), "x").code == 2);
  CHECK(infer((dir / "missing.png").string(), "x").code == 2);
}
