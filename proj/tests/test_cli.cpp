#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pgc/cli.hpp"
#include "pgc/error.hpp"
#include "pgc/evaluate.hpp"

using namespace pgc;
using namespace pgc::cli;

namespace {

namespace fs = std::filesystem;

const std::string kFixture = std::string(PGC_TEST_DATA) + "/mini_coqa.json";

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "pgc");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pgc_cli_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Small enough that a few training steps take well under a second.
const std::vector<std::string> kTinyModel{"--enc-layers", "2", "--dec-layers", "1", "--d-model", "8",
                                          "--n-heads", "2", "--d-ff", "16", "--vocab-size", "64"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTinyModel.begin(), kTinyModel.end());
  return args;
}

}  // namespace

TEST_CASE("config files") {
  SUBCASE("empty file gives defaults") {
    const fs::path p = scratch("empty.json");
    write_file(p, "");
    CHECK(load_config(p) == RunConfig{});
  }
  SUBCASE("round trip") {
    RunConfig c;
    c.model.d_model = 24;
    c.train.seed = 99;
    c.heads = {1, 3};
    c.multi_ref = true;
    c.train.prompt_version = {prompt::Version::ConversationHistory, 3};
    CHECK(apply_json(RunConfig{}, to_json(c)) == c);
  }
  SUBCASE("unknown keys are listed") {
    try {
      apply_json(RunConfig{}, nlohmann::json{{"d_modle", 4}, {"sed", 1}, {"seed", 2}});
      FAIL("expected a usage error");
    } catch (const UsageError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("d_modle") != std::string::npos);
      CHECK(msg.find("sed") != std::string::npos);
    }
  }
  SUBCASE("wrong value type") { CHECK_THROWS_AS(apply_json(RunConfig{}, nlohmann::json{{"d_model", "big"}}), UsageError); }
}

TEST_CASE("exit codes") {
  CHECK(invoke({"--help"}).code == kExitOk);
  CHECK(invoke({}).code == kExitUsage);
  CHECK(invoke({"frobnicate"}).code == kExitUsage);
  CHECK(invoke({"stats", "--bogus-flag"}).code == kExitUsage);
  CHECK(invoke({"stats"}).code == kExitUsage);  // --input missing
  CHECK(invoke({"stats", "-i", "/nonexistent/file.json"}).code == kExitUsage);
  CHECK(invoke({"synthetic", "--min-len", "9", "--max-len", "2", "-o", scratch("x.jsonl").string()}).code ==
        kExitUsage);

  const fs::path broken = scratch("broken.json");
  write_file(broken, "{\"data\": [");
  const Outcome bad = invoke({"ingest", "-i", broken.string(), "-o", scratch("b.jsonl").string()});
  CHECK(bad.code == kExitData);
  CHECK(bad.err.find("byte") != std::string::npos);
}

TEST_CASE("config precedence") {
  const fs::path cfg = scratch("seed.json");
  const fs::path out = scratch("syn.jsonl");
  auto seed_used = [&] { return nlohmann::json::parse(slurp(out.string() + ".config.json"))["seed"].get<int>(); };

  write_file(cfg, R"({"n_examples": 3})");
  ::setenv("PGC_SEED", "21", 1);
  REQUIRE(invoke({"synthetic", "--config", cfg.string(), "-o", out.string()}).code == 0);
  CHECK(seed_used() == 21);

  write_file(cfg, R"({"n_examples": 3, "seed": 8})");
  REQUIRE(invoke({"synthetic", "--config", cfg.string(), "-o", out.string()}).code == 0);
  CHECK(seed_used() == 8);

  REQUIRE(invoke({"synthetic", "--config", cfg.string(), "-o", out.string(), "--seed", "5"}).code == 0);
  CHECK(seed_used() == 5);
  ::unsetenv("PGC_SEED");

  ::setenv("PGC_SEED", "abc", 1);
  write_file(cfg, R"({"n_examples": 3})");
  CHECK(invoke({"synthetic", "--config", cfg.string(), "-o", out.string()}).code == kExitUsage);
  ::unsetenv("PGC_SEED");
}

TEST_CASE("synthetic output is deterministic") {
  const fs::path a = scratch("a.jsonl");
  const fs::path b = scratch("b.jsonl");
  REQUIRE(invoke({"synthetic", "--task", "gate", "--n-examples", "20", "--seed", "4", "-o", a.string()}).code == 0);
  REQUIRE(invoke({"synthetic", "--task", "gate", "--n-examples", "20", "--seed", "4", "-o", b.string()}).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(!slurp(a).empty());
}

TEST_CASE("ingest, stats and prompts") {
  const fs::path store = scratch("fixture.jsonl");
  REQUIRE(invoke({"ingest", "-i", kFixture, "-o", store.string()}).code == 0);
  CHECK(fs::exists(store.string() + ".config.json"));

  const Outcome stats = invoke({"stats", "-i", store.string()});
  REQUIRE(stats.code == 0);
  const auto j = nlohmann::json::parse(stats.out);
  CHECK(j["n_examples"] == 7);
  CHECK(j["n_extractive"] == 4);

  const Outcome prompts = invoke({"prompts", "-i", store.string(), "--version", "1"});
  REQUIRE(prompts.code == 0);
  std::istringstream lines(prompts.out);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto p = nlohmann::json::parse(line);
    CHECK(p["version"] == 1);
    CHECK(p["source_text"].get<std::string>().rfind("Question: ", 0) == 0);
    ++n;
  }
  CHECK(n == 7);
}

TEST_CASE("raw-baseline") {
  const fs::path store = scratch("rb.jsonl");
  REQUIRE(invoke({"ingest", "-i", kFixture, "-o", store.string()}).code == 0);
  const fs::path report = scratch("rb_report.json");
  const fs::path csv = scratch("rb_cat.csv");
  const Outcome r =
      invoke({"raw-baseline", "-i", store.string(), "-o", report.string(), "--category-csv", csv.string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(report));
  CHECK(j["e_em"] == 25.0);
  CHECK(j["g_em"] == 0.0);
  CHECK(j.contains("config"));
  CHECK(slurp(csv).rfind("category,f1,count\n", 0) == 0);
}

TEST_CASE("train, predict, eval and attention export") {
  const fs::path data = scratch("copy.jsonl");
  REQUIRE(invoke({"synthetic", "--n-examples", "12", "--word-pool", "20", "-o", data.string()}).code == 0);
  const fs::path ckpt = scratch("tiny.ckpt");
  const fs::path loss = scratch("loss.csv");
  fs::remove(ckpt);
  const Outcome t = invoke(with_tiny({"train", "-i", data.string(), "--checkpoint", ckpt.string(), "--loss-csv",
                                      loss.string(), "--epochs", "2", "--batch-size", "4"}));
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(fs::exists(ckpt));
  CHECK(slurp(loss).rfind("epoch,step,loss\n", 0) == 0);

  SUBCASE("resume continues from the saved step") {
    const Outcome again = invoke(with_tiny({"train", "-i", data.string(), "--checkpoint", ckpt.string(), "--epochs",
                                            "3", "--batch-size", "4", "--resume", "--loss-csv", loss.string()}));
    REQUIRE_MESSAGE(again.code == 0, again.err);
    std::istringstream rows(slurp(loss));
    std::string header, first;
    std::getline(rows, header);
    std::getline(rows, first);
    CHECK(first.rfind("2,7,", 0) == 0);
  }

  SUBCASE("predictions feed eval unchanged") {
    const fs::path preds = scratch("preds.jsonl");
    const Outcome p = invoke({"predict", "-i", data.string(), "--checkpoint", ckpt.string(), "-o", preds.string()});
    REQUIRE_MESSAGE(p.code == 0, p.err);
    std::ifstream in(preds);
    CHECK(eval::read_predictions_jsonl(in).size() == 12);

    const Outcome e = invoke({"eval", "-i", data.string(), "--predictions", preds.string()});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    const auto report = nlohmann::json::parse(e.out);
    CHECK(report["n_overall"] == 12);
    CHECK(report["n_extractive"] == 12);
  }

  SUBCASE("attention export") {
    const fs::path prefix = scratch("attn");
    const Outcome a = invoke({"export-attention", "--checkpoint", ckpt.string(), "--text", "w1 w2 w3", "-o",
                              prefix.string(), "--heads", "0", "1"});
    REQUIRE_MESSAGE(a.code == 0, a.err);
    CHECK(fs::exists(prefix.string() + ".config.json"));
    int csvs = 0;
    for (const auto& entry : fs::directory_iterator(prefix.parent_path())) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("attn", 0) == 0 && entry.path().extension() == ".csv") {
        ++csvs;
        CHECK(slurp(entry.path()).rfind("query,", 0) == 0);
      }
    }
    CHECK(csvs == 2);
    CHECK(invoke({"export-attention", "--checkpoint", ckpt.string(), "--text", "w1", "-o", prefix.string(), "--heads",
                  "7"})
              .code == kExitUsage);
  }

  SUBCASE("mismatched resume") {
    const Outcome m = invoke({"train", "-i", data.string(), "--checkpoint", ckpt.string(), "--resume", "--d-model",
                              "16", "--n-heads", "2", "--vocab-size", "64"});
    CHECK(m.code == kExitData);
  }
}

TEST_CASE("gradcheck command") {
  const Outcome g = invoke(with_tiny({"gradcheck"}));
  REQUIRE_MESSAGE(g.code == 0, g.err);
  CHECK(g.out.find("max relative error") != std::string::npos);
}
