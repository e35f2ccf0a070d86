#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = MASC_CLI_PATH;

fs::path work_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "masc_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  std::string cmd = kCli + " " + args + " >" +
                    (work_dir() / "stdout.txt").string() + " 2>" +
                    (work_dir() / "stderr.txt").string();
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

fs::path config_path() {
  fs::path p = work_dir() / "config.json";
  if (!fs::exists(p)) {
    write_file(p, R"({
      "prompts_per_class": 100,
      "seed": 7,
      "surrogate": {"epochs": 12},
      "sweep": {"lambdas": [1e-4], "alphas": [1.0, 1.5], "taus": [0.1]}
    })");
  }
  return p;
}

// the happy path builds each artifact once; later cases reuse them
struct Artifacts {
  fs::path model, traces, surrogate, mask;

  static const Artifacts& get() {
    static Artifacts a = build();
    return a;
  }

 private:
  static Artifacts build() {
    Artifacts a;
    a.model = work_dir() / "model.bin";
    a.traces = work_dir() / "traces.bin";
    a.surrogate = work_dir() / "surrogate.bin";
    a.mask = work_dir() / "mask.json";
    std::string cfg = " --config " + config_path().string();
    REQUIRE(run("fixture --out " + a.model.string() + cfg) == 0);
    REQUIRE(run("collect --model " + a.model.string() + " --out " +
                a.traces.string() + cfg) == 0);
    REQUIRE(run("train-surrogate --traces " + a.traces.string() + " --out " +
                a.surrogate.string() + cfg) == 0);
    REQUIRE(run("optimize --surrogate " + a.surrogate.string() + " --traces " +
                a.traces.string() + " --out " + a.mask.string() + cfg) == 0);
    return a;
  }
};

}  // namespace

TEST_CASE("pipeline subcommands produce artifacts and manifests") {
  const Artifacts& a = Artifacts::get();
  for (const fs::path& p : {a.model, a.traces, a.surrogate, a.mask}) {
    CHECK(fs::exists(p));
    fs::path manifest = p;
    manifest += ".manifest.json";
    REQUIRE(fs::exists(manifest));
    auto doc = nlohmann::json::parse(slurp(manifest));
    CHECK(doc.at("artifact") == p.filename().string());
    CHECK(doc.at("creator") == "masc");
  }
  auto mask = nlohmann::json::parse(slurp(a.mask));
  CHECK(mask.at("layers") == 4);
  CHECK(mask.at("experts") == 8);
  CHECK(mask.at("entries").size() > 0);
}

TEST_CASE("apply reports a successful flip at a moderate alpha") {
  const Artifacts& a = Artifacts::get();
  fs::path report = work_dir() / "report.json";
  std::string cfg = " --config " + config_path().string();
  REQUIRE(run("apply --model " + a.model.string() + " --mask " +
              a.mask.string() + " --alpha 1.5 --report " + report.string() +
              cfg) == 0);
  auto doc = nlohmann::json::parse(slurp(report));
  CHECK(doc.at("alpha") == 1.5);
  CHECK(doc.at("success").get<double>() >= 0.8);
  CHECK(doc.at("utility").get<double>() >= 0.9);
  CHECK(doc.at("degenerate").get<double>() <= 0.1);
}

TEST_CASE("apply at zero alpha is inert and byte-deterministic") {
  const Artifacts& a = Artifacts::get();
  fs::path r1 = work_dir() / "report_zero_a.json";
  fs::path r2 = work_dir() / "report_zero_b.json";
  std::string cfg = " --config " + config_path().string();
  std::string base = "apply --model " + a.model.string() + " --mask " +
                     a.mask.string() + " --alpha 0 --report ";
  REQUIRE(run(base + r1.string() + cfg) == 0);
  REQUIRE(run(base + r2.string() + cfg) == 0);
  CHECK(slurp(r1) == slurp(r2));
  auto doc = nlohmann::json::parse(slurp(r1));
  CHECK(doc.at("success").get<double>() == 0.0);  // nothing flips unsteered
  CHECK(doc.at("utility").get<double>() == 1.0);
  CHECK(doc.at("degenerate").get<double>() == 0.0);
}

TEST_CASE("optimize reruns reproduce the mask byte for byte") {
  const Artifacts& a = Artifacts::get();
  fs::path again = work_dir() / "mask_again.json";
  std::string cfg = " --config " + config_path().string();
  REQUIRE(run("optimize --surrogate " + a.surrogate.string() + " --traces " +
              a.traces.string() + " --out " + again.string() + cfg) == 0);
  CHECK(slurp(again) == slurp(a.mask));
}

TEST_CASE("sweep writes the full grid as csv") {
  const Artifacts& a = Artifacts::get();
  fs::path csv = work_dir() / "sweep.csv";
  std::string cfg = " --config " + config_path().string();
  REQUIRE(run("sweep --model " + a.model.string() + " --surrogate " +
              a.surrogate.string() + " --traces " + a.traces.string() +
              " --out " + csv.string() + " --jobs 2" + cfg) == 0);
  std::string text = slurp(csv);
  CHECK(text.rfind("lambda,alpha,tau,success,utility_before,utility_after,"
                   "nnz,degenerate\n", 0) == 0);
  std::size_t rows = 0;
  for (char c : text) {
    if (c == '\n') ++rows;
  }
  CHECK(rows == 3);  // header plus the 1x2x1 grid
}

TEST_CASE("analyze exports selection deltas") {
  const Artifacts& a = Artifacts::get();
  fs::path csv = work_dir() / "delta.csv";
  std::string cfg = " --config " + config_path().string();
  REQUIRE(run("analyze --model " + a.model.string() + " --mask " +
              a.mask.string() + " --alpha 1.5 --out " + csv.string() + cfg) ==
          0);
  std::string text = slurp(csv);
  CHECK(text.rfind("layer,expert,delta\n", 0) == 0);
  std::size_t rows = 0;
  for (char c : text) {
    if (c == '\n') ++rows;
  }
  CHECK(rows == 1 + 4 * 8);
}

TEST_CASE("missing inputs exit with the io code") {
  CHECK(run("collect --model " + (work_dir() / "nope.bin").string() +
            " --out " + (work_dir() / "x.bin").string()) == 2);
  CHECK(run("train-surrogate --traces " + (work_dir() / "nope.bin").string() +
            " --out " + (work_dir() / "x.bin").string()) == 2);
  CHECK(run("apply --model " + (work_dir() / "nope.bin").string() + " --mask " +
            Artifacts::get().mask.string() + " --alpha 1 --report " +
            (work_dir() / "x.json").string()) == 2);
}

TEST_CASE("corrupt inputs exit with the format code") {
  const Artifacts& a = Artifacts::get();
  fs::path bad = work_dir() / "bad_traces.bin";
  std::string bytes = slurp(a.traces);
  write_file(bad, bytes.substr(0, bytes.size() / 3));
  CHECK(run("train-surrogate --traces " + bad.string() + " --out " +
            (work_dir() / "x.bin").string()) == 3);

  fs::path bad_mask = work_dir() / "bad_mask.json";
  write_file(bad_mask, "{\"layers\": 4");
  CHECK(run("apply --model " + a.model.string() + " --mask " +
            bad_mask.string() + " --alpha 1 --report " +
            (work_dir() / "x.json").string()) == 3);
}

TEST_CASE("unknown config keys are format errors") {
  fs::path bad = work_dir() / "bad_config.json";
  write_file(bad, R"({"layers": 4, "exprets": 8})");
  CHECK(run("fixture --out " + (work_dir() / "x.bin").string() + " --config " +
            bad.string()) == 3);
}
