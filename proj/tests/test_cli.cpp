#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "homodistil/checkpoint.hpp"
#include "homodistil/cli.hpp"
#include "homodistil/errors.hpp"

using namespace homodistil;
namespace fs = std::filesystem;

namespace {

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "homodistil_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const char* kSmallConfig = R"(# small and fast
synthetic_sentences = 300
seq_len = 8
hidden_dim = 8
ffn_dim = 16
num_heads = 2
batch_size = 4
teacher_iterations = 30
iterations = 20
prune_end_fraction = 0.5
final_ratio = 0.5
)";

fs::path small_config() {
  const fs::path p = workdir() / "small.cfg";
  if (!fs::exists(p)) std::ofstream(p) << kSmallConfig;
  return p;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::vector<const char*> argv{"homodistil"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

const fs::path& teacher_dir() {
  static const fs::path dir = [] {
    const fs::path d = workdir() / "teacher";
    const auto r = run({"pretrain-teacher", "--config", small_config().string(), "--out", d.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("config parsing") {
  ExperimentConfig c;
  c.load_file(small_config());
  CHECK(c.hidden_dim == 8);
  CHECK(c.final_ratio == 0.5);
  c.apply_override("scorer = platon");
  CHECK(c.scorer == "platon");
  c.apply_override("compare_end_fractions=0, 0.25");
  CHECK(c.compare_end_fractions == std::vector<double>{0.0, 0.25});
  CHECK_THROWS_AS(c.apply_override("no_such_key=1"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("hidden_dim"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("hidden_dim=eight"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("learning_rate=nan"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("monotone_masks=maybe"), ConfigError);

  const fs::path dup = workdir() / "dup.cfg";
  std::ofstream(dup) << "seed = 1\nseed = 2\n";
  CHECK_THROWS_AS(ExperimentConfig{}.load_file(dup), ConfigError);
  const fs::path junk = workdir() / "junk.cfg";
  std::ofstream(junk) << "just words\n";
  CHECK_THROWS_AS(ExperimentConfig{}.load_file(junk), ConfigError);

  // The resolved text reads back to the same configuration.
  const fs::path echo = workdir() / "echo.cfg";
  std::ofstream(echo) << c.to_text();
  ExperimentConfig back;
  back.load_file(echo);
  CHECK(back.to_text() == c.to_text());
  CHECK(back.keys().size() == c.keys().size());

  ExperimentConfig bad;
  bad.kl_direction = "sideways";
  CHECK_THROWS_AS(bad.distill_config(), ConfigError);
  bad = ExperimentConfig{};
  bad.prune_end_fraction = 1.5;
  CHECK_THROWS_AS(bad.distill_config(), ConfigError);
  bad = ExperimentConfig{};
  bad.scorer = "random";
  CHECK_THROWS_AS(bad.distill_config(), ConfigError);
}

TEST_CASE("config maps onto training settings") {
  ExperimentConfig c;
  c.iterations = 200;
  c.prune_start_fraction = 0.1;
  c.prune_end_fraction = 0.7;
  c.final_ratio = 0.25;
  c.alpha_hidden = 0.0;
  const auto t = c.distill_config();
  CHECK(t.schedule.base.start == 20);
  CHECK(t.schedule.base.end == 140);
  CHECK(t.schedule.base.final_ratio == 0.25);
  CHECK(t.weights.hidden == 0.0);
  const auto teacher = c.teacher_config();
  CHECK(teacher.iterations == c.teacher_iterations);
  CHECK(teacher.schedule.base.final_ratio == 1.0);
  CHECK(c.model_config(50).vocab_size == 50);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == cli::kExitInput);
  CHECK(run({"fly"}).code == cli::kExitInput);
  CHECK(run({"distill"}).code == cli::kExitInput);
  CHECK(run({"distill", "--out", (workdir() / "x").string(), "--config", "/no/such/file"}).code ==
        cli::kExitInput);
  const auto unknown = run({"distill", "--out", (workdir() / "x").string(), "--set", "wobble=3"});
  CHECK(unknown.code == cli::kExitInput);
  CHECK(unknown.err.find("wobble") != std::string::npos);
  CHECK(run({"--help"}).code == cli::kExitOk);
}

TEST_CASE("missing inputs exit with 2") {
  const auto corpus = run({"pretrain-teacher", "--config", small_config().string(), "--out",
                           (workdir() / "nocorpus").string(), "--set", "corpus=/no/such/corpus.txt"});
  CHECK(corpus.code == cli::kExitInput);
  CHECK(corpus.err.find("corpus") != std::string::npos);

  const auto teacher = run({"distill", "--config", small_config().string(), "--out", (workdir() / "noteacher").string()});
  CHECK(teacher.code == cli::kExitInput);
  CHECK(teacher.err.find("teacher") != std::string::npos);

  const auto absent = run({"distill", "--config", small_config().string(), "--out", (workdir() / "absent").string(),
                           "--set", "teacher=" + (workdir() / "nowhere").string()});
  CHECK(absent.code == cli::kExitInput);
}

TEST_CASE("pretrain-teacher outputs") {
  const fs::path& d = teacher_dir();
  CHECK(fs::exists(d / "config.txt"));
  CHECK(fs::exists(d / "checkpoint" / kManifestName));
  CHECK(fs::exists(d / "checkpoint" / "vocab.json"));
  const auto summary = read_json(d / "summary.json");
  CHECK(summary["heldout_mlm"].get<double>() > 0.0);
  std::ifstream metrics(d / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(metrics, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["iteration"] == lines);
    ++lines;
  }
  CHECK(lines == 30);
  ExperimentConfig echoed;
  echoed.load_file(d / "config.txt");
  CHECK(echoed.hidden_dim == 8);
}

TEST_CASE("pretrain-teacher is deterministic per seed") {
  const fs::path a = workdir() / "seed7a";
  const fs::path b = workdir() / "seed7b";
  const fs::path c = workdir() / "seed8";
  for (const auto& [dir, seed] : {std::pair{a, "7"}, std::pair{b, "7"}, std::pair{c, "8"}}) {
    REQUIRE(run({"pretrain-teacher", "--config", small_config().string(), "--seed", seed, "--out", dir.string()})
                .code == 0);
  }
  CHECK(checkpoint_digest(a / "checkpoint") == checkpoint_digest(b / "checkpoint"));
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(checkpoint_digest(a / "checkpoint") != checkpoint_digest(c / "checkpoint"));
}

TEST_CASE("distill and export-compact") {
  const fs::path student = workdir() / "student";
  const auto r = run({"distill", "--config", small_config().string(), "--out", student.string(), "--set",
                      "teacher=" + teacher_dir().string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto summary = read_json(student / "summary.json");
  CHECK(summary["kept"]["hidden"] == 4);
  CHECK(summary["kept"]["ffn.0"] == 8);
  CHECK(summary["kept"]["vo.1"] == 4);
  CHECK(summary["kept"]["qk.0"] == 4);
  const auto ckpt = load_checkpoint(student / "checkpoint");
  REQUIRE(ckpt.masks);
  CHECK(ckpt.masks->kept(pruning::GroupId{pruning::GroupKind::Hidden, -1}) == 4);

  const fs::path compact = workdir() / "compact";
  const auto e = run({"export-compact", "--config", small_config().string(), "--out", compact.string(), "--set",
                      "checkpoint=" + student.string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const auto cs = read_json(compact / "summary.json");
  CHECK(cs["hidden_dim"] == 4);
  CHECK(cs["max_logit_difference"].get<double>() <= 1e-10);
  const auto narrow = load_checkpoint(compact / "checkpoint");
  CHECK(narrow.model.config.hidden_dim == 4);
  CHECK(narrow.model.layers[0].w_in.cols() == 8);

  const fs::path eval = workdir() / "eval";
  const auto ev = run({"eval-mlm", "--config", small_config().string(), "--out", eval.string(), "--set",
                       "checkpoint=" + compact.string()});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(read_json(eval / "eval.json")["heldout_mlm"].get<double>() ==
        doctest::Approx(summary["heldout_mlm"].get<double>()).epsilon(1e-9));
}

TEST_CASE("teacher shape mismatch exits with 2") {
  const auto r = run({"distill", "--config", small_config().string(), "--out", (workdir() / "mismatch").string(),
                      "--set", "teacher=" + teacher_dir().string(), "--set", "hidden_dim=16"});
  CHECK(r.code == cli::kExitInput);
  CHECK(r.err.find("hidden_dim") != std::string::npos);
}

TEST_CASE("tampered checkpoints exit with 2") {
  const fs::path copy = workdir() / "tampered";
  fs::remove_all(copy);
  fs::copy(teacher_dir(), copy, fs::copy_options::recursive);
  {
    std::fstream f(copy / "checkpoint" / "model.layers.0.ffn.input.weight.bin",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put('\x7f');
  }
  const auto r = run({"eval-mlm", "--config", small_config().string(), "--out", (workdir() / "tamper_eval").string(),
                      "--set", "checkpoint=" + copy.string()});
  CHECK(r.code == cli::kExitInput);
  CHECK(r.err.find("checksum") != std::string::npos);

  // A teacher has no masks, so it cannot be compacted.
  const auto nomask = run({"export-compact", "--config", small_config().string(), "--out",
                           (workdir() / "nomask").string(), "--set", "checkpoint=" + teacher_dir().string()});
  CHECK(nomask.code == cli::kExitInput);
}

TEST_CASE("compare-schedules writes curves") {
  const fs::path d = workdir() / "compare";
  const auto r = run({"compare-schedules", "--config", small_config().string(), "--out", d.string(), "--set",
                      "teacher=" + teacher_dir().string(), "--set", "compare_end_fractions=0,0.5"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::ifstream curves(d / "curves.csv");
  std::string header;
  std::getline(curves, header);
  CHECK(header == "run_id,iteration,d_kl,r_t");
  int rows = 0;
  for (std::string line; std::getline(curves, line);) ++rows;
  CHECK(rows == 40);
  std::ifstream summary(d / "summary.csv");
  std::getline(summary, header);
  CHECK(header.rfind("run_id,end_fraction", 0) == 0);
  std::string first;
  std::getline(summary, first);
  CHECK(first.rfind("single_shot,0.00,", 0) == 0);
  CHECK(read_json(d / "summary.json").contains("ordering_holds"));
}

TEST_CASE("generate-corpus") {
  const fs::path d = workdir() / "corpus";
  REQUIRE(run({"generate-corpus", "--out", d.string(), "--set", "synthetic_sentences=25"}).code == 0);
  std::ifstream in(d / "corpus.txt");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 25);
  // A file corpus trains like the synthetic one.
  const auto r = run({"pretrain-teacher", "--config", small_config().string(), "--out", (workdir() / "filecorpus").string(),
                      "--set", "corpus=" + (d / "corpus.txt").string(), "--set", "teacher_iterations=2"});
  CHECK_MESSAGE(r.code == 0, r.err);
}

TEST_CASE("the installed binary maps divergence to exit 1") {
  const std::string cmd = std::string(HOMODISTIL_CLI_PATH) + " distill --config " + small_config().string() +
                          " --out " + (workdir() / "diverge").string() + " --set teacher=" + teacher_dir().string() +
                          " --set learning_rate=1e200 --set warmup_fraction=0 2> " +
                          (workdir() / "diverge.err").string();
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 1);
  CHECK(slurp(workdir() / "diverge.err").find("NaN") != std::string::npos);
}
