#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "json.hpp"
#include "radnet/checkpoint.hpp"
#include "radnet/cli.hpp"
#include "radnet/image_io.hpp"
#include "support/fixtures.hpp"

using namespace radnet;
using radnet::testing::slurp;
using radnet::testing::spit;
using radnet::testing::TempDir;
using radnet::testing::tiny_spec;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = radnet::cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) v.push_back(l);
  return v;
}

// Blob data plus a one-block spec, trained for `epochs`.
struct ToyRun {
  TempDir dir{"cli"};
  std::filesystem::path manifest, spec, out;

  explicit ToyRun(const std::string& name = "run") {
    manifest = radnet::testing::write_blob_manifest(dir.path(), 12, 8, 8, 5);
    spec = dir / "toy.spec";
    spit(spec, tiny_spec().to_text());
    out = dir / name;
  }

  Outcome train(int epochs, const std::filesystem::path& where, std::vector<std::string> extra = {}) {
    std::vector<std::string> args = {"train", "--manifest", manifest.string(), "--spec", spec.string(),
                                     "--epochs", std::to_string(epochs), "--seed", "3",
                                     "--lr", "1e-3", "--batch-size", "4", "--out", where.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return invoke(args);
  }
};

std::filesystem::path three_class_checkpoint(const std::filesystem::path& dir, Precision p = Precision::f32) {
  auto path = dir / "three.ckpt";
  auto spec = tiny_spec(Task::three_class);
  if (p == Precision::f32) {
    auto m = build<float>(spec);
    save_checkpoint<float>(path, m, nullptr, {"covid", "normal", "pneumonia"});
  } else {
    auto m = build<double>(spec);
    save_checkpoint<double>(path, m, nullptr, {"covid", "normal", "pneumonia"});
  }
  return path;
}

void write_gray_png(const std::filesystem::path& p, std::size_t side, float v) {
  write_png(p, Tensor<float>({1, side, side}, v));
}

}  // namespace

TEST(CliTrain, ProducesCheckpointLogAndReport) {
  ToyRun run;
  auto r = run.train(3, run.out);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(run.out / "model.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(run.out / "report.txt"));
  auto log = lines(slurp(run.out / "train.log"));
  ASSERT_EQ(log.size(), 3u);
  for (std::size_t i = 0; i < log.size(); ++i) {
    auto j = nlohmann::json::parse(log[i]);
    EXPECT_EQ(j["epoch"], static_cast<int>(i + 1));
    EXPECT_TRUE(j.contains("train_loss"));
    EXPECT_TRUE(j.contains("val_acc"));
  }
  auto report = nlohmann::json::parse(slurp(run.out / "report.json"));
  EXPECT_EQ(report["split"], "val");
  EXPECT_EQ(report["confusion_matrix"].size(), 2u);
  EXPECT_NE(r.out.find("seed=3"), std::string::npos);
  EXPECT_NE(r.out.find("parameters="), std::string::npos);
}

TEST(CliTrain, SameSeedSameBytes) {
  ToyRun run;
  ASSERT_EQ(run.train(2, run.dir / "a").code, 0);
  ASSERT_EQ(run.train(2, run.dir / "b").code, 0);
  EXPECT_EQ(slurp(run.dir / "a" / "train.log"), slurp(run.dir / "b" / "train.log"));
  EXPECT_EQ(slurp(run.dir / "a" / "model.ckpt"), slurp(run.dir / "b" / "model.ckpt"));
  EXPECT_EQ(slurp(run.dir / "a" / "report.json"), slurp(run.dir / "b" / "report.json"));
}

TEST(CliTrain, DoublePrecisionCheckpoint) {
  ToyRun run;
  ASSERT_EQ(run.train(1, run.out, {"--precision", "f64"}).code, 0);
  EXPECT_EQ(peek_checkpoint(run.out / "model.ckpt").precision, Precision::f64);
}

TEST(CliTrain, BadInputsExitWithUsageCode) {
  ToyRun run;
  auto missing = invoke({"train", "--manifest", (run.dir / "nope.csv").string(), "--out", run.out.string()});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("nope.csv"), std::string::npos) << missing.err;
  EXPECT_EQ(run.train(1, run.out, {"--task", "three_class"}).code, 2);
  EXPECT_EQ(run.train(1, run.out, {"--preset", "nonsense"}).code, 2);
  EXPECT_EQ(run.train(1, run.out, {"--split-ratios", "0.5,0.2"}).code, 2);
  EXPECT_EQ(invoke({"train"}).code, 2);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(CliEvaluate, CheckpointOnTestSplit) {
  ToyRun run;
  ASSERT_EQ(run.train(2, run.out).code, 0);
  auto csv = slurp(run.manifest);
  std::string with_split = "# class:0:blank\n# class:1:blob\npath,label,patient_id,split\n";
  auto rows = lines(csv);
  for (std::size_t i = 3; i < rows.size(); ++i) with_split += rows[i] + ",test\n";
  auto test_manifest = run.dir / "test.csv";
  spit(test_manifest, with_split);
  auto r = invoke({"evaluate", "--checkpoint", (run.out / "model.ckpt").string(), "--manifest",
                test_manifest.string(), "--split", "test", "--out", (run.dir / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(slurp(run.dir / "eval" / "report.json"));
  EXPECT_EQ(j["samples"], 12);
  EXPECT_EQ(j["split"], "test");
  std::uint64_t total = 0;
  for (auto& row : j["confusion_matrix"])
    for (auto& v : row) total += v.get<std::uint64_t>();
  EXPECT_EQ(total, 12u);
}

TEST(CliEvaluate, ClassCountMismatchRejected) {
  ToyRun run;
  ASSERT_EQ(run.train(1, run.out).code, 0);
  auto m3 = run.dir / "three.csv";
  spit(m3, "# class:0:a\n# class:1:b\n# class:2:c\npath,label,patient_id,split\nimg0.pgm,a,p0,test\n");
  auto r = invoke({"evaluate", "--checkpoint", (run.out / "model.ckpt").string(), "--manifest", m3.string(),
                "--out", (run.dir / "eval").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("3"), std::string::npos);
}

TEST(CliEvaluate, InjectedPredictionsReproduceReferenceScores) {
  TempDir dir("pred");
  std::ostringstream csv;
  csv << "# class:0:non-Covid\n# class:1:COVID-19\ntrue,pred\n";
  auto rows = [&](const char* t, const char* p, int n) {
    for (int i = 0; i < n; ++i) csv << t << ',' << p << '\n';
  };
  rows("non-Covid", "non-Covid", 198);
  rows("non-Covid", "COVID-19", 2);
  rows("COVID-19", "non-Covid", 12);
  rows("COVID-19", "COVID-19", 188);
  spit(dir / "pred.csv", csv.str());
  auto r = invoke({"evaluate", "--predictions", (dir / "pred.csv").string(), "--out", (dir / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(slurp(dir / "o" / "report.json"));
  EXPECT_EQ(j["confusion_matrix"], nlohmann::json::parse("[[198,2],[12,188]]"));
  EXPECT_NEAR(j["per_class"][0]["precision"].get<double>(), 0.94, 0.005);
  EXPECT_NEAR(j["per_class"][0]["recall"].get<double>(), 0.99, 0.005);
  EXPECT_NEAR(j["per_class"][0]["f1"].get<double>(), 0.97, 0.005);
  EXPECT_NEAR(j["per_class"][1]["precision"].get<double>(), 0.99, 0.005);
  EXPECT_NEAR(j["per_class"][1]["recall"].get<double>(), 0.94, 0.005);
  EXPECT_NEAR(j["per_class"][1]["f1"].get<double>(), 0.96, 0.005);
  EXPECT_DOUBLE_EQ(j["accuracy"].get<double>(), 0.965);
  EXPECT_NE(r.out.find("0.94"), std::string::npos);

  spit(dir / "bad.csv", "# class:0:a\n# class:1:b\ntrue,pred\na,zzz\n");
  EXPECT_EQ(invoke({"evaluate", "--predictions", (dir / "bad.csv").string(), "--out", (dir / "o").string()}).code, 2);
}

TEST(CliPredict, ThreeClassProbabilitiesSumToOne) {
  TempDir dir("predict");
  auto ckpt = three_class_checkpoint(dir.path());
  write_gray_png(dir / "gray.png", 20, 0.3f);
  auto r = invoke({"predict", "--checkpoint", ckpt.string(), (dir / "gray.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = nlohmann::json::parse(lines(r.out).at(0));
  double sum = 0;
  for (auto& [k, v] : j["probabilities"].items()) sum += v.get<double>();
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_EQ(j["probabilities"].size(), 3u);
  EXPECT_TRUE(j["probabilities"].contains("pneumonia"));
  int idx = j["predicted_index"];
  EXPECT_EQ(j["predicted"], (std::vector<std::string>{"covid", "normal", "pneumonia"})[static_cast<std::size_t>(idx)]);
}

TEST(CliPredict, CorruptImageExitsTwoAndNamesFile) {
  TempDir dir("predict");
  auto ckpt = three_class_checkpoint(dir.path());
  spit(dir / "broken.png", "not an image");
  auto r = invoke({"predict", "--checkpoint", ckpt.string(), "--image", (dir / "broken.png").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos) << r.err;
  spit(dir / "broken.ckpt", "RDNT");
  EXPECT_EQ(invoke({"predict", "--checkpoint", (dir / "broken.ckpt").string(), (dir / "broken.png").string()}).code, 2);
}

TEST(CliExplain, WritesHeatmapOverlayAndGrade) {
  TempDir dir("explain");
  auto ckpt = three_class_checkpoint(dir.path(), Precision::f64);
  write_gray_png(dir / "img.png", 16, 0.6f);
  auto out = dir / "x";
  auto r = invoke({"explain", "--checkpoint", ckpt.string(), (dir / "img.png").string(), "--out", out.string(),
                "--target-class", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (auto f : {"heatmap.png", "overlay.png", "explain.json"}) EXPECT_TRUE(std::filesystem::exists(out / f)) << f;
  auto j = nlohmann::json::parse(slurp(out / "explain.json"));
  EXPECT_EQ(j["heatmap"]["target_index"], 2);
  EXPECT_EQ(j["zone_grade"]["zones"].size(), 6u);
  auto heat = load_image<float>(out / "heatmap.png", {8, 8});
  EXPECT_EQ(heat.shape(), (Shape{3, 8, 8}));
}

TEST(CliExplain, BlackImageAndRepeatability) {
  TempDir dir("explain");
  auto ckpt = three_class_checkpoint(dir.path());
  write_gray_png(dir / "black.png", 8, 0.0f);
  for (auto sub : {"a", "b"}) {
    auto r = invoke({"explain", "--checkpoint", ckpt.string(), (dir / "black.png").string(), "--out",
                  (dir / sub).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir / "a" / "heatmap.png"), slurp(dir / "b" / "heatmap.png"));
  EXPECT_EQ(slurp(dir / "a" / "overlay.png"), slurp(dir / "b" / "overlay.png"));
  EXPECT_EQ(slurp(dir / "a" / "explain.json"), slurp(dir / "b" / "explain.json"));
  auto bad = invoke({"explain", "--checkpoint", ckpt.string(), (dir / "black.png").string(), "--out",
                  (dir / "c").string(), "--target-class", "5"});
  EXPECT_EQ(bad.code, 2);
}

TEST(CliBinary, ExitCodesFromSubprocess) {
  TempDir dir("bin");
  std::string exe = RADNET_CLI_PATH;
  auto status = [](const std::string& cmd) {
    int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(exe + " --help"), 0);
  EXPECT_EQ(status(exe + " train --manifest " + (dir / "missing.csv").string()), 2);
  EXPECT_EQ(status(exe + " bogus"), 2);
}
