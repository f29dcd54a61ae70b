#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "radnet/checkpoint.hpp"
#include "radnet/dataset.hpp"
#include "radnet/errors.hpp"
#include "radnet/gradcam.hpp"
#include "radnet/metrics.hpp"
#include "radnet/model.hpp"
#include "radnet/trainer.hpp"

namespace radnet::cli {

/// Process exit codes.
enum ExitCode : int { kOk = 0, kUsage = 2, kNumeric = 3 };

struct RunConfig {
  std::string subcommand;
  std::string manifest;
  std::string spec;
  std::string checkpoint;
  std::string task;
  std::string preset;
  std::optional<int> epochs;
  std::size_t batch_size = 8;
  double lr = 5e-5;
  std::uint64_t seed = 42;
  std::string out = ".";
  std::string precision = "f32";
  double threshold = 0.5;
  std::vector<double> ratios;
  bool image_split = false;
  std::string split = "test";
  std::string predictions;
  std::string image;
  std::optional<int> target_class;
  double alpha = 0.4;
  double activation_threshold = 0.5;
  double area_fraction = 0.05;
};

struct Preset {
  Task task;
  int epochs;
  std::vector<double> ratios;
};

/// cxr presets hold out the test split in the manifest and split the rest 80/20; the CT
/// preset splits 60/20/20.
inline const std::map<std::string, Preset>& presets() {
  static const std::map<std::string, Preset> p = {
      {"cxr-binary", {Task::binary, 20, {0.8, 0.2}}},
      {"cxr-3class", {Task::three_class, 20, {0.8, 0.2}}},
      {"ct-3class", {Task::three_class, 30, {0.6, 0.2, 0.2}}},
  };
  return p;
}

namespace detail {

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

inline std::filesystem::path out_dir(const RunConfig& c) {
  std::filesystem::path d(c.out);
  std::error_code ec;
  std::filesystem::create_directories(d, ec);
  if (ec) throw IoError("cannot create output directory " + d.string());
  return d;
}

inline std::vector<std::string> class_names_or_default(std::vector<std::string> names, Task task) {
  if (!names.empty()) return names;
  for (std::size_t i = 0; i < num_classes(task); ++i) names.push_back("class" + std::to_string(i));
  return names;
}

template <typename T>
int train(const RunConfig& c, std::ostream& out) {
  DatasetManifest manifest = parse_manifest_file(c.manifest);

  std::optional<Preset> preset;
  if (!c.preset.empty()) {
    auto it = presets().find(c.preset);
    if (it == presets().end()) throw ArgumentError("unknown preset '" + c.preset + "'");
    preset = it->second;
  }
  ModelSpec spec;
  if (!c.spec.empty()) spec = ModelSpec::from_text(read_text(c.spec));
  else spec.task = manifest.task;
  spec.seed = c.seed;
  Task wanted = spec.task;
  if (preset) wanted = preset->task;
  if (!c.task.empty()) wanted = parse_task(c.task);
  if (wanted != manifest.task || spec.task != manifest.task)
    throw ValidationError(std::string("manifest has ") + std::to_string(manifest.classes.size()) +
                          " classes but the requested task is " + to_string(wanted));
  spec.validate();

  std::vector<double> ratios = c.ratios;
  if (ratios.empty()) ratios = preset ? preset->ratios : std::vector<double>{0.8, 0.2};
  manifest = patient_split(std::move(manifest), ratios, c.seed,
                           c.image_split ? Grouping::image : Grouping::patient);

  ManifestSource<T> train_set(manifest, Split::train, spec.input);
  ManifestSource<T> val_set(manifest, Split::val, spec.input);
  if (train_set.size() == 0 || val_set.size() == 0)
    throw ValidationError("train and val splits must both be non-empty");

  auto dir = out_dir(c);
  TrainConfig tc;
  tc.epochs = c.epochs ? *c.epochs : (preset ? preset->epochs : 20);
  if (tc.epochs <= 0) throw ArgumentError("epochs must be positive");
  tc.batch_size = c.batch_size;
  tc.seed = c.seed;
  tc.lr = c.lr;
  tc.threshold = c.threshold;
  tc.checkpoint_path = dir / "model.ckpt";
  tc.class_names = manifest.classes;

  out << "seed=" << c.seed << " precision=" << c.precision << " epochs=" << tc.epochs
      << " train=" << train_set.size() << " val=" << val_set.size() << '\n';

  std::ofstream log(dir / "train.log", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "train.log").string());
  tc.on_epoch = [&](const EpochRecord& r) {
    log << to_line(r) << '\n';
    log.flush();
    out << to_line(r) << '\n';
  };

  Model<T> model = build<T>(spec);
  out << "parameters=" << model.parameter_count() << '\n';
  train_loop(model, train_set, val_set, tc);

  auto best = load_checkpoint<T>(dir / "model.ckpt");
  EvalResult v = evaluate(best.model, val_set, c.batch_size, c.threshold);
  EvalReport report = make_report(confusion(v.labels, v.predictions, manifest.classes.size()),
                                  manifest.classes);
  auto j = to_json(report);
  j["split"] = "val";
  j["seed"] = c.seed;
  j["loss"] = v.loss;
  write_text(dir / "report.json", j.dump(2) + "\n");
  write_text(dir / "report.txt", to_text(report));
  return kOk;
}

inline EvalReport report_from_predictions(const std::filesystem::path& path) {
  // Same class-declaration block as a manifest, then "true,pred" rows.
  std::istringstream in(read_text(path));
  std::vector<std::string> classes;
  std::map<std::string, int> ids;
  std::vector<int> truth, pred;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  auto lookup = [&](const std::string& s) {
    if (auto it = ids.find(s); it != ids.end()) return it->second;
    try {
      std::size_t pos = 0;
      int v = std::stoi(s, &pos);
      if (pos == s.size() && v >= 0 && v < static_cast<int>(classes.size())) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError("line " + std::to_string(lineno) + ": unknown class '" + s + "'");
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("# class:", 0) == 0) {
      auto rest = line.substr(8);
      auto colon = rest.find(':');
      if (colon == std::string::npos) throw ParseError(lineno, "expected '# class:<id>:<name>'");
      auto name = rest.substr(colon + 1);
      ids[name] = static_cast<int>(classes.size());
      classes.push_back(name);
      continue;
    }
    if (line[0] == '#') continue;
    if (!header) {
      if (line != "true,pred") throw ParseError(lineno, "header must be 'true,pred'");
      if (classes.size() < 2) throw ValidationError("predictions file declares fewer than 2 classes");
      header = true;
      continue;
    }
    auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(lineno, "expected 'true,pred'");
    truth.push_back(lookup(line.substr(0, comma)));
    pred.push_back(lookup(line.substr(comma + 1)));
  }
  if (!header) throw ParseError(lineno + 1, "missing header row");
  return make_report(confusion(truth, pred, classes.size()), classes);
}

template <typename T>
int evaluate_checkpoint(const RunConfig& c, std::ostream& out) {
  auto ckpt = load_checkpoint<T>(c.checkpoint);
  DatasetManifest manifest = parse_manifest_file(c.manifest);
  if (manifest.classes.size() != num_classes(ckpt.model.spec().task))
    throw ValidationError("checkpoint predicts " +
                          std::to_string(num_classes(ckpt.model.spec().task)) +
                          " classes but the manifest declares " +
                          std::to_string(manifest.classes.size()));
  auto split = parse_split(c.split);
  if (!split || *split == Split::unassigned) throw ArgumentError("unknown split '" + c.split + "'");
  ManifestSource<T> data(manifest, *split, ckpt.model.spec().input, false);
  if (data.size() == 0) throw ValidationError("split '" + c.split + "' is empty");
  EvalResult r = evaluate(ckpt.model, data, c.batch_size, c.threshold);
  EvalReport report = make_report(confusion(r.labels, r.predictions, manifest.classes.size()),
                                  manifest.classes);
  auto dir = out_dir(c);
  auto j = to_json(report);
  j["split"] = c.split;
  j["loss"] = r.loss;
  write_text(dir / "report.json", j.dump(2) + "\n");
  write_text(dir / "report.txt", to_text(report));
  out << to_text(report);
  return kOk;
}

inline int evaluate_predictions(const RunConfig& c, std::ostream& out) {
  EvalReport report = report_from_predictions(c.predictions);
  auto dir = out_dir(c);
  auto j = to_json(report);
  j["source"] = "predictions";
  write_text(dir / "report.json", j.dump(2) + "\n");
  write_text(dir / "report.txt", to_text(report));
  out << to_text(report);
  return kOk;
}

template <typename T>
nlohmann::ordered_json prediction_json(Model<T>& model, const Tensor<T>& image,
                                       const std::vector<std::string>& names, double threshold,
                                       int& predicted) {
  Tensor<T> batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor<T> probs = model.forward(batch, Mode::infer);
  std::vector<double> p;
  if (probs.dim(1) == 1)
    p = {1.0 - probs[0], static_cast<double>(probs[0])};
  else
    for (auto v : probs.data()) p.push_back(v);
  predicted = decide(probs, threshold)[0];
  nlohmann::ordered_json j;
  nlohmann::ordered_json pj;
  for (std::size_t i = 0; i < p.size(); ++i) pj[names[i]] = p[i];
  j["probabilities"] = pj;
  j["predicted"] = names[static_cast<std::size_t>(predicted)];
  j["predicted_index"] = predicted;
  return j;
}

template <typename T>
int predict(const RunConfig& c, std::ostream& out) {
  auto ckpt = load_checkpoint<T>(c.checkpoint);
  auto names = class_names_or_default(ckpt.class_names, ckpt.model.spec().task);
  Tensor<T> image = load_image<T>(c.image, ckpt.model.spec().input);
  if (image.dim(0) != ckpt.model.spec().channels)
    throw ValidationError("model expects " + std::to_string(ckpt.model.spec().channels) + " channels");
  int predicted = 0;
  auto j = prediction_json(ckpt.model, image, names, c.threshold, predicted);
  nlohmann::ordered_json line;
  line["image"] = c.image;
  for (auto& [k, v] : j.items()) line[k] = v;
  out << line.dump() << '\n';
  return kOk;
}

template <typename T>
int explain(const RunConfig& c, std::ostream& out) {
  auto ckpt = load_checkpoint<T>(c.checkpoint);
  auto names = class_names_or_default(ckpt.class_names, ckpt.model.spec().task);
  Tensor<T> image = load_image<T>(c.image, ckpt.model.spec().input);
  int predicted = 0;
  auto j = prediction_json(ckpt.model, image, names, c.threshold, predicted);
  int target = c.target_class ? *c.target_class : predicted;
  Heatmap<T> heat = gradcam(ckpt.model, image, target);
  ZoneGrade grade = zone_grade(heat.values, c.activation_threshold, c.area_fraction);

  auto dir = out_dir(c);
  write_png(dir / "heatmap.png", colorize(heat.values));
  write_png(dir / "overlay.png", overlay(image, heat.values, c.alpha));

  nlohmann::ordered_json doc;
  doc["image"] = c.image;
  for (auto& [k, v] : j.items()) doc[k] = v;
  nlohmann::ordered_json hj;
  hj["target_class"] = names[static_cast<std::size_t>(target)];
  hj["target_index"] = target;
  hj["raw_max"] = heat.raw_max;
  hj["feature_map"] = {heat.coarse.dim(0), heat.coarse.dim(1)};
  hj["alpha"] = c.alpha;
  doc["heatmap"] = hj;
  doc["zone_grade"] = to_json(grade);
  write_text(dir / "explain.json", doc.dump(2) + "\n");
  out << doc.dump() << '\n';
  return kOk;
}

template <typename Fn>
int dispatch_precision(Precision p, Fn&& fn) {
  return p == Precision::f32 ? fn(float{}) : fn(double{});
}

}  // namespace detail

/// Runs one subcommand. Errors are reported on `err`; the return value is the exit code.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  RunConfig c;
  CLI::App app{"radnet: chest radiograph CNN training, evaluation and Grad-CAM explanation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  auto* train = app.add_subcommand("train", "train a model from a manifest");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a manifest split");
  auto* predict = app.add_subcommand("predict", "classify one image");
  auto* explain = app.add_subcommand("explain", "Grad-CAM heatmap, overlay and zone grading");

  train->add_option("--manifest", c.manifest, "manifest CSV")->required();
  train->add_option("--spec", c.spec, "model spec file (key=value lines)");
  train->add_option("--task", c.task, "binary or three_class");
  train->add_option("--preset", c.preset, "cxr-binary, cxr-3class or ct-3class");
  train->add_option("--epochs", c.epochs, "number of epochs");
  train->add_option("--batch-size", c.batch_size, "mini-batch size")->capture_default_str();
  train->add_option("--lr", c.lr, "initial learning rate")->capture_default_str();
  train->add_option("--seed", c.seed, "seed for init, splits, shuffling and dropout")->capture_default_str();
  train->add_option("--out", c.out, "output directory")->capture_default_str();
  train->add_option("--precision", c.precision, "f32 or f64")->capture_default_str();
  train->add_option("--threshold", c.threshold, "binary decision threshold")->capture_default_str();
  train->add_option("--split-ratios", c.ratios, "train,val[,test] ratios for unassigned records")
      ->delimiter(',');
  train->add_flag("--image-split", c.image_split, "split by image instead of by patient");

  evaluate->add_option("--checkpoint", c.checkpoint, "model checkpoint");
  evaluate->add_option("--manifest", c.manifest, "manifest CSV");
  evaluate->add_option("--split", c.split, "split to evaluate")->capture_default_str();
  evaluate->add_option("--predictions", c.predictions,
                       "score a 'true,pred' CSV instead of running a model");
  evaluate->add_option("--out", c.out, "output directory")->capture_default_str();
  evaluate->add_option("--batch-size", c.batch_size, "batch size")->capture_default_str();
  evaluate->add_option("--threshold", c.threshold, "binary decision threshold")->capture_default_str();

  for (auto* sub : {predict, explain}) {
    sub->add_option("--checkpoint", c.checkpoint, "model checkpoint")->required();
    sub->add_option("image,--image", c.image, "image file (PNG, JPEG or PNM)")->required();
    sub->add_option("--threshold", c.threshold, "binary decision threshold")->capture_default_str();
  }
  explain->add_option("--out", c.out, "output directory")->capture_default_str();
  explain->add_option("--target-class", c.target_class, "class index to explain (default: predicted)");
  explain->add_option("--alpha", c.alpha, "overlay blend weight")->capture_default_str();
  explain->add_option("--activation-threshold", c.activation_threshold,
                      "heatmap level counted as hot")->capture_default_str();
  explain->add_option("--area-fraction", c.area_fraction,
                      "fraction of hot pixels that flags a zone")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (train->parsed()) {
      Precision p = parse_precision(c.precision);
      return detail::dispatch_precision(p, [&](auto tag) { return detail::train<decltype(tag)>(c, out); });
    }
    if (evaluate->parsed()) {
      if (!c.predictions.empty()) return detail::evaluate_predictions(c, out);
      if (c.checkpoint.empty() || c.manifest.empty())
        throw ArgumentError("evaluate needs --checkpoint and --manifest (or --predictions)");
      Precision p = peek_checkpoint(c.checkpoint).precision;
      return detail::dispatch_precision(p, [&](auto tag) { return detail::evaluate_checkpoint<decltype(tag)>(c, out); });
    }
    Precision p = peek_checkpoint(c.checkpoint).precision;
    if (predict->parsed())
      return detail::dispatch_precision(p, [&](auto tag) { return detail::predict<decltype(tag)>(c, out); });
    return detail::dispatch_precision(p, [&](auto tag) { return detail::explain<decltype(tag)>(c, out); });
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace radnet::cli
