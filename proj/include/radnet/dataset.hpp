#pragma once

#include <algorithm>
#include <cctype>
#include <limits>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "radnet/errors.hpp"
#include "radnet/image_io.hpp"
#include "radnet/random.hpp"
#include "radnet/task.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

enum class Split { train, val, test, unassigned };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "";
  }
  return "";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s.empty() || s == "unassigned") return Split::unassigned;
  if (s == "train") return Split::train;
  if (s == "val" || s == "validation") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

struct Record {
  std::string path;  // as written in the manifest; relative paths resolve against base_dir
  int label = 0;
  std::string patient_id;
  Split split = Split::unassigned;
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<Record> records;
  Task task = Task::binary;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const Record& r) const {
    std::filesystem::path p(r.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }
};

namespace detail {

// Comma-separated fields with optional double quoting ("" escapes a quote).
inline std::optional<std::vector<std::string>> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      if (!cur.empty() || was_quoted) return std::nullopt;
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) return std::nullopt;
  out.push_back(std::move(cur));
  return out;
}

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c); };
  while (!s.empty() && ws(s.back())) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && ws(s[i])) ++i;
  return s.substr(i);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace detail

/// Parses a manifest:
///
///   # class:0:non-covid
///   # class:1:covid
///   path,label,patient_id,split
///   img/a.png,covid,P001,train
///
/// Labels may be given by class name or id. The split column is optional; empty means
/// unassigned.
inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::map<int, std::string> declared;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  bool has_split = false;
  std::set<std::string> seen_paths;
  std::map<std::string, int> by_name;

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      std::string body = detail::trim(t.substr(1));
      if (body.rfind("class:", 0) != 0) continue;
      if (header_seen) throw ParseError(lineno, "class declarations must precede the header");
      auto rest = body.substr(6);
      auto colon = rest.find(':');
      if (colon == std::string::npos) throw ParseError(lineno, "expected '# class:<id>:<name>'");
      int id;
      try {
        std::size_t pos = 0;
        id = std::stoi(rest.substr(0, colon), &pos);
        if (pos != colon) throw std::invalid_argument("id");
      } catch (const std::exception&) {
        throw ParseError(lineno, "class id must be an integer");
      }
      std::string name = detail::trim(rest.substr(colon + 1));
      if (name.empty()) throw ParseError(lineno, "class name is empty");
      if (declared.count(id)) throw ValidationError("class id " + std::to_string(id) + " declared twice");
      declared[id] = name;
      continue;
    }
    if (!header_seen) {
      auto cols = detail::split_csv(t);
      if (!cols) throw ParseError(lineno, "malformed header");
      for (auto& c : *cols) c = detail::trim(c);
      std::vector<std::string> base{"path", "label", "patient_id"};
      bool ok = cols->size() >= 3 && std::equal(base.begin(), base.end(), cols->begin());
      if (ok && cols->size() == 4) ok = (*cols)[3] == "split";
      if (!ok || cols->size() > 4)
        throw ParseError(lineno, "header must be 'path,label,patient_id[,split]'");
      has_split = cols->size() == 4;
      header_seen = true;

      if (declared.empty()) throw ValidationError("manifest declares no classes");
      int expect = 0;
      for (auto& [id, name] : declared) {
        if (id != expect++) throw ValidationError("class ids must be dense 0..n-1");
        if (by_name.count(name)) throw ValidationError("class name '" + name + "' declared twice");
        by_name[name] = id;
        m.classes.push_back(name);
      }
      m.task = task_for_classes(m.classes.size());
      continue;
    }

    auto fields = detail::split_csv(line);
    if (!fields) throw ParseError(lineno, "unbalanced quotes");
    std::size_t want = has_split ? 4 : 3;
    if (fields->size() != want)
      throw ParseError(lineno, "expected " + std::to_string(want) + " columns, got " +
                                   std::to_string(fields->size()));
    for (auto& f : *fields) f = detail::trim(f);
    Record r;
    r.path = (*fields)[0];
    if (r.path.empty()) throw ParseError(lineno, "empty path");
    const std::string& label = (*fields)[1];
    if (auto it = by_name.find(label); it != by_name.end()) {
      r.label = it->second;
    } else {
      bool numeric = !label.empty() && std::all_of(label.begin(), label.end(), ::isdigit);
      int id = numeric && label.size() < 9 ? std::stoi(label) : -1;
      if (id < 0 || id >= static_cast<int>(m.classes.size()))
        throw ValidationError("line " + std::to_string(lineno) + ": unknown label '" + label + "'");
      r.label = id;
    }
    r.patient_id = (*fields)[2];
    if (has_split) {
      auto s = parse_split((*fields)[3]);
      if (!s) throw ParseError(lineno, "unknown split '" + (*fields)[3] + "'");
      r.split = *s;
    }
    if (!seen_paths.insert(r.path).second)
      throw ValidationError("duplicate path '" + r.path + "' on line " + std::to_string(lineno));
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw ParseError(lineno + 1, "missing header row");
  return m;
}

inline DatasetManifest parse_manifest_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

inline void write_manifest(std::ostream& os, const DatasetManifest& m) {
  for (std::size_t i = 0; i < m.classes.size(); ++i) os << "# class:" << i << ':' << m.classes[i] << '\n';
  os << "path,label,patient_id,split\n";
  for (auto& r : m.records)
    os << detail::csv_field(r.path) << ',' << detail::csv_field(m.classes.at(r.label)) << ','
       << detail::csv_field(r.patient_id) << ',' << to_string(r.split) << '\n';
}

enum class Grouping { patient, image };

/// Assigns every unassigned record to train/val[/test] (2 or 3 ratios summing to 1).
///
/// Records are grouped by patient (or each image is its own group), groups are visited
/// in a seeded random order that is then stably sorted largest-first, and each group goes
/// to the split currently furthest below its target image count. A patient that already
/// has records in a split keeps its unassigned records in that split.
inline DatasetManifest patient_split(DatasetManifest m, std::span<const double> ratios,
                                     std::uint64_t seed, Grouping grouping = Grouping::patient) {
  if (ratios.size() != 2 && ratios.size() != 3)
    throw ArgumentError("split ratios must have 2 (train,val) or 3 (train,val,test) entries");
  double sum = 0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ArgumentError("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ArgumentError("split ratios must sum to 1");

  const Split order[3] = {Split::train, Split::val, Split::test};
  auto key = [&](const Record& r) { return grouping == Grouping::patient ? r.patient_id : r.path; };

  std::map<std::string, Split> fixed;
  if (grouping == Grouping::patient)
    for (auto& r : m.records)
      if (r.split != Split::unassigned) fixed.emplace(r.patient_id, r.split);

  std::vector<std::string> groups;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    auto& r = m.records[i];
    if (r.split != Split::unassigned) continue;
    if (auto it = fixed.find(r.patient_id); grouping == Grouping::patient && it != fixed.end()) {
      r.split = it->second;
      continue;
    }
    auto k = key(r);
    auto [it, fresh] = members.try_emplace(k);
    if (fresh) groups.push_back(k);
    it->second.push_back(i);
  }
  if (groups.empty()) return m;
  if (groups.size() < ratios.size())
    throw ArgumentError("cannot split " + std::to_string(groups.size()) + " patients into " +
                        std::to_string(ratios.size()) + " splits");

  Rng rng(seed);
  rng.shuffle(groups);
  std::stable_sort(groups.begin(), groups.end(), [&](const auto& a, const auto& b) {
    return members[a].size() > members[b].size();
  });

  double total = 0;
  for (auto& g : groups) total += static_cast<double>(members[g].size());
  std::vector<double> filled(ratios.size(), 0.0);
  for (auto& g : groups) {
    std::size_t best = 0;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < ratios.size(); ++s) {
      if (ratios[s] == 0.0) continue;
      double deficit = ratios[s] * total - filled[s];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    filled[best] += static_cast<double>(members[g].size());
    for (auto i : members[g]) m.records[i].split = order[best];
  }
  return m;
}

/// True when no patient id occurs in more than one split (unassigned records ignored).
inline bool patient_disjoint(const DatasetManifest& m) {
  std::map<std::string, Split> where;
  for (auto& r : m.records) {
    if (r.split == Split::unassigned) continue;
    auto [it, fresh] = where.emplace(r.patient_id, r.split);
    if (!fresh && it->second != r.split) return false;
  }
  return true;
}

/// Loads an image as 3 x h x w in [0, 1], resized bilinearly to `target`.
template <typename T>
Tensor<T> load_image(const std::filesystem::path& path, Shape2d target) {
  Tensor<T> rgb = to_rgb_tensor<T>(decode_image(path));
  return bilinear_resize(rgb, target);
}

template <typename T>
Tensor<T> load_image(const DatasetManifest& m, const Record& r, Shape2d target) {
  return load_image<T>(m.resolve(r), target);
}

/// Binary: (n, 1) of {0, 1}. Three-class: (n, 3) one-hot rows.
template <typename T>
Tensor<T> make_targets(Task task, std::span<const int> labels) {
  std::size_t k = num_outputs(task);
  Tensor<T> t({labels.size(), k});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes(task))
      throw ArgumentError("label " + std::to_string(labels[i]) + " out of range");
    if (task == Task::binary)
      t(i, 0) = static_cast<T>(labels[i]);
    else
      t(i, static_cast<std::size_t>(labels[i])) = T(1);
  }
  return t;
}

struct Batch {
  std::vector<std::size_t> indices;  // into the source (or manifest.records)
  std::vector<int> labels;
};

/// Splits the (seed, epoch) permutation of [0, n) into consecutive batches; the last
/// one may be short.
inline std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size,
                                                         std::uint64_t seed, std::uint64_t epoch) {
  if (n == 0) throw ArgumentError("cannot batch an empty split");
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  auto perm = epoch_permutation(n, seed, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(perm.begin() + i, perm.begin() + std::min(n, i + batch_size));
  return out;
}

/// Batches of record indices from one split, in the order for this (seed, epoch).
inline std::vector<Batch> make_batches(const DatasetManifest& m, Split split,
                                       std::size_t batch_size, std::uint64_t seed,
                                       std::uint64_t epoch) {
  auto members = m.indices(split);
  if (members.empty())
    throw ArgumentError(std::string("split '") + to_string(split) + "' is empty");
  std::vector<Batch> out;
  for (auto& positions : batch_order(members.size(), batch_size, seed, epoch)) {
    Batch b;
    for (auto p : positions) {
      b.indices.push_back(members[p]);
      b.labels.push_back(m.records[members[p]].label);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// Indexed collection of labeled images.
template <typename T>
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t i) const = 0;
  virtual Tensor<T> image(std::size_t i) const = 0;
  virtual Task task() const = 0;
};

template <typename T>
class InMemorySource final : public SampleSource<T> {
 public:
  InMemorySource(Task task, std::vector<Tensor<T>> images, std::vector<int> labels)
      : task_(task), images_(std::move(images)), labels_(std::move(labels)) {
    if (images_.size() != labels_.size()) throw ArgumentError("images and labels differ in count");
  }
  std::size_t size() const override { return images_.size(); }
  int label(std::size_t i) const override { return labels_.at(i); }
  Tensor<T> image(std::size_t i) const override { return images_.at(i); }
  Task task() const override { return task_; }

 private:
  Task task_;
  std::vector<Tensor<T>> images_;
  std::vector<int> labels_;
};

/// Records of one manifest split, decoded on demand. With `cache` set, every image is
/// decoded once and kept.
template <typename T>
class ManifestSource final : public SampleSource<T> {
 public:
  ManifestSource(const DatasetManifest& m, Split split, Shape2d target, bool cache = true)
      : manifest_(&m), members_(m.indices(split)), target_(target), cache_(cache) {
    if (cache_) cached_.resize(members_.size());
  }
  std::size_t size() const override { return members_.size(); }
  int label(std::size_t i) const override { return manifest_->records[members_.at(i)].label; }
  Task task() const override { return manifest_->task; }
  Tensor<T> image(std::size_t i) const override {
    const Record& r = manifest_->records[members_.at(i)];
    if (!cache_) return load_image<T>(*manifest_, r, target_);
    if (!cached_[i]) cached_[i] = load_image<T>(*manifest_, r, target_);
    return *cached_[i];
  }

 private:
  const DatasetManifest* manifest_;
  std::vector<std::size_t> members_;
  Shape2d target_;
  bool cache_;
  mutable std::vector<std::optional<Tensor<T>>> cached_;
};

/// Stacks images[indices] into a (n, 3, h, w) batch.
template <typename T>
Tensor<T> stack_images(const SampleSource<T>& src, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ArgumentError("empty batch");
  Tensor<T> first = src.image(indices[0]);
  Shape s{indices.size()};
  s.insert(s.end(), first.shape().begin(), first.shape().end());
  Tensor<T> out(s);
  std::copy(first.data().begin(), first.data().end(), out.data().begin());
  for (std::size_t i = 1; i < indices.size(); ++i) {
    Tensor<T> img = src.image(indices[i]);
    if (img.size() != first.size()) throw ShapeError("images in a batch differ in shape");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + i * first.size());
  }
  return out;
}

}  // namespace radnet
