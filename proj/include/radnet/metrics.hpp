#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "radnet/errors.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

/// counts(i, j): samples of true class i predicted as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes)
      : n_(n_classes), counts_(n_classes * n_classes, 0) {
    if (n_classes == 0) throw ArgumentError("confusion matrix needs at least one class");
  }

  /// Row-major counts.
  ConfusionMatrix(std::size_t n_classes, std::vector<std::uint64_t> counts)
      : n_(n_classes), counts_(std::move(counts)) {
    if (n_classes == 0 || counts_.size() != n_ * n_)
      throw ArgumentError("confusion matrix needs n*n counts");
  }

  std::size_t n_classes() const noexcept { return n_; }
  std::uint64_t operator()(std::size_t truth, std::size_t pred) const {
    return counts_.at(truth * n_ + pred);
  }
  void add(std::size_t truth, std::size_t pred, std::uint64_t k = 1) {
    if (truth >= n_ || pred >= n_) throw ArgumentError("label out of range");
    counts_[truth * n_ + pred] += k;
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_; ++i) t += (*this)(i, i);
    return t;
  }
  std::uint64_t true_positives(std::size_t c) const { return (*this)(c, c); }
  std::uint64_t false_positives(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n_; ++i)
      if (i != c) s += (*this)(i, c);
    return s;
  }
  std::uint64_t false_negatives(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < n_; ++j)
      if (j != c) s += (*this)(c, j);
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred,
                                 std::size_t n_classes) {
  if (truth.size() != pred.size())
    throw ArgumentError("confusion: " + std::to_string(truth.size()) + " labels vs " +
                        std::to_string(pred.size()) + " predictions");
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0) throw ArgumentError("negative label");
    cm.add(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

/// Binary decision: p >= threshold is the positive class (1).
inline int binary_decision(double p, double threshold = 0.5) { return p >= threshold ? 1 : 0; }

/// Index of the largest value; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return static_cast<int>(best);
}

/// Class decisions for a (batch, 1) sigmoid or (batch, k) softmax output.
template <typename T>
std::vector<int> decide(const Tensor<T>& probs, double threshold = 0.5) {
  std::vector<int> out;
  std::size_t k = probs.dim(1);
  for (std::size_t n = 0; n < probs.dim(0); ++n) {
    auto row = probs.data().subspan(n * k, k);
    out.push_back(k == 1 ? binary_decision(row[0], threshold) : argmax<T>(row));
  }
  return out;
}

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  // Set when the denominator was zero; the metric is then reported as 0.
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool f1_undefined = false;
};

/// precision = TP/(TP+FP), recall = TP/(TP+FN), f1 = TP/(TP + 0.5 (FP+FN)).
inline std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  std::vector<ClassMetrics> out(cm.n_classes());
  for (std::size_t c = 0; c < cm.n_classes(); ++c) {
    double tp = static_cast<double>(cm.true_positives(c));
    double fp = static_cast<double>(cm.false_positives(c));
    double fn = static_cast<double>(cm.false_negatives(c));
    auto& m = out[c];
    auto ratio = [](double num, double den, bool& undefined) {
      undefined = den == 0;
      return undefined ? 0.0 : num / den;
    };
    m.precision = ratio(tp, tp + fp, m.precision_undefined);
    m.recall = ratio(tp, tp + fn, m.recall_undefined);
    m.f1 = ratio(tp, tp + 0.5 * (fp + fn), m.f1_undefined);
  }
  return out;
}

struct Accuracy {
  double standard = 0;       // trace / total
  double pooled = 0;  // pooled TP / (TP + 0.5 (FP + FN)) over all classes
};

/// For single-label data the pooled FP and FN both equal total - trace, so the two
/// values coincide.
inline Accuracy accuracy(const ConfusionMatrix& cm) {
  double total = static_cast<double>(cm.total());
  if (total == 0) throw ArgumentError("accuracy of an empty confusion matrix");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t c = 0; c < cm.n_classes(); ++c) {
    tp += static_cast<double>(cm.true_positives(c));
    fp += static_cast<double>(cm.false_positives(c));
    fn += static_cast<double>(cm.false_negatives(c));
  }
  return {static_cast<double>(cm.trace()) / total, tp / (tp + 0.5 * (fp + fn))};
}

inline double macro_f1(const ConfusionMatrix& cm) {
  auto m = per_class_metrics(cm);
  double s = 0;
  for (auto& c : m) s += c.f1;
  return s / static_cast<double>(m.size());
}

struct EvalReport {
  ConfusionMatrix confusion{1};
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  Accuracy accuracy;
  double macro_f1 = 0;
  std::uint64_t samples = 0;
};

inline EvalReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names) {
  if (class_names.size() != cm.n_classes())
    throw ArgumentError("class name count does not match confusion matrix");
  EvalReport r;
  r.confusion = cm;
  r.class_names = std::move(class_names);
  r.per_class = per_class_metrics(cm);
  r.accuracy = accuracy(cm);
  r.macro_f1 = macro_f1(cm);
  r.samples = cm.total();
  return r;
}

/// Full-precision JSON with a fixed key order.
inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  j["classes"] = r.class_names;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.confusion.n_classes(); ++i) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < r.confusion.n_classes(); ++k) row.push_back(r.confusion(i, k));
    rows.push_back(row);
  }
  j["confusion_matrix"] = rows;
  auto per = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    nlohmann::ordered_json e;
    e["class"] = r.class_names[c];
    e["precision"] = m.precision;
    e["recall"] = m.recall;
    e["f1"] = m.f1;
    auto flags = nlohmann::ordered_json::array();
    if (m.precision_undefined) flags.push_back("precision_undefined");
    if (m.recall_undefined) flags.push_back("recall_undefined");
    if (m.f1_undefined) flags.push_back("f1_undefined");
    e["warnings"] = flags;
    per.push_back(e);
  }
  j["per_class"] = per;
  j["accuracy"] = r.accuracy.standard;
  j["accuracy_pooled"] = r.accuracy.pooled;
  j["macro_f1"] = r.macro_f1;
  return j;
}

/// Aligned text table, 2-decimal rounding.
inline std::string to_text(const EvalReport& r) {
  std::size_t w = 9;
  for (auto& n : r.class_names) w = std::max(w, n.size() + 2);
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "Confusion matrix (rows: true, columns: predicted)\n" << std::setw(static_cast<int>(w)) << "";
  for (auto& n : r.class_names) os << std::setw(static_cast<int>(w)) << n;
  os << '\n';
  for (std::size_t i = 0; i < r.class_names.size(); ++i) {
    os << std::setw(static_cast<int>(w)) << r.class_names[i];
    for (std::size_t k = 0; k < r.class_names.size(); ++k)
      os << std::setw(static_cast<int>(w)) << r.confusion(i, k);
    os << '\n';
  }
  os << '\n'
     << std::left << std::setw(static_cast<int>(w)) << "Class" << std::right << std::setw(11)
     << "Precision" << std::setw(9) << "Recall" << std::setw(10) << "F1-score" << '\n';
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    os << std::left << std::setw(static_cast<int>(w)) << r.class_names[c] << std::right
       << std::setw(11) << m.precision << std::setw(9) << m.recall << std::setw(10) << m.f1 << '\n';
  }
  os << "\nAccuracy: " << r.accuracy.standard * 100 << "  (samples: " << r.samples << ")\n";
  os << "Macro F1: " << r.macro_f1 << '\n';
  return os.str();
}

}  // namespace radnet
