#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "radnet/errors.hpp"
#include "radnet/model.hpp"
#include "radnet/optimizer.hpp"
#include "radnet/tensor.hpp"

// Checkpoint layout (all integers little-endian):
//   "RDNT" | u16 version = 1
//   u32 length | header text: ModelSpec::to_text() followed by "precision=f32|f64" and
//                an optional "classes=name,name,..." line
//   u32 tensor count, then per tensor:
//     u32 name length | name bytes | u32 rank | rank x u32 dims | raw values
//     (IEEE 32-bit floats, or 64-bit when the header says precision=f64)
//   u32 length | training-state text (empty when saved without optimizer state)

namespace radnet {

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ArgumentError("unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

/// Everything besides the model needed to resume training.
template <typename T>
struct TrainingState {
  AdamState<T> adam;
  PlateauState plateau;
  BestTracker best;
  int epoch = 0;
};

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  std::optional<TrainingState<T>> training;
  std::vector<std::string> class_names;
};

struct CheckpointInfo {
  ModelSpec spec;
  Precision precision = Precision::f32;
  std::vector<std::string> class_names;  // empty when not recorded
};

inline constexpr char kCheckpointMagic[4] = {'R', 'D', 'N', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (in_.size() - pos_ < n)
      throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(std::size_t n) {
    auto b = take(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  std::string text() {
    auto n = u32();
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t, Precision p) {
  w.text(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (T v : t.data()) {
    if (p == Precision::f32)
      w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    else
      w.u64(std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
}

template <typename T>
Tensor<T> read_tensor_body(ByteReader& r, Precision p, const std::string& name) {
  auto rank = r.u32();
  if (rank < 1 || rank > 4)
    throw CheckpointError(CheckpointError::Kind::malformed,
                          "tensor " + name + " has invalid rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    auto d = r.u32();
    if (d == 0)
      throw CheckpointError(CheckpointError::Kind::malformed, "tensor " + name + " has a zero dim");
    shape.push_back(d);
  }
  std::vector<T> values(shape_size(shape));
  for (auto& v : values) {
    if (p == Precision::f32)
      v = static_cast<T>(std::bit_cast<float>(r.u32()));
    else
      v = static_cast<T>(std::bit_cast<double>(r.u64()));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

inline std::string real_text(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw CheckpointError(CheckpointError::Kind::malformed, "bad state line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline CheckpointInfo parse_header(const std::string& header) {
  constexpr std::string_view key = "precision=";
  constexpr std::string_view classes_key = "classes=";
  CheckpointInfo info;
  std::string spec_text;
  bool have_precision = false;
  std::istringstream is(header);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind(key, 0) == 0) {
      try {
        info.precision = parse_precision(std::string_view(line).substr(key.size()));
      } catch (const ArgumentError& e) {
        throw CheckpointError(CheckpointError::Kind::malformed, e.what());
      }
      have_precision = true;
    } else if (line.rfind(classes_key, 0) == 0) {
      std::istringstream ls(line.substr(classes_key.size()));
      std::string name;
      while (std::getline(ls, name, ',')) info.class_names.push_back(name);
    } else {
      spec_text += line + "\n";
    }
  }
  if (!have_precision)
    throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint header lacks precision");
  try {
    info.spec = ModelSpec::from_text(spec_text);
    info.spec.validate();
  } catch (const SpecError& e) {
    throw CheckpointError(CheckpointError::Kind::malformed,
                          std::string("checkpoint spec: ") + e.what());
  }
  return info;
}

inline CheckpointInfo read_prefix(ByteReader& r) {
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Kind::bad_magic, "bad magic: not a checkpoint file");
  auto version = r.u16();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::unknown_version,
                          "unknown checkpoint version " + std::to_string(version));
  return parse_header(r.text());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(Model<T>& model,
                                               const TrainingState<T>* training = nullptr,
                                               const std::vector<std::string>& class_names = {}) {
  constexpr Precision p = precision_of<T>();
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  std::string header = model.spec().to_text() + "precision=" + to_string(p) + "\n";
  if (!class_names.empty()) {
    if (class_names.size() != num_classes(model.spec().task))
      throw ArgumentError("class name count does not match the model task");
    header += "classes=";
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      if (class_names[i].find_first_of(",\n") != std::string::npos)
        throw ArgumentError("class names may not contain ',' or newlines");
      header += (i ? "," : "") + class_names[i];
    }
    header += "\n";
  }
  w.text(header);

  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  for (auto* param : model.parameters()) tensors.emplace_back(param->name, &param->value);
  for (auto& b : model.buffers()) tensors.emplace_back(b.name, b.value);
  if (training)
    for (auto& [name, mom] : training->adam.moments) {
      tensors.emplace_back("adam.m:" + name, &mom.m);
      tensors.emplace_back("adam.v:" + name, &mom.v);
    }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (auto& [name, t] : tensors) detail::write_tensor(w, name, *t, p);

  std::string state;
  if (training) {
    const auto& s = *training;
    std::ostringstream os;
    os << "epoch=" << s.epoch << '\n'
       << "adam.step=" << s.adam.step << '\n'
       << "adam.lr=" << detail::real_text(s.adam.lr) << '\n'
       << "adam.beta1=" << detail::real_text(s.adam.beta1) << '\n'
       << "adam.beta2=" << detail::real_text(s.adam.beta2) << '\n'
       << "adam.eps=" << detail::real_text(s.adam.eps) << '\n'
       << "plateau.best_loss=" << detail::real_text(s.plateau.best_loss) << '\n'
       << "plateau.wait=" << s.plateau.wait << '\n'
       << "plateau.patience=" << s.plateau.patience << '\n'
       << "plateau.factor=" << detail::real_text(s.plateau.factor) << '\n'
       << "plateau.min_lr=" << detail::real_text(s.plateau.min_lr) << '\n'
       << "plateau.min_delta=" << detail::real_text(s.plateau.min_delta) << '\n'
       << "best.has=" << (s.best.has_best ? 1 : 0) << '\n'
       << "best.accuracy=" << detail::real_text(s.best.best_val_accuracy) << '\n'
       << "best.epoch=" << s.best.best_epoch << '\n';
    state = os.str();
  }
  w.text(state);
  return w.take();
}

/// Reconstructs model and (if present) training state. Values stored at a different
/// precision are converted to T.
template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  CheckpointInfo info = detail::read_prefix(r);
  Model<T> model = build<T>(info.spec);

  std::map<std::string, Tensor<T>*> targets;
  for (auto* p : model.parameters()) targets[p->name] = &p->value;
  for (auto& b : model.buffers()) targets[b.name] = b.value;

  std::map<std::string, Tensor<T>> moments_m, moments_v;
  std::size_t found = 0;
  auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.text();
    Tensor<T> t = detail::read_tensor_body<T>(r, info.precision, name);
    if (name.rfind("adam.m:", 0) == 0) {
      moments_m[name.substr(7)] = std::move(t);
      continue;
    }
    if (name.rfind("adam.v:", 0) == 0) {
      moments_v[name.substr(7)] = std::move(t);
      continue;
    }
    auto it = targets.find(name);
    if (it == targets.end())
      throw CheckpointError(CheckpointError::Kind::malformed, "unexpected tensor " + name);
    if (it->second->shape() != t.shape())
      throw CheckpointError(CheckpointError::Kind::malformed,
                            "tensor " + name + " has shape " + shape_string(t.shape()) +
                                ", model expects " + shape_string(it->second->shape()));
    *it->second = std::move(t);
    ++found;
  }
  if (found != targets.size())
    throw CheckpointError(CheckpointError::Kind::malformed, "checkpoint is missing tensors");
  for (std::size_t i = 0; i < model.num_layers(); ++i)
    if (auto* bn = dynamic_cast<BatchNorm2d<T>*>(&model.layer(i))) bn->mark_stats_loaded();

  std::string state_text = r.text();
  if (!r.at_end())
    throw CheckpointError(CheckpointError::Kind::malformed, "trailing bytes after checkpoint");

  std::optional<TrainingState<T>> training;
  if (!state_text.empty()) {
    auto kv = detail::parse_kv(state_text);
    auto get = [&](const char* k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end())
        throw CheckpointError(CheckpointError::Kind::malformed,
                              std::string("training state lacks ") + k);
      return it->second;
    };
    try {
      TrainingState<T> s;
      s.epoch = std::stoi(get("epoch"));
      s.adam.step = std::stoull(get("adam.step"));
      s.adam.lr = std::stod(get("adam.lr"));
      s.adam.beta1 = std::stod(get("adam.beta1"));
      s.adam.beta2 = std::stod(get("adam.beta2"));
      s.adam.eps = std::stod(get("adam.eps"));
      s.plateau.best_loss = std::strtod(get("plateau.best_loss").c_str(), nullptr);
      s.plateau.wait = std::stoi(get("plateau.wait"));
      s.plateau.patience = std::stoi(get("plateau.patience"));
      s.plateau.factor = std::stod(get("plateau.factor"));
      s.plateau.min_lr = std::stod(get("plateau.min_lr"));
      s.plateau.min_delta = std::stod(get("plateau.min_delta"));
      s.best.has_best = get("best.has") == "1";
      s.best.best_val_accuracy = std::stod(get("best.accuracy"));
      s.best.best_epoch = std::stoi(get("best.epoch"));
      for (auto& [name, m] : moments_m) {
        auto v = moments_v.find(name);
        if (v == moments_v.end())
          throw CheckpointError(CheckpointError::Kind::malformed, "adam moments incomplete for " + name);
        s.adam.moments[name] = {std::move(m), std::move(v->second)};
      }
      training = std::move(s);
    } catch (const std::invalid_argument&) {
      throw CheckpointError(CheckpointError::Kind::malformed, "bad number in training state");
    } catch (const std::out_of_range&) {
      throw CheckpointError(CheckpointError::Kind::malformed, "number out of range in training state");
    }
  }
  return {std::move(model), std::move(training), std::move(info.class_names)};
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model,
                     const TrainingState<T>* training = nullptr,
                     const std::vector<std::string>& class_names = {}) {
  auto bytes = serialize_checkpoint(model, training, class_names);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  return deserialize_checkpoint<T>(bytes);
}

/// Reads only the header: spec and stored precision.
inline CheckpointInfo peek_checkpoint(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  return detail::read_prefix(r);
}

}  // namespace radnet
