#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "radnet/radnet.hpp"

namespace radnet::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("radnet_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Binary PGM (P5) with 8-bit samples.
inline void write_pgm(const std::filesystem::path& p, std::size_t w, std::size_t h,
                      const std::vector<std::uint8_t>& px) {
  std::ofstream out(p, std::ios::binary);
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

/// Gray image of size h x w: blank background with optional noise, plus a bright
/// square blob when `blob` is set.
inline std::vector<std::uint8_t> blob_pixels(std::size_t h, std::size_t w, bool blob,
                                             std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> noise(0, 20);
  std::uniform_int_distribution<std::size_t> pos(0, std::min(h, w) / 2);
  std::vector<std::uint8_t> px(h * w);
  for (auto& v : px) v = static_cast<std::uint8_t>(noise(gen));
  if (blob) {
    std::size_t side = std::max<std::size_t>(2, std::min(h, w) / 2);
    std::size_t y0 = pos(gen) % (h - side + 1), x0 = pos(gen) % (w - side + 1);
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x) px[y * w + x] = 230;
  }
  return px;
}

template <typename T>
Tensor<T> pixels_to_tensor(const std::vector<std::uint8_t>& px, std::size_t h, std::size_t w) {
  Tensor<T> t({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) t[c * h * w + i] = static_cast<T>(px[i] / 255.0);
  return t;
}

/// n images, alternating blank (label 0) and blob (label 1).
template <typename T>
InMemorySource<T> blob_dataset(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::vector<Tensor<T>> images;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    bool blob = i % 2 == 1;
    images.push_back(pixels_to_tensor<T>(blob_pixels(h, w, blob, seed * 1000 + i), h, w));
    labels.push_back(blob ? 1 : 0);
  }
  return InMemorySource<T>(Task::binary, std::move(images), std::move(labels));
}

/// Writes n blob/blank PGM files plus a manifest (all records unassigned).
inline std::filesystem::path write_blob_manifest(const std::filesystem::path& dir, std::size_t n,
                                                 std::size_t h, std::size_t w,
                                                 std::uint64_t seed) {
  std::ostringstream csv;
  csv << "# class:0:blank\n# class:1:blob\npath,label,patient_id\n";
  for (std::size_t i = 0; i < n; ++i) {
    bool blob = i % 2 == 1;
    std::string name = "img" + std::to_string(i) + ".pgm";
    write_pgm(dir / name, w, h, blob_pixels(h, w, blob, seed * 1000 + i));
    csv << name << "," << (blob ? "blob" : "blank") << ",p" << i << "\n";
  }
  auto path = dir / "manifest.csv";
  spit(path, csv.str());
  return path;
}

/// One conv block on a small input with a single dense layer.
inline ModelSpec tiny_spec(Task task = Task::binary, std::size_t side = 8,
                           std::vector<std::size_t> filters = {4},
                           std::vector<std::size_t> dense = {2}) {
  ModelSpec s;
  s.task = task;
  s.input = {side, side};
  s.channels = 3;
  s.block_filters = std::move(filters);
  s.dense_sizes = std::move(dense);
  s.seed = 7;
  return s;
}

}  // namespace radnet::testing
