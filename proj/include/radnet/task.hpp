#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "radnet/errors.hpp"

namespace radnet {

/// Binary (COVID vs non-COVID, one sigmoid output) or three-class (softmax over three).
enum class Task { binary, three_class };

constexpr std::size_t num_classes(Task t) { return t == Task::binary ? 2 : 3; }
constexpr std::size_t num_outputs(Task t) { return t == Task::binary ? 1 : 3; }

inline const char* to_string(Task t) { return t == Task::binary ? "binary" : "three_class"; }

inline Task parse_task(std::string_view s) {
  if (s == "binary") return Task::binary;
  if (s == "three_class" || s == "three-class" || s == "3class") return Task::three_class;
  throw ArgumentError("unknown task '" + std::string(s) + "' (expected binary or three_class)");
}

inline Task task_for_classes(std::size_t n) {
  if (n == 2) return Task::binary;
  if (n == 3) return Task::three_class;
  throw ValidationError("expected 2 or 3 classes, got " + std::to_string(n));
}

}  // namespace radnet
