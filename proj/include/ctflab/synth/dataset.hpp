#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ctflab/synth/sample.hpp"

namespace ctflab::synth {

enum ShapeClass : int { kCircle = 0, kSquare = 1, kTriangle = 2 };
inline constexpr int kMaxClasses = 3;

struct DatasetConfig {
  std::size_t image_size = 64;
  int num_classes = 3;
  std::size_t n_labeled = 100;
  std::size_t n_unlabeled = 900;
  std::size_t n_validation = 200;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_object_size = 12;
  std::size_t max_object_size = 24;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Dataset {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::vector<Sample> validation;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Colored shapes on textured, noisy canvases. Each class has a distinct shape
// and a dominant color channel (circle: red, square: green, triangle: blue).
// Objects in one image never overlap. Sample ids are global and splits are
// disjoint: labeled first, then unlabeled, then validation.
Dataset generate_dataset(const DatasetConfig& cfg);

// Renders one sample; generate_dataset calls this with per-index seeds.
Sample generate_sample(const DatasetConfig& cfg, std::uint64_t id, Role role);

// Pixel whose color carries the class signature: its class channel exceeds
// both other channels by at least `margin`. Returns -1 for background-like
// pixels.
int signature_class(const numerics::Tensor& image, std::size_t y, std::size_t x,
                    double margin = 0.3);

// Directory export: manifest.txt plus one raw tensor file per sample. The
// layout is documented in docs/formats.md.
void export_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset import_dataset(const std::filesystem::path& dir);

}  // namespace ctflab::synth
