#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "collab/metrics.hpp"
#include "collab/tensor.hpp"

namespace collab {

/// Images in [0, 1], n x C x H x W row-major, with class ids in [0, classes).
struct Dataset {
  std::size_t classes = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  /// Batch tensor for the given sample indices.
  template <typename T>
  Tensor<T> batch(const std::vector<std::size_t>& indices) const;
  std::vector<int> batch_labels(const std::vector<std::size_t>& indices) const;

  bool operator==(const Dataset&) const = default;
};

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  double signal = 1.0;
  double noise_sigma = 0.3;
  std::uint64_t seed = 7;
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

/// Each class gets a fixed uniform-random template; a sample is
/// clamp(template * signal + N(0, noise_sigma), 0, 1). Train and test use
/// disjoint noise streams.
SplitDataset generate_synthetic(const SyntheticSpec& spec);

// CLDS binary layout (little-endian):
//   "CLDS" | u16 version=1 | u32 classes, n, C, H, W | u16 labels[n] | f32 pixels[n*C*H*W]
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

// CLTS tensor layout (little-endian):
//   "CLTS" | u16 version=1 | u32 rank | u32 extents[rank] | f64 values[prod(extents)]
void save_tensor(const std::filesystem::path& path, const Shape& shape,
                 const std::vector<double>& values);
struct TensorFile {
  Shape shape;
  std::vector<double> values;
};
TensorFile load_tensor(const std::filesystem::path& path);

/// Fields of summary.json that are read back for cross-checks.
struct RunSummary {
  std::string config_json;  // compact JSON echo of the experiment config
  double initial_test_error = 0.0;
  double best_test_error = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs = 0;

  bool operator==(const RunSummary&) const = default;
};

std::string metrics_csv(const RunMetrics& metrics);
std::string summary_json(const RunSummary& summary);
RunSummary make_summary(const RunMetrics& metrics, const std::string& config_json);
RunSummary read_summary(const std::filesystem::path& path);

/// Writes metrics.csv and summary.json (deterministic given the run) plus
/// timing.json (wall time) into `dir`.
void write_metrics(const std::filesystem::path& dir, const RunMetrics& metrics,
                   const std::string& config_json);

/// printf-style %.6g for CSV cells.
std::string format_g6(double v);

}  // namespace collab
