#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "collab/data.hpp"
#include "collab/harness.hpp"
#include "collab/losses.hpp"
#include "collab/nn.hpp"
#include "json.hpp"

namespace collab::cli {

struct DataSource {
  bool synthetic = true;
  SyntheticSpec spec;
  std::filesystem::path train_file;  // CLDS, when not synthetic
  std::filesystem::path test_file;
};

/// Settings only noise-sweep reads.
struct SweepConfig {
  std::vector<double> levels;
  std::vector<std::uint64_t> seeds;  // empty: train.seed
  /// Named loss sets to compare; empty: the config's own loss.active.
  std::vector<std::pair<std::string, std::vector<std::string>>> variants;
};

struct ExperimentConfig {
  std::optional<ArchSpec> arch;  // default: desk architecture sized to the data
  TrainConfig train;
  LossConfig loss;
  NoiseConfig noise;
  DataSource data;
  std::filesystem::path out_dir = "runs/default";
  SweepConfig sweep;
};

/// Parses and validates the JSON text. Unknown keys, wrong types and broken
/// invariants raise ErrorKind::config naming the offending key path; syntax
/// errors carry the parser's line and column.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical echo of everything that determines a run's numbers (output
/// and sweep settings excluded), with defaults filled in.
nlohmann::json config_echo(const ExperimentConfig& cfg, const ArchSpec& arch);

/// Names used by `loss.active` and sweep variants.
std::vector<std::string> active_names(const LossConfig& loss);
void set_active(LossConfig& loss, const std::vector<std::string>& names);

/// Shape-checks `arch` and the loss settings against it.
void validate_loss(const LossConfig& loss, const ArchSpec& arch, std::size_t classes);

/// Loads or generates the data, then shape-checks the architecture against
/// it. Throws config/format/io errors.
struct Prepared {
  SplitDataset data;
  ArchSpec arch;
};
Prepared prepare(const ExperimentConfig& cfg);

}  // namespace collab::cli
