#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "collab/gradcheck.hpp"
#include "collab/losses.hpp"
#include "collab/nn.hpp"

namespace collab {

/// Small 64-bit problem for gradient and locality checks: `depth` conv
/// blocks of `channels` channels (pools between them), a
/// flatten -> dropout -> hidden -> dropout -> classes head, and a random batch.
struct ToySpec {
  std::size_t depth = 3;
  std::size_t channels = 8;
  std::size_t batch = 4;
  std::size_t classes = 4;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t hidden = 16;
  std::uint64_t seed = 11;
};

ArchSpec toy_arch(const ToySpec& spec);

struct ToyProblem {
  Network<double> net;
  Tensor<double> x;
  std::vector<int> labels;
  std::vector<Tensor<double>> masks;  // fixed hierarchical-dropout masks
  LossConfig cfg;
};

ToyProblem make_toy_problem(const ToySpec& spec, const LossConfig& cfg);

/// Gradient check of one loss term over the parameters it may update, plus
/// the locality audit of every other parameter.
struct ScopedCheck {
  std::string loss;       // "out", "mid", "pull_push" or "kernel"
  std::size_t layer = 0;  // conv-block index for per-layer terms, else 0
  GradCheckReport grad;
  std::size_t in_scope_tensors = 0;
  /// Out-of-scope parameters that appear on the loss tape.
  std::vector<std::string> structural_leaks;
  /// Out-of-scope parameters holding a nonzero gradient after backward.
  std::vector<std::string> numeric_leaks;

  std::string label() const;
  bool passed(double tolerance) const;
};

/// Runs every active term of `problem.cfg` (all layers for mid and
/// pull-push). Stop-gradient targets are frozen at the unperturbed point
/// for the finite differences.
std::vector<ScopedCheck> check_losses(ToyProblem& problem, double h);

/// Just the output-layer term; used for the fault-injection negative control.
ScopedCheck check_out(ToyProblem& problem, double h);

}  // namespace collab
