#pragma once

// Quantization-guided initialization: pick, per class, the real samples whose
// last-layer gradients best cover the class under a generalized graph-cut
// objective after the real data has been uniformly pre-quantized.

#include <cstdint>
#include <span>
#include <vector>

#include "quadd/datasets.hpp"
#include "quadd/nn.hpp"
#include "quadd/quantizers.hpp"

namespace quadd {

// Gradient of the cross-entropy at (sample, label) w.r.t. the final affine
// layer, flattened as [dW (hidden x classes, row-major), db].
std::vector<double> last_layer_grad(std::span<const double> sample, int label, const Mlp& model);

struct SimMatrix {
  std::size_t n = 0;
  std::vector<double> values;  // n x n, row-major

  double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
};

// Cosine similarities of the given vectors. A zero vector has similarity 0
// to everything else and keeps 1 on the diagonal.
SimMatrix build_sim_matrix(const std::vector<std::vector<double>>& grads);
// Similarities of last-layer gradients of the candidate rows.
SimMatrix build_sim_matrix(const LabeledDataset& candidates, const Mlp& model);

struct GreedySelection {
  std::vector<std::size_t> indices;  // selection order
  std::vector<double> gains;         // gain of each pick
};

// G*(A | C) = sum_{i in C, a in A} S(i, a) - sum_{a1, a2 in A} S(a1, a2),
// with the A-pair sum over ordered pairs including a1 = a2.
double graphcut_objective(const SimMatrix& sim, std::span<const std::size_t> selected,
                          std::span<const std::size_t> candidates);

// Greedy maximization of the graph-cut gain; each pick moves from C to A.
// Ties go to the lowest index.
GreedySelection greedy_graphcut_select(const SimMatrix& sim, std::size_t m);

struct QinitConfig {
  std::size_t m_per_class = 10;
  // Pre-quantizer applied to the real data before gradients are taken.
  // alpha <= 0 means: derive it from the data by the percentile rule.
  int prequant_bits = 3;
  double prequant_alpha = 0.0;
  bool normalize = false;
  std::size_t hidden = 32;
  bool with_replacement = false;
  std::uint64_t seed = 0;
};

struct QinitResult {
  std::vector<std::size_t> indices;  // rows of the real dataset, class-major
  std::vector<int> labels;
  std::vector<double> gains;         // NaN for rows not chosen greedily
  QuantizerSpec prequant;
};

// Classes with at least m rows get a greedy selection. Smaller classes give
// all their rows and, with replacement, uniformly drawn duplicates up to m.
QinitResult quantization_guided_init(const LabeledDataset& real, const QinitConfig& cfg);

// Hard uniform quantization of every feature (per-column standardization
// first when normalize is set).
LabeledDataset prequantize(const LabeledDataset& data, const QuantizerSpec& spec);

}  // namespace quadd
