#pragma once

// Training students on distilled (or real) data and scoring them.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "quadd/datasets.hpp"
#include "quadd/distilled.hpp"
#include "quadd/nn.hpp"
#include "quadd/packfmt.hpp"

namespace quadd {

struct StudentConfig {
  Arch arch = Arch::mlp2;
  std::size_t hidden = 64;
  TrainConfig train{.epochs = 300, .batch_size = 64, .lr = 0.05, .momentum = 0.9, .weight_decay = 5e-4};
};

Mlp train_student(const LabeledDataset& data, const StudentConfig& cfg, std::uint64_t seed);
// Trains on the materialized (hard-quantized) samples.
Mlp train_student(const DistilledDataset& ds, const StudentConfig& cfg, std::uint64_t seed);

struct EvalReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_recall;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::vector<std::uint64_t> seeds;
  std::string arch;
  BitCounts bits;
};

// Metrics of predictions against labels. Classes with an undefined F1 (no
// support and no predictions) contribute 0 to the macro average.
EvalReport score_predictions(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);
EvalReport evaluate(const Mlp& model, const LabeledDataset& test);

struct ArchSummary {
  std::string arch;
  std::vector<std::uint64_t> seeds;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double macro_f1_mean = 0.0, macro_f1_std = 0.0;
  std::vector<EvalReport> runs;
};

// Trains every arch on the same data for each seed and aggregates per arch
// (population std over seeds). Cells run on `threads` workers.
std::vector<ArchSummary> cross_arch_eval(const DistilledDataset& ds, const LabeledDataset& test,
                                         const std::vector<Arch>& archs, const std::vector<std::uint64_t>& seeds,
                                         const StudentConfig& base, std::size_t threads = 1);
ArchSummary eval_over_seeds(const LabeledDataset& train, const LabeledDataset& test, const StudentConfig& cfg,
                            const std::vector<std::uint64_t>& seeds, std::size_t threads = 1);

// Mean and population std.
std::pair<double, double> mean_std(std::span<const double> values);

// Runs fn(i) for i in [0, n) on up to `threads` workers; results are indexed
// by i so the outcome never depends on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace quadd
