#pragma once

// Deterministic toy tasks: Gaussian-mixture classification and a masked
// beam-power grid whose label is the strongest beam.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace quadd {

struct LabeledDataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> features;  // n x dim, row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
  std::vector<std::size_t> class_counts() const;
  std::vector<std::size_t> indices_of(int label) const;
  LabeledDataset subset(std::span<const std::size_t> rows) const;
  // Throws when labels or shape are invalid or a feature is not finite.
  void validate() const;
};

LabeledDataset gen_gaussian_mixture(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                                    double separation, std::uint64_t seed);

struct BeamTaskConfig {
  std::size_t n_theta = 8;
  std::size_t n_phi = 8;
  double mask_fraction = 0.5;
  std::size_t n_samples = 6000;
  double noise_std = 0.01;
  // Probability that a lobe centre is drawn from the concentrated hot spot
  // rather than uniformly over the grid; controls class imbalance.
  double skew = 0.85;
  std::uint64_t seed = 0;

  std::size_t grid_size() const { return n_theta * n_phi; }
  void validate() const;
};

struct BeamDataset {
  LabeledDataset data;          // masked, min-shifted features
  std::vector<double> surface;  // the unmasked surface, same layout
  std::vector<std::uint8_t> mask;  // 1 where the entry was hidden
};

BeamDataset gen_beam_dataset_full(const BeamTaskConfig& cfg);
LabeledDataset gen_beam_dataset(const BeamTaskConfig& cfg);

// Per class draw m_per_class rows. Without replacement, classes smaller than
// m_per_class contribute every row they have.
LabeledDataset sample_init_pool(const LabeledDataset& data, std::size_t m_per_class, bool with_replacement,
                                std::uint64_t seed);
// Same selection, returned as row indices into data (class-major order).
std::vector<std::size_t> sample_init_indices(const LabeledDataset& data, std::size_t m_per_class,
                                             bool with_replacement, std::uint64_t seed);

// Raw columnar file: "QDSF", u32 n, u32 dim, u32 classes, f64 features, u32 labels.
std::vector<std::uint8_t> encode_dataset(const LabeledDataset& data);
LabeledDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const LabeledDataset& data, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Named tasks with a fixed train/test split.
struct TaskConfig {
  std::string name = "gaussian";  // gaussian | beam
  std::uint64_t seed = 0;
  // gaussian
  std::size_t classes = 3;
  std::size_t dim = 16;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 200;
  double separation = 1.5;
  // beam
  BeamTaskConfig beam;
  double test_fraction = 0.2;
};

struct Task {
  std::string name;
  LabeledDataset train;
  LabeledDataset test;
};

Task make_task(const TaskConfig& cfg);

}  // namespace quadd
