#pragma once

#include <cstdint>
#include <vector>

#include "quadd/datasets.hpp"
#include "quadd/quantizers.hpp"

namespace quadd {

// M synthetic rows of dimension D kept as continuous latents, together with
// the quantizer that turns them into the stored values.
struct DistilledDataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> samples;  // M x D
  std::vector<int> labels;
  QuantizerSpec spec;
  // Per-column statistics applied around the quantizer; empty unless
  // spec.normalize is set.
  NormStats norm;
  std::uint64_t seed = 0;
  // Set once samples hold stored values rather than latents (after
  // discretize or unpack). Quantizing again is skipped: FSQ companding is
  // not idempotent.
  bool discrete = false;

  std::size_t size() const { return labels.size(); }
  std::size_t payload_elements() const { return samples.size(); }
};

// Values a downstream consumer sees: hard quantization of every sample,
// standardized and restored with the stored statistics when present. For a
// discrete dataset the samples are returned unchanged.
std::vector<double> materialize(const DistilledDataset& ds);
LabeledDataset materialized_dataset(const DistilledDataset& ds);

// Replaces the latents with their materialized values, so the dataset can be
// serialized and every stored value sits exactly on the codebook.
DistilledDataset discretize(const DistilledDataset& ds);

}  // namespace quadd
