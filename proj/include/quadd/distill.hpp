#pragma once

// Quantization-aware dataset distillation. Synthetic latents S and the
// clipping threshold alpha are optimized jointly through the quantizer, with
// either distribution matching (dm) or trajectory matching (tm) as the
// surrogate objective.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "quadd/datasets.hpp"
#include "quadd/distilled.hpp"
#include "quadd/nn.hpp"
#include "quadd/qinit.hpp"
#include "quadd/quantizers.hpp"

namespace quadd {

enum class Surrogate { dm, tm };
Surrogate parse_surrogate(const std::string& name);
std::string surrogate_name(Surrogate s);

enum class InitMode { graphcut, random };
InitMode parse_init_mode(const std::string& name);
std::string init_mode_name(InitMode m);

struct DistillConfig {
  Surrogate surrogate = Surrogate::dm;
  std::size_t m_per_class = 10;
  QuantizerSpec spec;  // alpha is replaced by the percentile initialization
  std::size_t iterations = 500;
  double lr_synth = 1.0;
  double lr_alpha = 0.01;
  double momentum_synth = 0.5;
  std::size_t batch_real = 64;  // per class
  // dm: random probe network
  std::size_t probe_width = 64;
  std::size_t probe_depth = 2;
  // tm
  double lr_student = 0.05;
  std::size_t student_steps = 10;
  std::size_t expert_steps = 2;
  std::size_t max_start_epoch = 4;
  std::size_t teacher_epochs = 8;
  std::size_t teacher_hidden = 32;
  std::size_t teacher_count = 2;
  TrainConfig teacher_train{.epochs = 1, .batch_size = 64, .lr = 0.05, .momentum = 0.0, .weight_decay = 0.0};
  bool tm_normalized = true;
  // initialization
  InitMode init = InitMode::graphcut;
  bool init_with_replacement = false;
  int prequant_bits = 0;  // 0: same as spec.bits
  std::size_t qinit_hidden = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

// Sum over classes of the squared distance between class-mean probe
// features of the real batch and of the (already quantized) synthetic rows.
// Classes missing on either side are skipped.
Tensor dm_loss(const LabeledDataset& real_batch, const Tensor& synth_q, std::span<const int> synth_labels,
               const Mlp& probe);

struct ExpertTrajectory {
  std::vector<std::vector<double>> snapshots;  // epoch 0 (init) ... epochs
  std::vector<std::size_t> layer_sizes;
  std::uint64_t teacher_seed = 0;
  std::string dataset_id;

  std::size_t epochs() const { return snapshots.empty() ? 0 : snapshots.size() - 1; }
};

// Plain SGD of a fresh teacher on the real data with a snapshot after every
// epoch, including the initialization.
ExpertTrajectory record_expert_trajectories(const LabeledDataset& real, const std::vector<std::size_t>& layer_sizes,
                                            std::size_t epochs, const TrainConfig& train, std::uint64_t seed,
                                            std::vector<double>* epoch_losses = nullptr);

struct TmSegment {
  std::size_t start_epoch = 0;
  std::size_t expert_steps = 1;
  std::size_t student_steps = 10;
  double lr_student = 0.05;
  bool normalized = true;
};

// Student starts at snapshot[start], takes student_steps full-batch SGD steps
// on the quantized synthetic rows, and is compared with
// snapshot[start + expert_steps]. A zero start-target gap yields 0.
Tensor tm_loss(const ExpertTrajectory& traj, const TmSegment& seg, const Tensor& synth_q,
               std::span<const int> synth_labels);

// Snapshot as parameter tensors (W0, b0, W1, b1, ...).
std::vector<Tensor> unflatten_params(std::span<const double> flat, const std::vector<std::size_t>& layer_sizes,
                                     bool requires_grad = false);

struct DistillResult {
  DistilledDataset ds;
  std::vector<double> loss_trace;
  std::vector<double> alpha_trace;
  std::vector<std::size_t> init_indices;
};

class DistillDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

DistillResult quadd_run(const LabeledDataset& real, const DistillConfig& cfg);

// Quantizer-free distribution-matching loop. Same sampling and update order
// as quadd_run's dm path, with no quantizer node on the tape; the reference
// for the pass-through reduction.
std::vector<double> vanilla_dm_trace(const LabeledDataset& real, const DistillConfig& cfg);

// One-shot hard quantization of a full-precision distilled set. alpha <= 0
// in spec asks for the percentile rule on the samples.
DistilledDataset post_quantize(const DistilledDataset& full_precision, const QuantizerSpec& spec);

}  // namespace quadd
