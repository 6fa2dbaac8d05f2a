#pragma once

// Small ReLU perceptrons used as students, teachers, DM probes and the
// gradient model of the initializer.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "quadd/tensor.hpp"

namespace quadd {

enum class Arch { mlp2, mlp3 };

Arch parse_arch(const std::string& name);
std::string arch_name(Arch arch);
// Number of affine layers.
std::size_t arch_depth(Arch arch);

class Mlp {
 public:
  Mlp() = default;

  // layer_sizes = {in, hidden..., out}. Weights and biases drawn from
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Mlp init(const std::vector<std::size_t>& layer_sizes, std::mt19937_64& rng,
                  bool requires_grad = true);
  static Mlp init(Arch arch, std::size_t in, std::size_t hidden, std::size_t out,
                  std::mt19937_64& rng, bool requires_grad = true);

  // ReLU between layers. With relu_output the last layer is rectified too
  // (embedding mode used by the DM probe).
  Tensor forward(const Tensor& x, bool relu_output = false) const;
  std::vector<int> predict(const Tensor& x) const;

  std::size_t depth() const { return weights_.size(); }
  std::size_t input_dim() const { return weights_.front().dim(0); }
  std::size_t output_dim() const { return weights_.back().dim(1); }
  std::size_t param_count() const;

  std::vector<Tensor>& weights() { return weights_; }
  std::vector<Tensor>& biases() { return biases_; }
  const std::vector<Tensor>& weights() const { return weights_; }
  const std::vector<Tensor>& biases() const { return biases_; }

  // Parameter order: W0, b0, W1, b1, ...
  std::vector<Tensor> parameters() const;
  std::vector<double> flatten() const;
  void load(std::span<const double> flat);
  Mlp clone(bool requires_grad = true) const;
  void zero_grad();

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// Forward pass over an explicit parameter list (W0, b0, W1, b1, ...).
Tensor mlp_forward(std::span<const Tensor> params, const Tensor& x, bool relu_output = false);

// Gradients of mean cross-entropy w.r.t. params, written out as ordinary
// differentiable ops so an unrolled SGD step stays on the tape and can be
// differentiated again w.r.t. x.
std::vector<Tensor> ce_gradients(std::span<const Tensor> params, const Tensor& x,
                                 std::span<const int> labels);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

// Minibatch SGD on mean cross-entropy. Returns the mean training loss of
// each epoch. Deterministic given rng state.
std::vector<double> train_sgd(Mlp& net, std::span<const double> features, std::size_t dim,
                              std::span<const int> labels, const TrainConfig& cfg,
                              std::mt19937_64& rng);

double mean_cross_entropy(const Mlp& net, std::span<const double> features, std::size_t dim,
                          std::span<const int> labels);

}  // namespace quadd
