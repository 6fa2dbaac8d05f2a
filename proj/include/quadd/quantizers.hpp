#pragma once

// Differentiable scalar quantizers: clipping followed by nearest-level
// projection, with straight-through, additive-noise, tanh-companded (FSQ) and
// additive-powers-of-two (APoT) variants.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "quadd/tensor.hpp"

namespace quadd {

enum class QuantizerKind : std::uint8_t {
  none = 0,  // pass-through; full precision
  uniform_ste = 1,
  uniform_fsq = 2,
  uniform_aun = 3,
  apot = 4,
};

// scheduled: the kind's own training behaviour (noise for AUN, the
//            alternating noise/hard schedule for FSQ, hard otherwise) and
//            hard at evaluation.
// hard:      always the hard quantizer.
// smooth:    the differentiable surrogate whose derivative equals the
//            backward rule (clip for clip-based kinds, alpha*tanh for FSQ).
enum class ForwardMode : std::uint8_t { scheduled = 0, hard = 1, smooth = 2 };

QuantizerKind parse_quantizer_kind(const std::string& name);
std::string quantizer_kind_name(QuantizerKind kind);

class QuantizerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Codebook {
 public:
  Codebook() = default;
  explicit Codebook(std::vector<double> levels);

  static Codebook uniform(double alpha, int bits);
  static Codebook apot(double alpha, int bits, int k);
  static Codebook fsq(double alpha, int bits);

  const std::vector<double>& levels() const { return levels_; }
  std::size_t size() const { return levels_.size(); }
  double max_level() const { return levels_.back(); }
  double max_gap() const;
  double min_gap() const;
  // Index of the nearest level; ties go to the larger level.
  std::size_t nearest_index(double x) const;

 private:
  std::vector<double> levels_;
};

// Nonnegative APoT magnitudes for the unit base (before gamma scaling):
// sums over i < n of p_i with p_i in {0} u {2^-(i + j n) : j < 2^k - 1}.
std::vector<double> apot_magnitudes(int bits, int k);

struct QuantizerSpec {
  QuantizerKind kind = QuantizerKind::apot;
  int bits = 4;
  double alpha = 1.0;
  int k = 2;
  bool normalize = false;
  ForwardMode mode = ForwardMode::scheduled;

  // Derived, never learned: alpha / max codebook magnitude for APoT, alpha
  // for the uniform kinds.
  double gamma() const;
  Codebook codebook() const;
  // Codebook of the same kind built with alpha = 1.
  Codebook unit_codebook() const;
  void validate() const;
  QuantizerSpec with_alpha(double a) const;
};

Codebook build_uniform_codebook(double alpha, int bits);
Codebook build_apot_codebook(double alpha, int bits, int k);

double project_nearest(double x, const Codebook& cb);

// Half-away-from-zero rounding.
double round_half_away(double x);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;  // sqrt(var + eps)
  bool empty() const { return mean.empty(); }
};

inline constexpr double kNormEps = 1e-5;
inline constexpr double kAlphaFloor = 1e-6;

// Per-channel standardization; channel_axis indexes x's shape. Identity
// (and empty statistics) when disabled.
std::pair<Tensor, NormStats> normalize_pre_quant(const Tensor& x, bool enabled, std::size_t channel_axis);
NormStats compute_norm_stats(const Tensor& x, std::size_t channel_axis);

struct QuantizeContext {
  bool training = false;
  std::uint64_t step = 0;
  std::mt19937_64* rng = nullptr;  // noise source for AUN and FSQ noise steps
  // When present, x is standardized per column of a [N, D] input before the
  // quantizer and the affine map is undone afterwards.
  const NormStats* norm = nullptr;
};

// Differentiable quantization layer. alpha is a [1] tensor; for APoT its
// gradient follows the reparameterized clipping rule.
Tensor quantize(const Tensor& x, const Tensor& alpha, const QuantizerSpec& spec, const QuantizeContext& ctx);
Tensor quantize_forward(const Tensor& x, const QuantizerSpec& spec, bool training, std::uint64_t step,
                        std::mt19937_64* rng = nullptr);

// Hard quantization of a single (already normalized) value.
double quantize_hard(double x, const QuantizerSpec& spec, const Codebook& cb);

// d out / d x for a standardized input value z.
double input_derivative(double z, const QuantizerSpec& spec);
// d out / d alpha for APoT (unit codebook passed in).
double alpha_derivative(double z, double alpha, const Codebook& unit);

Tensor quantize_backward_input(const Tensor& grad_out, const Tensor& x, const QuantizerSpec& spec);
double quantize_backward_alpha(const Tensor& grad_out, const Tensor& x, const QuantizerSpec& spec);

// |P99(x) - P1(x)| with linear interpolation between order statistics.
double percentile_range(std::span<const double> values);
// percentile_range floored at kAlphaFloor.
double init_alpha_percentile(const Tensor& x);
double percentile(std::vector<double> values, double p);

}  // namespace quadd
