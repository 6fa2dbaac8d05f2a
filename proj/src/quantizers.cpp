#include "quadd/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace quadd {

QuantizerKind parse_quantizer_kind(const std::string& name) {
  if (name == "none") return QuantizerKind::none;
  if (name == "uniform-ste" || name == "ste") return QuantizerKind::uniform_ste;
  if (name == "uniform-fsq" || name == "fsq") return QuantizerKind::uniform_fsq;
  if (name == "uniform-aun" || name == "aun") return QuantizerKind::uniform_aun;
  if (name == "apot") return QuantizerKind::apot;
  throw QuantizerError("unknown quantizer kind '" + name + "'");
}

std::string quantizer_kind_name(QuantizerKind kind) {
  switch (kind) {
    case QuantizerKind::none: return "none";
    case QuantizerKind::uniform_ste: return "uniform-ste";
    case QuantizerKind::uniform_fsq: return "uniform-fsq";
    case QuantizerKind::uniform_aun: return "uniform-aun";
    case QuantizerKind::apot: return "apot";
  }
  throw QuantizerError("unknown quantizer kind " + std::to_string(static_cast<int>(kind)));
}

// ---- codebooks ------------------------------------------------------------

Codebook::Codebook(std::vector<double> levels) : levels_(std::move(levels)) {
  if (levels_.empty()) throw QuantizerError("codebook: no levels");
  for (std::size_t i = 1; i < levels_.size(); ++i) {
    if (!(levels_[i] > levels_[i - 1])) throw QuantizerError("codebook: levels not strictly increasing");
  }
}

Codebook Codebook::uniform(double alpha, int bits) {
  if (bits < 1) throw QuantizerError("uniform codebook: bit width must be >= 1");
  if (bits > 16) throw QuantizerError("uniform codebook: bit width must be <= 16");
  const long half = (1L << (bits - 1)) - 1;
  const double delta = 2.0 * alpha / static_cast<double>((1L << bits) - 1);
  std::vector<double> levels;
  levels.reserve(static_cast<std::size_t>(2 * half + 1));
  for (long i = -half; i <= half; ++i) levels.push_back(static_cast<double>(i) * delta);
  return Codebook(std::move(levels));
}

std::vector<double> apot_magnitudes(int bits, int k) {
  if (k < 1 || bits < 1 || bits % k != 0) {
    throw QuantizerError("apot: base width k=" + std::to_string(k) + " must divide b=" + std::to_string(bits));
  }
  if (bits > 15) throw QuantizerError("apot: bit width must be <= 15");
  const int n = bits / k;
  const int choices = 1 << k;  // 0 plus 2^k - 1 powers
  std::vector<std::vector<double>> terms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    terms[static_cast<std::size_t>(i)].push_back(0.0);
    for (int j = 0; j < choices - 1; ++j) terms[static_cast<std::size_t>(i)].push_back(std::ldexp(1.0, -(i + j * n)));
  }
  std::vector<double> sums{0.0};
  for (const auto& options : terms) {
    std::vector<double> next;
    next.reserve(sums.size() * options.size());
    for (double s : sums)
      for (double p : options) next.push_back(s + p);
    sums.swap(next);
  }
  std::sort(sums.begin(), sums.end());
  sums.erase(std::unique(sums.begin(), sums.end()), sums.end());
  return sums;
}

Codebook Codebook::apot(double alpha, int bits, int k) {
  const auto mags = apot_magnitudes(bits, k);
  const double top = mags.back();
  const double gamma = alpha / top;
  std::vector<double> positive;
  for (double m : mags) {
    if (m == 0.0) continue;
    positive.push_back(m == top ? alpha : gamma * m);
  }
  std::vector<double> levels;
  levels.reserve(2 * positive.size() + 1);
  for (auto it = positive.rbegin(); it != positive.rend(); ++it) levels.push_back(-*it);
  levels.push_back(0.0);
  levels.insert(levels.end(), positive.begin(), positive.end());
  return Codebook(std::move(levels));
}

Codebook Codebook::fsq(double alpha, int bits) {
  if (bits < 1 || bits > 15) throw QuantizerError("fsq codebook: bit width must be in [1, 15]");
  const std::size_t count = std::size_t{1} << bits;
  const double denom = static_cast<double>(count - 1);
  std::vector<double> levels(count);
  for (std::size_t j = 0; j < count / 2; ++j) {
    levels[j] = alpha * (2.0 * static_cast<double>(j) / denom - 1.0);
    levels[count - 1 - j] = -levels[j];
  }
  return Codebook(std::move(levels));
}

double Codebook::max_gap() const {
  double g = 0.0;
  for (std::size_t i = 1; i < levels_.size(); ++i) g = std::max(g, levels_[i] - levels_[i - 1]);
  return g;
}

double Codebook::min_gap() const {
  double g = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < levels_.size(); ++i) g = std::min(g, levels_[i] - levels_[i - 1]);
  return g;
}

std::size_t Codebook::nearest_index(double x) const {
  const auto it = std::lower_bound(levels_.begin(), levels_.end(), x);
  if (it == levels_.begin()) return 0;
  if (it == levels_.end()) return levels_.size() - 1;
  const auto hi = static_cast<std::size_t>(it - levels_.begin());
  const double up = levels_[hi] - x;
  const double down = x - levels_[hi - 1];
  return down < up ? hi - 1 : hi;
}

Codebook build_uniform_codebook(double alpha, int bits) { return Codebook::uniform(alpha, bits); }
Codebook build_apot_codebook(double alpha, int bits, int k) { return Codebook::apot(alpha, bits, k); }

double project_nearest(double x, const Codebook& cb) { return cb.levels()[cb.nearest_index(x)]; }

double round_half_away(double x) { return std::round(x); }

// ---- spec -----------------------------------------------------------------

void QuantizerSpec::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw QuantizerError("quantizer: alpha must be positive and finite");
  if (kind == QuantizerKind::none) return;
  if (bits < 1) throw QuantizerError("quantizer: bit width must be >= 1");
  switch (kind) {
    case QuantizerKind::apot:
      if (k < 1 || bits % k != 0) {
        throw QuantizerError("apot: base width k=" + std::to_string(k) + " must divide b=" + std::to_string(bits));
      }
      if (bits > 15) throw QuantizerError("apot: bit width must be <= 15");
      break;
    case QuantizerKind::uniform_fsq:
      if (bits > 15) throw QuantizerError("fsq: bit width must be <= 15");
      break;
    default:
      if (bits > 16) throw QuantizerError("uniform: bit width must be <= 16");
  }
}

double QuantizerSpec::gamma() const {
  if (kind == QuantizerKind::apot) return alpha / apot_magnitudes(bits, k).back();
  return alpha;
}

Codebook QuantizerSpec::codebook() const {
  switch (kind) {
    case QuantizerKind::uniform_ste:
    case QuantizerKind::uniform_aun: return Codebook::uniform(alpha, bits);
    case QuantizerKind::uniform_fsq: return Codebook::fsq(alpha, bits);
    case QuantizerKind::apot: return Codebook::apot(alpha, bits, k);
    case QuantizerKind::none: break;
  }
  throw QuantizerError("quantizer: pass-through kind has no codebook");
}

Codebook QuantizerSpec::unit_codebook() const { return with_alpha(1.0).codebook(); }

QuantizerSpec QuantizerSpec::with_alpha(double a) const {
  QuantizerSpec s = *this;
  s.alpha = a;
  return s;
}

// ---- elementwise rules ----------------------------------------------------

namespace {

double clip(double x, double alpha) { return std::clamp(x, -alpha, alpha); }

std::size_t fsq_index(double t, std::size_t count) {
  const double pos = round_half_away((t + 1.0) * static_cast<double>(count - 1) / 2.0);
  return static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(count - 1)));
}

}  // namespace

double quantize_hard(double x, const QuantizerSpec& spec, const Codebook& cb) {
  switch (spec.kind) {
    case QuantizerKind::none: return x;
    case QuantizerKind::uniform_fsq: return cb.levels()[fsq_index(std::tanh(x), cb.size())];
    default: return project_nearest(clip(x, spec.alpha), cb);
  }
}

double input_derivative(double z, const QuantizerSpec& spec) {
  switch (spec.kind) {
    case QuantizerKind::none: return 1.0;
    case QuantizerKind::uniform_fsq: {
      const double t = std::tanh(z);
      return spec.alpha * (1.0 - t * t);
    }
    default: return std::abs(z) <= spec.alpha ? 1.0 : 0.0;
  }
}

double alpha_derivative(double z, double alpha, const Codebook& unit) {
  if (std::abs(z) > alpha) return z > 0.0 ? 1.0 : -1.0;
  const double r = z / alpha;
  return project_nearest(r, unit) - r;
}

// ---- layer ----------------------------------------------------------------

namespace {

struct Layout {
  std::size_t rows = 1, cols = 1;
};

Layout norm_layout(const Tensor& x, const NormStats* norm) {
  Layout l;
  l.cols = x.size();
  if (!norm || norm->empty()) return l;
  if (x.rank() != 2 || x.dim(1) != norm->mean.size()) {
    throw ShapeError("quantize: normalization expects [N, " + std::to_string(norm->mean.size()) + "] input, got " +
                     shape_str(x.shape()));
  }
  l.rows = x.dim(0);
  l.cols = x.dim(1);
  return l;
}

}  // namespace

Tensor quantize(const Tensor& x, const Tensor& alpha, const QuantizerSpec& spec, const QuantizeContext& ctx) {
  if (alpha.size() != 1) throw ShapeError("quantize: alpha must be a scalar tensor");
  const QuantizerSpec eff = spec.with_alpha(alpha.item());
  eff.validate();
  const Layout lay = norm_layout(x, ctx.norm);
  const bool normed = ctx.norm && !ctx.norm->empty();
  // The stats live as long as the tape record, so copy them.
  const NormStats norm = normed ? *ctx.norm : NormStats{};

  auto forward_fn = [eff, ctx, lay, normed, norm](std::span<const Tensor> in) {
    const auto xd = in[0].data();
    std::vector<double> out(xd.size());
    if (eff.kind == QuantizerKind::none) {
      std::copy(xd.begin(), xd.end(), out.begin());
      return Tensor::from(in[0].shape(), std::move(out));
    }
    const Codebook cb = eff.codebook();
    ForwardMode mode = eff.mode;
    bool noisy = false;
    if (mode == ForwardMode::scheduled) {
      noisy = ctx.training && (eff.kind == QuantizerKind::uniform_aun ||
                               (eff.kind == QuantizerKind::uniform_fsq && ctx.step % 2 == 0));
      mode = ForwardMode::hard;
    }
    if (noisy && !ctx.rng) throw QuantizerError("quantize: noise step requires an rng");
    const double levels_minus_one = static_cast<double>((std::size_t{1} << eff.bits) - 1);
    const double delta = 2.0 * eff.alpha / levels_minus_one;
    std::uniform_real_distribution<double> unit(-0.5, 0.5);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const std::size_t c = i % lay.cols;
      const double z = normed ? (xd[i] - norm.mean[c]) / norm.std[c] : xd[i];
      double q;
      if (noisy && eff.kind == QuantizerKind::uniform_aun) {
        q = clip(z, eff.alpha) + delta * unit(*ctx.rng);
      } else if (noisy) {
        const double u = coin(*ctx.rng) ? 1.0 : -1.0;
        q = eff.alpha * (std::tanh(z) + u / levels_minus_one);
      } else if (mode == ForwardMode::smooth) {
        q = eff.kind == QuantizerKind::uniform_fsq ? eff.alpha * std::tanh(z) : clip(z, eff.alpha);
      } else {
        q = quantize_hard(z, eff, cb);
      }
      out[i] = normed ? q * norm.std[c] + norm.mean[c] : q;
    }
    return Tensor::from(in[0].shape(), std::move(out));
  };

  auto backward_fn = [eff, lay, normed, norm](const Tensor& g, std::span<const Tensor> in, const Tensor&) {
    const auto xd = in[0].data();
    std::vector<double> gx(xd.size());
    double ga = 0.0;
    const bool learn_alpha = eff.kind == QuantizerKind::apot;
    const Codebook unit = learn_alpha ? eff.unit_codebook() : Codebook{};
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const std::size_t c = i % lay.cols;
      const double z = normed ? (xd[i] - norm.mean[c]) / norm.std[c] : xd[i];
      gx[i] = g[i] * input_derivative(z, eff);
      if (learn_alpha) ga += g[i] * (normed ? norm.std[c] : 1.0) * alpha_derivative(z, eff.alpha, unit);
    }
    return std::vector<Tensor>{Tensor::from(in[0].shape(), std::move(gx)), Tensor::scalar(ga)};
  };

  return custom_grad(forward_fn, backward_fn, {x, alpha});
}

Tensor quantize_forward(const Tensor& x, const QuantizerSpec& spec, bool training, std::uint64_t step,
                        std::mt19937_64* rng) {
  QuantizeContext ctx;
  ctx.training = training;
  ctx.step = step;
  ctx.rng = rng;
  return quantize(x, Tensor::scalar(spec.alpha), spec, ctx);
}

Tensor quantize_backward_input(const Tensor& grad_out, const Tensor& x, const QuantizerSpec& spec) {
  if (grad_out.shape() != x.shape()) {
    throw ShapeError("quantize_backward_input: shapes " + shape_str(grad_out.shape()) + " and " +
                     shape_str(x.shape()) + " differ");
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = grad_out[i] * input_derivative(x[i], spec);
  return Tensor::from(x.shape(), std::move(out));
}

double quantize_backward_alpha(const Tensor& grad_out, const Tensor& x, const QuantizerSpec& spec) {
  if (spec.kind != QuantizerKind::apot) {
    throw QuantizerError("quantize_backward_alpha: alpha is learnable only for apot, not " +
                         quantizer_kind_name(spec.kind));
  }
  if (grad_out.shape() != x.shape()) throw ShapeError("quantize_backward_alpha: shape mismatch");
  const Codebook unit = spec.unit_codebook();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += grad_out[i] * alpha_derivative(x[i], spec.alpha, unit);
  return total;
}

// ---- statistics -----------------------------------------------------------

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double percentile_range(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("init_alpha_percentile: empty tensor");
  std::vector<double> v(values.begin(), values.end());
  return std::abs(percentile(v, 99.0) - percentile(v, 1.0));
}

double init_alpha_percentile(const Tensor& x) {
  return std::max(percentile_range(x.data()), kAlphaFloor);
}

NormStats compute_norm_stats(const Tensor& x, std::size_t channel_axis) {
  if (channel_axis >= x.rank()) throw ShapeError("normalize: channel axis out of range for " + shape_str(x.shape()));
  const auto& sh = x.shape();
  std::size_t inner = 1;
  for (std::size_t i = channel_axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t channels = sh[channel_axis];
  std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
  const std::size_t count = x.size() / channels;
  const auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) sum[(i / inner) % channels] += d[i];
  NormStats s;
  s.mean.resize(channels);
  s.std.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) s.mean[c] = sum[c] / static_cast<double>(count);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    const double dv = d[i] - s.mean[c];
    sq[c] += dv * dv;
  }
  for (std::size_t c = 0; c < channels; ++c) s.std[c] = std::sqrt(sq[c] / static_cast<double>(count) + kNormEps);
  return s;
}

std::pair<Tensor, NormStats> normalize_pre_quant(const Tensor& x, bool enabled, std::size_t channel_axis) {
  if (!enabled) return {x, NormStats{}};
  NormStats s = compute_norm_stats(x, channel_axis);
  const auto& sh = x.shape();
  std::size_t inner = 1;
  for (std::size_t i = channel_axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t channels = sh[channel_axis];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = (i / inner) % channels;
    out[i] = (x[i] - s.mean[c]) / s.std[c];
  }
  return {Tensor::from(sh, std::move(out)), std::move(s)};
}

}  // namespace quadd
