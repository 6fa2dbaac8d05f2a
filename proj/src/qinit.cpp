#include "quadd/qinit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "quadd/rng.hpp"

namespace quadd {

namespace {

// Activations feeding the final affine layer, one row per sample.
std::vector<double> penultimate(const Mlp& model, std::span<const double> rows, std::size_t n) {
  NoGradGuard guard;
  Tensor h = Tensor::from({n, model.input_dim()}, std::vector<double>(rows.begin(), rows.end()));
  for (std::size_t l = 0; l + 1 < model.depth(); ++l) {
    h = relu(add(matmul(h, model.weights()[l]), model.biases()[l]));
  }
  return std::vector<double>(h.data().begin(), h.data().end());
}

// Softmax residual p - onehot(label) of the final layer for each row.
std::vector<double> residuals(const Mlp& model, std::span<const double> h, std::size_t n,
                              std::span<const int> labels) {
  const auto& w = model.weights().back();
  const auto& b = model.biases().back();
  const std::size_t hid = w.dim(0), classes = w.dim(1);
  std::vector<double> out(n * classes);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw std::out_of_range("last_layer_grad: label " + std::to_string(labels[r]) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    double* e = &out[r * classes];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double z = b[c];
      for (std::size_t k = 0; k < hid; ++k) z += h[r * hid + k] * w[k * classes + c];
      e[c] = z;
      mx = std::max(mx, z);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      e[c] = std::exp(e[c] - mx);
      total += e[c];
    }
    for (std::size_t c = 0; c < classes; ++c) e[c] /= total;
    e[static_cast<std::size_t>(labels[r])] -= 1.0;
  }
  return out;
}

}  // namespace

std::vector<double> last_layer_grad(std::span<const double> sample, int label, const Mlp& model) {
  if (sample.size() != model.input_dim()) {
    throw ShapeError("last_layer_grad: sample has " + std::to_string(sample.size()) + " features, model expects " +
                     std::to_string(model.input_dim()));
  }
  const auto h = penultimate(model, sample, 1);
  const int labels[1] = {label};
  const auto e = residuals(model, h, 1, labels);
  const std::size_t hid = h.size(), classes = e.size();
  std::vector<double> g(hid * classes + classes);
  for (std::size_t k = 0; k < hid; ++k)
    for (std::size_t c = 0; c < classes; ++c) g[k * classes + c] = h[k] * e[c];
  std::copy(e.begin(), e.end(), g.begin() + static_cast<std::ptrdiff_t>(hid * classes));
  return g;
}

namespace {

SimMatrix cosine_from_gram(std::vector<double> gram, std::size_t n) {
  SimMatrix s;
  s.n = n;
  s.values = std::move(gram);
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) norm[i] = std::sqrt(std::max(0.0, s(i, i)));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = norm[i] * norm[j];
      s(i, j) = d > 0.0 ? std::clamp(s(i, j) / d, -1.0, 1.0) : 0.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) s(i, i) = 1.0;
  return s;
}

}  // namespace

SimMatrix build_sim_matrix(const std::vector<std::vector<double>>& grads) {
  const std::size_t n = grads.size();
  std::vector<double> gram(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      if (grads[i].size() != grads[j].size()) throw ShapeError("build_sim_matrix: gradient lengths differ");
      double d = 0.0;
      for (std::size_t k = 0; k < grads[i].size(); ++k) d += grads[i][k] * grads[j][k];
      gram[i * n + j] = gram[j * n + i] = d;
    }
  }
  return cosine_from_gram(std::move(gram), n);
}

SimMatrix build_sim_matrix(const LabeledDataset& candidates, const Mlp& model) {
  // Each gradient is the outer product [h, 1] x e, so inner products factor
  // into (h_i . h_j + 1)(e_i . e_j) and the full vectors are never formed.
  const std::size_t n = candidates.size();
  const auto h = penultimate(model, candidates.features, n);
  const auto e = residuals(model, h, n, candidates.labels);
  const std::size_t hid = n ? h.size() / n : 0, classes = model.output_dim();
  std::vector<double> gram(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double hh = 1.0, ee = 0.0;
      for (std::size_t k = 0; k < hid; ++k) hh += h[i * hid + k] * h[j * hid + k];
      for (std::size_t c = 0; c < classes; ++c) ee += e[i * classes + c] * e[j * classes + c];
      gram[i * n + j] = gram[j * n + i] = hh * ee;
    }
  }
  return cosine_from_gram(std::move(gram), n);
}

double graphcut_objective(const SimMatrix& sim, std::span<const std::size_t> selected,
                          std::span<const std::size_t> candidates) {
  double cut = 0.0, self = 0.0;
  for (std::size_t i : candidates)
    for (std::size_t a : selected) cut += sim(i, a);
  for (std::size_t a1 : selected)
    for (std::size_t a2 : selected) self += sim(a1, a2);
  return cut - self;
}

GreedySelection greedy_graphcut_select(const SimMatrix& sim, std::size_t m) {
  const std::size_t n = sim.n;
  if (m < 1 || m > n) {
    throw std::invalid_argument("greedy_graphcut_select: m=" + std::to_string(m) + " must be in [1, " +
                                std::to_string(n) + "]");
  }
  // col_c[j] = sum over the remaining pool C of S(i, j); to_a[j] = sum over
  // the selected set A of S(j, a). The gain of moving j from C to A is
  // col_c[j] - S(j, j) - 3 to_a[j] - S(j, j).
  std::vector<double> col_c(n, 0.0), to_a(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) col_c[j] += sim(i, j);
  std::vector<bool> in_pool(n, true);
  GreedySelection out;
  for (std::size_t step = 0; step < m; ++step) {
    std::size_t best = n;
    double best_gain = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!in_pool[j]) continue;
      const double gain = col_c[j] - 2.0 * sim(j, j) - 3.0 * to_a[j];
      if (gain > best_gain) {
        best_gain = gain;
        best = j;
      }
    }
    in_pool[best] = false;
    out.indices.push_back(best);
    out.gains.push_back(best_gain);
    for (std::size_t j = 0; j < n; ++j) {
      col_c[j] -= sim(best, j);
      to_a[j] += sim(j, best);
    }
  }
  return out;
}

LabeledDataset prequantize(const LabeledDataset& data, const QuantizerSpec& spec) {
  NoGradGuard guard;
  Tensor x = Tensor::from({data.size(), data.dim}, data.features);
  QuantizeContext ctx;
  NormStats stats;
  if (spec.normalize) {
    stats = compute_norm_stats(x, 1);
    ctx.norm = &stats;
  }
  QuantizerSpec hard = spec;
  hard.mode = ForwardMode::hard;
  const Tensor q = quantize(x, Tensor::scalar(spec.alpha), hard, ctx);
  LabeledDataset out = data;
  out.features.assign(q.data().begin(), q.data().end());
  return out;
}

QinitResult quantization_guided_init(const LabeledDataset& real, const QinitConfig& cfg) {
  if (cfg.m_per_class == 0) throw std::invalid_argument("qinit: m_per_class must be >= 1");
  QinitResult result;
  QuantizerSpec pre;
  pre.kind = QuantizerKind::uniform_ste;
  pre.bits = cfg.prequant_bits;
  pre.normalize = cfg.normalize;
  pre.mode = ForwardMode::hard;
  if (cfg.prequant_alpha > 0.0) {
    pre.alpha = cfg.prequant_alpha;
  } else {
    Tensor x = Tensor::from({real.size(), real.dim}, real.features);
    if (cfg.normalize) x = normalize_pre_quant(x, true, 1).first;
    pre.alpha = init_alpha_percentile(x);
  }
  pre.validate();
  result.prequant = pre;
  const LabeledDataset quantized = prequantize(real, pre);

  auto model_rng = make_rng(cfg.seed, 200);
  const Mlp model = Mlp::init(Arch::mlp2, real.dim, cfg.hidden, real.classes, model_rng, false);

  for (std::size_t c = 0; c < real.classes; ++c) {
    const auto rows = real.indices_of(static_cast<int>(c));
    if (rows.empty()) continue;
    if (rows.size() < cfg.m_per_class) {
      for (std::size_t r : rows) {
        result.indices.push_back(r);
        result.gains.push_back(std::numeric_limits<double>::quiet_NaN());
      }
      if (cfg.with_replacement) {
        auto rng = make_rng(cfg.seed, 300 + c);
        std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
        for (std::size_t i = rows.size(); i < cfg.m_per_class; ++i) {
          result.indices.push_back(rows[pick(rng)]);
          result.gains.push_back(std::numeric_limits<double>::quiet_NaN());
        }
      }
      continue;
    }
    const auto sim = build_sim_matrix(quantized.subset(rows), model);
    const auto sel = greedy_graphcut_select(sim, cfg.m_per_class);
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
      result.indices.push_back(rows[sel.indices[i]]);
      result.gains.push_back(sel.gains[i]);
    }
  }
  for (std::size_t r : result.indices) result.labels.push_back(real.labels[r]);
  return result;
}

}  // namespace quadd
