#include "quadd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "quadd/rng.hpp"

namespace quadd {

Surrogate parse_surrogate(const std::string& name) {
  if (name == "dm") return Surrogate::dm;
  if (name == "tm") return Surrogate::tm;
  throw std::invalid_argument("unknown surrogate '" + name + "' (expected dm or tm)");
}

std::string surrogate_name(Surrogate s) { return s == Surrogate::dm ? "dm" : "tm"; }

InitMode parse_init_mode(const std::string& name) {
  if (name == "graphcut") return InitMode::graphcut;
  if (name == "random") return InitMode::random;
  throw std::invalid_argument("unknown init mode '" + name + "' (expected graphcut or random)");
}

std::string init_mode_name(InitMode m) { return m == InitMode::graphcut ? "graphcut" : "random"; }

void DistillConfig::validate() const {
  spec.validate();
  if (m_per_class == 0) throw std::invalid_argument("distill: m_per_class must be >= 1");
  if (!(lr_synth > 0.0) || !(lr_alpha > 0.0) || !(lr_student > 0.0)) {
    throw std::invalid_argument("distill: learning rates must be positive");
  }
  if (momentum_synth < 0.0 || momentum_synth >= 1.0) throw std::invalid_argument("distill: momentum must be in [0, 1)");
  if (batch_real == 0) throw std::invalid_argument("distill: batch_real must be >= 1");
  if (surrogate == Surrogate::dm && (probe_width == 0 || probe_depth == 0)) {
    throw std::invalid_argument("distill: probe must have positive width and depth");
  }
  if (surrogate == Surrogate::tm) {
    if (teacher_epochs < 2) throw std::invalid_argument("distill: teacher_epochs must be >= 2");
    if (expert_steps == 0) throw std::invalid_argument("distill: expert_steps must be >= 1");
    if (max_start_epoch + expert_steps > teacher_epochs) {
      throw std::invalid_argument("distill: max_start_epoch + expert_steps exceeds teacher_epochs");
    }
    if (teacher_count == 0) throw std::invalid_argument("distill: teacher_count must be >= 1");
  }
}

// ---- distribution matching --------------------------------------------------

namespace {

// Row c of the result averages the rows of class present[c].
Tensor class_mean_operator(std::span<const int> labels, const std::vector<int>& present) {
  const std::size_t n = labels.size();
  std::vector<double> p(present.size() * n, 0.0);
  for (std::size_t c = 0; c < present.size(); ++c) {
    std::size_t count = 0;
    for (int y : labels) count += y == present[c];
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == present[c]) p[c * n + i] = 1.0 / static_cast<double>(count);
  }
  return Tensor::from({present.size(), n}, std::move(p));
}

}  // namespace

Tensor dm_loss(const LabeledDataset& real_batch, const Tensor& synth_q, std::span<const int> synth_labels,
               const Mlp& probe) {
  if (synth_q.rank() != 2 || synth_q.dim(0) != synth_labels.size() || synth_q.dim(1) != real_batch.dim) {
    throw ShapeError("dm_loss: synthetic rows " + shape_str(synth_q.shape()) + " do not match " +
                     std::to_string(synth_labels.size()) + " labels of dimension " + std::to_string(real_batch.dim));
  }
  std::vector<int> present;
  const auto real_counts = real_batch.class_counts();
  for (std::size_t c = 0; c < real_batch.classes; ++c) {
    const bool in_synth = std::find(synth_labels.begin(), synth_labels.end(), static_cast<int>(c)) != synth_labels.end();
    if (real_counts[c] > 0 && in_synth) present.push_back(static_cast<int>(c));
  }
  if (present.empty()) return scale(sum(synth_q), 0.0);

  Tensor real_means;
  {
    NoGradGuard guard;
    const Tensor xr = Tensor::from({real_batch.size(), real_batch.dim}, real_batch.features);
    real_means = matmul(class_mean_operator(real_batch.labels, present), probe.forward(xr, true));
  }
  const Tensor synth_means = matmul(class_mean_operator(synth_labels, present), probe.forward(synth_q, true));
  return squared_error(synth_means, real_means);
}

// ---- trajectory matching ----------------------------------------------------

std::vector<Tensor> unflatten_params(std::span<const double> flat, const std::vector<std::size_t>& layer_sizes,
                                     bool requires_grad) {
  std::vector<Tensor> params;
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const std::size_t in = layer_sizes[l], out = layer_sizes[l + 1];
    if (off + in * out + out > flat.size()) throw ShapeError("unflatten_params: parameter vector too short");
    params.push_back(Tensor::from({in, out}, std::vector<double>(flat.begin() + off, flat.begin() + off + in * out),
                                  requires_grad));
    off += in * out;
    params.push_back(Tensor::from({out}, std::vector<double>(flat.begin() + off, flat.begin() + off + out),
                                  requires_grad));
    off += out;
  }
  if (off != flat.size()) throw ShapeError("unflatten_params: parameter vector too long");
  return params;
}

ExpertTrajectory record_expert_trajectories(const LabeledDataset& real, const std::vector<std::size_t>& layer_sizes,
                                            std::size_t epochs, const TrainConfig& train, std::uint64_t seed,
                                            std::vector<double>* epoch_losses) {
  if (epochs < 2) throw std::invalid_argument("record_expert_trajectories: epochs must be >= 2");
  auto rng = make_rng(seed, 400);
  Mlp teacher = Mlp::init(layer_sizes, rng, true);
  ExpertTrajectory traj;
  traj.layer_sizes = layer_sizes;
  traj.teacher_seed = seed;
  std::ostringstream id;
  id << "n" << real.size() << "-d" << real.dim << "-c" << real.classes;
  traj.dataset_id = id.str();
  TrainConfig one = train;
  one.epochs = 1;
  traj.snapshots.push_back(teacher.flatten());
  if (epoch_losses) epoch_losses->push_back(mean_cross_entropy(teacher, real.features, real.dim, real.labels));
  for (std::size_t e = 0; e < epochs; ++e) {
    train_sgd(teacher, real.features, real.dim, real.labels, one, rng);
    traj.snapshots.push_back(teacher.flatten());
    if (epoch_losses) epoch_losses->push_back(mean_cross_entropy(teacher, real.features, real.dim, real.labels));
  }
  return traj;
}

Tensor tm_loss(const ExpertTrajectory& traj, const TmSegment& seg, const Tensor& synth_q,
               std::span<const int> synth_labels) {
  if (seg.expert_steps == 0 || seg.start_epoch + seg.expert_steps >= traj.snapshots.size()) {
    throw std::out_of_range("tm_loss: segment [" + std::to_string(seg.start_epoch) + ", " +
                            std::to_string(seg.start_epoch + seg.expert_steps) + "] outside a trajectory of " +
                            std::to_string(traj.epochs()) + " epochs");
  }
  const auto& start = traj.snapshots[seg.start_epoch];
  const auto& target = traj.snapshots[seg.start_epoch + seg.expert_steps];
  double gap = 0.0;
  for (std::size_t i = 0; i < start.size(); ++i) gap += (start[i] - target[i]) * (start[i] - target[i]);

  std::vector<Tensor> params = unflatten_params(start, traj.layer_sizes);
  const std::vector<Tensor> goal = unflatten_params(target, traj.layer_sizes);
  for (std::size_t s = 0; s < seg.student_steps; ++s) {
    const auto grads = ce_gradients(params, synth_q, synth_labels);
    for (std::size_t p = 0; p < params.size(); ++p) params[p] = sub(params[p], scale(grads[p], seg.lr_student));
  }
  if (seg.normalized && gap == 0.0) return scale(sum(synth_q), 0.0);
  Tensor dist = squared_error(params[0], goal[0]);
  for (std::size_t p = 1; p < params.size(); ++p) dist = add(dist, squared_error(params[p], goal[p]));
  if (!dist.requires_grad() && synth_q.requires_grad()) dist = add(dist, scale(sum(synth_q), 0.0));
  return seg.normalized ? scale(dist, 1.0 / gap) : dist;
}

// ---- main loop --------------------------------------------------------------

namespace {

std::vector<std::size_t> init_indices(const LabeledDataset& real, const DistillConfig& cfg) {
  if (cfg.init == InitMode::random) {
    return sample_init_indices(real, cfg.m_per_class, cfg.init_with_replacement, derive_seed(cfg.seed, 1));
  }
  QinitConfig q;
  q.m_per_class = cfg.m_per_class;
  q.prequant_bits = cfg.prequant_bits > 0 ? cfg.prequant_bits
                    : cfg.spec.kind == QuantizerKind::none ? 8
                                                            : cfg.spec.bits;
  q.normalize = cfg.spec.normalize;
  q.hidden = cfg.qinit_hidden;
  q.with_replacement = cfg.init_with_replacement;
  q.seed = derive_seed(cfg.seed, 1);
  return quantization_guided_init(real, q).indices;
}

// Per class, batch_real rows without replacement (all rows of smaller
// classes), as row indices into the real set.
class RealBatcher {
 public:
  RealBatcher(const LabeledDataset& real, std::size_t per_class) : real_(real), per_class_(per_class) {
    for (std::size_t c = 0; c < real.classes; ++c) by_class_.push_back(real.indices_of(static_cast<int>(c)));
  }

  LabeledDataset next(std::mt19937_64& rng) {
    std::vector<std::size_t> rows;
    for (auto& pool : by_class_) {
      const std::size_t take = std::min(per_class_, pool.size());
      for (std::size_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
        rows.push_back(pool[i]);
      }
    }
    return real_.subset(rows);
  }

 private:
  const LabeledDataset& real_;
  std::size_t per_class_;
  std::vector<std::vector<std::size_t>> by_class_;
};

std::vector<std::size_t> probe_sizes(const DistillConfig& cfg, std::size_t dim) {
  std::vector<std::size_t> sizes{dim};
  for (std::size_t l = 0; l < cfg.probe_depth; ++l) sizes.push_back(cfg.probe_width);
  return sizes;
}

void check_finite(double loss, std::size_t it, double alpha, const std::vector<double>& trace) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << "distill: non-finite loss at iteration " << it << " (alpha=" << alpha << "); last losses:";
  const std::size_t from = trace.size() > 5 ? trace.size() - 5 : 0;
  for (std::size_t i = from; i < trace.size(); ++i) msg << ' ' << trace[i];
  throw DistillDiverged(msg.str());
}

void sgd_momentum(Tensor& s, std::vector<double>& velocity, double lr, double momentum) {
  const auto g = s.grad();
  auto d = s.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    velocity[i] = momentum * velocity[i] + g[i];
    d[i] -= lr * velocity[i];
  }
  s.zero_grad();
}

}  // namespace

DistillResult quadd_run(const LabeledDataset& real, const DistillConfig& cfg) {
  cfg.validate();
  real.validate();
  DistillResult result;
  result.init_indices = init_indices(real, cfg);

  std::vector<int> labels;
  std::vector<double> init_rows;
  for (std::size_t r : result.init_indices) {
    labels.push_back(real.labels[r]);
    const auto row = real.row(r);
    init_rows.insert(init_rows.end(), row.begin(), row.end());
  }
  const std::size_t m = labels.size(), dim = real.dim;
  Tensor synth = Tensor::from({m, dim}, std::move(init_rows), true);

  QuantizerSpec spec = cfg.spec;
  if (spec.kind != QuantizerKind::none) {
    const Tensor base = spec.normalize ? normalize_pre_quant(synth.detach(), true, 1).first : synth.detach();
    spec.alpha = init_alpha_percentile(base);
  }
  spec.validate();
  Tensor alpha = Tensor::scalar(spec.alpha, spec.kind == QuantizerKind::apot);

  std::vector<ExpertTrajectory> experts;
  if (cfg.surrogate == Surrogate::tm) {
    const std::vector<std::size_t> sizes{dim, cfg.teacher_hidden, real.classes};
    for (std::size_t t = 0; t < cfg.teacher_count; ++t) {
      experts.push_back(record_expert_trajectories(real, sizes, cfg.teacher_epochs, cfg.teacher_train,
                                                   derive_seed(cfg.seed, 500 + t)));
    }
  }

  auto batch_rng = make_rng(cfg.seed, 11);
  auto probe_rng = make_rng(cfg.seed, 12);
  auto noise_rng = make_rng(cfg.seed, 13);
  auto segment_rng = make_rng(cfg.seed, 14);
  RealBatcher batcher(real, cfg.batch_real);
  const auto sizes = probe_sizes(cfg, dim);
  std::vector<double> velocity(synth.size(), 0.0);

  TapeScope scope;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tape::current().reset();
    NormStats stats;
    QuantizeContext ctx;
    ctx.training = true;
    ctx.step = it;
    ctx.rng = &noise_rng;
    if (spec.normalize) {
      stats = compute_norm_stats(synth.detach(), 1);
      ctx.norm = &stats;
    }
    const Tensor synth_q = quantize(synth, alpha, spec, ctx);

    Tensor loss;
    if (cfg.surrogate == Surrogate::dm) {
      const LabeledDataset batch = batcher.next(batch_rng);
      const Mlp probe = Mlp::init(sizes, probe_rng, false);
      loss = dm_loss(batch, synth_q, labels, probe);
    } else {
      std::uniform_int_distribution<std::size_t> pick_teacher(0, experts.size() - 1);
      std::uniform_int_distribution<std::size_t> pick_start(0, cfg.max_start_epoch);
      const auto& traj = experts[pick_teacher(segment_rng)];
      TmSegment seg;
      seg.start_epoch = pick_start(segment_rng);
      seg.expert_steps = cfg.expert_steps;
      seg.student_steps = cfg.student_steps;
      seg.lr_student = cfg.lr_student;
      seg.normalized = cfg.tm_normalized;
      loss = tm_loss(traj, seg, synth_q, labels);
    }
    const double value = loss.item();
    check_finite(value, it, alpha.item(), result.loss_trace);
    backward(loss);

    sgd_momentum(synth, velocity, cfg.lr_synth, cfg.momentum_synth);
    if (alpha.requires_grad()) {
      const double g = alpha.grad()[0];
      alpha.mutable_data()[0] = std::max(kAlphaFloor, alpha.item() - cfg.lr_alpha * g);
      alpha.zero_grad();
      if (!std::isfinite(alpha.item())) check_finite(alpha.item(), it, alpha.item(), result.loss_trace);
    }
    result.loss_trace.push_back(value);
    result.alpha_trace.push_back(alpha.item());
  }
  Tape::current().reset();

  DistilledDataset& ds = result.ds;
  ds.dim = dim;
  ds.classes = real.classes;
  ds.samples.assign(synth.data().begin(), synth.data().end());
  ds.labels = labels;
  ds.spec = spec.with_alpha(alpha.item());
  ds.spec.mode = ForwardMode::scheduled;
  if (spec.normalize) ds.norm = compute_norm_stats(synth.detach(), 1);
  ds.seed = cfg.seed;
  return result;
}

std::vector<double> vanilla_dm_trace(const LabeledDataset& real, const DistillConfig& cfg) {
  cfg.validate();
  const auto indices = init_indices(real, cfg);
  std::vector<int> labels;
  std::vector<double> rows;
  for (std::size_t r : indices) {
    labels.push_back(real.labels[r]);
    const auto row = real.row(r);
    rows.insert(rows.end(), row.begin(), row.end());
  }
  Tensor synth = Tensor::from({labels.size(), real.dim}, std::move(rows), true);
  auto batch_rng = make_rng(cfg.seed, 11);
  auto probe_rng = make_rng(cfg.seed, 12);
  RealBatcher batcher(real, cfg.batch_real);
  const auto sizes = probe_sizes(cfg, real.dim);
  std::vector<double> velocity(synth.size(), 0.0);
  std::vector<double> trace;
  TapeScope scope;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tape::current().reset();
    const LabeledDataset batch = batcher.next(batch_rng);
    const Mlp probe = Mlp::init(sizes, probe_rng, false);
    Tensor loss = dm_loss(batch, synth, labels, probe);
    trace.push_back(loss.item());
    backward(loss);
    sgd_momentum(synth, velocity, cfg.lr_synth, cfg.momentum_synth);
  }
  Tape::current().reset();
  return trace;
}

// ---- materialization --------------------------------------------------------

std::vector<double> materialize(const DistilledDataset& ds) {
  if (ds.discrete || ds.spec.kind == QuantizerKind::none) return ds.samples;
  NoGradGuard guard;
  const Tensor x = Tensor::from({ds.size(), ds.dim}, ds.samples);
  QuantizeContext ctx;
  if (!ds.norm.empty()) ctx.norm = &ds.norm;
  QuantizerSpec hard = ds.spec;
  hard.mode = ForwardMode::hard;
  const Tensor q = quantize(x, Tensor::scalar(hard.alpha), hard, ctx);
  return std::vector<double>(q.data().begin(), q.data().end());
}

LabeledDataset materialized_dataset(const DistilledDataset& ds) {
  LabeledDataset out;
  out.dim = ds.dim;
  out.classes = ds.classes;
  out.features = materialize(ds);
  out.labels = ds.labels;
  return out;
}

DistilledDataset discretize(const DistilledDataset& ds) {
  DistilledDataset out = ds;
  out.samples = materialize(ds);
  out.discrete = true;
  return out;
}

DistilledDataset post_quantize(const DistilledDataset& full_precision, const QuantizerSpec& spec) {
  DistilledDataset ds = full_precision;
  ds.discrete = false;
  ds.spec = spec;
  ds.norm = {};
  if (spec.kind == QuantizerKind::none) {
    ds.spec.alpha = spec.alpha > 0.0 ? spec.alpha : 1.0;
    return ds;
  }
  const Tensor x = Tensor::from({ds.size(), ds.dim}, ds.samples);
  if (spec.normalize) ds.norm = compute_norm_stats(x, 1);
  if (!(spec.alpha > 0.0)) {
    ds.spec.alpha = init_alpha_percentile(spec.normalize ? normalize_pre_quant(x, true, 1).first : x);
  }
  ds.spec.validate();
  return discretize(ds);
}

}  // namespace quadd
