#include "quadd/eval.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "quadd/rng.hpp"

namespace quadd {

Mlp train_student(const LabeledDataset& data, const StudentConfig& cfg, std::uint64_t seed) {
  auto rng = make_rng(seed, 700);
  Mlp net = Mlp::init(cfg.arch, data.dim, cfg.hidden, data.classes, rng, true);
  if (cfg.train.epochs > 0 && data.size() > 0) train_sgd(net, data.features, data.dim, data.labels, cfg.train, rng);
  return net;
}

Mlp train_student(const DistilledDataset& ds, const StudentConfig& cfg, std::uint64_t seed) {
  return train_student(materialized_dataset(ds), cfg, seed);
}

EvalReport score_predictions(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("score_predictions: length mismatch");
  EvalReport r;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]), p = static_cast<std::size_t>(predicted[i]);
    if (t >= classes || p >= classes) throw std::out_of_range("score_predictions: label out of range");
    ++r.confusion[t][p];
    correct += t == p;
  }
  r.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  r.per_class_recall.assign(classes, 0.0);
  double f1_total = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t support = 0, predicted_c = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      support += r.confusion[c][k];
      predicted_c += r.confusion[k][c];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    if (support > 0) r.per_class_recall[c] = tp / static_cast<double>(support);
    const std::size_t denom = support + predicted_c;
    if (denom > 0) f1_total += 2.0 * tp / static_cast<double>(denom);
  }
  r.macro_f1 = classes ? f1_total / static_cast<double>(classes) : 0.0;
  return r;
}

EvalReport evaluate(const Mlp& model, const LabeledDataset& test) {
  if (model.input_dim() != test.dim) {
    throw ShapeError("evaluate: model expects " + std::to_string(model.input_dim()) + " features, test set has " +
                     std::to_string(test.dim));
  }
  if (model.output_dim() != test.classes) throw ShapeError("evaluate: class count mismatch");
  const Tensor x = Tensor::from({test.size(), test.dim}, test.features);
  const auto pred = model.predict(x);
  return score_predictions(test.labels, pred, test.classes);
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, std::sqrt(var / static_cast<double>(values.size()))};
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

namespace {

ArchSummary summarize(std::string arch, const std::vector<std::uint64_t>& seeds, std::vector<EvalReport> runs) {
  ArchSummary s;
  s.arch = std::move(arch);
  s.seeds = seeds;
  std::vector<double> acc, f1;
  for (const auto& r : runs) {
    acc.push_back(r.accuracy);
    f1.push_back(r.macro_f1);
  }
  std::tie(s.accuracy_mean, s.accuracy_std) = mean_std(acc);
  std::tie(s.macro_f1_mean, s.macro_f1_std) = mean_std(f1);
  s.runs = std::move(runs);
  return s;
}

}  // namespace

ArchSummary eval_over_seeds(const LabeledDataset& train, const LabeledDataset& test, const StudentConfig& cfg,
                            const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  std::vector<EvalReport> runs(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) {
    runs[i] = evaluate(train_student(train, cfg, seeds[i]), test);
    runs[i].seeds = {seeds[i]};
    runs[i].arch = arch_name(cfg.arch);
  });
  return summarize(arch_name(cfg.arch), seeds, std::move(runs));
}

std::vector<ArchSummary> cross_arch_eval(const DistilledDataset& ds, const LabeledDataset& test,
                                         const std::vector<Arch>& archs, const std::vector<std::uint64_t>& seeds,
                                         const StudentConfig& base, std::size_t threads) {
  if (archs.empty()) throw std::invalid_argument("cross_arch_eval: no architectures given");
  const LabeledDataset train = materialized_dataset(ds);
  const BitCounts bits = measure_bits(ds);
  std::vector<EvalReport> cells(archs.size() * seeds.size());
  parallel_for(cells.size(), threads, [&](std::size_t i) {
    StudentConfig cfg = base;
    cfg.arch = archs[i / seeds.size()];
    const auto seed = seeds[i % seeds.size()];
    cells[i] = evaluate(train_student(train, cfg, seed), test);
    cells[i].seeds = {seed};
    cells[i].arch = arch_name(cfg.arch);
    cells[i].bits = bits;
  });
  std::vector<ArchSummary> out;
  for (std::size_t a = 0; a < archs.size(); ++a) {
    std::vector<EvalReport> runs(cells.begin() + static_cast<std::ptrdiff_t>(a * seeds.size()),
                                 cells.begin() + static_cast<std::ptrdiff_t>((a + 1) * seeds.size()));
    out.push_back(summarize(arch_name(archs[a]), seeds, std::move(runs)));
  }
  return out;
}

}  // namespace quadd
