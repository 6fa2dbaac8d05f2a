#include "quadd/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include "quadd/bytes.hpp"
#include "quadd/rng.hpp"

namespace quadd {

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

std::vector<std::size_t> LabeledDataset::indices_of(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) out.push_back(i);
  return out;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.dim = dim;
  out.classes = classes;
  out.features.reserve(rows.size() * dim);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto src = row(r);
    out.features.insert(out.features.end(), src.begin(), src.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

void LabeledDataset::validate() const {
  if (features.size() != labels.size() * dim) throw std::invalid_argument("dataset: feature matrix size mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  for (double v : features) {
    if (!std::isfinite(v)) throw std::invalid_argument("dataset: non-finite feature");
  }
}

// ---- Gaussian mixture -----------------------------------------------------

LabeledDataset gen_gaussian_mixture(std::size_t classes, std::size_t dim, std::size_t n_per_class,
                                    double separation, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("gaussian mixture: need at least 2 classes");
  if (dim == 0) throw std::invalid_argument("gaussian mixture: dim must be positive");
  auto rng = make_rng(seed, 1);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Unit directions, resampled until every pair is at least distance 1 apart
  // (or the best spread found within the attempt budget).
  auto draw_dirs = [&] {
    std::vector<double> dirs(classes * dim);
    for (std::size_t c = 0; c < classes; ++c) {
      double norm = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        dirs[c * dim + d] = normal(rng);
        norm += dirs[c * dim + d] * dirs[c * dim + d];
      }
      norm = std::sqrt(norm);
      for (std::size_t d = 0; d < dim; ++d) dirs[c * dim + d] /= norm;
    }
    return dirs;
  };
  auto min_pair = [&](const std::vector<double>& dirs) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < classes; ++a)
      for (std::size_t b = a + 1; b < classes; ++b) {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          const double diff = dirs[a * dim + d] - dirs[b * dim + d];
          s += diff * diff;
        }
        best = std::min(best, std::sqrt(s));
      }
    return best;
  };
  std::vector<double> dirs = draw_dirs();
  double spread = min_pair(dirs);
  for (int attempt = 0; attempt < 1000 && spread < 1.0; ++attempt) {
    auto cand = draw_dirs();
    const double s = min_pair(cand);
    if (s > spread) {
      dirs = std::move(cand);
      spread = s;
    }
  }

  LabeledDataset out;
  out.dim = dim;
  out.classes = classes;
  out.features.reserve(classes * n_per_class * dim);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t d = 0; d < dim; ++d) out.features.push_back(separation * dirs[c * dim + d] + normal(rng));
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

// ---- beam task ------------------------------------------------------------

void BeamTaskConfig::validate() const {
  if (n_theta == 0 || n_phi == 0) throw std::invalid_argument("beam task: empty grid");
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) throw std::invalid_argument("beam task: mask_fraction must be in [0, 1)");
  if (noise_std < 0.0) throw std::invalid_argument("beam task: noise_std must be >= 0");
  if (!(skew >= 0.0 && skew <= 1.0)) throw std::invalid_argument("beam task: skew must be in [0, 1]");
}

namespace {

// Separable raised-cosine falloff.
double raised_cosine(double d, double width) {
  const double a = std::abs(d);
  if (a >= width) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * a / width));
}

}  // namespace

BeamDataset gen_beam_dataset_full(const BeamTaskConfig& cfg) {
  cfg.validate();
  const std::size_t nt = cfg.n_theta, np = cfg.n_phi, dim = cfg.grid_size();
  const auto n_mask = static_cast<std::size_t>(std::llround(cfg.mask_fraction * static_cast<double>(dim)));
  auto rng = make_rng(cfg.seed, 2);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double hot_t = 0.3 * static_cast<double>(nt - 1), hot_p = 0.6 * static_cast<double>(np - 1);
  const double spread_t = 0.22 * static_cast<double>(nt), spread_p = 0.22 * static_cast<double>(np);
  auto draw_center = [&](double hot, double spread, std::size_t n, bool concentrated) {
    const double hi = static_cast<double>(n - 1);
    if (!concentrated) return u01(rng) * hi;
    for (;;) {
      const double v = hot + spread * normal(rng);
      if (v >= 0.0 && v <= hi) return v;
    }
  };

  BeamDataset out;
  out.data.dim = dim;
  out.data.classes = dim;
  out.data.features.reserve(cfg.n_samples * dim);
  out.surface.reserve(cfg.n_samples * dim);
  out.mask.reserve(cfg.n_samples * dim);
  std::vector<double> p(dim);
  std::vector<std::size_t> positions(dim);
  for (std::size_t s = 0; s < cfg.n_samples; ++s) {
    const bool concentrated = u01(rng) < cfg.skew;
    const double ct = draw_center(hot_t, spread_t, nt, concentrated);
    const double cp = draw_center(hot_p, spread_p, np, concentrated);
    const double gain = 0.7 + 0.6 * u01(rng);
    const double side_t = u01(rng) * static_cast<double>(nt - 1);
    const double side_p = u01(rng) * static_cast<double>(np - 1);
    const double side_gain = gain * (0.15 + 0.25 * u01(rng));
    const double tilt_t = 0.04 * normal(rng), tilt_p = 0.04 * normal(rng);
    for (std::size_t i = 0; i < nt; ++i) {
      for (std::size_t j = 0; j < np; ++j) {
        const double di = static_cast<double>(i), dj = static_cast<double>(j);
        double v = gain * raised_cosine(di - ct, 3.0) * raised_cosine(dj - cp, 3.0);
        v += side_gain * raised_cosine(di - side_t, 2.0) * raised_cosine(dj - side_p, 2.0);
        v += tilt_t * (di - ct) / static_cast<double>(nt) + tilt_p * (dj - cp) / static_cast<double>(np);
        v += cfg.noise_std * normal(rng);
        p[i * np + j] = v;
      }
    }
    const auto best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    const double floor = *std::min_element(p.begin(), p.end());
    std::iota(positions.begin(), positions.end(), 0);
    for (std::size_t m = 0; m < n_mask; ++m) {
      std::uniform_int_distribution<std::size_t> pick(m, dim - 1);
      std::swap(positions[m], positions[pick(rng)]);
    }
    std::vector<std::uint8_t> hidden(dim, 0);
    for (std::size_t m = 0; m < n_mask; ++m) hidden[positions[m]] = 1;
    for (std::size_t d = 0; d < dim; ++d) {
      const double shifted = p[d] - floor + 0.05;
      out.surface.push_back(shifted);
      out.data.features.push_back(hidden[d] ? 0.0 : shifted);
      out.mask.push_back(hidden[d]);
    }
    out.data.labels.push_back(best);
  }
  return out;
}

LabeledDataset gen_beam_dataset(const BeamTaskConfig& cfg) { return gen_beam_dataset_full(cfg).data; }

// ---- init pool ------------------------------------------------------------

std::vector<std::size_t> sample_init_indices(const LabeledDataset& data, std::size_t m_per_class,
                                             bool with_replacement, std::uint64_t seed) {
  if (m_per_class == 0) throw std::invalid_argument("sample_init_pool: m_per_class must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < data.classes; ++c) {
    auto idx = data.indices_of(static_cast<int>(c));
    if (idx.empty()) continue;
    auto rng = make_rng(seed, 100 + c);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t take = std::min(m_per_class, idx.size());
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    if (with_replacement) {
      std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
      for (std::size_t i = take; i < m_per_class; ++i) out.push_back(idx[pick(rng)]);
    }
  }
  return out;
}

LabeledDataset sample_init_pool(const LabeledDataset& data, std::size_t m_per_class, bool with_replacement,
                                std::uint64_t seed) {
  const auto idx = sample_init_indices(data, m_per_class, with_replacement, seed);
  return data.subset(idx);
}

// ---- raw files ------------------------------------------------------------

namespace {
constexpr std::uint8_t kDatasetMagic[4] = {'Q', 'D', 'S', 'F'};
}

std::vector<std::uint8_t> encode_dataset(const LabeledDataset& data) {
  data.validate();
  ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.dim));
  w.u32(static_cast<std::uint32_t>(data.classes));
  for (double v : data.features) w.f64(v);
  for (int y : data.labels) w.u32(static_cast<std::uint32_t>(y));
  return std::move(w.bytes());
}

LabeledDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kDatasetMagic))) {
    throw std::runtime_error("dataset file: bad magic");
  }
  LabeledDataset out;
  const std::size_t n = r.u32();
  out.dim = r.u32();
  out.classes = r.u32();
  out.features.resize(n * out.dim);
  for (auto& v : out.features) v = r.f64();
  out.labels.resize(n);
  for (auto& y : out.labels) y = static_cast<int>(r.u32());
  out.validate();
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_dataset(const LabeledDataset& data, const std::filesystem::path& path) {
  write_file(path, encode_dataset(data));
}

LabeledDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

// ---- tasks ----------------------------------------------------------------

Task make_task(const TaskConfig& cfg) {
  Task task;
  task.name = cfg.name;
  if (cfg.name == "gaussian") {
    const auto all = gen_gaussian_mixture(cfg.classes, cfg.dim, cfg.train_per_class + cfg.test_per_class,
                                          cfg.separation, cfg.seed);
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < all.size(); ++i) {
      (i / cfg.classes < cfg.train_per_class ? train_rows : test_rows).push_back(i);
    }
    task.train = all.subset(train_rows);
    task.test = all.subset(test_rows);
    return task;
  }
  if (cfg.name == "beam") {
    BeamTaskConfig beam = cfg.beam;
    beam.seed = cfg.seed;
    const auto all = gen_beam_dataset(beam);
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 3);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(all.size())));
    std::vector<std::size_t> test_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(test_rows.begin(), test_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    task.train = all.subset(train_rows);
    task.test = all.subset(test_rows);
    return task;
  }
  throw std::invalid_argument("unknown task '" + cfg.name + "'");
}

}  // namespace quadd
