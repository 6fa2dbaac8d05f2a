#include "quadd/app.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "quadd/distill.hpp"
#include "quadd/eval.hpp"
#include "quadd/packfmt.hpp"
#include "quadd/qinit.hpp"
#include "quadd/rng.hpp"

namespace quadd {

const std::vector<std::string> kDistillColumns = {"task",           "surrogate",   "M",          "b",
                                                  "payload_bits",   "total_bits",  "accuracy_mean",
                                                  "accuracy_std",   "macro_f1_mean", "seconds"};
const std::vector<std::string> kSweepColumns = {
    "row_type",     "budget",        "task",         "surrogate",     "M",       "b",     "payload_bits",
    "total_bits",   "accuracy_mean", "accuracy_std", "macro_f1_mean", "seconds", "status"};
const std::vector<std::string> kEvalColumns = {"task",          "arch",         "M",
                                               "b",             "payload_bits", "total_bits",
                                               "accuracy_mean", "accuracy_std", "macro_f1_mean",
                                               "seconds"};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(field);
      field.clear();
    } else {
      field += ch;
    }
  }
  out.push_back(field);
  return out;
}

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string join(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) s += ',';
    s += cells[i];
  }
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::size_t default_threads() {
  if (const char* env = std::getenv("QUADD_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("QUADD_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1U, std::thread::hardware_concurrency());
}

// ---- option groups ----------------------------------------------------------

struct TaskOpts {
  std::string name;
  std::uint64_t data_seed = 0;
  std::size_t classes = 3, dim = 16, train_per_class = 200, test_per_class = 200;
  double separation = 1.5;
  std::size_t n_theta = 8, n_phi = 8, samples = 6000;
  double mask_fraction = 0.5, noise = 0.01, skew = 0.85, test_fraction = 0.2;

  TaskConfig config() const {
    TaskConfig c;
    c.name = name;
    c.seed = data_seed;
    c.classes = classes;
    c.dim = dim;
    c.train_per_class = train_per_class;
    c.test_per_class = test_per_class;
    c.separation = separation;
    c.beam.n_theta = n_theta;
    c.beam.n_phi = n_phi;
    c.beam.n_samples = samples;
    c.beam.mask_fraction = mask_fraction;
    c.beam.noise_std = noise;
    c.beam.skew = skew;
    c.test_fraction = test_fraction;
    return c;
  }
  void check() const {
    if (name != "gaussian" && name != "beam") throw UsageError("--task must be gaussian or beam, got '" + name + "'");
  }
};

void add_task_options(CLI::App* app, TaskOpts& t, bool required) {
  auto* opt = app->add_option("--task", t.name, "Task: gaussian or beam");
  if (required) opt->required();
  app->add_option("--data-seed", t.data_seed, "Seed of the task generator");
  app->add_option("--classes", t.classes, "gaussian: class count");
  app->add_option("--dim", t.dim, "gaussian: feature dimension");
  app->add_option("--train-per-class", t.train_per_class, "gaussian: training rows per class");
  app->add_option("--test-per-class", t.test_per_class, "gaussian: test rows per class");
  app->add_option("--separation", t.separation, "gaussian: distance of class centres from the origin");
  app->add_option("--n-theta", t.n_theta, "beam: azimuth beams");
  app->add_option("--n-phi", t.n_phi, "beam: elevation beams");
  app->add_option("--samples", t.samples, "beam: generated samples");
  app->add_option("--mask-fraction", t.mask_fraction, "beam: hidden fraction of each grid");
  app->add_option("--noise", t.noise, "beam: measurement noise std");
  app->add_option("--skew", t.skew, "beam: probability of a hot-spot lobe");
  app->add_option("--test-fraction", t.test_fraction, "beam: share of samples held out");
}

struct QuantOpts {
  std::string kind = "apot";
  int bits = 3;
  int k = 0;
  bool normalize = false;

  QuantizerSpec spec(int b) const {
    QuantizerSpec s;
    try {
      s.kind = parse_quantizer_kind(kind);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    s.bits = b;
    s.k = k > 0 ? k : (b % 2 == 0 ? 2 : 1);
    s.normalize = normalize;
    s.alpha = 1.0;
    try {
      s.validate();
    } catch (const QuantizerError& e) {
      throw UsageError(e.what());
    }
    return s;
  }
};

void add_quant_options(CLI::App* app, QuantOpts& q, bool with_bits = true) {
  app->add_option("--quantizer", q.kind, "none, uniform-ste, uniform-fsq, uniform-aun or apot");
  if (with_bits) app->add_option("--bits", q.bits, "Bits per element")->check(CLI::Range(1, 16));
  app->add_option("--k", q.k, "APoT base width (0: 2 for even b, else 1)");
  app->add_flag("--normalize", q.normalize, "Standardize each feature before quantization");
}

struct DistillOpts {
  std::string surrogate = "dm";
  std::size_t m_per_class = 10;
  std::size_t iters = 500;
  std::uint64_t seed = 0;
  double lr_synth = 1.0, lr_alpha = 0.01, momentum = 0.5, lr_student = 0.05;
  std::size_t batch_real = 64, probe_width = 64, student_steps = 10, expert_steps = 2, max_start_epoch = 4;
  std::size_t teacher_epochs = 8;
  std::string init = "graphcut";
  bool with_replacement = false;
  int prequant_bits = 0;
  bool unnormalized_tm = false;
  std::string baseline = "aware";

  DistillConfig config(const QuantizerSpec& spec) const {
    DistillConfig c;
    try {
      c.surrogate = parse_surrogate(surrogate);
      c.init = parse_init_mode(init);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    if (baseline != "aware" && baseline != "post") throw UsageError("--baseline must be aware or post");
    c.m_per_class = m_per_class;
    c.spec = spec;
    c.iterations = iters;
    c.lr_synth = lr_synth;
    c.lr_alpha = lr_alpha;
    c.momentum_synth = momentum;
    c.batch_real = batch_real;
    c.probe_width = probe_width;
    c.lr_student = lr_student;
    c.student_steps = student_steps;
    c.expert_steps = expert_steps;
    c.max_start_epoch = max_start_epoch;
    c.teacher_epochs = teacher_epochs;
    c.tm_normalized = !unnormalized_tm;
    c.init_with_replacement = with_replacement;
    c.prequant_bits = prequant_bits;
    c.seed = seed;
    if (baseline == "post") {
      c.spec.kind = QuantizerKind::none;
      if (c.prequant_bits == 0) c.prequant_bits = spec.bits;
    }
    try {
      c.validate();
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

void add_distill_options(CLI::App* app, DistillOpts& d, bool with_m) {
  app->add_option("--surrogate", d.surrogate, "dm or tm");
  if (with_m) app->add_option("--m-per-class", d.m_per_class, "Synthetic rows per class")->check(CLI::PositiveNumber);
  app->add_option("--iters", d.iters, "Distillation iterations");
  app->add_option("--seed", d.seed, "Run seed");
  app->add_option("--lr-synth", d.lr_synth, "Learning rate of the synthetic rows");
  app->add_option("--lr-alpha", d.lr_alpha, "Learning rate of the clipping threshold");
  app->add_option("--momentum", d.momentum, "Momentum of the synthetic-row update");
  app->add_option("--batch-real", d.batch_real, "Real rows per class per iteration");
  app->add_option("--probe-width", d.probe_width, "dm: width of the random probe");
  app->add_option("--lr-student", d.lr_student, "tm: student learning rate");
  app->add_option("--student-steps", d.student_steps, "tm: student steps per segment");
  app->add_option("--expert-steps", d.expert_steps, "tm: expert epochs per segment");
  app->add_option("--max-start-epoch", d.max_start_epoch, "tm: latest segment start");
  app->add_option("--teacher-epochs", d.teacher_epochs, "tm: epochs of each expert trajectory");
  app->add_option("--init", d.init, "graphcut or random");
  app->add_flag("--with-replacement", d.with_replacement, "Fill small classes by duplication");
  app->add_option("--prequant-bits", d.prequant_bits, "Bits of the initialization pre-quantizer (0: same as --bits)");
  app->add_flag("--unnormalized-tm", d.unnormalized_tm, "tm: raw squared parameter distance");
  app->add_option("--baseline", d.baseline, "aware, or post: distill at full precision then quantize once");
}

struct EvalOpts {
  std::string arch = "mlp-2";
  std::size_t eval_seeds = 5;
  std::size_t epochs = 300;
  std::size_t hidden = 64;
  double lr = 0.05, momentum = 0.9, weight_decay = 5e-4;
  std::size_t batch = 64;

  StudentConfig student(Arch arch_id) const {
    StudentConfig s;
    s.arch = arch_id;
    s.hidden = hidden;
    s.train.epochs = epochs;
    s.train.lr = lr;
    s.train.momentum = momentum;
    s.train.weight_decay = weight_decay;
    s.train.batch_size = batch;
    return s;
  }
  std::vector<std::uint64_t> seeds(std::uint64_t run_seed) const {
    if (eval_seeds == 0) throw UsageError("--eval-seeds must be >= 1");
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < eval_seeds; ++i) out.push_back(derive_seed(run_seed, 900 + i));
    return out;
  }
};

void add_eval_options(CLI::App* app, EvalOpts& e) {
  app->add_option("--eval-seeds", e.eval_seeds, "Students trained per evaluation");
  app->add_option("--student-epochs", e.epochs, "Student training epochs");
  app->add_option("--student-hidden", e.hidden, "Student hidden width");
  app->add_option("--student-lr", e.lr, "Student learning rate");
  app->add_option("--student-momentum", e.momentum, "Student momentum");
  app->add_option("--student-weight-decay", e.weight_decay, "Student weight decay");
  app->add_option("--student-batch", e.batch, "Student batch size");
}

Arch arch_or_usage(const std::string& name) {
  try {
    return parse_arch(name);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

// ---- shared pipeline ----------------------------------------------------------

struct CellOutcome {
  DistilledDataset ds;  // as read back from the packed bytes
  std::vector<std::uint8_t> bytes;
  BitCounts bits;
  std::vector<double> accuracies, f1s;
  double seconds = 0.0;
};

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Evaluated {
  std::vector<double> accuracies, f1s;
};

Evaluated evaluate_student_runs(const DistilledDataset& ds, const LabeledDataset& test, const StudentConfig& student,
                                const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  const auto summary = eval_over_seeds(materialized_dataset(ds), test, student, seeds, threads);
  Evaluated e;
  for (const auto& r : summary.runs) {
    e.accuracies.push_back(r.accuracy);
    e.f1s.push_back(r.macro_f1);
  }
  return e;
}

CellOutcome run_cell(const Task& task, const DistillConfig& cfg, const QuantizerSpec& target, const EvalOpts& eval,
                     std::size_t threads) {
  const auto t0 = std::chrono::steady_clock::now();
  DistillResult res = quadd_run(task.train, cfg);
  DistilledDataset ds = cfg.spec.kind == QuantizerKind::none && target.kind != QuantizerKind::none
                            ? post_quantize(res.ds, target.with_alpha(0.0))
                            : res.ds;
  CellOutcome out;
  out.bytes = pack(ds);
  out.ds = unpack(out.bytes);
  out.bits = measure_bits(out.ds, true);
  const auto e =
      evaluate_student_runs(out.ds, task.test, eval.student(arch_or_usage(eval.arch)), eval.seeds(cfg.seed), threads);
  out.accuracies = e.accuracies;
  out.f1s = e.f1s;
  out.seconds = elapsed(t0);
  return out;
}

std::vector<std::string> metric_cells(const std::vector<double>& acc, const std::vector<double>& f1) {
  const auto [am, as] = mean_std(acc);
  const auto [fm, fs] = mean_std(f1);
  (void)fs;
  return {fmt(am), fmt(as), fmt(fm)};
}

class CsvSink {
 public:
  CsvSink(std::ostream& out, const std::string& path) : out_(&out) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw std::runtime_error("cannot write " + path);
      out_ = &file_;
    }
  }
  void row(const std::vector<std::string>& cells) { *out_ << join(cells) << '\n'; }
  void flush() { out_->flush(); }

 private:
  std::ostream* out_;
  std::ofstream file_;
};

bool has_magic(const std::vector<std::uint8_t>& bytes, const char* magic) {
  return bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, magic);
}

// ---- commands -----------------------------------------------------------------

struct DistillCmd {
  TaskOpts task;
  QuantOpts quant;
  DistillOpts distill;
  EvalOpts eval;
  std::string out, csv;
  std::size_t threads = 0;

  int run(std::ostream& out_stream) const {
    task.check();
    const QuantizerSpec target = quant.spec(quant.bits);
    const DistillConfig cfg = distill.config(target);
    const Task t = make_task(task.config());
    const CellOutcome cell = run_cell(t, cfg, target, eval, threads ? threads : default_threads());
    if (!out.empty()) write_file(out, cell.bytes);
    CsvSink sink(out_stream, csv);
    sink.row(kDistillColumns);
    std::vector<std::string> row = {task.name,
                                    distill.surrogate,
                                    std::to_string(cell.ds.size()),
                                    std::to_string(target.bits),
                                    std::to_string(cell.bits.payload),
                                    std::to_string(cell.bits.total)};
    for (auto& c : metric_cells(cell.accuracies, cell.f1s)) row.push_back(c);
    row.push_back(fmt(cell.seconds, 3));
    sink.row(row);
    sink.flush();
    return kExitOk;
  }
};

struct SweepCell {
  std::optional<std::uint64_t> budget;
  std::size_t m_per_class = 0;
  int bits = 0;
};

struct SweepCmd {
  TaskOpts task;
  QuantOpts quant;
  DistillOpts distill;
  EvalOpts eval;
  std::string grid_path, csv;
  std::vector<int> bits_list;
  std::vector<std::uint64_t> budgets;
  std::vector<std::uint64_t> seeds{0};
  std::size_t m_per_class = 0;
  std::size_t threads = 0;

  std::vector<SweepCell> file_cells;

  void load_grid_file() {
    if (grid_path.empty()) return;
    std::ifstream in(grid_path);
    if (!in) throw UsageError("cannot read grid file " + grid_path);
    try {
      nlohmann::json g;
      in >> g;
      if (g.contains("task")) task.name = g["task"].get<std::string>();
      if (g.contains("surrogate")) distill.surrogate = g["surrogate"].get<std::string>();
      if (g.contains("quantizer")) quant.kind = g["quantizer"].get<std::string>();
      if (g.contains("k")) quant.k = g["k"].get<int>();
      if (g.contains("iters")) distill.iters = g["iters"].get<std::size_t>();
      if (g.contains("seeds")) seeds = g["seeds"].get<std::vector<std::uint64_t>>();
      if (g.contains("budgets")) {
        for (const auto& b : g["budgets"]) {
          const auto budget = b.at("budget").get<std::uint64_t>();
          for (const auto& p : b.at("pairs")) {
            file_cells.push_back({budget, p.at(0).get<std::size_t>(), p.at(1).get<int>()});
          }
        }
      }
      if (g.contains("cells")) {
        for (const auto& p : g["cells"]) {
          file_cells.push_back({std::nullopt, p.at(0).get<std::size_t>(), p.at(1).get<int>()});
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("grid file: ") + e.what());
    }
  }

  std::vector<SweepCell> cells(std::size_t classes, std::size_t dim) const {
    std::vector<SweepCell> out;
    if (!grid_path.empty()) {
      out = file_cells;
    } else {
      if (bits_list.empty()) throw UsageError("sweep: give --grid or --bits-list");
      if (!budgets.empty()) {
        for (auto budget : budgets) {
          for (int b : bits_list) {
            const std::uint64_t m = budget / (classes * dim * static_cast<std::uint64_t>(b));
            if (m > 0) out.push_back({budget, static_cast<std::size_t>(m), b});
          }
        }
      } else {
        if (m_per_class == 0) throw UsageError("sweep: --bits-list needs --m-per-class or --budgets");
        for (int b : bits_list) out.push_back({std::nullopt, m_per_class, b});
      }
    }
    if (out.empty()) throw UsageError("sweep: the grid has no cells");
    for (const auto& c : out) {
      if (c.m_per_class == 0 || c.bits < 1) throw UsageError("sweep: every cell needs M >= 1 and b >= 1");
      if (c.budget && c.m_per_class * classes * dim * static_cast<std::uint64_t>(c.bits) > *c.budget) {
        throw UsageError("sweep: cell M=" + std::to_string(c.m_per_class * classes) + ", b=" +
                         std::to_string(c.bits) + " exceeds budget " + std::to_string(*c.budget));
      }
    }
    if (seeds.empty()) throw UsageError("sweep: no seeds");
    return out;
  }

  int run(std::ostream& out_stream) {
    load_grid_file();
    task.check();
    const Task t = make_task(task.config());
    const auto grid = cells(t.train.classes, t.train.dim);
    const std::size_t workers = threads ? threads : default_threads();

    struct Job {
      std::size_t cell;
      std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < grid.size(); ++c)
      for (auto s : seeds) jobs.push_back({c, s});
    struct JobResult {
      bool ok = false;
      std::string error;
      CellOutcome outcome;
    };
    std::vector<JobResult> results(jobs.size());
    // Validate every configuration up front so usage errors are not
    // reported as per-cell failures.
    std::vector<DistillConfig> configs;
    std::vector<QuantizerSpec> targets;
    for (const auto& c : grid) {
      DistillOpts d = distill;
      d.m_per_class = c.m_per_class;
      targets.push_back(quant.spec(c.bits));
      configs.push_back(d.config(targets.back()));
    }
    parallel_for(jobs.size(), workers, [&](std::size_t j) {
      DistillConfig cfg = configs[jobs[j].cell];
      cfg.seed = jobs[j].seed;
      try {
        results[j].outcome = run_cell(t, cfg, targets[jobs[j].cell], eval, 1);
        results[j].ok = true;
      } catch (const std::exception& e) {
        results[j].error = e.what();
      }
    });

    CsvSink sink(out_stream, csv);
    sink.row(kSweepColumns);
    struct Summary {
      std::vector<std::string> row;
      double accuracy;
      bool ok;
    };
    std::vector<Summary> summaries;
    for (std::size_t c = 0; c < grid.size(); ++c) {
      std::vector<double> acc, f1;
      double seconds = 0.0;
      std::string status = "ok";
      BitCounts bits;
      std::size_t m_total = 0;
      for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (jobs[j].cell != c) continue;
        if (!results[j].ok) {
          status = "failed: seed " + std::to_string(jobs[j].seed) + ": " + results[j].error;
          continue;
        }
        const auto& o = results[j].outcome;
        acc.insert(acc.end(), o.accuracies.begin(), o.accuracies.end());
        f1.insert(f1.end(), o.f1s.begin(), o.f1s.end());
        seconds += o.seconds;
        bits = o.bits;
        m_total = o.ds.size();
      }
      const bool ok = status == "ok";
      std::vector<std::string> row = {"cell",
                                      grid[c].budget ? std::to_string(*grid[c].budget) : "",
                                      task.name,
                                      distill.surrogate,
                                      ok ? std::to_string(m_total) : std::to_string(grid[c].m_per_class * t.train.classes),
                                      std::to_string(grid[c].bits),
                                      ok ? std::to_string(bits.payload) : "",
                                      ok ? std::to_string(bits.total) : ""};
      if (ok) {
        for (auto& v : metric_cells(acc, f1)) row.push_back(v);
      } else {
        row.insert(row.end(), {"", "", ""});
      }
      row.push_back(fmt(seconds, 3));
      row.push_back(quote(status));
      sink.row(row);
      summaries.push_back({row, ok ? mean_std(acc).first : 0.0, ok});
    }
    std::vector<std::uint64_t> seen;
    for (std::size_t c = 0; c < grid.size(); ++c) {
      if (!grid[c].budget || std::find(seen.begin(), seen.end(), *grid[c].budget) != seen.end()) continue;
      seen.push_back(*grid[c].budget);
      std::optional<std::size_t> best;
      for (std::size_t o = 0; o < grid.size(); ++o) {
        if (grid[o].budget != grid[c].budget || !summaries[o].ok) continue;
        if (!best || summaries[o].accuracy > summaries[*best].accuracy) best = o;
      }
      if (!best) continue;
      auto row = summaries[*best].row;
      row[0] = "best";
      sink.row(row);
    }
    sink.flush();
    return kExitOk;
  }
};

struct EvalCmd {
  TaskOpts task;
  EvalOpts eval;
  std::string in, csv, archs = "mlp-2";
  std::uint64_t seed = 0;
  std::size_t threads = 0;

  int run(std::ostream& out_stream) const {
    task.check();
    std::vector<Arch> arch_list;
    std::stringstream ss(archs);
    for (std::string a; std::getline(ss, a, ',');) arch_list.push_back(arch_or_usage(a));
    if (arch_list.empty()) throw UsageError("--archs is empty");
    const auto t0 = std::chrono::steady_clock::now();
    const DistilledDataset ds = load_qadd(in);
    const Task t = make_task(task.config());
    if (ds.dim != t.test.dim || ds.classes != t.test.classes) {
      throw std::runtime_error("eval: dataset shape (D=" + std::to_string(ds.dim) + ", classes=" +
                               std::to_string(ds.classes) + ") does not match task " + task.name);
    }
    const BitCounts bits = measure_bits(ds, true);
    CsvSink sink(out_stream, csv);
    sink.row(kEvalColumns);
    for (Arch a : arch_list) {
      const auto e = evaluate_student_runs(ds, t.test, eval.student(a), eval.seeds(seed),
                                           threads ? threads : default_threads());
      std::vector<std::string> row = {task.name,
                                      arch_name(a),
                                      std::to_string(ds.size()),
                                      std::to_string(ds.spec.kind == QuantizerKind::none ? 64 : ds.spec.bits),
                                      std::to_string(bits.payload),
                                      std::to_string(bits.total)};
      for (auto& c : metric_cells(e.accuracies, e.f1s)) row.push_back(c);
      row.push_back(fmt(elapsed(t0), 3));
      sink.row(row);
    }
    sink.flush();
    return kExitOk;
  }
};

struct InitCmd {
  TaskOpts task;
  std::string in, out, csv;
  std::size_t m_per_class = 10, hidden = 32;
  int bits = 3;
  bool with_replacement = false, normalize = false;
  std::uint64_t seed = 0;

  int run(std::ostream& out_stream) const {
    if (in.empty() == task.name.empty()) throw UsageError("init: give exactly one of --in or --task");
    LabeledDataset data;
    if (!in.empty()) {
      data = load_dataset(in);
    } else {
      task.check();
      data = make_task(task.config()).train;
    }
    QinitConfig q;
    q.m_per_class = m_per_class;
    q.prequant_bits = bits;
    q.normalize = normalize;
    q.hidden = hidden;
    q.with_replacement = with_replacement;
    q.seed = derive_seed(seed, 1);
    const QinitResult r = quantization_guided_init(data, q);
    CsvSink sink(out_stream, csv);
    sink.row({"class", "order", "index", "gain"});
    std::map<int, std::size_t> order;
    for (std::size_t i = 0; i < r.indices.size(); ++i) {
      const int c = r.labels[i];
      sink.row({std::to_string(c), std::to_string(order[c]++), std::to_string(r.indices[i]),
                std::isnan(r.gains[i]) ? "" : fmt(r.gains[i], 9)});
    }
    sink.flush();
    if (!out.empty()) save_dataset(data.subset(r.indices), out);
    return kExitOk;
  }
};

struct PackCmd {
  QuantOpts quant;
  std::string in, out;
  double alpha = 0.0;

  int run(std::ostream& out_stream) const {
    const auto bytes = read_file(in);
    std::vector<std::uint8_t> packed;
    if (has_magic(bytes, "QADD")) {
      packed = pack(unpack(bytes));
    } else if (has_magic(bytes, "QDSF")) {
      const LabeledDataset raw = decode_dataset(bytes);
      DistilledDataset ds;
      ds.dim = raw.dim;
      ds.classes = raw.classes;
      ds.samples = raw.features;
      ds.labels = raw.labels;
      ds.spec.kind = QuantizerKind::none;
      QuantizerSpec spec = quant.spec(quant.bits);
      spec.alpha = alpha;
      if (alpha < 0.0) throw UsageError("--alpha must be >= 0");
      packed = pack(post_quantize(ds, spec));
    } else {
      throw std::runtime_error("pack: " + in + " is neither a .qadd nor a raw dataset file");
    }
    write_file(out, packed);
    out_stream << "wrote " << packed.size() << " bytes to " << out << '\n';
    return kExitOk;
  }
};

struct UnpackCmd {
  std::string in, out;
  int run(std::ostream& out_stream) const {
    const DistilledDataset ds = load_qadd(in);
    save_dataset(materialized_dataset(ds), out);
    out_stream << "wrote " << ds.size() << " rows to " << out << '\n';
    return kExitOk;
  }
};

struct GenCmd {
  TaskOpts task;
  std::string split = "train", out;
  int run(std::ostream& out_stream) const {
    task.check();
    const Task t = make_task(task.config());
    LabeledDataset data;
    if (split == "train") {
      data = t.train;
    } else if (split == "test") {
      data = t.test;
    } else {
      throw UsageError("--split must be train or test");
    }
    save_dataset(data, out);
    out_stream << "wrote " << data.size() << " rows to " << out << '\n';
    return kExitOk;
  }
};

struct InfoCmd {
  std::string in;
  int run(std::ostream& out_stream) const {
    const DistilledDataset ds = load_qadd(in);
    const BitCounts b = measure_bits(ds, true);
    out_stream << "M: " << ds.size() << "\nD: " << ds.dim << "\nclasses: " << ds.classes
               << "\nquantizer: " << quantizer_kind_name(ds.spec.kind) << "\nb: " << ds.spec.bits
               << "\nk: " << ds.spec.k << "\nalpha: " << std::setprecision(17) << ds.spec.alpha
               << "\ngamma: " << ds.spec.gamma() << "\nnormalized: " << (ds.spec.normalize ? "yes" : "no")
               << "\nlevel_count: " << b.level_count << "\nindex_width: " << b.width
               << "\npayload_bits: " << b.payload << "\nlabel_bits: " << b.labels << "\nheader_bits: " << b.header
               << "\ntotal_bits: " << b.total << "\nnominal_bits: " << b.nominal << '\n';
    return kExitOk;
  }
};

const char* pack_error_kind(const PackError& e) {
  if (dynamic_cast<const HeaderError*>(&e)) return "header error";
  if (dynamic_cast<const TruncatedError*>(&e)) return "truncation error";
  if (dynamic_cast<const IndexRangeError*>(&e)) return "index range error";
  if (dynamic_cast<const OffCodebookError*>(&e)) return "off-codebook error";
  return "format error";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"quadd: quantization-aware dataset distillation"};
  app.require_subcommand(1);

  DistillCmd distill;
  auto* c_distill = app.add_subcommand("distill", "Distill a task, pack it and evaluate a student");
  add_task_options(c_distill, distill.task, true);
  add_quant_options(c_distill, distill.quant);
  add_distill_options(c_distill, distill.distill, true);
  add_eval_options(c_distill, distill.eval);
  c_distill->add_option("--arch", distill.eval.arch, "Student: mlp-2 or mlp-3");
  c_distill->add_option("--out", distill.out, "Write the packed .qadd file here");
  c_distill->add_option("--csv", distill.csv, "Write the CSV report here instead of stdout");
  c_distill->add_option("--threads", distill.threads, "Worker threads (default: QUADD_THREADS or all cores)");

  SweepCmd sweep;
  auto* c_sweep = app.add_subcommand("sweep", "Run a rate-distortion grid");
  add_task_options(c_sweep, sweep.task, false);
  add_quant_options(c_sweep, sweep.quant, false);
  add_distill_options(c_sweep, sweep.distill, false);
  add_eval_options(c_sweep, sweep.eval);
  c_sweep->add_option("--arch", sweep.eval.arch, "Student: mlp-2 or mlp-3");
  c_sweep->add_option("--grid", sweep.grid_path, "JSON grid file");
  c_sweep->add_option("--bits-list", sweep.bits_list, "Bit widths")->delimiter(',');
  c_sweep->add_option("--budgets", sweep.budgets, "Bit budgets; M per class is derived per b")->delimiter(',');
  c_sweep->add_option("--m-per-class", sweep.m_per_class, "Fixed synthetic rows per class");
  c_sweep->add_option("--seeds", sweep.seeds, "Run seeds")->delimiter(',');
  c_sweep->add_option("--csv", sweep.csv, "Write the CSV here instead of stdout");
  c_sweep->add_option("--threads", sweep.threads, "Worker threads (default: QUADD_THREADS or all cores)");

  EvalCmd eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a .qadd file on a task's test split");
  add_task_options(c_eval, eval.task, true);
  add_eval_options(c_eval, eval.eval);
  c_eval->add_option("--in", eval.in, "Packed dataset")->required();
  c_eval->add_option("--archs", eval.archs, "Comma-separated student architectures");
  c_eval->add_option("--seed", eval.seed, "Seed the evaluation students derive from");
  c_eval->add_option("--csv", eval.csv, "Write the CSV here instead of stdout");
  c_eval->add_option("--threads", eval.threads, "Worker threads");

  InitCmd init;
  auto* c_init = app.add_subcommand("init", "Quantization-guided selection of initial rows");
  add_task_options(c_init, init.task, false);
  c_init->add_option("--in", init.in, "Raw dataset file instead of a task");
  c_init->add_option("--m-per-class", init.m_per_class, "Rows per class")->check(CLI::PositiveNumber);
  c_init->add_option("--bits", init.bits, "Pre-quantizer bits")->check(CLI::Range(1, 16));
  c_init->add_option("--hidden", init.hidden, "Width of the gradient model");
  c_init->add_flag("--with-replacement", init.with_replacement, "Fill small classes by duplication");
  c_init->add_flag("--normalize", init.normalize, "Standardize before pre-quantization");
  c_init->add_option("--seed", init.seed, "Seed");
  c_init->add_option("--out", init.out, "Write the selected rows as a raw dataset");
  c_init->add_option("--csv", init.csv, "Write the CSV here instead of stdout");

  PackCmd packc;
  auto* c_pack = app.add_subcommand("pack", "Quantize a raw dataset into .qadd, or re-pack a .qadd file");
  add_quant_options(c_pack, packc.quant);
  c_pack->add_option("--in", packc.in, "Raw dataset or .qadd file")->required();
  c_pack->add_option("--out", packc.out, "Output .qadd file")->required();
  c_pack->add_option("--alpha", packc.alpha, "Clipping threshold (0: percentile rule)");

  UnpackCmd unpackc;
  auto* c_unpack = app.add_subcommand("unpack", "Expand a .qadd file into a raw dataset");
  c_unpack->add_option("--in", unpackc.in, "Packed dataset")->required();
  c_unpack->add_option("--out", unpackc.out, "Raw dataset file")->required();

  GenCmd gen;
  auto* c_gen = app.add_subcommand("gen", "Write a task split as a raw dataset");
  add_task_options(c_gen, gen.task, true);
  c_gen->add_option("--split", gen.split, "train or test");
  c_gen->add_option("--out", gen.out, "Output file")->required();

  InfoCmd info;
  auto* c_info = app.add_subcommand("info", "Print the header and bit counts of a .qadd file");
  c_info->add_option("--in", info.in, "Packed dataset")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "quadd: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (c_distill->parsed()) return distill.run(out);
    if (c_sweep->parsed()) return sweep.run(out);
    if (c_eval->parsed()) return eval.run(out);
    if (c_init->parsed()) return init.run(out);
    if (c_pack->parsed()) return packc.run(out);
    if (c_unpack->parsed()) return unpackc.run(out);
    if (c_gen->parsed()) return gen.run(out);
    if (c_info->parsed()) return info.run(out);
  } catch (const UsageError& e) {
    err << "quadd: usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const PackError& e) {
    err << "quadd: " << pack_error_kind(e) << ": " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "quadd: error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace quadd
