#include <doctest.h>

#include <cmath>
#include <random>

#include "quadd/distill.hpp"
#include "quadd/eval.hpp"
#include "quadd/rng.hpp"
#include "support.hpp"

using namespace quadd;

namespace {

LabeledDataset tiny_real(std::size_t per_class = 20, std::uint64_t seed = 1) {
  return gen_gaussian_mixture(2, 2, per_class, 3.0, seed);
}

QuantizerSpec smooth_spec(QuantizerKind kind, int bits, double alpha) {
  QuantizerSpec s;
  s.kind = kind;
  s.bits = bits;
  s.alpha = alpha;
  s.k = 1;
  s.mode = ForwardMode::smooth;
  return s;
}

// Probe mapping 1 feature straight through: a single identity layer.
Mlp identity_probe() {
  auto rng = make_rng(0);
  Mlp p = Mlp::init({1, 1}, rng, false);
  p.weights()[0].mutable_data()[0] = 1.0;
  p.biases()[0].mutable_data()[0] = 0.0;
  return p;
}

DistillConfig small_dm_config(QuantizerKind kind, int bits) {
  DistillConfig cfg;
  cfg.spec.kind = kind;
  cfg.spec.bits = bits;
  cfg.spec.k = 1;
  cfg.m_per_class = 5;
  cfg.iterations = 20;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("distill") {
  TEST_CASE("dm_loss scalar cases") {
    LabeledDataset real;
    real.dim = 1;
    real.classes = 1;
    real.features = {1.0, 2.0, 4.0};
    real.labels = {0, 0, 0};
    const Mlp probe = identity_probe();
    const int synth_labels[2] = {0, 0};
    // Probe is linear without activation on its only layer.
    const double real_mean = 7.0 / 3.0;
    const Tensor synth = Tensor::from({2, 1}, {1.0, 2.0});
    CHECK(dm_loss(real, synth, synth_labels, probe).item() ==
          doctest::Approx((real_mean - 1.5) * (real_mean - 1.5)).epsilon(1e-12));
    const Tensor exact = Tensor::from({2, 1}, {real_mean, real_mean});
    CHECK(dm_loss(real, exact, synth_labels, probe).item() == doctest::Approx(0.0));

    const Tensor gap1 = Tensor::from({2, 1}, {real_mean + 0.5, real_mean + 0.5});
    const Tensor gap2 = Tensor::from({2, 1}, {real_mean + 1.0, real_mean + 1.0});
    CHECK(dm_loss(real, gap2, synth_labels, probe).item() ==
          doctest::Approx(4.0 * dm_loss(real, gap1, synth_labels, probe).item()).epsilon(1e-12));
  }

  TEST_CASE("dm_loss skips classes absent from either side and ignores order") {
    const auto real = gen_gaussian_mixture(3, 4, 10, 2.0, 5);
    auto rng = make_rng(2);
    const Mlp probe = Mlp::init({4, 8, 8}, rng, false);
    std::mt19937_64 r(1);
    const Tensor synth = quadd::testing::random_tensor({4, 4}, r);
    const int labels_a[4] = {0, 0, 1, 1};
    const Tensor reordered = Tensor::from({4, 4}, [&] {
      std::vector<double> v;
      for (std::size_t row : {1, 0, 3, 2})
        for (std::size_t c = 0; c < 4; ++c) v.push_back(synth[row * 4 + c]);
      return v;
    }());
    const double base = dm_loss(real, synth, labels_a, probe).item();
    CHECK(dm_loss(real, reordered, labels_a, probe).item() == doctest::Approx(base).epsilon(1e-13));
    CHECK(base > 0.0);

    LabeledDataset only_two = real.subset(real.indices_of(2));
    const Tensor none = dm_loss(only_two, synth, labels_a, probe);
    CHECK(none.item() == 0.0);
  }

  TEST_CASE("expert trajectories") {
    const auto real = gen_gaussian_mixture(2, 2, 40, 6.0, 2);
    TrainConfig tc{.epochs = 1, .batch_size = 16, .lr = 0.05, .momentum = 0.0, .weight_decay = 0.0};
    std::vector<double> losses;
    const auto a = record_expert_trajectories(real, {2, 8, 2}, 2, tc, 7, &losses);
    CHECK(a.snapshots.size() == 3);
    CHECK(a.epochs() == 2);
    for (const auto& s : a.snapshots) CHECK(s.size() == a.snapshots[0].size());
    const auto b = record_expert_trajectories(real, {2, 8, 2}, 2, tc, 7);
    CHECK(a.snapshots == b.snapshots);
    CHECK(a.snapshots[0] != a.snapshots[2]);

    std::vector<double> long_losses;
    record_expert_trajectories(real, {2, 8, 2}, 8, tc, 7, &long_losses);
    REQUIRE(long_losses.size() == 9);
    for (std::size_t e = 1; e < long_losses.size(); ++e) CHECK(long_losses[e] <= long_losses[e - 1] + 1e-12);
  }

  TEST_CASE("tm_loss degenerate and exact segments") {
    const auto real = gen_gaussian_mixture(2, 2, 10, 3.0, 4);
    TrainConfig tc{.epochs = 1, .batch_size = 20, .lr = 0.1, .momentum = 0.0, .weight_decay = 0.0};
    auto traj = record_expert_trajectories(real, {2, 4, 2}, 2, tc, 1);
    const Tensor synth = Tensor::from({real.size(), 2}, real.features);

    TmSegment seg;
    seg.expert_steps = 1;
    seg.student_steps = 0;
    ExpertTrajectory flat = traj;
    flat.snapshots[1] = flat.snapshots[0];
    CHECK(tm_loss(flat, seg, synth, real.labels).item() == 0.0);

    // One full-batch expert step on the real data reproduced by one student
    // step on the same data.
    seg.student_steps = 1;
    seg.lr_student = 0.1;
    CHECK(tm_loss(traj, seg, synth, real.labels).item() < 1e-20);
    seg.student_steps = 0;
    CHECK(tm_loss(traj, seg, synth, real.labels).item() == doctest::Approx(1.0).epsilon(1e-12));

    seg.start_epoch = 2;
    CHECK_THROWS_AS(tm_loss(traj, seg, synth, real.labels), std::out_of_range);
  }

  TEST_CASE("loss gradients through the smooth quantizer match finite differences") {
    const auto real = tiny_real();
    auto rng = make_rng(6);
    const Mlp probe = Mlp::init({2, 6, 6}, rng, false);
    const int labels[4] = {0, 0, 1, 1};
    std::mt19937_64 r(2);
    TrainConfig tc{.epochs = 1, .batch_size = 8, .lr = 0.05, .momentum = 0.0, .weight_decay = 0.0};
    const auto traj = record_expert_trajectories(real, {2, 5, 2}, 3, tc, 3);
    TmSegment seg;
    seg.start_epoch = 1;
    seg.expert_steps = 2;
    seg.student_steps = 3;
    seg.lr_student = 0.2;

    for (const auto& spec : {smooth_spec(QuantizerKind::apot, 3, 2.5), smooth_spec(QuantizerKind::uniform_ste, 3, 2.5),
                             smooth_spec(QuantizerKind::uniform_fsq, 3, 1.5)}) {
      const Tensor s0 = quadd::testing::random_tensor({4, 2}, r, -1.0, 1.0);
      auto dm = [&](auto& v) {
        return dm_loss(real, quantize(v[0], Tensor::scalar(spec.alpha), spec, QuantizeContext{}), labels, probe);
      };
      auto tm = [&](auto& v) {
        return tm_loss(traj, seg, quantize(v[0], Tensor::scalar(spec.alpha), spec, QuantizeContext{}), labels);
      };
      CHECK(quadd::testing::fd_max_rel_error(dm, {s0}, 1e-5, 1e-8) < 1e-3);
      CHECK(quadd::testing::fd_max_rel_error(tm, {s0}, 1e-5, 1e-8) < 1e-3);
    }
  }

  TEST_CASE("zero iterations returns the initialization") {
    const auto real = gen_gaussian_mixture(3, 4, 30, 2.0, 1);
    auto cfg = small_dm_config(QuantizerKind::apot, 3);
    cfg.iterations = 0;
    const auto res = quadd_run(real, cfg);
    CHECK(res.loss_trace.empty());
    REQUIRE(res.init_indices.size() == 15);
    for (std::size_t i = 0; i < res.init_indices.size(); ++i) {
      const auto row = real.row(res.init_indices[i]);
      for (std::size_t c = 0; c < 4; ++c) CHECK(res.ds.samples[i * 4 + c] == row[c]);
      CHECK(res.ds.labels[i] == real.labels[res.init_indices[i]]);
    }
    for (int c = 0; c < 3; ++c) CHECK(std::count(res.ds.labels.begin(), res.ds.labels.end(), c) == 5);
  }

  TEST_CASE("runs are deterministic and alpha stays finite and positive") {
    const auto real = gen_gaussian_mixture(3, 16, 200, 1.5, 0);
    auto cfg = small_dm_config(QuantizerKind::apot, 3);
    cfg.m_per_class = 10;
    cfg.iterations = 500;
    const auto a = quadd_run(real, cfg);
    REQUIRE(a.alpha_trace.size() == 500);
    for (double v : a.alpha_trace) {
      CHECK(std::isfinite(v));
      CHECK(v > 0.0);
    }
    for (double v : a.loss_trace) CHECK(std::isfinite(v));
    cfg.iterations = 50;
    const auto b = quadd_run(real, cfg);
    const auto c = quadd_run(real, cfg);
    CHECK(b.ds.samples == c.ds.samples);
    CHECK(b.loss_trace == c.loss_trace);
    const auto m = materialize(b.ds);
    const auto cb = b.ds.spec.codebook();
    for (double v : m) CHECK(std::abs(project_nearest(v, cb) - v) == 0.0);
  }

  TEST_CASE("other kinds and the tm surrogate run") {
    const auto real = gen_gaussian_mixture(2, 4, 40, 2.0, 3);
    for (auto kind : {QuantizerKind::uniform_ste, QuantizerKind::uniform_aun, QuantizerKind::uniform_fsq,
                      QuantizerKind::none}) {
      auto cfg = small_dm_config(kind, 4);
      cfg.spec.normalize = true;
      const auto res = quadd_run(real, cfg);
      CHECK(res.loss_trace.size() == 20);
      CHECK(res.ds.norm.mean.size() == 4);
    }
    auto cfg = small_dm_config(QuantizerKind::apot, 3);
    cfg.surrogate = Surrogate::tm;
    cfg.iterations = 10;
    const auto res = quadd_run(real, cfg);
    for (double v : res.loss_trace) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
  }

  TEST_CASE("pass-through quantizer reduces to the plain loop") {
    const auto real = gen_gaussian_mixture(3, 8, 50, 1.5, 2);
    auto cfg = small_dm_config(QuantizerKind::none, 32);
    cfg.iterations = 30;
    CHECK(quadd_run(real, cfg).loss_trace == vanilla_dm_trace(real, cfg));
    cfg.init = InitMode::random;
    CHECK(quadd_run(real, cfg).loss_trace == vanilla_dm_trace(real, cfg));
  }

  TEST_CASE("post_quantize") {
    const auto real = gen_gaussian_mixture(3, 4, 30, 2.0, 1);
    auto cfg = small_dm_config(QuantizerKind::none, 32);
    const auto fp = quadd_run(real, cfg).ds;
    QuantizerSpec none;
    none.kind = QuantizerKind::none;
    CHECK(materialize(post_quantize(fp, none)) == fp.samples);

    QuantizerSpec s;
    s.kind = QuantizerKind::apot;
    s.bits = 2;
    s.k = 2;
    s.alpha = 0.0;
    const auto q = post_quantize(fp, s);
    CHECK(q.discrete);
    CHECK(q.spec.alpha > 0.0);
    const auto cb = q.spec.codebook();
    for (double v : q.samples) CHECK(project_nearest(v, cb) == v);
  }

  TEST_CASE("post-quantization at 2 bits costs accuracy") {
    const Task t = make_task(TaskConfig{});
    auto cfg = small_dm_config(QuantizerKind::none, 32);
    cfg.m_per_class = 10;
    cfg.iterations = 200;
    const auto fp = quadd_run(t.train, cfg).ds;
    QuantizerSpec s;
    s.kind = QuantizerKind::uniform_ste;
    s.bits = 2;
    s.alpha = 0.0;
    const auto q = post_quantize(fp, s);
    StudentConfig sc;
    sc.train.epochs = 100;
    double acc_fp = 0, acc_q = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      acc_fp += evaluate(train_student(fp, sc, seed), t.test).accuracy;
      acc_q += evaluate(train_student(q, sc, seed), t.test).accuracy;
    }
    MESSAGE("full precision " << acc_fp / 3 << ", 2-bit post " << acc_q / 3);
    CHECK(acc_q < acc_fp);
  }

  TEST_CASE("config validation") {
    DistillConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.lr_synth = 0.0;
    CHECK_THROWS(cfg.validate());
    cfg = DistillConfig{};
    cfg.m_per_class = 0;
    CHECK_THROWS(cfg.validate());
    CHECK(parse_surrogate("tm") == Surrogate::tm);
    CHECK_THROWS(parse_surrogate("dc"));
  }
}
