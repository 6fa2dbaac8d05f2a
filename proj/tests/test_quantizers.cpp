#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "quadd/quantizers.hpp"
#include "support.hpp"

using namespace quadd;

namespace {

// Exhaustive scan; on an exact tie the later (larger) level wins.
double scan_nearest(double x, const std::vector<double>& levels) {
  double best = levels[0];
  for (double l : levels)
    if (std::abs(x - l) <= std::abs(x - best)) best = l;
  return best;
}

QuantizerSpec make_spec(QuantizerKind kind, int bits, double alpha, int k = 1) {
  QuantizerSpec s;
  s.kind = kind;
  s.bits = bits;
  s.alpha = alpha;
  s.k = k;
  s.mode = ForwardMode::hard;
  return s;
}

void check_levels(const Codebook& cb, const std::vector<double>& expected) {
  REQUIRE(cb.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(cb.levels()[i] == doctest::Approx(expected[i]).epsilon(1e-15));
}

}  // namespace

TEST_SUITE("quantizers") {
  TEST_CASE("uniform codebooks") {
    check_levels(build_uniform_codebook(1.0, 1), {0.0});
    check_levels(build_uniform_codebook(1.0, 2), {-2.0 / 3, 0.0, 2.0 / 3});
    check_levels(build_uniform_codebook(1.0, 3), {-6.0 / 7, -4.0 / 7, -2.0 / 7, 0.0, 2.0 / 7, 4.0 / 7, 6.0 / 7});
    CHECK_THROWS_AS(build_uniform_codebook(1.0, 0), QuantizerError);
    for (int b = 2; b <= 8; ++b) {
      const auto cb = build_uniform_codebook(1.3, b);
      CHECK(cb.size() == (std::size_t{1} << b) - 1);
      CHECK(cb.max_gap() - cb.min_gap() < 1e-12);
    }
  }

  TEST_CASE("APoT codebooks") {
    check_levels(build_apot_codebook(1.0, 2, 2), {-1, -0.5, -0.25, 0, 0.25, 0.5, 1});

    // Brute force over every (p0, p1) pair for b = 4, k = 2.
    const double p0[] = {0, 1, 0.25, 0.0625};
    const double p1[] = {0, 0.5, 0.125, 0.03125};
    std::set<double> mags;
    for (double a : p0)
      for (double b : p1) mags.insert(a + b);
    std::vector<double> expected;
    for (auto it = mags.rbegin(); it != mags.rend(); ++it)
      if (*it > 0) expected.push_back(-*it);
    for (double m : mags) expected.push_back(m);
    const auto cb = build_apot_codebook(1.5, 4, 2);
    CHECK(*mags.rbegin() == 1.5);
    check_levels(cb, expected);
    CHECK(cb.size() == 31);
    CHECK(cb.max_level() == 1.5);

    CHECK_THROWS_AS(build_apot_codebook(1.0, 3, 2), QuantizerError);
  }

  TEST_CASE("APoT density is higher near zero for k = 2") {
    const auto cb = build_apot_codebook(1.0, 4, 2);
    const auto& l = cb.levels();
    const std::size_t zero = l.size() / 2;
    const double near_zero = l[zero + 1] - l[zero];
    const double near_alpha = l.back() - l[l.size() - 2];
    CHECK(near_zero < near_alpha);
    CHECK(cb.max_gap() - cb.min_gap() > 1e-3);
  }

  TEST_CASE("APoT with k = 1 degenerates to uniform spacing") {
    // With one power per term the magnitudes are all multiples of 2^-(n-1).
    for (int b = 1; b <= 6; ++b) {
      const auto cb = build_apot_codebook(1.0, b, 1);
      CHECK(cb.max_gap() - cb.min_gap() < 1e-12);
      CHECK(cb.size() == (std::size_t{1} << (b + 1)) - 1);
    }
  }

  TEST_CASE("codebooks are symmetric and bounded by alpha") {
    std::vector<QuantizerSpec> specs;
    for (int b = 1; b <= 8; ++b) {
      specs.push_back(make_spec(QuantizerKind::uniform_ste, b, 0.7));
      specs.push_back(make_spec(QuantizerKind::uniform_fsq, b, 0.7));
      specs.push_back(make_spec(QuantizerKind::apot, b, 0.7, 1));
      if (b % 2 == 0) specs.push_back(make_spec(QuantizerKind::apot, b, 0.7, 2));
    }
    for (const auto& s : specs) {
      const auto cb = s.codebook();
      const auto& l = cb.levels();
      for (std::size_t i = 0; i < l.size(); ++i) {
        CHECK(l[i] == -l[l.size() - 1 - i]);
        CHECK(std::abs(l[i]) <= 0.7);
      }
    }
  }

  TEST_CASE("projection") {
    const auto cb = build_uniform_codebook(1.0, 2);
    CHECK(project_nearest(2.0 / 3, cb) == 2.0 / 3);
    CHECK(project_nearest(0.3, cb) == 0.0);
    CHECK(project_nearest(1.0 / 3, cb) == 2.0 / 3);
    CHECK(project_nearest(-1.0 / 3, cb) == 0.0);

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-2, 2);
    const auto apot = build_apot_codebook(1.0, 4, 2);
    for (int i = 0; i < 2000; ++i) {
      const double x = u(rng);
      CHECK(project_nearest(x, apot) == scan_nearest(x, apot.levels()));
    }
    // With gamma = 1 every level is dyadic, so midpoints are exact ties.
    const auto dyadic = build_apot_codebook(1.5, 4, 2);
    const auto& l = dyadic.levels();
    for (std::size_t i = 1; i < l.size(); ++i) CHECK(project_nearest((l[i] + l[i - 1]) / 2, dyadic) == l[i]);
  }

  TEST_CASE("round half away from zero") {
    CHECK(round_half_away(0.5) == 1.0);
    CHECK(round_half_away(-0.5) == -1.0);
    CHECK(round_half_away(2.5) == 3.0);
    CHECK(round_half_away(0.49) == 0.0);
  }

  TEST_CASE("quantize_forward examples") {
    const auto ste3 = make_spec(QuantizerKind::uniform_ste, 3, 1.0);
    CHECK(quantize_forward(Tensor::from({1}, {0.2}), ste3, false, 0)[0] == doctest::Approx(2.0 / 7));
    CHECK(quantize_forward(Tensor::from({1}, {5.0}), ste3, false, 0)[0] == doctest::Approx(6.0 / 7));

    const auto fsq2 = make_spec(QuantizerKind::uniform_fsq, 2, 1.0);
    CHECK(quantize_forward(Tensor::from({1}, {1e6}), fsq2, false, 0)[0] == 1.0);
    CHECK(quantize_forward(Tensor::from({1}, {std::numeric_limits<double>::infinity()}), fsq2, false, 0)[0] == 1.0);
    const auto fsq1 = make_spec(QuantizerKind::uniform_fsq, 1, 1.0);
    const auto q = quantize_forward(Tensor::from({2}, {0.1, -0.1}), fsq1, false, 0);
    CHECK(q[0] == 1.0);
    CHECK(q[1] == -1.0);
  }

  TEST_CASE("hard outputs lie on the codebook, are odd and idempotent") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-3, 3);
    std::vector<double> xs(500);
    for (auto& x : xs) x = u(rng);
    const Tensor x = Tensor::from({xs.size()}, xs);
    std::vector<double> neg(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) neg[i] = -xs[i];
    const Tensor xn = Tensor::from({xs.size()}, neg);
    for (auto kind : {QuantizerKind::uniform_ste, QuantizerKind::uniform_aun, QuantizerKind::apot,
                      QuantizerKind::uniform_fsq}) {
      for (int b = 1; b <= 6; ++b) {
        const auto spec = make_spec(kind, b, 1.2, 1);
        const auto cb = spec.codebook();
        const auto q = quantize_forward(x, spec, false, 0);
        const auto qn = quantize_forward(xn, spec, false, 0);
        const std::set<double> levels(cb.levels().begin(), cb.levels().end());
        for (std::size_t i = 0; i < xs.size(); ++i) {
          CHECK(levels.count(q[i]) == 1);
          CHECK(qn[i] == -q[i]);
        }
        if (kind != QuantizerKind::uniform_fsq) {
          const auto qq = quantize_forward(q, spec, false, 0);
          for (std::size_t i = 0; i < xs.size(); ++i) CHECK(qq[i] == q[i]);
        }
      }
    }
  }

  TEST_CASE("FSQ re-quantization is only idempotent for small b") {
    // tanh shrinks the top level below the last rounding midpoint once the
    // grid is fine enough, so a second pass moves it one level down.
    for (int b = 1; b <= 2; ++b) {
      const auto spec = make_spec(QuantizerKind::uniform_fsq, b, 1.0);
      const Tensor all = Tensor::from({spec.codebook().size()}, spec.codebook().levels());
      const auto q = quantize_forward(all, spec, false, 0);
      for (std::size_t i = 0; i < all.size(); ++i) CHECK(q[i] == all[i]);
    }
    const auto spec3 = make_spec(QuantizerKind::uniform_fsq, 3, 1.0);
    CHECK(quantize_forward(Tensor::from({1}, {1.0}), spec3, false, 0)[0] == doctest::Approx(5.0 / 7));
  }

  TEST_CASE("training-mode noise") {
    std::mt19937_64 rng(8);
    auto aun = make_spec(QuantizerKind::uniform_aun, 3, 1.0);
    aun.mode = ForwardMode::scheduled;
    const double delta = 2.0 / 7;
    std::vector<double> xs(400);
    std::uniform_real_distribution<double> u(-2, 2);
    for (auto& x : xs) x = u(rng);
    const Tensor x = Tensor::from({xs.size()}, xs);
    const auto q = quantize_forward(x, aun, true, 0, &rng);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double c = std::clamp(xs[i], -1.0, 1.0);
      CHECK(std::abs(q[i] - c) <= delta / 2 + 1e-15);
    }
    // Evaluation mode is the hard quantizer.
    const auto e = quantize_forward(x, aun, false, 0, &rng);
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(e[i] == project_nearest(std::clamp(xs[i], -1.0, 1.0), aun.codebook()));

    auto fsq = make_spec(QuantizerKind::uniform_fsq, 2, 1.0);
    fsq.mode = ForwardMode::scheduled;
    const auto even = quantize_forward(x, fsq, true, 0, &rng);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double offset = even[i] - std::tanh(xs[i]);
      CHECK(std::abs(std::abs(offset) - 1.0 / 3) < 1e-12);
    }
    const auto odd = quantize_forward(x, fsq, true, 1, &rng);
    const auto hard = quantize_forward(x, fsq, false, 1);
    for (std::size_t i = 0; i < xs.size(); ++i) CHECK(odd[i] == hard[i]);
    CHECK_THROWS_AS(quantize_forward(x, aun, true, 0, nullptr), QuantizerError);
  }

  TEST_CASE("input gradients") {
    const auto ste = make_spec(QuantizerKind::uniform_ste, 3, 1.0);
    const auto g = quantize_backward_input(Tensor::from({2}, {1, 1}), Tensor::from({2}, {0.5, 2.0}), ste);
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 0.0);
    const auto fsq = make_spec(QuantizerKind::uniform_fsq, 3, 1.0);
    CHECK(quantize_backward_input(Tensor::from({1}, {1}), Tensor::from({1}, {0.0}), fsq)[0] == 1.0);
    for (double x = -3; x <= 3; x += 0.01) {
      const double eps = 1e-5;
      const double fd = (std::tanh(x + eps) - std::tanh(x - eps)) / (2 * eps);
      const double an = quantize_backward_input(Tensor::from({1}, {1}), Tensor::from({1}, {x}), fsq)[0];
      CHECK(quadd::testing::rel_err(an, fd) < 1e-4);
    }
  }

  TEST_CASE("quantize layer gradients flow through the tape") {
    Tape::current().reset();
    Tensor x = Tensor::from({3}, {0.2, 1.7, -0.4}, true);
    Tensor alpha = Tensor::scalar(1.0, true);
    auto spec = make_spec(QuantizerKind::apot, 2, 1.0, 2);
    QuantizeContext ctx;
    backward(sum(quantize(x, alpha, spec, ctx)));
    CHECK(x.grad() == std::vector<double>{1, 0, 1});
    const auto unit = spec.unit_codebook();
    const double expected = alpha_derivative(0.2, 1.0, unit) + 1.0 + alpha_derivative(-0.4, 1.0, unit);
    CHECK(alpha.grad()[0] == doctest::Approx(expected).epsilon(1e-14));
  }

  TEST_CASE("alpha gradient") {
    const auto apot = make_spec(QuantizerKind::apot, 2, 1.0, 2);
    CHECK(quantize_backward_alpha(Tensor::from({1}, {1}), Tensor::from({1}, {2.0}), apot) == 1.0);
    CHECK(quantize_backward_alpha(Tensor::from({1}, {2}), Tensor::from({1}, {-3.0}), apot) == -2.0);
    auto scaled = apot.with_alpha(1.6);
    const auto scaled_cb = scaled.codebook();
    for (double level : scaled_cb.levels()) {
      CHECK(quantize_backward_alpha(Tensor::from({1}, {1}), Tensor::from({1}, {level}), scaled) ==
            doctest::Approx(0.0).epsilon(1e-15));
    }
    CHECK_THROWS_AS(quantize_backward_alpha(Tensor::from({1}, {1}), Tensor::from({1}, {0.0}),
                                            make_spec(QuantizerKind::uniform_ste, 3, 1.0)),
                    QuantizerError);
  }

  TEST_CASE("alpha gradient is bounded") {
    for (int b : {2, 4, 6}) {
      const auto spec = make_spec(QuantizerKind::apot, b, 1.3, 2);
      const auto unit = spec.unit_codebook();
      const double bound = 1.0 + spec.codebook().max_gap();
      for (double x = -3; x <= 3; x += 1e-3) CHECK(std::abs(alpha_derivative(x, spec.alpha, unit)) <= bound);
    }
  }

  TEST_CASE("percentile initialization") {
    std::vector<double> pm;
    for (int i = 0; i < 50; ++i) {
      pm.push_back(-1);
      pm.push_back(1);
    }
    CHECK(init_alpha_percentile(Tensor::from({pm.size()}, pm)) == 2.0);
    CHECK(percentile_range(std::vector<double>(10, 4.0)) == 0.0);
    CHECK(init_alpha_percentile(Tensor::full({10}, 4.0)) == kAlphaFloor);
    std::vector<double> ramp;
    for (int i = 0; i <= 100; ++i) ramp.push_back(i);
    CHECK(init_alpha_percentile(Tensor::from({ramp.size()}, ramp)) == doctest::Approx(98.0).epsilon(1e-14));
    CHECK_THROWS(percentile_range(std::vector<double>{}));
  }

  TEST_CASE("pre-quantization normalization") {
    const Tensor x = Tensor::from({2, 1}, {1.0, 3.0});
    CHECK(normalize_pre_quant(x, false, 1).first.same_node(x));
    const auto [z, stats] = normalize_pre_quant(x, true, 1);
    CHECK(z[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(z[1] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(z[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + kNormEps)).epsilon(1e-14));
    CHECK(stats.mean[0] == 2.0);

    std::mt19937_64 rng(6);
    const Tensor r = quadd::testing::random_tensor({400, 5}, rng, -10, 10);
    const auto [zr, sr] = normalize_pre_quant(r, true, 1);
    const auto check = compute_norm_stats(zr, 1);
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(std::abs(check.mean[c]) < 1e-9);
      const double var = check.std[c] * check.std[c] - kNormEps;
      CHECK(std::abs(var - 1.0) < 1e-6);
    }
  }

  TEST_CASE("normalized quantization restores the affine map") {
    auto spec = make_spec(QuantizerKind::uniform_ste, 3, 1.0);
    std::mt19937_64 rng(12);
    const Tensor x = quadd::testing::random_tensor({20, 3}, rng, 5, 9);
    const NormStats s = compute_norm_stats(x, 1);
    QuantizeContext ctx;
    ctx.norm = &s;
    const Tensor q = quantize(x, Tensor::scalar(1.0), spec, ctx);
    const auto cb = spec.codebook();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t c = i % 3;
      const double z = (x[i] - s.mean[c]) / s.std[c];
      CHECK(q[i] == doctest::Approx(project_nearest(std::clamp(z, -1.0, 1.0), cb) * s.std[c] + s.mean[c]));
    }
  }

  TEST_CASE("spec validation") {
    CHECK_THROWS_AS(make_spec(QuantizerKind::apot, 3, 1.0, 2).validate(), QuantizerError);
    CHECK_THROWS_AS(make_spec(QuantizerKind::uniform_ste, 0, 1.0).validate(), QuantizerError);
    CHECK_THROWS_AS(make_spec(QuantizerKind::uniform_ste, 3, 0.0).validate(), QuantizerError);
    CHECK_THROWS_AS(parse_quantizer_kind("bogus"), QuantizerError);
    CHECK(make_spec(QuantizerKind::apot, 4, 1.5, 2).gamma() == 1.0);
    CHECK(make_spec(QuantizerKind::apot, 2, 2.0, 2).gamma() == 2.0);
    for (auto k : {QuantizerKind::none, QuantizerKind::uniform_ste, QuantizerKind::uniform_fsq,
                   QuantizerKind::uniform_aun, QuantizerKind::apot}) {
      CHECK(parse_quantizer_kind(quantizer_kind_name(k)) == k);
    }
  }
}
