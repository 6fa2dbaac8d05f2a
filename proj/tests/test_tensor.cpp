#include <doctest.h>

#include <cmath>
#include <numbers>

#include "quadd/nn.hpp"
#include "quadd/rng.hpp"
#include "quadd/tensor.hpp"
#include "support.hpp"

using namespace quadd;
using quadd::testing::fd_max_rel_error;
using quadd::testing::random_tensor;

TEST_SUITE("tensor") {
  TEST_CASE("basic forward values") {
    const auto t = quadd::tanh(Tensor::from({1}, {0.0}));
    CHECK(t[0] == 0.0);

    const auto m = matmul(Tensor::full({2, 3}, 1.0), Tensor::full({3, 1}, 1.0));
    CHECK(m.shape() == Shape{2, 1});
    CHECK(m[0] == 3.0);
    CHECK(m[1] == 3.0);

    const int label[1] = {1};
    const auto ce = softmax_cross_entropy(Tensor::from({1, 3}, {0, 0, 0}), label);
    CHECK(ce.item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }

  TEST_CASE("forward_op dispatch matches direct calls") {
    std::mt19937_64 rng(3);
    const Tensor a = random_tensor({2, 3}, rng), b = random_tensor({3, 2}, rng), c = random_tensor({2, 3}, rng);
    const Tensor ab[2] = {a, b};
    CHECK(forward_op(OpKind::matmul, ab)[0] == matmul(a, b)[0]);
    const Tensor ac[2] = {a, c};
    CHECK(forward_op(OpKind::mul, ac)[4] == mul(a, c)[4]);
    CHECK(forward_op(OpKind::squared_error, ac).item() == squared_error(a, c).item());
    const Tensor lab = Tensor::from({2}, {2, 0});
    const Tensor al[2] = {a, lab};
    const int labels[2] = {2, 0};
    CHECK(forward_op(OpKind::softmax_cross_entropy, al).item() == softmax_cross_entropy(a, labels).item());
    const Tensor single[1] = {a};
    CHECK(forward_op(OpKind::mean, single).shape() == Shape{3});
  }

  TEST_CASE("shape errors name the op and both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
      FAIL("expected a shape error");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("matmul") != std::string::npos);
      CHECK(msg.find("[2, 3]") != std::string::npos);
    }
    CHECK_THROWS_AS(mul(Tensor::zeros({2, 3}), Tensor::zeros({3})), ShapeError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
    CHECK_NOTHROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3})));
  }

  TEST_CASE("simple gradients") {
    Tape::current().reset();
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    Tape::current().reset();
    Tensor y = Tensor::from({1}, {0.5}, true);
    backward(sum(quadd::tanh(y)));
    const double t = std::tanh(0.5);
    CHECK(y.grad()[0] == doctest::Approx(1 - t * t).epsilon(1e-14));
    CHECK(y.grad()[0] == doctest::Approx(0.7864).epsilon(1e-4));
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tape::current().reset();
    Tensor x = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(scale(x, 2.0)), ShapeError);
  }

  TEST_CASE("fan-out accumulates: y = x + x") {
    Tape::current().reset();
    Tensor x = Tensor::from({2}, {0.3, -1.0}, true);
    backward(sum(add(x, x)));
    CHECK(x.grad() == std::vector<double>{2, 2});
  }

  TEST_CASE("backward after tape reset is deterministic") {
    std::mt19937_64 rng(11);
    Tensor w = random_tensor({4, 3}, rng);
    w.set_requires_grad(true);
    const Tensor x = random_tensor({5, 4}, rng);
    const int labels[5] = {0, 1, 2, 1, 0};
    std::vector<double> first;
    for (int rep = 0; rep < 2; ++rep) {
      Tape::current().reset();
      w.zero_grad();
      backward(softmax_cross_entropy(quadd::tanh(matmul(x, w)), labels));
      if (rep == 0) first = w.grad();
      else CHECK(w.grad() == first);
    }
  }

  TEST_CASE("finite differences per op kind") {
    std::mt19937_64 rng(5);
    const int labels[3] = {1, 0, 2};
    const double tol = 1e-4;
    CHECK(fd_max_rel_error([](auto& v) { return sum(matmul(v[0], v[1])); },
                           {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return squared_error(add(v[0], v[1]), Tensor::zeros({3, 4})); },
                           {random_tensor({3, 4}, rng), random_tensor({4}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return squared_error(sub(v[0], v[1]), Tensor::full({3}, 0.1)); },
                           {random_tensor({3}, rng), random_tensor({3}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return sum(mul(v[0], v[1])); },
                           {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return sum(mul(relu(v[0]), v[0])); }, {random_tensor({10}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return sum(mul(quadd::tanh(v[0]), v[0])); }, {random_tensor({6}, rng)}) <
          tol);
    CHECK(fd_max_rel_error([](auto& v) { return squared_error(mean(v[0], 0), Tensor::zeros({4})); },
                           {random_tensor({3, 4}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return squared_error(sum(v[0], 1), Tensor::zeros({3})); },
                           {random_tensor({3, 4}, rng)}) < tol);
    CHECK(fd_max_rel_error([&](auto& v) { return softmax_cross_entropy(v[0], labels); },
                           {random_tensor({3, 3}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return squared_error(softmax(v[0]), Tensor::full({2, 3}, 0.2)); },
                           {random_tensor({2, 3}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return cosine_similarity(v[0], v[1]); },
                           {random_tensor({5}, rng), random_tensor({5}, rng)}) < tol);
    CHECK(fd_max_rel_error([](auto& v) { return sum(mul(transpose(v[0]), v[1])); },
                           {random_tensor({2, 3}, rng), random_tensor({3, 2}, rng)}) < tol);
    const std::size_t rows[3] = {2, 0, 2};
    CHECK(fd_max_rel_error([&](auto& v) { return squared_error(gather_rows(v[0], rows), Tensor::zeros({3, 2})); },
                           {random_tensor({3, 2}, rng)}) < tol);
  }

  TEST_CASE("two-layer network matches finite differences") {
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({6, 4}, rng);
    const int labels[6] = {0, 1, 2, 0, 1, 2};
    const double err = fd_max_rel_error(
        [&](auto& v) {
          const Tensor h = relu(add(matmul(x, v[0]), v[1]));
          return softmax_cross_entropy(add(matmul(h, v[2]), v[3]), labels);
        },
        {random_tensor({4, 5}, rng), random_tensor({5}, rng), random_tensor({5, 3}, rng), random_tensor({3}, rng)});
    CHECK(err < 1e-4);
  }

  TEST_CASE("ce_gradients agree with autodiff and are twice differentiable") {
    auto rng = make_rng(9);
    Mlp net = Mlp::init({3, 5, 4}, rng, true);
    std::mt19937_64 r(2);
    const Tensor x = random_tensor({7, 3}, r);
    const int labels[7] = {0, 1, 2, 3, 0, 1, 2};
    Tape::current().reset();
    const auto params = net.parameters();
    backward(softmax_cross_entropy(mlp_forward(params, x), labels));
    const auto grads = ce_gradients(params, x, labels);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto auto_grad = params[p].grad();
      for (std::size_t i = 0; i < auto_grad.size(); ++i) CHECK(grads[p][i] == doctest::Approx(auto_grad[i]).epsilon(1e-10));
    }
    // d/dx of a loss after one unrolled SGD step on x.
    const auto fixed = net.flatten();
    const double err = fd_max_rel_error(
        [&](auto& v) {
          std::vector<Tensor> ps = net.clone(false).parameters();
          const auto g = ce_gradients(ps, v[0], labels);
          for (std::size_t p = 0; p < ps.size(); ++p) ps[p] = sub(ps[p], scale(g[p], 0.3));
          return softmax_cross_entropy(mlp_forward(ps, x), labels);
        },
        {x.detach()});
    CHECK(err < 1e-4);
    CHECK(net.flatten() == fixed);
  }

  TEST_CASE("custom_grad") {
    SUBCASE("identity forward and backward is a pass-through") {
      Tape::current().reset();
      Tensor x = Tensor::from({2}, {0.5, -3}, true);
      const Tensor y = custom_grad([](auto in) { return in[0].detach(); },
                                   [](const Tensor& g, auto, const Tensor&) { return std::vector<Tensor>{g}; }, {x});
      CHECK(y[1] == -3.0);
      backward(sum(scale(y, 2.0)));
      CHECK(x.grad() == std::vector<double>{2, 2});
    }
    SUBCASE("hard round with unit backward") {
      Tape::current().reset();
      Tensor x = Tensor::from({1}, {0.4}, true);
      const Tensor y = custom_grad(
          [](auto in) { return Tensor::from({1}, {std::round(in[0][0])}); },
          [](const Tensor& g, auto, const Tensor&) { return std::vector<Tensor>{g}; }, {x});
      CHECK(y[0] == 0.0);
      backward(sum(y));
      CHECK(x.grad()[0] == 1.0);
    }
    SUBCASE("clip with indicator backward") {
      Tape::current().reset();
      Tensor x = Tensor::from({1}, {2.0}, true);
      const Tensor y = custom_grad(
          [](auto in) { return Tensor::from({1}, {std::clamp(in[0][0], -1.0, 1.0)}); },
          [](const Tensor& g, auto in, const Tensor&) {
            return std::vector<Tensor>{Tensor::from({1}, {std::abs(in[0][0]) <= 1.0 ? g[0] : 0.0})};
          },
          {x});
      CHECK(y[0] == 1.0);
      backward(sum(y));
      CHECK(x.grad()[0] == 0.0);
    }
    SUBCASE("wrong gradient shape is an error") {
      Tape::current().reset();
      Tensor x = Tensor::from({2}, {1, 2}, true);
      const Tensor y = custom_grad([](auto in) { return in[0].detach(); },
                                   [](const Tensor&, auto, const Tensor&) {
                                     return std::vector<Tensor>{Tensor::zeros({3})};
                                   },
                                   {x});
      CHECK_THROWS_AS(backward(sum(y)), ShapeError);
    }
  }

  TEST_CASE("no-grad guard records nothing") {
    Tape::current().reset();
    Tensor x = Tensor::from({2}, {1, 2}, true);
    {
      NoGradGuard g;
      const Tensor y = quadd::tanh(x);
      CHECK_FALSE(y.requires_grad());
    }
    CHECK(Tape::current().size() == 0);
  }
}
