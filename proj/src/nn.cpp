#include "quadd/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace quadd {

Arch parse_arch(const std::string& name) {
  if (name == "mlp-2" || name == "mlp2") return Arch::mlp2;
  if (name == "mlp-3" || name == "mlp3") return Arch::mlp3;
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

std::string arch_name(Arch arch) { return arch == Arch::mlp2 ? "mlp-2" : "mlp-3"; }

std::size_t arch_depth(Arch arch) { return arch == Arch::mlp2 ? 2 : 3; }

Mlp Mlp::init(const std::vector<std::size_t>& layer_sizes, std::mt19937_64& rng, bool requires_grad) {
  if (layer_sizes.size() < 2) throw std::invalid_argument("mlp: need at least input and output sizes");
  Mlp net;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const std::size_t in = layer_sizes[l], out = layer_sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (auto& v : w) v = u(rng);
    for (auto& v : b) v = u(rng);
    net.weights_.push_back(Tensor::from({in, out}, std::move(w), requires_grad));
    net.biases_.push_back(Tensor::from({out}, std::move(b), requires_grad));
  }
  return net;
}

Mlp Mlp::init(Arch arch, std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng,
              bool requires_grad) {
  std::vector<std::size_t> sizes{in};
  for (std::size_t i = 1; i < arch_depth(arch); ++i) sizes.push_back(hidden);
  sizes.push_back(out);
  return init(sizes, rng, requires_grad);
}

Tensor mlp_forward(std::span<const Tensor> params, const Tensor& x, bool relu_output) {
  if (params.size() % 2 != 0 || params.empty()) throw std::invalid_argument("mlp: malformed parameter list");
  const std::size_t depth = params.size() / 2;
  Tensor h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    h = add(matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < depth || relu_output) h = relu(h);
  }
  return h;
}

Tensor Mlp::forward(const Tensor& x, bool relu_output) const {
  const auto params = parameters();
  return mlp_forward(params, x, relu_output);
}

std::vector<int> Mlp::predict(const Tensor& x) const {
  NoGradGuard guard;
  const Tensor logits = forward(x);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  const auto d = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = d.subspan(i * c, c);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
  return n;
}

std::vector<Tensor> Mlp::parameters() const {
  std::vector<Tensor> p;
  p.reserve(2 * weights_.size());
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    p.push_back(weights_[l]);
    p.push_back(biases_[l]);
  }
  return p;
}

std::vector<double> Mlp::flatten() const {
  std::vector<double> flat;
  flat.reserve(param_count());
  for (const auto& t : parameters()) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

void Mlp::load(std::span<const double> flat) {
  if (flat.size() != param_count()) throw std::invalid_argument("mlp: flat parameter size mismatch");
  std::size_t off = 0;
  for (auto t : parameters()) {
    auto d = t.mutable_data();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), d.size(), d.begin());
    off += d.size();
  }
}

Mlp Mlp::clone(bool requires_grad) const {
  Mlp net;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    auto w = weights_[l].detach();
    auto b = biases_[l].detach();
    w.set_requires_grad(requires_grad);
    b.set_requires_grad(requires_grad);
    net.weights_.push_back(w);
    net.biases_.push_back(b);
  }
  return net;
}

void Mlp::zero_grad() {
  for (auto& t : weights_) t.zero_grad();
  for (auto& t : biases_) t.zero_grad();
}

std::vector<Tensor> ce_gradients(std::span<const Tensor> params, const Tensor& x,
                                 std::span<const int> labels) {
  const std::size_t depth = params.size() / 2;
  std::vector<Tensor> inputs{x}, pre;
  Tensor h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    Tensor z = add(matmul(h, params[2 * l]), params[2 * l + 1]);
    pre.push_back(z);
    if (l + 1 < depth) {
      h = relu(z);
      inputs.push_back(h);
    }
  }
  const std::size_t n = x.dim(0);
  const std::size_t classes = params.back().size();
  std::vector<double> onehot(n * classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range("ce_gradients: label out of range");
    }
    onehot[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor delta = scale(sub(softmax(pre.back()), Tensor::from({n, classes}, std::move(onehot))),
                       1.0 / static_cast<double>(n));
  std::vector<Tensor> grads(params.size());
  for (std::size_t l = depth; l-- > 0;) {
    grads[2 * l] = matmul(transpose(inputs[l]), delta);
    grads[2 * l + 1] = sum(delta, 0);
    if (l > 0) delta = mul(matmul(delta, transpose(params[2 * l])), relu_mask(pre[l - 1]));
  }
  return grads;
}

std::vector<double> train_sgd(Mlp& net, std::span<const double> features, std::size_t dim,
                              std::span<const int> labels, const TrainConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = labels.size();
  if (n == 0 || features.size() != n * dim) throw std::invalid_argument("train_sgd: feature/label size mismatch");
  TapeScope scope;
  auto params = net.parameters();
  for (auto& p : params) p.set_requires_grad(true);
  std::vector<std::vector<double>> velocity;
  for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, std::min(cfg.batch_size, n));
  std::vector<double> epoch_loss;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t len = std::min(bs, n - start);
      std::vector<double> xb(len * dim);
      std::vector<int> yb(len);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = order[start + i];
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(src * dim), dim,
                    xb.begin() + static_cast<std::ptrdiff_t>(i * dim));
        yb[i] = labels[src];
      }
      Tape::current().reset();
      const Tensor loss = softmax_cross_entropy(net.forward(Tensor::from({len, dim}, std::move(xb))), yb);
      backward(loss);
      total += loss.item() * static_cast<double>(len);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto data = params[p].mutable_data();
        const auto g = params[p].grad();
        for (std::size_t j = 0; j < data.size(); ++j) {
          velocity[p][j] = cfg.momentum * velocity[p][j] + g[j] + cfg.weight_decay * data[j];
          data[j] -= cfg.lr * velocity[p][j];
        }
        params[p].zero_grad();
      }
    }
    epoch_loss.push_back(total / static_cast<double>(n));
  }
  Tape::current().reset();
  return epoch_loss;
}

double mean_cross_entropy(const Mlp& net, std::span<const double> features, std::size_t dim,
                          std::span<const int> labels) {
  NoGradGuard guard;
  const Tensor x = Tensor::from({labels.size(), dim}, std::vector<double>(features.begin(), features.end()));
  return softmax_cross_entropy(net.forward(x), labels).item();
}

}  // namespace quadd
