#include "quadd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace quadd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a) {
  throw ShapeError(op + ": invalid shape " + shape_str(a));
}

Tensor make(Shape shape, std::vector<double> data) {
  return Tensor::from(std::move(shape), std::move(data));
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) shape_fail(op, t.shape());
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-length axis in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("tensor: axis out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor is not scalar " + shape_str(shape()));
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const { return from(shape(), impl_->data); }

// ---- tape -----------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

NoGradGuard::NoGradGuard() : previous_(Tape::current().enabled_) {
  Tape::current().enabled_ = false;
}

NoGradGuard::~NoGradGuard() { Tape::current().enabled_ = previous_; }

TapeScope::TapeScope() : saved_enabled_(Tape::current().enabled_) {
  auto& tape = Tape::current();
  saved_.swap(tape.records_);
  tape.enabled_ = true;
}

TapeScope::~TapeScope() {
  auto& tape = Tape::current();
  tape.records_.swap(saved_);
  tape.enabled_ = saved_enabled_;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss is not connected to any tensor requiring grad");
  }
  for (auto& rec : records_) rec.output->grad.clear();

  auto& root = loss.impl()->grad;
  if (root.empty()) root.assign(1, 0.0);
  root[0] += 1.0;

  std::vector<double*> grad_in;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;
    grad_in.assign(it->inputs.size(), nullptr);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      auto& in = *it->inputs[i];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      grad_in[i] = in.grad.data();
    }
    it->rule(out.grad, grad_in);
  }
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

Tensor record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardRule rule) {
  auto& tape = Tape::current();
  if (!tape.recording()) return output;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return output;
  output.impl()->requires_grad = true;
  output.impl()->is_leaf = false;
  Tape::Record rec;
  rec.op = std::move(op);
  rec.inputs.reserve(inputs.size());
  for (auto& t : inputs) rec.inputs.push_back(t.impl());
  rec.output = output.impl();
  rec.rule = std::move(rule);
  tape.push(std::move(rec));
  return output;
}

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  auto ai = a.impl();
  auto bi = b.impl();
  return record("matmul", {a, b}, make({a.dim(0), b.dim(1)}, std::move(out)),
                [ai, bi, m, k, n](std::span<const double> g, std::span<double* const> gin) {
                  ConstMap go(g.data(), m, n);
                  if (gin[0]) MutMap(gin[0], m, k).noalias() += go * ConstMap(bi->data.data(), k, n).transpose();
                  if (gin[1]) MutMap(gin[1], k, n).noalias() += ConstMap(ai->data.data(), m, k).transpose() * go;
                });
}

namespace {

enum class Binary { add, sub, mul };

Tensor binary(const char* name, Binary kind, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  if (!same && (kind == Binary::mul || !is_suffix(a.shape(), b.shape()))) {
    shape_fail(name, a.shape(), b.shape());
  }
  const std::size_t n = a.size();
  const std::size_t nb = b.size();
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double bv = bd[same ? i : i % nb];
    switch (kind) {
      case Binary::add: out[i] = ad[i] + bv; break;
      case Binary::sub: out[i] = ad[i] - bv; break;
      case Binary::mul: out[i] = ad[i] * bv; break;
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return record(name, {a, b}, make(a.shape(), std::move(out)),
                [ai, bi, kind, n, nb, same](std::span<const double> g, std::span<double* const> gin) {
                  if (kind == Binary::mul) {
                    if (gin[0]) for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i] * bi->data[i];
                    if (gin[1]) for (std::size_t i = 0; i < n; ++i) gin[1][i] += g[i] * ai->data[i];
                    return;
                  }
                  const double sign = kind == Binary::sub ? -1.0 : 1.0;
                  if (gin[0]) for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i];
                  if (gin[1]) {
                    for (std::size_t i = 0; i < n; ++i) gin[1][same ? i : i % nb] += sign * g[i];
                  }
                });
}

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
  auto ai = a.impl();
  auto result = make(a.shape(), std::move(out));
  auto oi = result.impl();
  // The tape record owns the output, so a raw pointer outlives the rule.
  auto* op = oi.get();
  return record(name, {a}, result,
                [ai, op, n, deriv](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i] * deriv(ai->data[i], op->data[i]);
                });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return record("transpose", {a}, make({c, r}, std::move(out)),
                [r, c](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
                });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  const std::size_t n = a.size();
  return record("reshape", {a}, make(std::move(shape), std::move(out)),
                [n](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[i];
                });
}

Tensor sum(const Tensor& a) {
  const auto ad = a.data();
  double s = 0.0;
  for (double v : ad) s += v;
  const std::size_t n = a.size();
  return record("sum", {a}, Tensor::scalar(s),
                [n](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
                });
}

namespace {

Tensor reduce_axis(const char* name, const Tensor& a, std::size_t axis, bool average) {
  if (axis >= a.rank()) shape_fail(name, a.shape());
  const auto& sh = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t len = sh[axis];
  const double w = average ? 1.0 / static_cast<double>(len) : 1.0;
  std::vector<double> out(outer * inner, 0.0);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += ad[(o * len + l) * inner + i];
  if (average) for (auto& v : out) v *= w;
  Shape out_shape;
  for (std::size_t i = 0; i < sh.size(); ++i)
    if (i != axis) out_shape.push_back(sh[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  return record(name, {a}, make(std::move(out_shape), std::move(out)),
                [outer, inner, len, w](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t l = 0; l < len; ++l)
                      for (std::size_t i = 0; i < inner; ++i)
                        gin[0][(o * len + l) * inner + i] += w * g[o * inner + i];
                });
}

}  // namespace

Tensor sum(const Tensor& a, std::size_t axis) { return reduce_axis("sum_axis", a, axis, false); }
Tensor mean(const Tensor& a, std::size_t axis) { return reduce_axis("mean", a, axis, true); }

namespace {

void softmax_rows(std::span<const double> x, std::size_t rows, std::size_t cols, std::vector<double>& p) {
  p.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* pr = p.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      pr[c] = std::exp(xr[c] - mx);
      z += pr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) pr[c] /= z;
  }
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  require_rank("softmax", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> p;
  softmax_rows(logits.data(), rows, cols, p);
  auto result = make(logits.shape(), std::move(p));
  auto* op = result.impl().get();
  return record("softmax", {logits}, result,
                [op, rows, cols](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  const auto& p = op->data;
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c)
                      gin[0][r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot);
                  }
                });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) {
    shape_fail("softmax_cross_entropy", logits.shape(), Shape{labels.size()});
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(cols) + ")");
    }
  }
  std::vector<double> p;
  softmax_rows(logits.data(), rows, cols, p);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    loss -= std::log(std::max(p[r * cols + static_cast<std::size_t>(labels[r])], 1e-300));
  }
  loss /= static_cast<double>(rows);
  std::vector<int> ys(labels.begin(), labels.end());
  return record("softmax_cross_entropy", {logits}, Tensor::scalar(loss),
                [p = std::move(p), ys = std::move(ys), rows, cols](std::span<const double> g,
                                                                  std::span<double* const> gin) {
                  if (!gin[0]) return;
                  const double w = g[0] / static_cast<double>(rows);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      const double onehot = static_cast<int>(c) == ys[r] ? 1.0 : 0.0;
                      gin[0][r * cols + c] += w * (p[r * cols + c] - onehot);
                    }
                  }
                });
}

Tensor squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("squared_error", a.shape(), b.shape());
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = a[i] - b[i];
    s += diff[i] * diff[i];
  }
  return record("squared_error", {a, b}, Tensor::scalar(s),
                [diff = std::move(diff), n](std::span<const double> g, std::span<double* const> gin) {
                  for (std::size_t i = 0; i < n; ++i) {
                    const double v = 2.0 * g[0] * diff[i];
                    if (gin[0]) gin[0][i] += v;
                    if (gin[1]) gin[1][i] -= v;
                  }
                });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) shape_fail("cosine_similarity", a.shape(), b.shape());
  const std::size_t n = a.size();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const bool degenerate = na == 0.0 || nb == 0.0;
  const double cos = degenerate ? 0.0 : dot / (na * nb);
  auto ai = a.impl();
  auto bi = b.impl();
  return record("cosine_similarity", {a, b}, Tensor::scalar(cos),
                [ai, bi, n, na, nb, cos, degenerate](std::span<const double> g, std::span<double* const> gin) {
                  if (degenerate) return;
                  for (std::size_t i = 0; i < n; ++i) {
                    const double av = ai->data[i], bv = bi->data[i];
                    if (gin[0]) gin[0][i] += g[0] * (bv / (na * nb) - cos * av / (na * na));
                    if (gin[1]) gin[1][i] += g[0] * (av / (na * nb) - cos * bv / (nb * nb));
                  }
                });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() < 1 || rows.empty()) shape_fail("gather_rows", a.shape());
  const std::size_t width = a.size() / a.dim(0);
  std::vector<double> out(rows.size() * width);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  Shape sh = a.shape();
  sh[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record("gather_rows", {a}, make(std::move(sh), std::move(out)),
                [idx = std::move(idx), width](std::span<const double> g, std::span<double* const> gin) {
                  if (!gin[0]) return;
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t c = 0; c < width; ++c) gin[0][idx[r] * width + c] += g[r * width + c];
                });
}

Tensor relu_mask(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
  return make(a.shape(), std::move(out));
}

Tensor forward_op(OpKind kind, std::span<const Tensor> operands) {
  auto need = [&](std::size_t n, const char* name) {
    if (operands.size() != n) {
      throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(n) + " operands");
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2, "matmul"); return matmul(operands[0], operands[1]);
    case OpKind::add: need(2, "add"); return add(operands[0], operands[1]);
    case OpKind::mul: need(2, "mul"); return mul(operands[0], operands[1]);
    case OpKind::relu: need(1, "relu"); return relu(operands[0]);
    case OpKind::tanh: need(1, "tanh"); return tanh(operands[0]);
    case OpKind::mean: need(1, "mean"); return mean(operands[0], 0);
    case OpKind::sum: need(1, "sum"); return sum(operands[0]);
    case OpKind::softmax_cross_entropy: {
      need(2, "softmax_cross_entropy");
      std::vector<int> labels;
      for (double v : operands[1].data()) labels.push_back(static_cast<int>(std::lround(v)));
      return softmax_cross_entropy(operands[0], labels);
    }
    case OpKind::squared_error: need(2, "squared_error"); return squared_error(operands[0], operands[1]);
    case OpKind::cosine_similarity: need(2, "cosine_similarity"); return cosine_similarity(operands[0], operands[1]);
  }
  throw std::invalid_argument("forward_op: unknown op kind");
}

Tensor custom_grad(const CustomForward& forward_fn, const CustomBackward& backward_fn,
                   std::vector<Tensor> inputs) {
  Tensor produced;
  {
    NoGradGuard guard;
    produced = forward_fn(inputs);
  }
  Tensor output = Tensor::from(produced.shape(), std::vector<double>(produced.data().begin(), produced.data().end()));
  const Shape out_shape = output.shape();
  std::vector<Tensor> saved;
  saved.reserve(inputs.size());
  for (const auto& t : inputs) saved.push_back(t.detach());
  Tensor out_value = output.detach();
  return record("custom", inputs, output,
                [saved = std::move(saved), out_value, out_shape, backward_fn](
                    std::span<const double> g, std::span<double* const> gin) {
                  Tensor grad_out = Tensor::from(out_shape, std::vector<double>(g.begin(), g.end()));
                  std::vector<Tensor> grads = backward_fn(grad_out, saved, out_value);
                  if (grads.size() != saved.size()) {
                    throw ShapeError("custom_grad: backward returned " + std::to_string(grads.size()) +
                                     " gradients for " + std::to_string(saved.size()) + " inputs");
                  }
                  for (std::size_t i = 0; i < saved.size(); ++i) {
                    if (grads[i].shape() != saved[i].shape()) {
                      shape_fail("custom_grad backward", grads[i].shape(), saved[i].shape());
                    }
                    if (!gin[i]) continue;
                    for (std::size_t j = 0; j < grads[i].size(); ++j) gin[i][j] += grads[i][j];
                  }
                });
}

}  // namespace quadd
