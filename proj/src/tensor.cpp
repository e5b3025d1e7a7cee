#include "qgc/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace qgc {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap cmap(const Tensor& t, int r, int c) { return ECMap(t.data().data(), r, c); }
EMap gmap(Tensor& t, int r, int c) { return EMap(t.grad_ensure().data(), r, c); }

long numel_of(const std::vector<int>& shape) {
  long n = 1;
  for (int d : shape) n *= d;
  return n;
}

void check_shape(const std::vector<int>& shape) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dim in shape " + shape_str(shape));
  }
}

// rank-1 tensors act as a single row
void as_matrix(const Tensor& t, int& r, int& c) {
  if (t.rank() == 1) {
    r = 1;
    c = t.dim(0);
  } else if (t.rank() == 2) {
    r = t.dim(0);
    c = t.dim(1);
  } else {
    throw std::invalid_argument("op expects rank 1 or 2 tensor, got shape " + shape_str(t.shape()));
  }
}

thread_local Tape* g_active_tape = nullptr;

bool taping(const std::vector<Tensor>& inputs) {
  if (!Tape::active()) return false;
  for (const auto& t : inputs)
    if (t.tracked()) return true;
  return false;
}

// marks the output tracked and records the node if grads must flow
void record(const char* op, std::vector<Tensor> inputs, Tensor& out,
            std::function<void()> backward) {
  if (!taping(inputs)) return;
  out.impl()->tracked = true;
  Tape::active()->record(op, std::move(inputs), out, std::move(backward));
}

void accumulate(Tensor& t, const double* src, long n) {
  auto& g = t.grad_ensure();
  for (long i = 0; i < n; ++i) g[static_cast<size_t>(i)] += src[static_cast<size_t>(i)];
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 1e-300);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

int Rng::randint(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("randint: empty range");
  uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  impl->tracked = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (numel_of(shape) != static_cast<long>(data.size()))
    throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->tracked = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.normal() * stddev;
  return t;
}

int Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("rows(): tensor is not rank 2: " + shape_str(shape()));
  return dim(0);
}

int Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("cols(): tensor is not rank 2: " + shape_str(shape()));
  return dim(1);
}

double Tensor::value() const {
  if (numel() != 1)
    throw std::invalid_argument("value(): tensor is not scalar: " + shape_str(shape()));
  return impl_->data[0];
}

double& Tensor::at(int i, int j) {
  return impl_->data[static_cast<size_t>(i) * static_cast<size_t>(cols()) + static_cast<size_t>(j)];
}

double Tensor::at(int i, int j) const {
  return impl_->data[static_cast<size_t>(i) * static_cast<size_t>(cols()) + static_cast<size_t>(j)];
}

void Tensor::set_requires_grad(bool rg) {
  impl_->requires_grad = rg;
  impl_->tracked = rg;
  if (!rg) impl_->grad.clear();
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad())
    throw std::runtime_error("grad(): no gradient present for tensor of shape " + shape_str(shape()));
  return impl_->grad;
}

std::vector<double>& Tensor::grad_ensure() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward) {
  nodes_.push_back(TapeNode{op, std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar");
  if (!loss.tracked())
    throw std::runtime_error("backward: loss does not depend on any trainable tensor");
  loss.impl()->grad.assign(1, 1.0);
  for (size_t i = nodes_.size(); i-- > 0;) {
    TapeNode& node = nodes_[i];
    if (!node.output.has_grad()) continue;  // no gradient flowed into this value
    node.backward();
  }
}

NoTape::NoTape() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoTape::~NoTape() { g_active_tape = saved_; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  int m, k, k2, n;
  as_matrix(a, m, k);
  as_matrix(b, k2, n);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  EMap(out.data().data(), m, n).noalias() = cmap(a, m, k) * cmap(b, k, n);
  record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
    ECMap go(out.grad().data(), m, n);
    if (a.tracked()) gmap(a, m, k).noalias() += go * cmap(b, k, n).transpose();
    if (b.tracked()) gmap(b, k, n).noalias() += cmap(a, m, k).transpose() * go;
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  int m, k, n, k2;
  as_matrix(a, m, k);
  as_matrix(b, n, k2);
  if (k != k2)
    throw std::invalid_argument("matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  EMap(out.data().data(), m, n).noalias() = cmap(a, m, k) * cmap(b, n, k).transpose();
  record("matmul_nt", {a, b}, out, [a, b, out, m, k, n]() mutable {
    ECMap go(out.grad().data(), m, n);
    if (a.tracked()) gmap(a, m, k).noalias() += go * cmap(b, n, k);
    if (b.tracked()) gmap(b, n, k).noalias() += go.transpose() * cmap(a, m, k);
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  int m, n;
  as_matrix(a, m, n);
  Tensor out = Tensor::zeros({n, m});
  EMap(out.data().data(), n, m) = cmap(a, m, n).transpose();
  record("transpose", {a}, out, [a, out, m, n]() mutable {
    ECMap go(out.grad().data(), n, m);
    gmap(a, m, n) += go.transpose();
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const long n = a.numel();
  for (long i = 0; i < n; ++i)
    out.data()[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] + b.data()[static_cast<size_t>(i)];
  record("add", {a, b}, out, [a, b, out, n]() mutable {
    const auto& go = out.grad();
    if (a.tracked()) accumulate(a, go.data(), n);
    if (b.tracked()) accumulate(b, go.data(), n);
  });
  return out;
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  int m, n, br, bn;
  as_matrix(x, m, n);
  as_matrix(bias, br, bn);
  if (br != 1 || bn != n)
    throw std::invalid_argument("add_row: bias shape " + shape_str(bias.shape()) +
                                " does not broadcast over " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<size_t>(i) * n + j] =
          x.data()[static_cast<size_t>(i) * n + j] + bias.data()[static_cast<size_t>(j)];
  record("add_row", {x, bias}, out, [x, bias, out, m, n]() mutable {
    const auto& go = out.grad();
    if (x.tracked()) accumulate(x, go.data(), static_cast<long>(m) * n);
    if (bias.tracked()) {
      auto& gb = bias.grad_ensure();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * n + j];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const long n = a.numel();
  for (long i = 0; i < n; ++i)
    out.data()[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
  record("mul", {a, b}, out, [a, b, out, n]() mutable {
    const auto& go = out.grad();
    if (a.tracked()) {
      auto& ga = a.grad_ensure();
      for (long i = 0; i < n; ++i)
        ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
    }
    if (b.tracked()) {
      auto& gb = b.grad_ensure();
      for (long i = 0; i < n; ++i)
        gb[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * a.data()[static_cast<size_t>(i)];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const long n = a.numel();
  for (long i = 0; i < n; ++i) out.data()[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * c;
  record("scale", {a}, out, [a, out, c, n]() mutable {
    const auto& go = out.grad();
    auto& ga = a.grad_ensure();
    for (long i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * c;
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const long n = x.numel();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (long i = 0; i < n; ++i) {
    double v = x.data()[static_cast<size_t>(i)];
    out.data()[static_cast<size_t>(i)] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  record("gelu", {x}, out, [x, out, n]() mutable {
    const auto& go = out.grad();
    auto& gx = x.grad_ensure();
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (long i = 0; i < n; ++i) {
      double v = x.data()[static_cast<size_t>(i)];
      double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * (cdf + v * pdf);
    }
  });
  return out;
}

namespace {

// shared forward for softmax/log_softmax; writes probabilities into out
void softmax_forward(const Tensor& x, Tensor& out, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const double* row = x.data().data() + static_cast<size_t>(i) * n;
    double* orow = out.data().data() + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw std::runtime_error("softmax: non-finite input");
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    double inv = 1.0 / s;
    for (int j = 0; j < n; ++j) orow[j] *= inv;
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  int m, n;
  as_matrix(x, m, n);
  Tensor out = Tensor::zeros(x.shape());
  softmax_forward(x, out, m, n);
  record("softmax_rows", {x}, out, [x, out, m, n]() mutable {
    const auto& go = out.grad();
    auto& gx = x.grad_ensure();
    for (int i = 0; i < m; ++i) {
      const double* y = out.data().data() + static_cast<size_t>(i) * n;
      const double* g = go.data() + static_cast<size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += y[j] * g[j];
      double* gi = gx.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) gi[j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

Tensor log_softmax_rows(const Tensor& x) {
  int m, n;
  as_matrix(x, m, n);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < m; ++i) {
    const double* row = x.data().data() + static_cast<size_t>(i) * n;
    double* orow = out.data().data() + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw std::runtime_error("log_softmax: non-finite input");
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    double lse = mx + std::log(s);
    for (int j = 0; j < n; ++j) orow[j] = row[j] - lse;
  }
  record("log_softmax_rows", {x}, out, [x, out, m, n]() mutable {
    const auto& go = out.grad();
    auto& gx = x.grad_ensure();
    for (int i = 0; i < m; ++i) {
      const double* y = out.data().data() + static_cast<size_t>(i) * n;
      const double* g = go.data() + static_cast<size_t>(i) * n;
      double gsum = 0.0;
      for (int j = 0; j < n; ++j) gsum += g[j];
      double* gi = gx.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) gi[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  int m, n, gr, gn, br, bn;
  as_matrix(x, m, n);
  as_matrix(gain, gr, gn);
  as_matrix(bias, br, bn);
  if (gr != 1 || gn != n || br != 1 || bn != n)
    throw std::invalid_argument("layer_norm: gain/bias must be length-" + std::to_string(n) +
                                " vectors, got " + shape_str(gain.shape()) + " and " +
                                shape_str(bias.shape()));
  Tensor out = Tensor::zeros(x.shape());
  // keep per-row (mean, inv_std) for the backward pass
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * 2);
  for (int i = 0; i < m; ++i) {
    const double* row = x.data().data() + static_cast<size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= n;
    double inv_std = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(i) * 2] = mean;
    (*stats)[static_cast<size_t>(i) * 2 + 1] = inv_std;
    double* orow = out.data().data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = gain.data()[static_cast<size_t>(j)] * (row[j] - mean) * inv_std +
                bias.data()[static_cast<size_t>(j)];
  }
  record("layer_norm", {x, gain, bias}, out, [x, gain, bias, out, stats, m, n]() mutable {
    const auto& go = out.grad();
    for (int i = 0; i < m; ++i) {
      const double* row = x.data().data() + static_cast<size_t>(i) * n;
      const double* g = go.data() + static_cast<size_t>(i) * n;
      double mean = (*stats)[static_cast<size_t>(i) * 2];
      double inv_std = (*stats)[static_cast<size_t>(i) * 2 + 1];
      // dg/db accumulate over rows; dx uses the standard layernorm backward
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (int j = 0; j < n; ++j) {
        double xhat = (row[j] - mean) * inv_std;
        double gy = g[j] * gain.data()[static_cast<size_t>(j)];
        sum_gy += gy;
        sum_gy_xhat += gy * xhat;
      }
      if (x.tracked()) {
        auto& gx = x.grad_ensure();
        double* gi = gx.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
          double xhat = (row[j] - mean) * inv_std;
          double gy = g[j] * gain.data()[static_cast<size_t>(j)];
          gi[j] += (gy - sum_gy / n - xhat * sum_gy_xhat / n) * inv_std;
        }
      }
      if (gain.tracked()) {
        auto& gg = gain.grad_ensure();
        for (int j = 0; j < n; ++j)
          gg[static_cast<size_t>(j)] += g[j] * (row[j] - mean) * inv_std;
      }
      if (bias.tracked()) {
        auto& gb = bias.grad_ensure();
        for (int j = 0; j < n; ++j) gb[static_cast<size_t>(j)] += g[j];
      }
    }
  });
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  int v = table.rows(), d = table.cols();
  if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " out of range for table with " + std::to_string(v) + " rows");
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data().data() + i * static_cast<size_t>(d),
                table.data().data() + static_cast<size_t>(ids[i]) * d,
                sizeof(double) * static_cast<size_t>(d));
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  record("embedding", {table}, out, [table, out, ids_copy, d]() mutable {
    const auto& go = out.grad();
    auto& gt = table.grad_ensure();
    for (size_t i = 0; i < ids_copy->size(); ++i) {
      double* dst = gt.data() + static_cast<size_t>((*ids_copy)[i]) * d;
      const double* src = go.data() + i * static_cast<size_t>(d);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  int n = -1, total = 0;
  for (const auto& p : parts) {
    int r, c;
    as_matrix(p, r, c);
    if (n < 0) n = c;
    if (c != n)
      throw std::invalid_argument("concat_rows: column mismatch: " + std::to_string(c) + " vs " +
                                  std::to_string(n));
    total += r;
  }
  Tensor out = Tensor::zeros({total, n});
  int off = 0;
  for (const auto& p : parts) {
    int r, c;
    as_matrix(p, r, c);
    std::memcpy(out.data().data() + static_cast<size_t>(off) * n, p.data().data(),
                sizeof(double) * static_cast<size_t>(r) * n);
    off += r;
  }
  record("concat_rows", parts, out, [parts, out, n]() mutable {
    const auto& go = out.grad();
    int off = 0;
    for (auto& p : parts) {
      int r, c;
      as_matrix(p, r, c);
      if (p.tracked()) accumulate(p, go.data() + static_cast<size_t>(off) * n, static_cast<long>(r) * n);
      off += r;
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  int m = -1, total = 0;
  for (const auto& p : parts) {
    int r, c;
    as_matrix(p, r, c);
    if (m < 0) m = r;
    if (r != m)
      throw std::invalid_argument("concat_cols: row mismatch: " + std::to_string(r) + " vs " +
                                  std::to_string(m));
    total += c;
  }
  Tensor out = Tensor::zeros({m, total});
  int off = 0;
  for (const auto& p : parts) {
    int r, c;
    as_matrix(p, r, c);
    for (int i = 0; i < m; ++i)
      std::memcpy(out.data().data() + static_cast<size_t>(i) * total + off,
                  p.data().data() + static_cast<size_t>(i) * c, sizeof(double) * static_cast<size_t>(c));
    off += c;
  }
  record("concat_cols", parts, out, [parts, out, m, total]() mutable {
    const auto& go = out.grad();
    int off = 0;
    for (auto& p : parts) {
      int r, c;
      as_matrix(p, r, c);
      if (p.tracked()) {
        auto& gp = p.grad_ensure();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j)
            gp[static_cast<size_t>(i) * c + j] += go[static_cast<size_t>(i) * total + off + j];
      }
      off += c;
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& x, int start, int len) {
  int m, n;
  as_matrix(x, m, n);
  if (start < 0 || len <= 0 || start + len > m)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(x.shape()));
  Tensor out = Tensor::zeros({len, n});
  std::memcpy(out.data().data(), x.data().data() + static_cast<size_t>(start) * n,
              sizeof(double) * static_cast<size_t>(len) * n);
  record("slice_rows", {x}, out, [x, out, start, len, n]() mutable {
    const auto& go = out.grad();
    auto& gx = x.grad_ensure();
    for (long i = 0; i < static_cast<long>(len) * n; ++i)
      gx[static_cast<size_t>(start) * n + i] += go[static_cast<size_t>(i)];
  });
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  int m, n;
  as_matrix(x, m, n);
  if (start < 0 || len <= 0 || start + len > n)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(x.shape()));
  Tensor out = Tensor::zeros({m, len});
  for (int i = 0; i < m; ++i)
    std::memcpy(out.data().data() + static_cast<size_t>(i) * len,
                x.data().data() + static_cast<size_t>(i) * n + start,
                sizeof(double) * static_cast<size_t>(len));
  record("slice_cols", {x}, out, [x, out, start, len, m, n]() mutable {
    const auto& go = out.grad();
    auto& gx = x.grad_ensure();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < len; ++j)
        gx[static_cast<size_t>(i) * n + start + j] += go[static_cast<size_t>(i) * len + j];
  });
  return out;
}

Tensor mean_rows(const Tensor& x) {
  int m, n;
  as_matrix(x, m, n);
  Tensor out = Tensor::zeros({1, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[static_cast<size_t>(j)] += x.data()[static_cast<size_t>(i) * n + j];
  for (int j = 0; j < n; ++j) out.data()[static_cast<size_t>(j)] /= m;
  record("mean_rows", {x}, out, [x, out, m, n]() mutable {
    const auto& go = out.grad();
    auto& gx = x.grad_ensure();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gx[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(j)] / m;
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  const long n = x.numel();
  record("sum_all", {x}, out, [x, out, n]() mutable {
    double g = out.grad()[0];
    auto& gx = x.grad_ensure();
    for (long i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
  });
  return out;
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  int m, n;
  as_matrix(logits, m, n);
  if (static_cast<int>(targets.size()) != m)
    throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(m) + " rows");
  for (int t : targets)
    if (t < 0 || t >= n)
      throw std::invalid_argument("cross_entropy_rows: target " + std::to_string(t) +
                                  " out of range [0, " + std::to_string(n) + ")");
  // probs kept for the fused backward: dlogits = softmax − onehot
  Tensor probs = Tensor::zeros({m, n});
  softmax_forward(logits, probs, m, n);
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    double p = probs.data()[static_cast<size_t>(i) * n + targets[static_cast<size_t>(i)]];
    loss -= std::log(std::max(p, 1e-300));
  }
  if (!std::isfinite(loss)) throw std::runtime_error("cross_entropy_rows: non-finite loss");
  Tensor out = Tensor::scalar(loss);
  auto tg = std::make_shared<std::vector<int>>(targets);
  record("cross_entropy_rows", {logits}, out, [logits, probs, out, tg, m, n]() mutable {
    double g = out.grad()[0];
    auto& gl = logits.grad_ensure();
    for (int i = 0; i < m; ++i) {
      const double* p = probs.data().data() + static_cast<size_t>(i) * n;
      double* gi = gl.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) gi[j] += g * p[j];
      gi[(*tg)[static_cast<size_t>(i)]] -= g;
    }
  });
  return out;
}

Tensor kl_vs_const_rows(const std::vector<double>& teacher_probs, const Tensor& logits) {
  int m, n;
  as_matrix(logits, m, n);
  if (static_cast<long>(teacher_probs.size()) != static_cast<long>(m) * n)
    throw std::invalid_argument("kl_vs_const_rows: teacher table has " +
                                std::to_string(teacher_probs.size()) + " entries, expected " +
                                std::to_string(static_cast<long>(m) * n));
  // student log-probs (stabilized) and probs for the fused backward
  Tensor probs = Tensor::zeros({m, n});
  softmax_forward(logits, probs, m, n);
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* p = teacher_probs.data() + static_cast<size_t>(i) * n;
    const double* q = probs.data().data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      if (p[j] <= 0.0) continue;
      loss += p[j] * (std::log(p[j]) - std::log(std::max(q[j], 1e-300)));
    }
  }
  if (!std::isfinite(loss)) throw std::runtime_error("kl_vs_const_rows: non-finite loss");
  Tensor out = Tensor::scalar(loss);
  auto tp = std::make_shared<std::vector<double>>(teacher_probs);
  record("kl_vs_const_rows", {logits}, out, [logits, probs, out, tp, m, n]() mutable {
    double g = out.grad()[0];
    auto& gl = logits.grad_ensure();
    for (int i = 0; i < m; ++i) {
      const double* p = tp->data() + static_cast<size_t>(i) * n;
      const double* q = probs.data().data() + static_cast<size_t>(i) * n;
      double* gi = gl.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) gi[j] += g * (q[j] - p[j]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// AdamOptimizer
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double lr, double beta1, double beta2,
                             double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& p : params) {
    if (!p.requires_grad())
      throw std::invalid_argument("AdamOptimizer: refusing to register a frozen tensor");
    Slot s;
    s.param = p;
    s.m.assign(p.data().size(), 0.0);
    s.v.assign(p.data().size(), 0.0);
    slots_.push_back(std::move(s));
  }
}

void AdamOptimizer::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    auto& theta = s.param.data();
    const bool has_g = s.param.has_grad();
    const double* g = has_g ? s.param.grad().data() : nullptr;
    for (size_t i = 0; i < theta.size(); ++i) {
      double gi = has_g ? g[i] : 0.0;
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      theta[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

}  // namespace qgc
