#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace qgc {

// ---------------------------------------------------------------------------
// Rng: explicit-seed RNG used everywhere. All sampling goes through this so
// identical seeds give identical runs regardless of platform library details.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    // xorshift* — small, fast, reproducible.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // standard normal, Box-Muller with cached spare
  double normal();

  // uniform integer in [lo, hi] inclusive
  int randint(int lo, int hi);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(0, static_cast<int>(i) - 1));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Tensor: dense 64-bit real array with optional gradient. Value-semantics
// handle onto shared storage; ops below record onto the active Tape so a
// scalar loss can be backpropagated to every requires_grad leaf.
// ---------------------------------------------------------------------------
struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until gradient flows into this tensor
  bool requires_grad = false;
  bool tracked = false;  // participates in the current gradient graph
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  long numel() const { return static_cast<long>(impl_->data.size()); }
  int rows() const;  // rank-2 only
  int cols() const;

  double value() const;  // scalar tensors only

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double& at(int i, int j);
  double at(int i, int j) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg);
  bool tracked() const { return impl_ && impl_->tracked; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double>& grad_ensure();  // allocates zeros on first use
  void zero_grad() { if (impl_) impl_->grad.clear(); }

  // leaf copy of the forward values; never tracked
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

std::string shape_str(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Tape: the computation graph. Construction activates it for the current
// thread; ops append records in topological (construction) order and
// backward() replays them exactly once in reverse. Nested tapes stack.
// ---------------------------------------------------------------------------
struct TapeNode {
  const char* op;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and accumulates grads into every tracked
  // tensor reachable from `loss`. Frozen leaves receive no grad.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }

  static Tape* active();
  void record(const char* op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

 private:
  std::vector<TapeNode> nodes_;
  Tape* prev_ = nullptr;
};

// Suspends recording for the current scope (forward-only passes).
class NoTape {
 public:
  NoTape();
  ~NoTape();
  NoTape(const NoTape&) = delete;
  NoTape& operator=(const NoTape&) = delete;

 private:
  Tape* saved_;
};

// ---------------------------------------------------------------------------
// Ops. All tensors are rank-1 or rank-2; rank-1 operands are treated as a
// single row where a row vector is expected.
// ---------------------------------------------------------------------------

// c[m×n] = a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
// c[m×n] = a[m×k] · b[n×k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor add_row(const Tensor& x, const Tensor& bias);  // bias broadcast over rows
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, double c);

Tensor gelu(const Tensor& x);

// per-row softmax / log-softmax over the last axis, max-stabilized
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// y = gain ⊙ (x − mean)/sqrt(var + eps) + bias, per row
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// gathers table rows; gradient scatters back into the table
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);

Tensor mean_rows(const Tensor& x);  // [L×d] → [1×d]
Tensor sum_all(const Tensor& x);    // scalar
Tensor mean_all(const Tensor& x);   // scalar

// sum over rows of −log softmax(logits)[target]; scalar output
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// Σ_rows Σ_v p(v)·(log p(v) − log q(v)) with q = softmax(logits).
// `teacher_probs` is a detached row-major [rows×cols] distribution table.
Tensor kl_vs_const_rows(const std::vector<double>& teacher_probs, const Tensor& logits);

// ---------------------------------------------------------------------------
// Adam with bias correction. Accepts trainable tensors only; frozen tensors
// must never be registered, which keeps the no-update contract structural.
// ---------------------------------------------------------------------------
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  void step();       // absent grads are treated as zero
  void zero_grad();
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }
  long step_count() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace qgc
