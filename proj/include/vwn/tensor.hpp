#ifndef VWN_TENSOR_HPP
#define VWN_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vwn {

using Shape = std::vector<int64_t>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  bool decay_exempt = false;
};

}  // namespace detail

std::string shape_str(const Shape& s);

/// Dense row-major tensor of 64-bit floats. Copying a Tensor copies the
/// handle, not the storage; ops always allocate fresh outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  size_t rank() const { return shape().size(); }
  int64_t dim(size_t i) const;
  int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;  // numel() must be 1
  double at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool decay_exempt() const;
  void set_decay_exempt(bool e);

  bool has_grad() const;
  std::span<const double> grad() const;   // empty span when absent
  std::span<double> mutable_grad();       // allocates zeros when absent
  void zero_grad();                       // drops the grad buffer

  Tensor clone() const;  // deep copy of value (not grad)

  const std::shared_ptr<detail::Node>& impl() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend Tensor wrap_node(std::shared_ptr<detail::Node> n);
};

/// Records one backward rule per executed op, in execution order. Opening a
/// Tape makes it the active recording target for the current thread; tapes
/// nest. Single-threaded per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays all recorded rules once, in
  /// reverse order, accumulating into .grad of every requires_grad input.
  void backward(const Tensor& loss);

  void record(std::function<void()> rule);

 private:
  std::vector<std::function<void()>> entries_;
  bool backward_done_ = false;
  Tape* prev_ = nullptr;
};

// ---------------------------------------------------------------------------
// FLOP counter. Counts matmul-family ops only (2 FLOPs per multiply-add);
// elementwise and normalization work is not instrumented. Disabled by
// default; counting never changes numeric results.
// ---------------------------------------------------------------------------
void flops_enable(bool on);
bool flops_enabled();
void flops_reset();
unsigned long long flops_count();

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes (errors name the offending shapes),
// checks its output for NaN/Inf, and records a backward rule when a tape is
// active and some input requires grad.
// ---------------------------------------------------------------------------

/// (p,q) x (q,s) -> (p,s)
Tensor matmul(const Tensor& a, const Tensor& b);
/// Shared left matrix: (p,q) x (T,q,d) -> (T,p,d), Y_t = A * X_t
Tensor matmul_left_shared(const Tensor& a, const Tensor& x);
/// Per-item transposed left: (T,q,p) x (T,q,d) -> (T,p,d), Y_t = A_t^T * X_t
Tensor bmm_transpose_left(const Tensor& a, const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// (T,rest...) + (rest...): adds s to every index along dim 0
Tensor add_bcast(const Tensor& x, const Tensor& s);
/// (T,rest...) * (rest...)
Tensor mul_bcast(const Tensor& x, const Tensor& s);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose_last_two(const Tensor& x);
/// Slice [start, start+len) along dim 0.
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
/// Slice [start, start+len) along the last dim.
Tensor slice_last_dim(const Tensor& x, int64_t start, int64_t len);
Tensor concat_last_dim(const Tensor& a, const Tensor& b);
Tensor sum_all(const Tensor& x);  // -> shape {1}

Tensor softmax_last_dim(const Tensor& x);
/// Per-row y = x / sqrt(mean(x^2) + eps) * scale, over the last dim.
Tensor rms_norm(const Tensor& x, const Tensor& scale, double eps = 1e-6);
/// Contiguous groups over the last dim: (x - mean)/sqrt(var + eps) * scale + bias.
Tensor group_norm(const Tensor& x, int64_t num_groups, const Tensor& scale,
                  const Tensor& bias, double eps = 1e-8);
/// tanh with the argument clamped to [-50, 50]; backward uses 1 - tanh^2.
Tensor safe_tanh(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form

/// Mean negative log-likelihood of targets under softmax(logits).
/// logits: (N,V), targets: N ids in [0,V).
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);
/// table: (V,d), ids: N -> (N,d)
Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids);

/// Central finite differences: g_i = (f(theta_i + h) - f(theta_i - h)) / 2h.
/// f is re-evaluated with theta mutated in place and restored afterwards.
std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           std::span<double> theta,
                                           double h = 1e-5);

namespace testing {
// Negative-control hook: when set, matmul's dA accumulation is scaled by
// 1.01 so gradient checks must fail.
extern bool corrupt_matmul_backward;
}  // namespace testing

}  // namespace vwn

#endif  // VWN_TENSOR_HPP
