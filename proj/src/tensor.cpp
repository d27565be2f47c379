#include "vwn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace vwn {

namespace {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
}

void ensure_grad(detail::Node* n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
}

// C += A(p,q) * B(q,s)
void mm_acc(const double* A, const double* B, double* C, int64_t p, int64_t q,
            int64_t s) {
  for (int64_t i = 0; i < p; ++i) {
    const double* a = A + i * q;
    double* c = C + i * s;
    for (int64_t k = 0; k < q; ++k) {
      const double aik = a[k];
      const double* b = B + k * s;
      for (int64_t j = 0; j < s; ++j) c[j] += aik * b[j];
    }
  }
}

// C(p,q) += G(p,s) * B(q,s)^T   (rows of G dotted with rows of B)
void mm_abt_acc(const double* G, const double* B, double* C, int64_t p,
                int64_t q, int64_t s) {
  for (int64_t i = 0; i < p; ++i) {
    const double* g = G + i * s;
    double* c = C + i * q;
    for (int64_t k = 0; k < q; ++k) {
      const double* b = B + k * s;
      double acc = 0.0;
      for (int64_t j = 0; j < s; ++j) acc += g[j] * b[j];
      c[k] += acc;
    }
  }
}

// C(q,s) += A(p,q)^T * G(p,s)
void mm_atb_acc(const double* A, const double* G, double* C, int64_t p,
                int64_t q, int64_t s) {
  for (int64_t i = 0; i < p; ++i) {
    const double* a = A + i * q;
    const double* g = G + i * s;
    for (int64_t k = 0; k < q; ++k) {
      const double aik = a[k];
      double* c = C + k * s;
      for (int64_t j = 0; j < s; ++j) c[j] += aik * g[j];
    }
  }
}

std::atomic<unsigned long long> g_flops{0};
std::atomic<bool> g_flops_on{false};

void count_flops(unsigned long long f) {
  if (g_flops_on.load(std::memory_order_relaxed))
    g_flops.fetch_add(f, std::memory_order_relaxed);
}

thread_local Tape* t_active_tape = nullptr;

bool tracking(std::initializer_list<const Tensor*> ins) {
  if (t_active_tape == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> value, bool rg) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = rg;
  return n;
}

}  // namespace

namespace testing {
bool corrupt_matmul_backward = false;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

Tensor wrap_node(NodePtr n) { return Tensor(std::move(n)); }

// --------------------------------------------------------------------------
// Tensor
// --------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  require(n >= 0, "zeros: negative shape " + shape_str(shape));
  return wrap_node(make_node(std::move(shape), std::vector<double>(n, 0.0),
                             requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return wrap_node(
      make_node(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  require(shape_numel(shape) == (int64_t)data.size(),
          "from_data: shape " + shape_str(shape) + " does not match " +
              std::to_string(data.size()) + " values");
  check_finite(data, "from_data");
  return wrap_node(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
  require(defined(), "use of undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim(size_t i) const {
  require(i < rank(), "dim index out of range for " + shape_str(shape()));
  return node_->shape[i];
}

int64_t Tensor::numel() const { return (int64_t)node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  require(idx.size() == rank(), "at(): rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    require(v >= 0 && v < node_->shape[i], "at(): index out of range");
    flat = flat * node_->shape[i] + v;
    ++i;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { node_->requires_grad = rg; }
bool Tensor::decay_exempt() const { return node_->decay_exempt; }
void Tensor::set_decay_exempt(bool e) { node_->decay_exempt = e; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  ensure_grad(node_.get());
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  return wrap_node(make_node(node_->shape, node_->value, node_->requires_grad));
}

// --------------------------------------------------------------------------
// Tape
// --------------------------------------------------------------------------

Tape::Tape() {
  prev_ = t_active_tape;
  t_active_tape = this;
}

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void Tape::record(std::function<void()> rule) {
  entries_.push_back(std::move(rule));
}

void Tape::backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1,
          "backward: loss must be a scalar");
  if (!loss.requires_grad())
    throw std::logic_error("backward: loss is not attached to this tape");
  if (backward_done_)
    throw std::logic_error("backward: tape already replayed");
  backward_done_ = true;
  loss.impl()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// --------------------------------------------------------------------------
// FLOP counter
// --------------------------------------------------------------------------

void flops_enable(bool on) { g_flops_on.store(on); }
bool flops_enabled() { return g_flops_on.load(); }
void flops_reset() { g_flops.store(0); }
unsigned long long flops_count() { return g_flops.load(); }

// --------------------------------------------------------------------------
// Matmul family
// --------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  const int64_t p = a.dim(0), q = a.dim(1), s = b.dim(1);
  require(b.dim(0) == q, "matmul: inner dimensions disagree: " +
                             shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<double> out((size_t)(p * s), 0.0);
  mm_acc(a.data().data(), b.data().data(), out.data(), p, q, s);
  check_finite(out, "matmul");
  count_flops(2ull * p * q * s);

  bool track = tracking({&a, &b});
  Tensor y = wrap_node(make_node({p, s}, std::move(out), track));
  if (track) {
    auto an = a.impl(), bn = b.impl(), yn = y.impl();
    Tape::active()->record([an, bn, yn, p, q, s]() {
      if (yn->grad.empty()) return;
      const double* g = yn->grad.data();
      if (an->requires_grad) {
        ensure_grad(an.get());
        if (testing::corrupt_matmul_backward) {
          std::vector<double> tmp((size_t)(p * q), 0.0);
          mm_abt_acc(g, bn->value.data(), tmp.data(), p, q, s);
          for (int64_t i = 0; i < p * q; ++i) an->grad[i] += 1.01 * tmp[i];
        } else {
          mm_abt_acc(g, bn->value.data(), an->grad.data(), p, q, s);
        }
      }
      if (bn->requires_grad) {
        ensure_grad(bn.get());
        mm_atb_acc(an->value.data(), g, bn->grad.data(), p, q, s);
      }
    });
  }
  return y;
}

Tensor matmul_left_shared(const Tensor& a, const Tensor& x) {
  require(a.rank() == 2 && x.rank() == 3,
          "matmul_left_shared: expected (p,q) and (T,q,d), got " +
              shape_str(a.shape()) + " and " + shape_str(x.shape()));
  const int64_t p = a.dim(0), q = a.dim(1);
  const int64_t T = x.dim(0), d = x.dim(2);
  require(x.dim(1) == q, "matmul_left_shared: inner dimensions disagree: " +
                             shape_str(a.shape()) + " x " +
                             shape_str(x.shape()));
  std::vector<double> out((size_t)(T * p * d), 0.0);
  for (int64_t t = 0; t < T; ++t)
    mm_acc(a.data().data(), x.data().data() + t * q * d, out.data() + t * p * d,
           p, q, d);
  check_finite(out, "matmul_left_shared");
  count_flops(2ull * T * p * q * d);

  bool track = tracking({&a, &x});
  Tensor y = wrap_node(make_node({T, p, d}, std::move(out), track));
  if (track) {
    auto an = a.impl(), xn = x.impl(), yn = y.impl();
    Tape::active()->record([an, xn, yn, p, q, d, T]() {
      if (yn->grad.empty()) return;
      for (int64_t t = 0; t < T; ++t) {
        const double* g = yn->grad.data() + t * p * d;
        if (an->requires_grad) {
          ensure_grad(an.get());
          // dA += G_t * X_t^T
          mm_abt_acc(g, xn->value.data() + t * q * d, an->grad.data(), p, q, d);
        }
        if (xn->requires_grad) {
          ensure_grad(xn.get());
          // dX_t += A^T * G_t
          mm_atb_acc(an->value.data(), g, xn->grad.data() + t * q * d, p, q, d);
        }
      }
    });
  }
  return y;
}

Tensor bmm_transpose_left(const Tensor& a, const Tensor& x) {
  require(a.rank() == 3 && x.rank() == 3,
          "bmm_transpose_left: expected (T,q,p) and (T,q,d), got " +
              shape_str(a.shape()) + " and " + shape_str(x.shape()));
  const int64_t T = a.dim(0), q = a.dim(1), p = a.dim(2), d = x.dim(2);
  require(x.dim(0) == T && x.dim(1) == q,
          "bmm_transpose_left: dimensions disagree: " + shape_str(a.shape()) +
              " x " + shape_str(x.shape()));
  std::vector<double> out((size_t)(T * p * d), 0.0);
  for (int64_t t = 0; t < T; ++t)
    // Y_t = A_t^T X_t
    mm_atb_acc(a.data().data() + t * q * p, x.data().data() + t * q * d,
               out.data() + t * p * d, q, p, d);
  check_finite(out, "bmm_transpose_left");
  count_flops(2ull * T * p * q * d);

  bool track = tracking({&a, &x});
  Tensor y = wrap_node(make_node({T, p, d}, std::move(out), track));
  if (track) {
    auto an = a.impl(), xn = x.impl(), yn = y.impl();
    Tape::active()->record([an, xn, yn, p, q, d, T]() {
      if (yn->grad.empty()) return;
      for (int64_t t = 0; t < T; ++t) {
        const double* g = yn->grad.data() + t * p * d;
        if (an->requires_grad) {
          ensure_grad(an.get());
          // dA_t += X_t * G_t^T
          mm_abt_acc(xn->value.data() + t * q * d, g,
                     an->grad.data() + t * q * p, q, p, d);
        }
        if (xn->requires_grad) {
          ensure_grad(xn.get());
          // dX_t += A_t * G_t
          mm_acc(an->value.data() + t * q * p, g, xn->grad.data() + t * q * d,
                 q, p, d);
        }
      }
    });
  }
  return y;
}

// --------------------------------------------------------------------------
// Elementwise
// --------------------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shapes disagree: " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] += bd[i];
  check_finite(out, "add");

  bool track = tracking({&a, &b});
  Tensor y = wrap_node(make_node(a.shape(), std::move(out), track));
  if (track) {
    auto an = a.impl(), bn = b.impl(), yn = y.impl();
    Tape::active()->record([an, bn, yn]() {
      if (yn->grad.empty()) return;
      for (auto* n : {an.get(), bn.get()}) {
        if (!n->requires_grad) continue;
        ensure_grad(n);
        for (size_t i = 0; i < yn->grad.size(); ++i) n->grad[i] += yn->grad[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] -= bd[i];
  check_finite(out, "sub");

  bool track = tracking({&a, &b});
  Tensor y = wrap_node(make_node(a.shape(), std::move(out), track));
  if (track) {
    auto an = a.impl(), bn = b.impl(), yn = y.impl();
    Tape::active()->record([an, bn, yn]() {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        ensure_grad(an.get());
        for (size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn.get());
        for (size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i] -= yn->grad[i];
      }
    });
  }
  return y;
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "elementwise_mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] *= bd[i];
  check_finite(out, "elementwise_mul");

  bool track = tracking({&a, &b});
  Tensor y = wrap_node(make_node(a.shape(), std::move(out), track));
  if (track) {
    auto an = a.impl(), bn = b.impl(), yn = y.impl();
    Tape::active()->record([an, bn, yn]() {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        ensure_grad(an.get());
        for (size_t i = 0; i < yn->grad.size(); ++i)
          an->grad[i] += yn->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn.get());
        for (size_t i = 0; i < yn->grad.size(); ++i)
          bn->grad[i] += yn->grad[i] * an->value[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  check_finite(out, "scale");

  bool track = tracking({&a});
  Tensor y = wrap_node(make_node(a.shape(), std::move(out), track));
  if (track) {
    auto an = a.impl(), yn = y.impl();
    Tape::active()->record([an, yn, c]() {
      if (yn->grad.empty() || !an->requires_grad) return;
      ensure_grad(an.get());
      for (size_t i = 0; i < yn->grad.size(); ++i)
        an->grad[i] += c * yn->grad[i];
    });
  }
  return y;
}

namespace {

// Validates x = (T, rest...) against s = (rest...); returns rest numel.
int64_t bcast_inner(const Tensor& x, const Tensor& s, const char* op) {
  require(x.rank() >= 2, std::string(op) + ": lhs must have rank >= 2, got " +
                             shape_str(x.shape()));
  Shape rest(x.shape().begin() + 1, x.shape().end());
  require(rest == s.shape(), std::string(op) + ": trailing dims of " +
                                 shape_str(x.shape()) + " do not match " +
                                 shape_str(s.shape()));
  return s.numel();
}

}  // namespace

Tensor add_bcast(const Tensor& x, const Tensor& s) {
  const int64_t inner = bcast_inner(x, s, "add_bcast");
  const int64_t T = x.dim(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto sd = s.data();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t i = 0; i < inner; ++i) out[t * inner + i] += sd[i];
  check_finite(out, "add_bcast");

  bool track = tracking({&x, &s});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), sn = s.impl(), yn = y.impl();
    Tape::active()->record([xn, sn, yn, T, inner]() {
      if (yn->grad.empty()) return;
      if (xn->requires_grad) {
        ensure_grad(xn.get());
        for (size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
      }
      if (sn->requires_grad) {
        ensure_grad(sn.get());
        for (int64_t t = 0; t < T; ++t)
          for (int64_t i = 0; i < inner; ++i)
            sn->grad[i] += yn->grad[t * inner + i];
      }
    });
  }
  return y;
}

Tensor mul_bcast(const Tensor& x, const Tensor& s) {
  const int64_t inner = bcast_inner(x, s, "mul_bcast");
  const int64_t T = x.dim(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto sd = s.data();
  for (int64_t t = 0; t < T; ++t)
    for (int64_t i = 0; i < inner; ++i) out[t * inner + i] *= sd[i];
  check_finite(out, "mul_bcast");

  bool track = tracking({&x, &s});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), sn = s.impl(), yn = y.impl();
    Tape::active()->record([xn, sn, yn, T, inner]() {
      if (yn->grad.empty()) return;
      if (xn->requires_grad) {
        ensure_grad(xn.get());
        for (int64_t t = 0; t < T; ++t)
          for (int64_t i = 0; i < inner; ++i)
            xn->grad[t * inner + i] += yn->grad[t * inner + i] * sn->value[i];
      }
      if (sn->requires_grad) {
        ensure_grad(sn.get());
        for (int64_t t = 0; t < T; ++t)
          for (int64_t i = 0; i < inner; ++i)
            sn->grad[i] += yn->grad[t * inner + i] * xn->value[t * inner + i];
      }
    });
  }
  return y;
}

// --------------------------------------------------------------------------
// Shape ops
// --------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " +
              shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(std::move(shape), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    });
  }
  return y;
}

Tensor transpose_last_two(const Tensor& x) {
  require(x.rank() >= 2, "transpose_last_two: rank must be >= 2, got " +
                             shape_str(x.shape()));
  const int64_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  const int64_t batch = x.numel() / (r * c);
  Shape out_shape = x.shape();
  std::swap(out_shape[x.rank() - 2], out_shape[x.rank() - 1]);

  std::vector<double> out((size_t)x.numel());
  const auto xd = x.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j)
        out[b * r * c + j * r + i] = xd[b * r * c + i * c + j];

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(std::move(out_shape), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn, batch, r, c]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            xn->grad[b * r * c + i * c + j] += yn->grad[b * r * c + j * r + i];
    });
  }
  return y;
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
  require(x.rank() >= 1, "slice_rows: rank must be >= 1");
  require(start >= 0 && len >= 0 && start + len <= x.dim(0),
          "slice_rows: range [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of bounds for " +
              shape_str(x.shape()));
  const int64_t inner = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = len;
  std::vector<double> out(x.data().begin() + start * inner,
                          x.data().begin() + (start + len) * inner);

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(std::move(out_shape), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn, start, inner]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (size_t i = 0; i < yn->grad.size(); ++i)
        xn->grad[start * inner + i] += yn->grad[i];
    });
  }
  return y;
}

Tensor slice_last_dim(const Tensor& x, int64_t start, int64_t len) {
  require(x.rank() >= 1, "slice_last_dim: rank must be >= 1");
  const int64_t last = x.dim(x.rank() - 1);
  require(start >= 0 && len >= 1 && start + len <= last,
          "slice_last_dim: range [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of bounds for " +
              shape_str(x.shape()));
  const int64_t outer = x.numel() / last;
  Shape out_shape = x.shape();
  out_shape[x.rank() - 1] = len;

  std::vector<double> out((size_t)(outer * len));
  const auto xd = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < len; ++i)
      out[o * len + i] = xd[o * last + start + i];

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(std::move(out_shape), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn, outer, last, start, len]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < len; ++i)
          xn->grad[o * last + start + i] += yn->grad[o * len + i];
    });
  }
  return y;
}

Tensor concat_last_dim(const Tensor& a, const Tensor& b) {
  require(a.rank() == b.rank() && a.rank() >= 1,
          "concat_last_dim: rank mismatch: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  for (size_t i = 0; i + 1 < a.rank(); ++i)
    require(a.dim(i) == b.dim(i), "concat_last_dim: leading dims disagree: " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  const int64_t la = a.dim(a.rank() - 1), lb = b.dim(b.rank() - 1);
  const int64_t outer = a.numel() / la;
  Shape out_shape = a.shape();
  out_shape[a.rank() - 1] = la + lb;

  std::vector<double> out((size_t)(outer * (la + lb)));
  const auto ad = a.data(), bd = b.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < la; ++i) out[o * (la + lb) + i] = ad[o * la + i];
    for (int64_t i = 0; i < lb; ++i)
      out[o * (la + lb) + la + i] = bd[o * lb + i];
  }

  bool track = tracking({&a, &b});
  Tensor y = wrap_node(make_node(std::move(out_shape), std::move(out), track));
  if (track) {
    auto an = a.impl(), bn = b.impl(), yn = y.impl();
    Tape::active()->record([an, bn, yn, outer, la, lb]() {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        ensure_grad(an.get());
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < la; ++i)
            an->grad[o * la + i] += yn->grad[o * (la + lb) + i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn.get());
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < lb; ++i)
            bn->grad[o * lb + i] += yn->grad[o * (la + lb) + la + i];
      }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  require(std::isfinite(acc), "non-finite value produced by sum_all");

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node({1}, {acc}, track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      const double g = yn->grad[0];
      for (double& v : xn->grad) v += g;
    });
  }
  return y;
}

// --------------------------------------------------------------------------
// Nonlinearities and normalizations
// --------------------------------------------------------------------------

Tensor softmax_last_dim(const Tensor& x) {
  require(x.rank() >= 1, "softmax_last_dim: rank must be >= 1");
  const int64_t d = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / d;
  std::vector<double> out((size_t)x.numel());
  const auto xd = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = xd.data() + r * d;
    double* yi = out.data() + r * d;
    double m = xi[0];
    for (int64_t i = 1; i < d; ++i) m = std::max(m, xi[i]);
    double z = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      yi[i] = std::exp(xi[i] - m);
      z += yi[i];
    }
    for (int64_t i = 0; i < d; ++i) yi[i] /= z;
  }
  check_finite(out, "softmax_last_dim");

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn, rows, d]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (int64_t r = 0; r < rows; ++r) {
        const double* yv = yn->value.data() + r * d;
        const double* g = yn->grad.data() + r * d;
        double dot = 0.0;
        for (int64_t i = 0; i < d; ++i) dot += g[i] * yv[i];
        double* gx = xn->grad.data() + r * d;
        for (int64_t i = 0; i < d; ++i) gx[i] += yv[i] * (g[i] - dot);
      }
    });
  }
  return y;
}

Tensor rms_norm(const Tensor& x, const Tensor& sc, double eps) {
  require(x.rank() >= 1, "rms_norm: rank must be >= 1");
  const int64_t d = x.dim(x.rank() - 1);
  require(sc.rank() == 1 && sc.dim(0) == d,
          "rms_norm: scale shape " + shape_str(sc.shape()) +
              " does not match feature dim of " + shape_str(x.shape()));
  require(eps > 0, "rms_norm: eps must be positive");
  const int64_t rows = x.numel() / d;

  std::vector<double> out((size_t)x.numel());
  auto inv_rms = std::make_shared<std::vector<double>>((size_t)rows);
  const auto xd = x.data();
  const auto sd = sc.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xi = xd.data() + r * d;
    double ms = 0.0;
    for (int64_t i = 0; i < d; ++i) ms += xi[i] * xi[i];
    ms /= (double)d;
    const double inv = 1.0 / std::sqrt(ms + eps);
    (*inv_rms)[r] = inv;
    double* yi = out.data() + r * d;
    for (int64_t i = 0; i < d; ++i) yi[i] = xi[i] * inv * sd[i];
  }
  check_finite(out, "rms_norm");

  bool track = tracking({&x, &sc});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), sn = sc.impl(), yn = y.impl();
    Tape::active()->record([xn, sn, yn, inv_rms, rows, d]() {
      if (yn->grad.empty()) return;
      for (int64_t r = 0; r < rows; ++r) {
        const double* xi = xn->value.data() + r * d;
        const double* g = yn->grad.data() + r * d;
        const double inv = (*inv_rms)[r];
        if (sn->requires_grad) {
          ensure_grad(sn.get());
          for (int64_t i = 0; i < d; ++i)
            sn->grad[i] += g[i] * xi[i] * inv;
        }
        if (xn->requires_grad) {
          ensure_grad(xn.get());
          // d/dx_k [x_i*s_i*inv] = s_i*inv*delta_ik - s_i*x_i*x_k*inv^3/d
          double dot = 0.0;
          for (int64_t i = 0; i < d; ++i) dot += g[i] * sn->value[i] * xi[i];
          const double coef = dot * inv * inv * inv / (double)d;
          double* gx = xn->grad.data() + r * d;
          for (int64_t i = 0; i < d; ++i)
            gx[i] += g[i] * sn->value[i] * inv - xi[i] * coef;
        }
      }
    });
  }
  return y;
}

Tensor group_norm(const Tensor& x, int64_t num_groups, const Tensor& sc,
                  const Tensor& bias, double eps) {
  require(x.rank() >= 1, "group_norm: rank must be >= 1");
  const int64_t d = x.dim(x.rank() - 1);
  require(num_groups >= 1 && d % num_groups == 0,
          "group_norm: feature dim " + std::to_string(d) +
              " not divisible by num_groups " + std::to_string(num_groups));
  require(sc.rank() == 1 && sc.dim(0) == d && bias.rank() == 1 &&
              bias.dim(0) == d,
          "group_norm: affine shapes " + shape_str(sc.shape()) + "/" +
              shape_str(bias.shape()) + " do not match feature dim of " +
              shape_str(x.shape()));
  const int64_t gs = d / num_groups;
  const int64_t rows = x.numel() / d;

  std::vector<double> out((size_t)x.numel());
  auto stats = std::make_shared<std::vector<double>>((size_t)(rows * num_groups * 2));
  const auto xd = x.data();
  const auto sd = sc.data();
  const auto bd = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < num_groups; ++g) {
      const double* xi = xd.data() + r * d + g * gs;
      double mean = 0.0;
      for (int64_t i = 0; i < gs; ++i) mean += xi[i];
      mean /= (double)gs;
      double var = 0.0;
      for (int64_t i = 0; i < gs; ++i) var += (xi[i] - mean) * (xi[i] - mean);
      var /= (double)gs;
      const double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[(r * num_groups + g) * 2] = mean;
      (*stats)[(r * num_groups + g) * 2 + 1] = inv;
      double* yi = out.data() + r * d + g * gs;
      for (int64_t i = 0; i < gs; ++i) {
        const double xhat = (xi[i] - mean) * inv;
        yi[i] = xhat * sd[g * gs + i] + bd[g * gs + i];
      }
    }
  }
  check_finite(out, "group_norm");

  bool track = tracking({&x, &sc, &bias});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), sn = sc.impl(), bn = bias.impl(), yn = y.impl();
    Tape::active()->record([xn, sn, bn, yn, stats, rows, num_groups, gs, d]() {
      if (yn->grad.empty()) return;
      std::vector<double> xhat((size_t)gs), gy((size_t)gs);
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t g = 0; g < num_groups; ++g) {
          const double mean = (*stats)[(r * num_groups + g) * 2];
          const double inv = (*stats)[(r * num_groups + g) * 2 + 1];
          const double* xi = xn->value.data() + r * d + g * gs;
          const double* gi = yn->grad.data() + r * d + g * gs;
          for (int64_t i = 0; i < gs; ++i) {
            xhat[i] = (xi[i] - mean) * inv;
            gy[i] = gi[i] * sn->value[g * gs + i];
          }
          if (sn->requires_grad) {
            ensure_grad(sn.get());
            for (int64_t i = 0; i < gs; ++i)
              sn->grad[g * gs + i] += gi[i] * xhat[i];
          }
          if (bn->requires_grad) {
            ensure_grad(bn.get());
            for (int64_t i = 0; i < gs; ++i) bn->grad[g * gs + i] += gi[i];
          }
          if (xn->requires_grad) {
            ensure_grad(xn.get());
            double mg = 0.0, mgx = 0.0;
            for (int64_t i = 0; i < gs; ++i) {
              mg += gy[i];
              mgx += gy[i] * xhat[i];
            }
            mg /= (double)gs;
            mgx /= (double)gs;
            double* gx = xn->grad.data() + r * d + g * gs;
            for (int64_t i = 0; i < gs; ++i)
              gx[i] += inv * (gy[i] - mg - xhat[i] * mgx);
          }
        }
      }
    });
  }
  return y;
}

Tensor safe_tanh(const Tensor& x) {
  std::vector<double> out((size_t)x.numel());
  const auto xd = x.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = std::tanh(std::clamp(xd[i], -50.0, 50.0));
  check_finite(out, "safe_tanh");

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (size_t i = 0; i < yn->grad.size(); ++i) {
        const double t = yn->value[i];
        xn->grad[i] += yn->grad[i] * (1.0 - t * t);
      }
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<double> out((size_t)x.numel());
  const auto xd = x.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
  check_finite(out, "gelu");

  bool track = tracking({&x});
  Tensor y = wrap_node(make_node(x.shape(), std::move(out), track));
  if (track) {
    auto xn = x.impl(), yn = y.impl();
    Tape::active()->record([xn, yn]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      for (size_t i = 0; i < yn->grad.size(); ++i) {
        const double v = xn->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        xn->grad[i] += yn->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

// --------------------------------------------------------------------------
// Losses and lookup
// --------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  require(logits.rank() == 2, "cross_entropy: logits must be (N,V), got " +
                                  shape_str(logits.shape()));
  const int64_t N = logits.dim(0), V = logits.dim(1);
  require((int64_t)targets.size() == N,
          "cross_entropy: " + std::to_string(targets.size()) +
              " targets for " + std::to_string(N) + " rows");
  for (int64_t t : targets)
    require(t >= 0 && t < V, "cross_entropy: target id " + std::to_string(t) +
                                 " out of range [0," + std::to_string(V) + ")");

  auto probs = std::make_shared<std::vector<double>>((size_t)(N * V));
  const auto xd = logits.data();
  double loss = 0.0;
  for (int64_t r = 0; r < N; ++r) {
    const double* xi = xd.data() + r * V;
    double m = xi[0];
    for (int64_t i = 1; i < V; ++i) m = std::max(m, xi[i]);
    double z = 0.0;
    double* pi = probs->data() + r * V;
    for (int64_t i = 0; i < V; ++i) {
      pi[i] = std::exp(xi[i] - m);
      z += pi[i];
    }
    for (int64_t i = 0; i < V; ++i) pi[i] /= z;
    loss -= (xi[targets[r]] - m) - std::log(z);
  }
  loss /= (double)N;
  require(std::isfinite(loss), "non-finite value produced by cross_entropy");

  bool track = tracking({&logits});
  Tensor y = wrap_node(make_node({1}, {loss}, track));
  if (track) {
    auto xn = logits.impl(), yn = y.impl();
    auto tg = targets;
    Tape::active()->record([xn, yn, probs, tg, N, V]() {
      if (yn->grad.empty() || !xn->requires_grad) return;
      ensure_grad(xn.get());
      const double g = yn->grad[0] / (double)N;
      for (int64_t r = 0; r < N; ++r) {
        const double* pi = probs->data() + r * V;
        double* gx = xn->grad.data() + r * V;
        for (int64_t i = 0; i < V; ++i) gx[i] += g * pi[i];
        gx[tg[r]] -= g;
      }
    });
  }
  return y;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids) {
  require(table.rank() == 2, "embedding_lookup: table must be (V,d), got " +
                                 shape_str(table.shape()));
  const int64_t V = table.dim(0), d = table.dim(1);
  const int64_t N = (int64_t)ids.size();
  for (int64_t id : ids)
    require(id >= 0 && id < V, "embedding_lookup: id " + std::to_string(id) +
                                   " out of range [0," + std::to_string(V) +
                                   ")");
  std::vector<double> out((size_t)(N * d));
  const auto td = table.data();
  for (int64_t r = 0; r < N; ++r)
    std::copy_n(td.data() + ids[r] * d, d, out.data() + r * d);

  bool track = tracking({&table});
  Tensor y = wrap_node(make_node({N, d}, std::move(out), track));
  if (track) {
    auto tn = table.impl(), yn = y.impl();
    auto idv = ids;
    Tape::active()->record([tn, yn, idv, d, N]() {
      if (yn->grad.empty() || !tn->requires_grad) return;
      ensure_grad(tn.get());
      for (int64_t r = 0; r < N; ++r) {
        const double* g = yn->grad.data() + r * d;
        double* gt = tn->grad.data() + idv[r] * d;
        for (int64_t i = 0; i < d; ++i) gt[i] += g[i];
      }
    });
  }
  return y;
}

// --------------------------------------------------------------------------
// Finite differences
// --------------------------------------------------------------------------

std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           std::span<double> theta, double h) {
  std::vector<double> g(theta.size());
  for (size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double fp = f();
    theta[i] = orig - h;
    const double fm = f();
    theta[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace vwn
