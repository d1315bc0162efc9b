#include "tsa/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "tsa/kernels.hpp"

namespace tsa {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void check_shape(const Shape& s) {
  for (int e : s)
    if (e <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(s));
}

std::atomic<uint64_t> g_tape_counter{1};
thread_local GradTape* g_active_tape = nullptr;

}  // namespace

// Tape identity is tracked by a never-reused id rather than the pointer, so a
// tensor surviving its tape can never be mistaken for part of a newer one.
struct OpAccess {
  using ImplPtr = std::shared_ptr<Tensor::Impl>;
  static ImplPtr& impl(Tensor& t) { return t.impl_; }
  static const ImplPtr& impl(const Tensor& t) { return t.impl_; }
  static bool should_record(const std::vector<const Tensor*>& ins);
  static void record(Tensor& out, const std::vector<const Tensor*>& ins,
                     std::function<void()> fn);
};

GradTape::GradTape() : id_(g_tape_counter.fetch_add(1)) {}

TapeScope::TapeScope(GradTape& tape) {
  prev_ = g_active_tape;
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

GradTape* active_tape() { return g_active_tape; }

const std::vector<int>& GradTape::node_parents(int node) const {
  if (node < 0 || node >= num_nodes())
    throw std::invalid_argument("tape node out of range");
  return nodes_[static_cast<size_t>(node)].parents;
}

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  auto& li = *OpAccess::impl(loss);
  if (backward_done_) throw std::runtime_error("backward already ran on this tape");
  if (li.node < 0 || li.tape_id != id_)
    throw std::invalid_argument("backward target was not recorded on this tape");
  if (shape_numel(li.shape) != 1)
    throw std::invalid_argument("backward target must be scalar, got " +
                                shape_str(li.shape));
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{li.node};
  reachable[static_cast<size_t>(li.node)] = 1;
  while (!stack.empty()) {
    int n = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<size_t>(n)].parents)
      if (!reachable[static_cast<size_t>(p)]) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
  }
  li.grad[0] = 1;
  for (int i = num_nodes() - 1; i >= 0; --i)
    if (reachable[static_cast<size_t>(i)]) nodes_[static_cast<size_t>(i)].backward_fn();
  backward_done_ = true;
}

bool OpAccess::should_record(const std::vector<const Tensor*>& ins) {
  if (!g_active_tape) return false;
  for (auto* t : ins) {
    const auto& i = *impl(*t);
    if (i.tape_id != 0 && i.tape_id != g_active_tape->id_)
      throw std::runtime_error("op mixes tensors from different tapes");
  }
  for (auto* t : ins)
    if (impl(*t)->requires_grad) return true;
  return false;
}

void OpAccess::record(Tensor& out, const std::vector<const Tensor*>& ins,
                      std::function<void()> fn) {
  GradTape* t = g_active_tape;
  if (t->backward_done_)
    throw std::runtime_error("recording on a tape whose backward already ran");
  auto& oi = *impl(out);
  oi.requires_grad = true;
  oi.grad.assign(static_cast<size_t>(shape_numel(oi.shape)), 0);
  oi.tape_id = t->id_;
  oi.node = t->num_nodes();
  GradTape::Node node;
  for (auto* in : ins) {
    const auto& ii = *impl(*in);
    if (ii.tape_id == t->id_ && ii.node >= 0) node.parents.push_back(ii.node);
  }
  node.backward_fn = std::move(fn);
  t->nodes_.push_back(std::move(node));
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  check_shape(s);
  auto impl = std::make_shared<Impl>();
  impl->shape = s;
  impl->data.assign(static_cast<size_t>(shape_numel(s)), 0);
  Tensor t(std::move(impl));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::full(const Shape& s, real v, bool requires_grad) {
  Tensor t = zeros(s, requires_grad);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::from(const Shape& s, std::vector<real> values,
                    bool requires_grad) {
  check_shape(s);
  if (static_cast<int64_t>(values.size()) != shape_numel(s))
    throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(s));
  auto impl = std::make_shared<Impl>();
  impl->shape = s;
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(real v) { return from({1}, {v}); }

static void ensure_defined(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("undefined tensor");
}

const Shape& Tensor::shape() const {
  ensure_defined(*this);
  return impl_->shape;
}

int Tensor::dim(int i) const {
  const Shape& s = shape();
  if (i < 0 || i >= static_cast<int>(s.size()))
    throw std::invalid_argument("dim index out of range");
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::size() const { return shape_numel(shape()); }

std::vector<real>& Tensor::data() {
  ensure_defined(*this);
  return impl_->data;
}

const std::vector<real>& Tensor::data() const {
  ensure_defined(*this);
  return impl_->data;
}

real Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const {
  ensure_defined(*this);
  return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool on) {
  ensure_defined(*this);
  impl_->requires_grad = on;
  if (on)
    impl_->grad.assign(impl_->data.size(), 0);
  else
    impl_->grad.clear();
}

std::vector<real>& Tensor::grad() {
  ensure_defined(*this);
  if (!impl_->requires_grad)
    throw std::runtime_error("grad() on tensor without requires_grad");
  return impl_->grad;
}

const std::vector<real>& Tensor::grad() const {
  return const_cast<Tensor*>(this)->grad();
}

void Tensor::zero_grad() {
  if (requires_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0);
}

int Tensor::tape_node() const {
  ensure_defined(*this);
  return impl_->node;
}

Tensor Tensor::clone() const {
  ensure_defined(*this);
  Tensor t = Tensor::from(impl_->shape, impl_->data);
  if (impl_->requires_grad) t.set_requires_grad(true);
  return t;
}

// ---- op helpers -------------------------------------------------------------

namespace {

using ImplPtr = OpAccess::ImplPtr;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_rank(const Tensor& t, size_t rank, const char* op) {
  if (t.shape().size() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " + shape_str(t.shape()));
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (OpAccess::should_record({&a, &b})) {
    auto ai = OpAccess::impl(a), bi = OpAccess::impl(b), oi = OpAccess::impl(out);
    OpAccess::record(out, {&a, &b}, [ai, bi, oi] {
      if (ai->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
      if (bi->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (OpAccess::should_record({&a, &b})) {
    auto ai = OpAccess::impl(a), bi = OpAccess::impl(b), oi = OpAccess::impl(out);
    OpAccess::record(out, {&a, &b}, [ai, bi, oi] {
      if (ai->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
      if (bi->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (OpAccess::should_record({&a, &b})) {
    auto ai = OpAccess::impl(a), bi = OpAccess::impl(b), oi = OpAccess::impl(out);
    OpAccess::record(out, {&a, &b}, [ai, bi, oi] {
      if (ai->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i)
          ai->grad[i] += oi->grad[i] * bi->data[i];
      if (bi->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i)
          bi->grad[i] += oi->grad[i] * ai->data[i];
    });
  }
  return out;
}

Tensor scalar_mul(const Tensor& a, real v) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * v;
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi, v] {
      for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * v;
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner extents differ, " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data());
  if (OpAccess::should_record({&a, &b})) {
    auto ai = OpAccess::impl(a), bi = OpAccess::impl(b), oi = OpAccess::impl(out);
    OpAccess::record(out, {&a, &b}, [ai, bi, oi, m, n, k] {
      if (ai->requires_grad)
        kernels::gemm_nt_acc(m, k, n, oi->grad.data(), bi->data.data(),
                             ai->grad.data());
      if (bi->requires_grad) {
        std::vector<real> at(static_cast<size_t>(k) * m);
        kernels::transpose(m, k, ai->data.data(), at.data());
        kernels::gemm_nn_acc(k, n, m, at.data(), oi->grad.data(),
                             bi->grad.data());
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_rank(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  kernels::transpose(m, n, a.data().data(), out.data().data());
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi, m, n] {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ai->grad[static_cast<size_t>(i) * n + j] +=
              oi->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, const Shape& s) {
  check_shape(s);
  if (shape_numel(s) != a.size())
    throw std::invalid_argument("reshape: element count mismatch " +
                                shape_str(a.shape()) + " -> " + shape_str(s));
  Tensor out = Tensor::from(s, a.data());
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi] {
      for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0 ? av[i] : 0;
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi] {
      for (size_t i = 0; i < oi->grad.size(); ++i)
        if (ai->data[i] > 0) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  real acc = 0;
  for (real v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi] {
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const real inv = real(1) / static_cast<real>(a.size());
  real acc = 0;
  for (real v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc * inv);
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi, inv] {
      for (size_t i = 0; i < ai->grad.size(); ++i)
        ai->grad[i] += oi->grad[0] * inv;
    });
  }
  return out;
}

// ---- network ops ------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
  check_rank(x, 4, "conv2d");
  check_rank(k, 4, "conv2d");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
  if (k.dim(1) != x.dim(1))
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.dim(1)) +
                                " channels but kernel expects " +
                                std::to_string(k.dim(1)));
  if (k.dim(2) > x.dim(2) + 2 * pad || k.dim(3) > x.dim(3) + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  auto g = kernels::ConvGeom::make(x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                                   k.dim(0), k.dim(2), k.dim(3), stride, pad);
  if (g.oh < 1 || g.ow < 1)
    throw std::invalid_argument("conv2d: empty output extent");
  Tensor out = Tensor::zeros({g.n, g.cout, g.oh, g.ow});
  kernels::conv2d_forward(g, x.data().data(), k.data().data(), out.data().data());
  if (OpAccess::should_record({&x, &k})) {
    auto xi = OpAccess::impl(x), ki = OpAccess::impl(k), oi = OpAccess::impl(out);
    OpAccess::record(out, {&x, &k}, [xi, ki, oi, g] {
      if (xi->requires_grad)
        kernels::conv2d_backward_input(g, oi->grad.data(), ki->data.data(),
                                       xi->grad.data());
      if (ki->requires_grad)
        kernels::conv2d_backward_kernel(g, oi->grad.data(), xi->data.data(),
                                        ki->grad.data());
    });
  }
  return out;
}

static void check_bn_args(const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, const Tensor& m, const Tensor& v) {
  check_rank(x, 4, "batchnorm");
  const int c = x.dim(1);
  for (const Tensor* t : {&gamma, &beta, &m, &v})
    if (t->size() != c)
      throw std::invalid_argument("batchnorm: per-channel tensor of size " +
                                  std::to_string(t->size()) + " for " +
                                  std::to_string(c) + " channels");
}

Tensor batchnorm_inference(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, const Tensor& running_mean,
                           const Tensor& running_var, real eps) {
  check_bn_args(x, gamma, beta, running_mean, running_var);
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<real> inv_std(static_cast<size_t>(c));
  for (int j = 0; j < c; ++j)
    inv_std[static_cast<size_t>(j)] =
        real(1) / std::sqrt(running_var.data()[static_cast<size_t>(j)] + eps);
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const real g = gamma.data()[static_cast<size_t>(j)];
      const real b = beta.data()[static_cast<size_t>(j)];
      const real mu = running_mean.data()[static_cast<size_t>(j)];
      const real is = inv_std[static_cast<size_t>(j)];
      const size_t base = (static_cast<size_t>(i) * c + j) * hw;
      for (size_t p = 0; p < hw; ++p)
        ov[base + p] = (xv[base + p] - mu) * is * g + b;
    }
  if (OpAccess::should_record({&x, &gamma, &beta})) {
    auto xi = OpAccess::impl(x), gi = OpAccess::impl(gamma),
         bi = OpAccess::impl(beta), oi = OpAccess::impl(out);
    auto mi = OpAccess::impl(running_mean);
    OpAccess::record(out, {&x, &gamma, &beta},
                     [xi, gi, bi, oi, mi, inv_std, n, c, hw] {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const size_t sj = static_cast<size_t>(j);
          const real g = gi->data[sj];
          const real mu = mi->data[sj];
          const real is = inv_std[sj];
          const size_t base = (static_cast<size_t>(i) * c + j) * hw;
          for (size_t p = 0; p < hw; ++p) {
            const real go = oi->grad[base + p];
            if (xi->requires_grad) xi->grad[base + p] += go * g * is;
            if (gi->requires_grad)
              gi->grad[sj] += go * (xi->data[base + p] - mu) * is;
            if (bi->requires_grad) bi->grad[sj] += go;
          }
        }
    });
  }
  return out;
}

Tensor batchnorm_training(const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, real momentum, real eps) {
  check_bn_args(x, gamma, beta, running_mean, running_var);
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  const size_t m = static_cast<size_t>(n) * hw;
  std::vector<real> mu(static_cast<size_t>(c), 0), var(static_cast<size_t>(c), 0);
  const auto& xv = x.data();
  for (int j = 0; j < c; ++j) {
    real acc = 0;
    for (int i = 0; i < n; ++i) {
      const size_t base = (static_cast<size_t>(i) * c + j) * hw;
      for (size_t p = 0; p < hw; ++p) acc += xv[base + p];
    }
    mu[static_cast<size_t>(j)] = acc / static_cast<real>(m);
  }
  for (int j = 0; j < c; ++j) {
    real acc = 0;
    const real mj = mu[static_cast<size_t>(j)];
    for (int i = 0; i < n; ++i) {
      const size_t base = (static_cast<size_t>(i) * c + j) * hw;
      for (size_t p = 0; p < hw; ++p) {
        const real d = xv[base + p] - mj;
        acc += d * d;
      }
    }
    var[static_cast<size_t>(j)] = acc / static_cast<real>(m);
  }
  for (int j = 0; j < c; ++j) {
    const size_t sj = static_cast<size_t>(j);
    running_mean.data()[sj] =
        (real(1) - momentum) * running_mean.data()[sj] + momentum * mu[sj];
    running_var.data()[sj] =
        (real(1) - momentum) * running_var.data()[sj] + momentum * var[sj];
  }
  Tensor out = Tensor::zeros(x.shape());
  std::vector<real> inv_std(static_cast<size_t>(c));
  for (int j = 0; j < c; ++j)
    inv_std[static_cast<size_t>(j)] =
        real(1) / std::sqrt(var[static_cast<size_t>(j)] + eps);
  auto& ov = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const size_t sj = static_cast<size_t>(j);
      const size_t base = (static_cast<size_t>(i) * c + j) * hw;
      for (size_t p = 0; p < hw; ++p)
        ov[base + p] =
            (xv[base + p] - mu[sj]) * inv_std[sj] * gamma.data()[sj] +
            beta.data()[sj];
    }
  if (OpAccess::should_record({&x, &gamma, &beta})) {
    auto xi = OpAccess::impl(x), gi = OpAccess::impl(gamma),
         bi = OpAccess::impl(beta), oi = OpAccess::impl(out);
    OpAccess::record(out, {&x, &gamma, &beta},
                     [xi, gi, bi, oi, mu, inv_std, n, c, hw, m] {
      const real rm = real(1) / static_cast<real>(m);
      for (int j = 0; j < c; ++j) {
        const size_t sj = static_cast<size_t>(j);
        const real is = inv_std[sj];
        const real g = gi->data[sj];
        real sum_go = 0, sum_go_xhat = 0;
        for (int i = 0; i < n; ++i) {
          const size_t base = (static_cast<size_t>(i) * c + j) * hw;
          for (size_t p = 0; p < hw; ++p) {
            const real go = oi->grad[base + p];
            sum_go += go;
            sum_go_xhat += go * (xi->data[base + p] - mu[sj]) * is;
          }
        }
        if (gi->requires_grad) gi->grad[sj] += sum_go_xhat;
        if (bi->requires_grad) bi->grad[sj] += sum_go;
        if (xi->requires_grad) {
          // dx = (g*is/m) * (m*go - sum_go - xhat * sum_go_xhat)
          for (int i = 0; i < n; ++i) {
            const size_t base = (static_cast<size_t>(i) * c + j) * hw;
            for (size_t p = 0; p < hw; ++p) {
              const real go = oi->grad[base + p];
              const real xhat = (xi->data[base + p] - mu[sj]) * is;
              xi->grad[base + p] +=
                  g * is * rm *
                  (static_cast<real>(m) * go - sum_go - xhat * sum_go_xhat);
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  check_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  const real inv = real(1) / static_cast<real>(hw);
  Tensor out = Tensor::zeros({n, c});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const size_t base = (static_cast<size_t>(i) * c + j) * hw;
      real acc = 0;
      for (size_t p = 0; p < hw; ++p) acc += xv[base + p];
      ov[static_cast<size_t>(i) * c + j] = acc * inv;
    }
  if (OpAccess::should_record({&x})) {
    auto xi = OpAccess::impl(x);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&x}, [xi, oi, n, c, hw, inv] {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const real go = oi->grad[static_cast<size_t>(i) * c + j] * inv;
          const size_t base = (static_cast<size_t>(i) * c + j) * hw;
          for (size_t p = 0; p < hw; ++p) xi->grad[base + p] += go;
        }
    });
  }
  return out;
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  check_rank(x, 4, "channel_scale");
  if (s.size() != x.dim(1))
    throw std::invalid_argument("channel_scale: scale size " +
                                std::to_string(s.size()) + " for " +
                                std::to_string(x.dim(1)) + " channels");
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const real sv = s.data()[static_cast<size_t>(j)];
      const size_t base = (static_cast<size_t>(i) * c + j) * hw;
      for (size_t p = 0; p < hw; ++p) ov[base + p] = xv[base + p] * sv;
    }
  if (OpAccess::should_record({&x, &s})) {
    auto xi = OpAccess::impl(x), si = OpAccess::impl(s), oi = OpAccess::impl(out);
    OpAccess::record(out, {&x, &s}, [xi, si, oi, n, c, hw] {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const size_t sj = static_cast<size_t>(j);
          const size_t base = (static_cast<size_t>(i) * c + j) * hw;
          if (xi->requires_grad) {
            const real sv = si->data[sj];
            for (size_t p = 0; p < hw; ++p)
              xi->grad[base + p] += oi->grad[base + p] * sv;
          }
          if (si->requires_grad) {
            real acc = 0;
            for (size_t p = 0; p < hw; ++p)
              acc += oi->grad[base + p] * xi->data[base + p];
            si->grad[sj] += acc;
          }
        }
    });
  }
  return out;
}

// ---- classifier support ops --------------------------------------------------

Tensor l2_normalize(const Tensor& x) {
  if (x.shape().size() != 1 && x.shape().size() != 2)
    throw std::invalid_argument("l2_normalize: expected rank 1 or 2, got " +
                                shape_str(x.shape()));
  const int n = x.shape().size() == 2 ? x.dim(0) : 1;
  const int d = x.shape().size() == 2 ? x.dim(1) : x.dim(0);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<real> norms(static_cast<size_t>(n));
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * d;
    real acc = 0;
    for (int j = 0; j < d; ++j) acc += xv[base + j] * xv[base + j];
    const real norm = std::sqrt(acc);
    if (norm == 0)
      throw std::runtime_error("l2_normalize: zero-norm row " + std::to_string(i));
    norms[static_cast<size_t>(i)] = norm;
    for (int j = 0; j < d; ++j) ov[base + j] = xv[base + j] / norm;
  }
  if (OpAccess::should_record({&x})) {
    auto xi = OpAccess::impl(x);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&x}, [xi, oi, norms, n, d] {
      for (int i = 0; i < n; ++i) {
        const size_t base = static_cast<size_t>(i) * d;
        const real inv = real(1) / norms[static_cast<size_t>(i)];
        real dot = 0;
        for (int j = 0; j < d; ++j) dot += oi->data[base + j] * oi->grad[base + j];
        for (int j = 0; j < d; ++j)
          xi->grad[base + j] += (oi->grad[base + j] - oi->data[base + j] * dot) * inv;
      }
    });
  }
  return out;
}

static void check_labels(const std::vector<int>& labels, int64_t n, int way,
                         const char* op) {
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument(std::string(op) + ": " +
                                std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || y >= way)
      throw std::invalid_argument(std::string(op) + ": label " +
                                  std::to_string(y) + " outside [0," +
                                  std::to_string(way) + ")");
}

Tensor class_means(const Tensor& emb, const std::vector<int>& labels, int way) {
  check_rank(emb, 2, "class_means");
  if (way < 1) throw std::invalid_argument("class_means: way must be positive");
  const int n = emb.dim(0), d = emb.dim(1);
  check_labels(labels, n, way, "class_means");
  std::vector<int> counts(static_cast<size_t>(way), 0);
  for (int y : labels) counts[static_cast<size_t>(y)]++;
  for (int k = 0; k < way; ++k)
    if (counts[static_cast<size_t>(k)] == 0)
      throw std::invalid_argument("class_means: class " + std::to_string(k) +
                                  " has no samples");
  Tensor out = Tensor::zeros({way, d});
  const auto& ev = emb.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i) {
    const size_t src = static_cast<size_t>(i) * d;
    const size_t dst = static_cast<size_t>(labels[static_cast<size_t>(i)]) * d;
    for (int j = 0; j < d; ++j) ov[dst + j] += ev[src + j];
  }
  for (int k = 0; k < way; ++k) {
    const real inv = real(1) / static_cast<real>(counts[static_cast<size_t>(k)]);
    for (int j = 0; j < d; ++j) ov[static_cast<size_t>(k) * d + j] *= inv;
  }
  if (OpAccess::should_record({&emb})) {
    auto ei = OpAccess::impl(emb);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&emb}, [ei, oi, labels, counts, n, d] {
      for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        const real inv = real(1) / static_cast<real>(counts[static_cast<size_t>(y)]);
        const size_t src = static_cast<size_t>(y) * d;
        const size_t dst = static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) ei->grad[dst + j] += oi->grad[src + j] * inv;
      }
    });
  }
  return out;
}

Tensor select_rows(const Tensor& m, const std::vector<int>& rows) {
  check_rank(m, 2, "select_rows");
  const int n = m.dim(0), d = m.dim(1);
  if (rows.empty()) throw std::invalid_argument("select_rows: empty selection");
  for (int r : rows)
    if (r < 0 || r >= n)
      throw std::invalid_argument("select_rows: row " + std::to_string(r) +
                                  " outside [0," + std::to_string(n) + ")");
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), d});
  const auto& mv = m.data();
  auto& ov = out.data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(ov.data() + i * d,
                mv.data() + static_cast<size_t>(rows[i]) * d, sizeof(real) * d);
  if (OpAccess::should_record({&m})) {
    auto mi = OpAccess::impl(m);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&m}, [mi, oi, rows, d] {
      for (size_t i = 0; i < rows.size(); ++i) {
        const size_t dst = static_cast<size_t>(rows[i]) * d;
        for (int j = 0; j < d; ++j)
          mi->grad[dst + j] += oi->grad[i * static_cast<size_t>(d) + j];
      }
    });
  }
  return out;
}

Tensor sub_row(const Tensor& m, const Tensor& row) {
  check_rank(m, 2, "sub_row");
  const int n = m.dim(0), d = m.dim(1);
  if (row.size() != d)
    throw std::invalid_argument("sub_row: row of size " +
                                std::to_string(row.size()) + " for width " +
                                std::to_string(d));
  Tensor out = Tensor::zeros(m.shape());
  const auto& mv = m.data();
  const auto& rv = row.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      ov[static_cast<size_t>(i) * d + j] =
          mv[static_cast<size_t>(i) * d + j] - rv[static_cast<size_t>(j)];
  if (OpAccess::should_record({&m, &row})) {
    auto mi = OpAccess::impl(m), ri = OpAccess::impl(row), oi = OpAccess::impl(out);
    OpAccess::record(out, {&m, &row}, [mi, ri, oi, n, d] {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
          const real go = oi->grad[static_cast<size_t>(i) * d + j];
          if (mi->requires_grad) mi->grad[static_cast<size_t>(i) * d + j] += go;
          if (ri->requires_grad) ri->grad[static_cast<size_t>(j)] -= go;
        }
    });
  }
  return out;
}

Tensor row_sums(const Tensor& m) {
  check_rank(m, 2, "row_sums");
  const int n = m.dim(0), d = m.dim(1);
  Tensor out = Tensor::zeros({n});
  const auto& mv = m.data();
  auto& ov = out.data();
  for (int i = 0; i < n; ++i) {
    real acc = 0;
    for (int j = 0; j < d; ++j) acc += mv[static_cast<size_t>(i) * d + j];
    ov[static_cast<size_t>(i)] = acc;
  }
  if (OpAccess::should_record({&m})) {
    auto mi = OpAccess::impl(m);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&m}, [mi, oi, n, d] {
      for (int i = 0; i < n; ++i) {
        const real go = oi->grad[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) mi->grad[static_cast<size_t>(i) * d + j] += go;
      }
    });
  }
  return out;
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw std::invalid_argument("stack_cols: no columns");
  const int n = static_cast<int>(cols[0].size());
  for (const Tensor& c : cols) {
    check_rank(c, 1, "stack_cols");
    if (c.size() != n)
      throw std::invalid_argument("stack_cols: column length mismatch");
  }
  const int k = static_cast<int>(cols.size());
  Tensor out = Tensor::zeros({n, k});
  auto& ov = out.data();
  for (int j = 0; j < k; ++j) {
    const auto& cv = cols[static_cast<size_t>(j)].data();
    for (int i = 0; i < n; ++i) ov[static_cast<size_t>(i) * k + j] = cv[static_cast<size_t>(i)];
  }
  std::vector<const Tensor*> ins;
  for (const Tensor& c : cols) ins.push_back(&c);
  if (OpAccess::should_record(ins)) {
    std::vector<ImplPtr> cis;
    for (const Tensor& c : cols) cis.push_back(OpAccess::impl(c));
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, ins, [cis, oi, n, k] {
      for (int j = 0; j < k; ++j) {
        auto& ci = cis[static_cast<size_t>(j)];
        if (!ci->requires_grad) continue;
        for (int i = 0; i < n; ++i)
          ci->grad[static_cast<size_t>(i)] += oi->grad[static_cast<size_t>(i) * k + j];
      }
    });
  }
  return out;
}

Tensor trace(const Tensor& a) {
  check_rank(a, 2, "trace");
  if (a.dim(0) != a.dim(1))
    throw std::invalid_argument("trace: non-square " + shape_str(a.shape()));
  const int n = a.dim(0);
  real acc = 0;
  for (int i = 0; i < n; ++i) acc += a.data()[static_cast<size_t>(i) * n + i];
  Tensor out = Tensor::scalar(acc);
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&a}, [ai, oi, n] {
      for (int i = 0; i < n; ++i)
        ai->grad[static_cast<size_t>(i) * n + i] += oi->grad[0];
    });
  }
  return out;
}

Tensor add_scaled_identity(const Tensor& a, const Tensor& s, real coeff) {
  check_rank(a, 2, "add_scaled_identity");
  if (a.dim(0) != a.dim(1))
    throw std::invalid_argument("add_scaled_identity: non-square " +
                                shape_str(a.shape()));
  if (s.size() != 1)
    throw std::invalid_argument("add_scaled_identity: scale must be a scalar");
  const int n = a.dim(0);
  Tensor out = Tensor::from(a.shape(), a.data());
  const real sv = s.data()[0] * coeff;
  for (int i = 0; i < n; ++i) out.data()[static_cast<size_t>(i) * n + i] += sv;
  if (OpAccess::should_record({&a, &s})) {
    auto ai = OpAccess::impl(a), si = OpAccess::impl(s), oi = OpAccess::impl(out);
    OpAccess::record(out, {&a, &s}, [ai, si, oi, n, coeff] {
      if (ai->requires_grad)
        for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
      if (si->requires_grad) {
        real acc = 0;
        for (int i = 0; i < n; ++i) acc += oi->grad[static_cast<size_t>(i) * n + i];
        si->grad[0] += coeff * acc;
      }
    });
  }
  return out;
}

Tensor mat_inverse(const Tensor& a) {
  check_rank(a, 2, "mat_inverse");
  if (a.dim(0) != a.dim(1))
    throw std::invalid_argument("mat_inverse: non-square " + shape_str(a.shape()));
  const int n = a.dim(0);
  // Gauss-Jordan with partial pivoting on [A | I].
  std::vector<real> w(a.data());
  Tensor out = Tensor::zeros({n, n});
  auto& inv = out.data();
  for (int i = 0; i < n; ++i) inv[static_cast<size_t>(i) * n + i] = 1;
  real scale = 0;
  for (real v : w) scale = std::max(scale, std::abs(v));
  const real tiny = (scale > 0 ? scale : real(1)) * real(1e-14);
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(w[static_cast<size_t>(r) * n + col]) >
          std::abs(w[static_cast<size_t>(piv) * n + col]))
        piv = r;
    const real pval = w[static_cast<size_t>(piv) * n + col];
    if (std::abs(pval) < tiny)
      throw std::runtime_error("mat_inverse: singular matrix (pivot " +
                               std::to_string(static_cast<double>(pval)) + ")");
    if (piv != col) {
      for (int j = 0; j < n; ++j) {
        std::swap(w[static_cast<size_t>(piv) * n + j], w[static_cast<size_t>(col) * n + j]);
        std::swap(inv[static_cast<size_t>(piv) * n + j], inv[static_cast<size_t>(col) * n + j]);
      }
    }
    const real ip = real(1) / w[static_cast<size_t>(col) * n + col];
    for (int j = 0; j < n; ++j) {
      w[static_cast<size_t>(col) * n + j] *= ip;
      inv[static_cast<size_t>(col) * n + j] *= ip;
    }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const real f = w[static_cast<size_t>(r) * n + col];
      if (f == 0) continue;
      for (int j = 0; j < n; ++j) {
        w[static_cast<size_t>(r) * n + j] -= f * w[static_cast<size_t>(col) * n + j];
        inv[static_cast<size_t>(r) * n + j] -= f * inv[static_cast<size_t>(col) * n + j];
      }
    }
  }
  if (OpAccess::should_record({&a})) {
    auto ai = OpAccess::impl(a);
    auto oi = OpAccess::impl(out);
    // dA = -Y^T dY Y^T with Y = A^{-1}.
    OpAccess::record(out, {&a}, [ai, oi, n] {
      std::vector<real> yt(static_cast<size_t>(n) * n);
      kernels::transpose(n, n, oi->data.data(), yt.data());
      std::vector<real> tmp(static_cast<size_t>(n) * n);
      kernels::gemm_nn(n, n, n, yt.data(), oi->grad.data(), tmp.data());
      std::vector<real> res(static_cast<size_t>(n) * n);
      kernels::gemm_nn(n, n, n, tmp.data(), yt.data(), res.data());
      for (size_t i = 0; i < res.size(); ++i) ai->grad[i] -= res[i];
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels) {
  check_rank(logits, 2, "softmax_cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  check_labels(labels, n, k, "softmax_cross_entropy");
  const auto& lv = logits.data();
  std::vector<real> probs(static_cast<size_t>(n) * k);
  real loss = 0;
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * k;
    real mx = lv[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, lv[base + j]);
    real z = 0;
    for (int j = 0; j < k; ++j) {
      probs[base + j] = std::exp(lv[base + j] - mx);
      z += probs[base + j];
    }
    for (int j = 0; j < k; ++j) probs[base + j] /= z;
    loss -= std::log(probs[base + labels[static_cast<size_t>(i)]]);
  }
  Tensor out = Tensor::scalar(loss / static_cast<real>(n));
  if (OpAccess::should_record({&logits})) {
    auto li = OpAccess::impl(logits);
    auto oi = OpAccess::impl(out);
    OpAccess::record(out, {&logits}, [li, oi, probs, labels, n, k] {
      const real g = oi->grad[0] / static_cast<real>(n);
      for (int i = 0; i < n; ++i) {
        const size_t base = static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
          real p = probs[base + j];
          if (j == labels[static_cast<size_t>(i)]) p -= 1;
          li->grad[base + j] += g * p;
        }
      }
    });
  }
  return out;
}

std::vector<real> softmax_rows(const Tensor& logits) {
  check_rank(logits, 2, "softmax_rows");
  const int n = logits.dim(0), k = logits.dim(1);
  const auto& lv = logits.data();
  std::vector<real> probs(static_cast<size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * k;
    real mx = lv[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, lv[base + j]);
    real z = 0;
    for (int j = 0; j < k; ++j) {
      probs[base + j] = std::exp(lv[base + j] - mx);
      z += probs[base + j];
    }
    for (int j = 0; j < k; ++j) probs[base + j] /= z;
  }
  return probs;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  check_rank(logits, 2, "argmax_rows");
  const int n = logits.dim(0), k = logits.dim(1);
  const auto& lv = logits.data();
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const size_t base = static_cast<size_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (lv[base + j] > lv[base + best]) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

}  // namespace tsa
