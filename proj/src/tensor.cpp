#include "vg/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

namespace vg::tc {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

thread_local Tape* g_active_tape = nullptr;

template <class T>
std::span<T> dat(TensorData& t) {
  if constexpr (std::is_same_v<T, float>) return {t.f32.data(), t.f32.size()};
  else return {t.f64.data(), t.f64.size()};
}

template <class T>
std::span<const T> dat(const TensorData& t) {
  if constexpr (std::is_same_v<T, float>) return {t.f32.data(), t.f32.size()};
  else return {t.f64.data(), t.f64.size()};
}

bool has_g(const TensorData& t) { return !t.g32.empty() || !t.g64.empty(); }

// Gradient buffer, zero-allocated on first touch.
template <class T>
std::span<T> grad_acc(TensorData& t) {
  const size_t n = static_cast<size_t>(shape_numel(t.shape));
  if constexpr (std::is_same_v<T, float>) {
    if (t.g32.size() != n) t.g32.assign(n, 0.0f);
    return {t.g32.data(), t.g32.size()};
  } else {
    if (t.g64.size() != n) t.g64.assign(n, 0.0);
    return {t.g64.data(), t.g64.size()};
  }
}

std::shared_ptr<TensorData> alloc(Shape shape, Dtype dt) {
  auto p = std::make_shared<TensorData>();
  p->shape = std::move(shape);
  p->dtype = dt;
  const size_t n = static_cast<size_t>(shape_numel(p->shape));
  if (dt == Dtype::f32) p->f32.assign(n, 0.0f);
  else p->f64.assign(n, 0.0);
  return p;
}

using P = std::shared_ptr<TensorData>;

Tensor wrap(P p) {
  Tensor t;
  t.ptr() = std::move(p);
  return t;
}

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void mark_out(Tensor& out, bool traced) {
  if (traced) out.requires_grad(true);
}

void same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  check(a.dtype() == b.dtype(),
        std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
            dtype_name(b.dtype()) + ")");
}

// Right operand broadcasts when its shape is a trailing suffix of the
// left shape (this includes scalars).
void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  same_dtype(a, b, op);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return;
  if (b.numel() == 1) return;
  bool suffix = sb.size() <= sa.size();
  if (suffix) {
    for (size_t i = 0; i < sb.size(); ++i)
      if (sb[i] != sa[sa.size() - sb.size() + i]) suffix = false;
  }
  check(suffix, std::string(op) + ": shapes not broadcast-compatible (" + shape_str(sa) +
                    " vs " + shape_str(sb) + ")");
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, Dtype dt) { return wrap(alloc(std::move(shape), dt)); }

Tensor Tensor::constant(Shape shape, double value, Dtype dt) {
  Tensor t = zeros(std::move(shape), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, Dtype dt) {
  check(shape_numel(shape) == static_cast<int64_t>(values.size()),
        "from_values: " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
            " values, got " + std::to_string(values.size()));
  Tensor t = zeros(std::move(shape), dt);
  for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, Dtype dt) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()), dt);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, Dtype dt) {
  Tensor t = zeros(std::move(shape), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * stddev);
  return t;
}

const Shape& Tensor::shape() const {
  check(defined(), "shape() on undefined tensor");
  return p_->shape;
}

int64_t Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

int64_t Tensor::numel() const { return shape_numel(shape()); }

Dtype Tensor::dtype() const {
  check(defined(), "dtype() on undefined tensor");
  return p_->dtype;
}

Tensor& Tensor::requires_grad(bool rg) {
  p_->requires_grad = rg;
  return *this;
}

bool Tensor::requires_grad() const { return defined() && p_->requires_grad; }

double Tensor::get(int64_t flat) const {
  return dtype() == Dtype::f32 ? static_cast<double>(p_->f32[static_cast<size_t>(flat)])
                               : p_->f64[static_cast<size_t>(flat)];
}

void Tensor::set(int64_t flat, double v) {
  if (dtype() == Dtype::f32) p_->f32[static_cast<size_t>(flat)] = static_cast<float>(v);
  else p_->f64[static_cast<size_t>(flat)] = v;
}

double Tensor::item() const {
  check(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
  return get(0);
}

std::span<float> Tensor::f32() {
  check(dtype() == Dtype::f32, "f32() on float64 tensor");
  return {p_->f32.data(), p_->f32.size()};
}
std::span<double> Tensor::f64() {
  check(dtype() == Dtype::f64, "f64() on float32 tensor");
  return {p_->f64.data(), p_->f64.size()};
}
std::span<const float> Tensor::f32() const {
  check(dtype() == Dtype::f32, "f32() on float64 tensor");
  return {p_->f32.data(), p_->f32.size()};
}
std::span<const double> Tensor::f64() const {
  check(dtype() == Dtype::f64, "f64() on float32 tensor");
  return {p_->f64.data(), p_->f64.size()};
}

bool Tensor::has_grad() const { return defined() && has_g(*p_); }

double Tensor::grad_get(int64_t flat) const {
  if (!has_grad()) return 0.0;
  return dtype() == Dtype::f32 ? static_cast<double>(p_->g32[static_cast<size_t>(flat)])
                               : p_->g64[static_cast<size_t>(flat)];
}

void Tensor::zero_grad() {
  if (!defined()) return;
  std::fill(p_->g32.begin(), p_->g32.end(), 0.0f);
  std::fill(p_->g64.begin(), p_->g64.end(), 0.0);
}

std::vector<double> Tensor::grad_values() const {
  std::vector<double> out(static_cast<size_t>(numel()), 0.0);
  if (has_grad())
    for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = grad_get(i);
  return out;
}

std::vector<double> Tensor::values() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = get(i);
  return out;
}

Tensor Tensor::clone() const {
  Tensor t = zeros(shape(), dtype());
  t.p_->f32 = p_->f32;
  t.p_->f64 = p_->f64;
  t.p_->requires_grad = p_->requires_grad;
  return t;
}

Tensor Tensor::to(Dtype dt) const {
  Tensor t = zeros(shape(), dt);
  for (int64_t i = 0; i < numel(); ++i) t.set(i, get(i));
  t.p_->requires_grad = p_->requires_grad;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::backward(const Tensor& loss) {
  check(loss.defined() && loss.numel() == 1,
        "backward: loss must be a scalar tensor, got " +
            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  TensorData& l = *loss.raw();
  if (l.dtype == Dtype::f32) grad_acc<float>(l)[0] = 1.0f;
  else grad_acc<double>(l)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class BinOp { Add, Sub, Mul, Div };

template <class T>
void bin_forward(BinOp op, std::span<const T> a, std::span<const T> b, std::span<T> o) {
  const size_t bn = b.size();
  switch (op) {
    case BinOp::Add:
      for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i % bn];
      break;
    case BinOp::Sub:
      for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i % bn];
      break;
    case BinOp::Mul:
      for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i % bn];
      break;
    case BinOp::Div:
      for (size_t i = 0; i < o.size(); ++i) o[i] = a[i] / b[i % bn];
      break;
  }
}

Tensor binary_op(BinOp op, const char* name, const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, name);
  const bool traced = tracing({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  auto run = [&]<class T>() {
    bin_forward<T>(op, dat<T>(*a.raw()), dat<T>(*b.raw()), dat<T>(*out.raw()));
  };
  if (a.dtype() == Dtype::f32) run.template operator()<float>();
  else run.template operator()<double>();

  if (!traced) return out;
  mark_out(out, true);
  P pa = a.ptr(), pb = b.ptr(), po = out.ptr();
  g_active_tape->record([op, pa, pb, po]() {
    if (!has_g(*po)) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      std::span<const T> av = dat<T>(*pa);
      std::span<const T> bv = dat<T>(*pb);
      const size_t bn = bv.size();
      if (pa->requires_grad) {
        auto ga = grad_acc<T>(*pa);
        switch (op) {
          case BinOp::Add:
          case BinOp::Sub:
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            break;
          case BinOp::Mul:
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i % bn];
            break;
          case BinOp::Div:
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bv[i % bn];
            break;
        }
      }
      if (pb->requires_grad) {
        auto gb = grad_acc<T>(*pb);
        switch (op) {
          case BinOp::Add:
            for (size_t i = 0; i < go.size(); ++i) gb[i % bn] += go[i];
            break;
          case BinOp::Sub:
            for (size_t i = 0; i < go.size(); ++i) gb[i % bn] -= go[i];
            break;
          case BinOp::Mul:
            for (size_t i = 0; i < go.size(); ++i) gb[i % bn] += go[i] * av[i];
            break;
          case BinOp::Div: {
            for (size_t i = 0; i < go.size(); ++i) {
              const T bb = bv[i % bn];
              gb[i % bn] -= go[i] * av[i] / (bb * bb);
            }
            break;
          }
        }
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

enum class UnOp { Sigmoid, Relu, Tanh, AddC, MulC };

Tensor unary_op(UnOp op, const Tensor& x, double c = 0.0) {
  const bool traced = tracing({&x});
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto run = [&]<class T>() {
    std::span<const T> xv = dat<T>(*x.raw());
    std::span<T> ov = dat<T>(*out.raw());
    switch (op) {
      case UnOp::Sigmoid:
        for (size_t i = 0; i < ov.size(); ++i) {
          const double v = 1.0 / (1.0 + std::exp(-static_cast<double>(xv[i])));
          ov[i] = static_cast<T>(v);
        }
        break;
      case UnOp::Relu:
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
        break;
      case UnOp::Tanh:
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(std::tanh(static_cast<double>(xv[i])));
        break;
      case UnOp::AddC:
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + static_cast<T>(c);
        break;
      case UnOp::MulC:
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * static_cast<T>(c);
        break;
    }
  };
  if (x.dtype() == Dtype::f32) run.template operator()<float>();
  else run.template operator()<double>();

  if (!traced) return out;
  mark_out(out, true);
  P px = x.ptr(), po = out.ptr();
  g_active_tape->record([op, c, px, po]() {
    if (!has_g(*po) || !px->requires_grad) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      std::span<const T> xv = dat<T>(*px);
      std::span<const T> ov = dat<T>(*po);
      auto gx = grad_acc<T>(*px);
      switch (op) {
        case UnOp::Sigmoid:
          for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * ov[i] * (T(1) - ov[i]);
          break;
        case UnOp::Relu:
          for (size_t i = 0; i < go.size(); ++i) gx[i] += xv[i] > T(0) ? go[i] : T(0);
          break;
        case UnOp::Tanh:
          for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (T(1) - ov[i] * ov[i]);
          break;
        case UnOp::AddC:
          for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
          break;
        case UnOp::MulC:
          for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * static_cast<T>(c);
          break;
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Div, "div", a, b); }
Tensor add_scalar(const Tensor& a, double c) { return unary_op(UnOp::AddC, a, c); }
Tensor mul_scalar(const Tensor& a, double c) { return unary_op(UnOp::MulC, a, c); }
Tensor sigmoid(const Tensor& x) { return unary_op(UnOp::Sigmoid, x); }
Tensor relu(const Tensor& x) { return unary_op(UnOp::Relu, x); }
Tensor tanh(const Tensor& x) { return unary_op(UnOp::Tanh, x); }

// ---------------------------------------------------------------------------
// Reductions / layout

Tensor sum(const Tensor& x) {
  const bool traced = tracing({&x});
  Tensor out = Tensor::zeros({1}, x.dtype());
  double acc = 0.0;
  if (x.dtype() == Dtype::f32)
    for (const float v : x.raw()->f32) acc += static_cast<double>(v);
  else
    for (const double v : x.raw()->f64) acc += v;
  out.set(0, acc);
  if (!traced) return out;
  mark_out(out, true);
  P px = x.ptr(), po = out.ptr();
  g_active_tape->record([px, po]() {
    if (!has_g(*po) || !px->requires_grad) return;
    auto run_bw = [&]<class T>() {
      const T g = [&] {
        if constexpr (std::is_same_v<T, float>) return po->g32[0];
        else return po->g64[0];
      }();
      auto gx = grad_acc<T>(*px);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

namespace {

// Shared backward for ops whose backward is "route output grad through a
// precomputed index map": out[i] takes grad to input[map[i]] (map[i] < 0
// means no source).
Tensor gathered(const Tensor& x, Shape out_shape, std::vector<int64_t> map, const char* /*name*/) {
  const bool traced = tracing({&x});
  Tensor out = Tensor::zeros(std::move(out_shape), x.dtype());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const int64_t s = map[static_cast<size_t>(i)];
    if (s >= 0) out.set(i, x.get(s));
  }
  if (!traced) return out;
  mark_out(out, true);
  P px = x.ptr(), po = out.ptr();
  g_active_tape->record([px, po, map = std::move(map)]() {
    if (!has_g(*po) || !px->requires_grad) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      auto gx = grad_acc<T>(*px);
      for (size_t i = 0; i < go.size(); ++i) {
        const int64_t s = map[i];
        if (s >= 0) gx[static_cast<size_t>(s)] += go[i];
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

}  // namespace

Tensor reshape(const Tensor& x, Shape shape) {
  check(shape_numel(shape) == x.numel(),
        "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<int64_t> map(static_cast<size_t>(x.numel()));
  for (size_t i = 0; i < map.size(); ++i) map[i] = static_cast<int64_t>(i);
  return gathered(x, std::move(shape), std::move(map), "reshape");
}

Tensor transpose2d(const Tensor& x) {
  check(x.ndim() == 2, "transpose2d: expected 2-d tensor, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  std::vector<int64_t> map(static_cast<size_t>(m * n));
  for (int64_t j = 0; j < n; ++j)
    for (int64_t i = 0; i < m; ++i) map[static_cast<size_t>(j * m + i)] = i * n + j;
  return gathered(x, {n, m}, std::move(map), "transpose2d");
}

Tensor slice_cols(const Tensor& x, int64_t col0, int64_t ncols) {
  check(x.ndim() == 2, "slice_cols: expected 2-d tensor, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  check(col0 >= 0 && ncols >= 0 && col0 + ncols <= n, "slice_cols: range out of bounds");
  std::vector<int64_t> map(static_cast<size_t>(m * ncols));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < ncols; ++j) map[static_cast<size_t>(i * ncols + j)] = i * n + col0 + j;
  return gathered(x, {m, ncols}, std::move(map), "slice_cols");
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0),
        "concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  same_dtype(a, b, "concat_cols");
  const int64_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  const bool traced = tracing({&a, &b});
  Tensor out = Tensor::zeros({m, p + q}, a.dtype());
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < p; ++j) out.set(i * (p + q) + j, a.get(i * p + j));
    for (int64_t j = 0; j < q; ++j) out.set(i * (p + q) + p + j, b.get(i * q + j));
  }
  if (!traced) return out;
  mark_out(out, true);
  P pa = a.ptr(), pb = b.ptr(), po = out.ptr();
  g_active_tape->record([pa, pb, po, m, p, q]() {
    if (!has_g(*po)) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      if (pa->requires_grad) {
        auto ga = grad_acc<T>(*pa);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < p; ++j) ga[static_cast<size_t>(i * p + j)] += go[static_cast<size_t>(i * (p + q) + j)];
      }
      if (pb->requires_grad) {
        auto gb = grad_acc<T>(*pb);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < q; ++j) gb[static_cast<size_t>(i * q + j)] += go[static_cast<size_t>(i * (p + q) + p + j)];
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  check(!parts.empty(), "concat_rows: no parts");
  int64_t cols = -1;
  int64_t rows = 0;
  Dtype dt = Dtype::f32;
  bool traced = false;
  for (const Tensor& t : parts) {
    check(t.defined() && t.ndim() == 2, "concat_rows: parts must be 2-d");
    if (cols < 0) {
      cols = t.dim(1);
      dt = t.dtype();
    }
    check(t.dim(1) == cols, "concat_rows: column mismatch");
    check(t.dtype() == dt, "concat_rows: dtype mismatch");
    rows += t.dim(0);
    if (g_active_tape && t.requires_grad()) traced = true;
  }
  Tensor out = Tensor::zeros({rows, cols}, dt);
  int64_t r = 0;
  for (const Tensor& t : parts) {
    for (int64_t i = 0; i < t.numel(); ++i) out.set(r * cols + i, t.get(i));
    r += t.dim(0);
  }
  if (!traced) return out;
  mark_out(out, true);
  std::vector<P> srcs;
  srcs.reserve(parts.size());
  for (const Tensor& t : parts) srcs.push_back(t.ptr());
  P po = out.ptr();
  g_active_tape->record([srcs = std::move(srcs), po]() {
    if (!has_g(*po)) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      size_t off = 0;
      for (const P& s : srcs) {
        const size_t n = static_cast<size_t>(shape_numel(s->shape));
        if (s->requires_grad) {
          auto gs = grad_acc<T>(*s);
          for (size_t i = 0; i < n; ++i) gs[i] += go[off + i];
        }
        off += n;
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

Tensor take_rows(const Tensor& x, std::span<const int64_t> rows) {
  check(x.ndim() == 2, "take_rows: expected 2-d tensor, got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), d = x.dim(1);
  std::vector<int64_t> map(rows.size() * static_cast<size_t>(d));
  for (size_t r = 0; r < rows.size(); ++r) {
    check(rows[r] >= 0 && rows[r] < n, "take_rows: row index out of range");
    for (int64_t j = 0; j < d; ++j) map[r * static_cast<size_t>(d) + static_cast<size_t>(j)] = rows[r] * d + j;
  }
  return gathered(x, {static_cast<int64_t>(rows.size()), d}, std::move(map), "take_rows");
}

Tensor channels_to_rows(const Tensor& x) {
  check(x.ndim() >= 2, "channels_to_rows: need at least 2 dims");
  const int64_t c = x.dim(0);
  const int64_t v = x.numel() / c;
  std::vector<int64_t> map(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < v; ++i)
    for (int64_t j = 0; j < c; ++j) map[static_cast<size_t>(i * c + j)] = j * v + i;
  return gathered(x, {v, c}, std::move(map), "channels_to_rows");
}

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() == 2 && b.ndim() == 2,
        "matmul: expected 2-d tensors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  check(a.dim(1) == b.dim(0),
        "matmul: inner dimensions disagree (" + shape_str(a.shape()) + " x " + shape_str(b.shape()) + ")");
  same_dtype(a, b, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool traced = tracing({&a, &b});
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  auto run = [&]<class T>() {
    std::span<const T> av = dat<T>(*a.raw());
    std::span<const T> bv = dat<T>(*b.raw());
    std::span<T> ov = dat<T>(*out.raw());
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < k; ++p) {
        const T s = av[static_cast<size_t>(i * k + p)];
        const T* brow = bv.data() + p * n;
        T* orow = ov.data() + i * n;
        for (int64_t j = 0; j < n; ++j) orow[j] += s * brow[j];
      }
  };
  if (a.dtype() == Dtype::f32) run.template operator()<float>();
  else run.template operator()<double>();

  if (!traced) return out;
  mark_out(out, true);
  P pa = a.ptr(), pb = b.ptr(), po = out.ptr();
  g_active_tape->record([pa, pb, po, m, k, n]() {
    if (!has_g(*po)) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      std::span<const T> av = dat<T>(*pa);
      std::span<const T> bv = dat<T>(*pb);
      if (pa->requires_grad) {
        auto ga = grad_acc<T>(*pa);  // ga += go . b^T
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            const T* grow = go.data() + i * n;
            const T* brow = bv.data() + p * n;
            T acc = T(0);
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i * k + p)] += acc;
          }
      }
      if (pb->requires_grad) {
        auto gb = grad_acc<T>(*pb);  // gb += a^T . go
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            const T s = av[static_cast<size_t>(i * k + p)];
            const T* grow = go.data() + i * n;
            T* gbrow = gb.data() + p * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
          }
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv3d

namespace {

struct ConvDims {
  int64_t co, ci, d, h, w;
};

// Shift-and-accumulate over the 27 kernel taps; the inner x loop runs on
// contiguous spans of both operands. Interior rows take a branch-free
// path where all three x-taps apply at full width.
template <class T>
void conv3d_forward(const ConvDims& s, const T* __restrict in, const T* __restrict ker,
                    T* __restrict out) {
  const int64_t vol = s.d * s.h * s.w;
  for (int64_t co = 0; co < s.co; ++co) {
    T* __restrict oc = out + co * vol;
    for (int64_t ci = 0; ci < s.ci; ++ci) {
      const T* __restrict icp = in + ci * vol;
      const T* kc = ker + (co * s.ci + ci) * 27;
      for (int64_t kz = 0; kz < 3; ++kz) {
        const int64_t z0 = std::max<int64_t>(0, 1 - kz), z1 = std::min(s.d, s.d + 1 - kz);
        for (int64_t ky = 0; ky < 3; ++ky) {
          const int64_t y0 = std::max<int64_t>(0, 1 - ky), y1 = std::min(s.h, s.h + 1 - ky);
          const T w0 = kc[(kz * 3 + ky) * 3 + 0];
          const T w1 = kc[(kz * 3 + ky) * 3 + 1];
          const T w2 = kc[(kz * 3 + ky) * 3 + 2];
          for (int64_t z = z0; z < z1; ++z)
            for (int64_t y = y0; y < y1; ++y) {
              T* __restrict dst = oc + (z * s.h + y) * s.w;
              const T* __restrict src = icp + ((z + kz - 1) * s.h + (y + ky - 1)) * s.w;
              // x-taps: dst[x] += w0*src[x-1] + w1*src[x] + w2*src[x+1]
              if (s.w == 1) {
                dst[0] += w1 * src[0];
                continue;
              }
              dst[0] += w1 * src[0] + w2 * src[1];
              for (int64_t x = 1; x < s.w - 1; ++x)
                dst[x] += w0 * src[x - 1] + w1 * src[x] + w2 * src[x + 1];
              dst[s.w - 1] += w0 * src[s.w - 2] + w1 * src[s.w - 1];
            }
        }
      }
    }
  }
}

template <class T>
void conv3d_backward(const ConvDims& s, const T* __restrict in, const T* __restrict ker,
                     const T* __restrict gout, T* __restrict gin, T* __restrict gker) {
  const int64_t vol = s.d * s.h * s.w;
  const int64_t w = s.w;
  for (int64_t co = 0; co < s.co; ++co) {
    const T* __restrict goc = gout + co * vol;
    for (int64_t ci = 0; ci < s.ci; ++ci) {
      const T* __restrict icp = in + ci * vol;
      const T* kc = ker + (co * s.ci + ci) * 27;
      T* __restrict gic = gin ? gin + ci * vol : nullptr;
      T* gkc = gker ? gker + (co * s.ci + ci) * 27 : nullptr;
      for (int64_t kz = 0; kz < 3; ++kz) {
        const int64_t z0 = std::max<int64_t>(0, 1 - kz), z1 = std::min(s.d, s.d + 1 - kz);
        for (int64_t ky = 0; ky < 3; ++ky) {
          const int64_t y0 = std::max<int64_t>(0, 1 - ky), y1 = std::min(s.h, s.h + 1 - ky);
          const T w0 = kc[(kz * 3 + ky) * 3 + 0];
          const T w1 = kc[(kz * 3 + ky) * 3 + 1];
          const T w2 = kc[(kz * 3 + ky) * 3 + 2];
          T a0 = T(0), a1 = T(0), a2 = T(0);
          for (int64_t z = z0; z < z1; ++z)
            for (int64_t y = y0; y < y1; ++y) {
              const T* __restrict g = goc + (z * s.h + y) * w;
              const int64_t soff = ((z + kz - 1) * s.h + (y + ky - 1)) * w;
              const T* __restrict src = icp + soff;
              if (gic) {
                // transpose of the forward stencil
                T* __restrict gi = gic + soff;
                if (w == 1) {
                  gi[0] += w1 * g[0];
                } else {
                  gi[0] += w0 * g[1] + w1 * g[0];
                  for (int64_t u = 1; u < w - 1; ++u)
                    gi[u] += w0 * g[u + 1] + w1 * g[u] + w2 * g[u - 1];
                  gi[w - 1] += w1 * g[w - 1] + w2 * g[w - 2];
                }
              }
              if (gkc) {
                T t0 = T(0), t1 = T(0), t2 = T(0);
                for (int64_t x = 1; x < w; ++x) t0 += src[x - 1] * g[x];
                for (int64_t x = 0; x < w; ++x) t1 += src[x] * g[x];
                for (int64_t x = 0; x < w - 1; ++x) t2 += src[x + 1] * g[x];
                a0 += t0;
                a1 += t1;
                a2 += t2;
              }
            }
          if (gkc) {
            gkc[(kz * 3 + ky) * 3 + 0] += a0;
            gkc[(kz * 3 + ky) * 3 + 1] += a1;
            gkc[(kz * 3 + ky) * 3 + 2] += a2;
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernels) {
  check(input.ndim() == 4, "conv3d: input must be {C_in,D,H,W}, got " + shape_str(input.shape()));
  check(kernels.ndim() == 5 && kernels.dim(2) == 3 && kernels.dim(3) == 3 && kernels.dim(4) == 3,
        "conv3d: kernels must be {C_out,C_in,3,3,3}, got " + shape_str(kernels.shape()));
  check(kernels.dim(1) == input.dim(0),
        "conv3d: channel mismatch (input " + shape_str(input.shape()) + ", kernels " +
            shape_str(kernels.shape()) + ")");
  same_dtype(input, kernels, "conv3d");
  const ConvDims s{kernels.dim(0), input.dim(0), input.dim(1), input.dim(2), input.dim(3)};
  const bool traced = tracing({&input, &kernels});
  Tensor out = Tensor::zeros({s.co, s.d, s.h, s.w}, input.dtype());
  if (input.dtype() == Dtype::f32)
    conv3d_forward<float>(s, input.raw()->f32.data(), kernels.raw()->f32.data(), out.raw()->f32.data());
  else
    conv3d_forward<double>(s, input.raw()->f64.data(), kernels.raw()->f64.data(), out.raw()->f64.data());

  if (!traced) return out;
  mark_out(out, true);
  P pi = input.ptr(), pk = kernels.ptr(), po = out.ptr();
  g_active_tape->record([pi, pk, po, s]() {
    if (!has_g(*po)) return;
    auto run_bw = [&]<class T>() {
      const T* go = [&] {
        if constexpr (std::is_same_v<T, float>) return po->g32.data();
        else return po->g64.data();
      }();
      T* gin = nullptr;
      T* gker = nullptr;
      if (pi->requires_grad) gin = grad_acc<T>(*pi).data();
      if (pk->requires_grad) gker = grad_acc<T>(*pk).data();
      conv3d_backward<T>(s, dat<T>(*pi).data(), dat<T>(*pk).data(), go, gin, gker);
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

// ---------------------------------------------------------------------------
// maxpool3d

Tensor maxpool3d(const Tensor& input) {
  check(input.ndim() == 4, "maxpool3d: input must be {C,D,H,W}, got " + shape_str(input.shape()));
  const int64_t c = input.dim(0), d = input.dim(1), h = input.dim(2), w = input.dim(3);
  check(d >= 1 && h >= 1 && w >= 1, "maxpool3d: empty spatial extent");
  const int64_t od = (d + 1) / 2, oh = (h + 1) / 2, ow = (w + 1) / 2;
  const bool traced = tracing({&input});
  Tensor out = Tensor::zeros({c, od, oh, ow}, input.dtype());
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  auto run = [&]<class T>() {
    std::span<const T> in = dat<T>(*input.raw());
    std::span<T> ov = dat<T>(*out.raw());
    for (int64_t cc = 0; cc < c; ++cc) {
      const T* icp = in.data() + cc * d * h * w;
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            T best{};
            int64_t bi = -1;
            for (int64_t dz = 0; dz < 2; ++dz) {
              const int64_t z = oz * 2 + dz;
              if (z >= d) break;
              for (int64_t dy = 0; dy < 2; ++dy) {
                const int64_t y = oy * 2 + dy;
                if (y >= h) break;
                for (int64_t dx = 0; dx < 2; ++dx) {
                  const int64_t x = ox * 2 + dx;
                  if (x >= w) break;
                  const int64_t idx = (z * h + y) * w + x;
                  // strict > keeps the first occurrence on ties
                  if (bi < 0 || icp[idx] > best) {
                    best = icp[idx];
                    bi = idx;
                  }
                }
              }
            }
            const int64_t o = ((cc * od + oz) * oh + oy) * ow + ox;
            ov[static_cast<size_t>(o)] = best;
            argmax[static_cast<size_t>(o)] = cc * d * h * w + bi;
          }
    }
  };
  if (input.dtype() == Dtype::f32) run.template operator()<float>();
  else run.template operator()<double>();

  if (!traced) return out;
  mark_out(out, true);
  P pi = input.ptr(), po = out.ptr();
  g_active_tape->record([pi, po, argmax = std::move(argmax)]() {
    if (!has_g(*po) || !pi->requires_grad) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      auto gi = grad_acc<T>(*pi);
      for (size_t i = 0; i < go.size(); ++i) gi[static_cast<size_t>(argmax[i])] += go[i];
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

// ---------------------------------------------------------------------------
// batch renormalization

Tensor batch_renorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    const Tensor& run_mean, const Tensor& run_var,
                    const RenormOpts& opts, ChannelStats* observed) {
  check(x.ndim() >= 1, "batch_renorm: scalar input");
  const int64_t c = x.dim(0);
  const int64_t n = x.numel() / c;
  check(gamma.numel() == c && beta.numel() == c && run_mean.numel() == c && run_var.numel() == c,
        "batch_renorm: per-channel parameter size mismatch");
  check(n >= 1, "batch_renorm: empty channels");

  // Per-channel affine factors: y = scale[c] * x + shift[c]. Statistics
  // and r/d corrections are computed in double for both dtypes.
  std::vector<double> mean_b(static_cast<size_t>(c)), var_b(static_cast<size_t>(c));
  std::vector<double> scale(static_cast<size_t>(c)), shift(static_cast<size_t>(c));
  std::vector<double> rfac(static_cast<size_t>(c), 1.0);
  auto channel_stats = [&](int64_t ch, double* mu_out, double* var_out) {
    double acc = 0.0, vacc = 0.0;
    auto run = [&]<class T>() {
      std::span<const T> xv = dat<T>(*x.raw());
      const T* xi = xv.data() + ch * n;
      for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(xi[i]);
      const double mu = acc / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) {
        const double dv = static_cast<double>(xi[i]) - mu;
        vacc += dv * dv;
      }
      *mu_out = mu;
    };
    if (x.dtype() == Dtype::f32) run.template operator()<float>();
    else run.template operator()<double>();
    *var_out = vacc / static_cast<double>(n);
  };
  for (int64_t ch = 0; ch < c; ++ch) {
    double mu, sigma;
    if (opts.training) {
      double var;
      channel_stats(ch, &mu, &var);
      mean_b[static_cast<size_t>(ch)] = mu;
      var_b[static_cast<size_t>(ch)] = var;
      sigma = std::sqrt(var + opts.eps);
      const double sigma_run = std::sqrt(run_var.get(ch) + opts.eps);
      const double r = std::clamp(sigma / sigma_run, 1.0 / opts.r_max, opts.r_max);
      const double dd = std::clamp((mu - run_mean.get(ch)) / sigma_run, -opts.d_max, opts.d_max);
      rfac[static_cast<size_t>(ch)] = r;
      scale[static_cast<size_t>(ch)] = gamma.get(ch) * r / sigma;
      shift[static_cast<size_t>(ch)] = gamma.get(ch) * (dd - r * mu / sigma) + beta.get(ch);
    } else {
      mu = run_mean.get(ch);
      sigma = std::sqrt(run_var.get(ch) + opts.eps);
      scale[static_cast<size_t>(ch)] = gamma.get(ch) / sigma;
      shift[static_cast<size_t>(ch)] = beta.get(ch) - gamma.get(ch) * mu / sigma;
    }
  }
  if (observed) {
    observed->mean = mean_b;
    observed->var = var_b;
  }

  const bool traced = tracing({&x, &gamma, &beta});
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto run = [&]<class T>() {
    std::span<const T> xv = dat<T>(*x.raw());
    std::span<T> ov = dat<T>(*out.raw());
    for (int64_t ch = 0; ch < c; ++ch) {
      const T s = static_cast<T>(scale[static_cast<size_t>(ch)]);
      const T b = static_cast<T>(shift[static_cast<size_t>(ch)]);
      const T* xi = xv.data() + ch * n;
      T* oi = ov.data() + ch * n;
      for (int64_t i = 0; i < n; ++i) oi[i] = s * xi[i] + b;
    }
  };
  if (x.dtype() == Dtype::f32) run.template operator()<float>();
  else run.template operator()<double>();

  if (!traced) return out;
  mark_out(out, true);
  P px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr(), po = out.ptr();
  const bool training = opts.training;
  const double eps = opts.eps;
  g_active_tape->record([px, pg, pb, po, c, n, training, eps,
                         mean_b = std::move(mean_b), var_b = std::move(var_b),
                         rfac = std::move(rfac), scale = std::move(scale),
                         gamma_v = gamma.values(), beta_v = beta.values()]() {
    if (!has_g(*po)) return;
    auto run_bw = [&]<class T>() {
      std::span<const T> go = [&] {
        if constexpr (std::is_same_v<T, float>) return std::span<const T>{po->g32.data(), po->g32.size()};
        else return std::span<const T>{po->g64.data(), po->g64.size()};
      }();
      std::span<const T> xv = dat<T>(*px);
      std::span<const T> ov = dat<T>(*po);
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* g = go.data() + ch * n;
        const T* xi = xv.data() + ch * n;
        const T* oi = ov.data() + ch * n;
        const double gammac = gamma_v[static_cast<size_t>(ch)];
        const double betac = beta_v[static_cast<size_t>(ch)];
        double gsum = 0.0, gdot_xhat = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          gsum += static_cast<double>(g[i]);
          // xhat = (y - beta) / gamma; avoids re-deriving r and d here
          const double xhat = gammac != 0.0 ? (static_cast<double>(oi[i]) - betac) / gammac : 0.0;
          gdot_xhat += static_cast<double>(g[i]) * xhat;
        }
        if (pg->requires_grad) grad_acc<T>(*pg)[static_cast<size_t>(ch)] += static_cast<T>(gdot_xhat);
        if (pb->requires_grad) grad_acc<T>(*pb)[static_cast<size_t>(ch)] += static_cast<T>(gsum);
        if (px->requires_grad) {
          auto gx = grad_acc<T>(*px);
          T* gxi = gx.data() + ch * n;
          if (training) {
            // r and d are constants in backward (renormalization
            // stop-gradient); the batch mean/variance terms are not.
            const double mu = mean_b[static_cast<size_t>(ch)];
            const double sigma = std::sqrt(var_b[static_cast<size_t>(ch)] + eps);
            const double r = rfac[static_cast<size_t>(ch)];
            double gz_sum = 0.0, gz_dot_z = 0.0;
            for (int64_t i = 0; i < n; ++i) {
              const double z = (static_cast<double>(xi[i]) - mu) / sigma;
              const double gz = static_cast<double>(g[i]);
              gz_sum += gz;
              gz_dot_z += gz * z;
            }
            const double k = gammac * r / sigma;
            const double inv_n = 1.0 / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) {
              const double z = (static_cast<double>(xi[i]) - mu) / sigma;
              const double gz = static_cast<double>(g[i]);
              gxi[i] += static_cast<T>(k * (gz - gz_sum * inv_n - z * gz_dot_z * inv_n));
            }
          } else {
            const double k = scale[static_cast<size_t>(ch)];
            for (int64_t i = 0; i < n; ++i) gxi[i] += static_cast<T>(k * static_cast<double>(g[i]));
          }
        }
      }
    };
    if (po->dtype == Dtype::f32) run_bw.template operator()<float>();
    else run_bw.template operator()<double>();
  });
  return out;
}

// ---------------------------------------------------------------------------
// LSTM

std::pair<Tensor, Tensor> lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                                    const LstmWeights& w) {
  check(w.w_x.ndim() == 2 && w.w_h.ndim() == 2, "lstm_step: weight matrices must be 2-d");
  const int64_t hd = w.w_h.dim(0);
  check(w.w_x.dim(1) == 4 * hd && w.w_h.dim(1) == 4 * hd && w.b.numel() == 4 * hd,
        "lstm_step: weight shapes inconsistent with hidden width " + std::to_string(hd));
  check(x.ndim() == 2 && x.dim(0) == 1 && x.dim(1) == w.w_x.dim(0),
        "lstm_step: input shape " + shape_str(x.shape()) + " does not match w_x " +
            shape_str(w.w_x.shape()));
  check(h.ndim() == 2 && h.dim(1) == hd && c.ndim() == 2 && c.dim(1) == hd,
        "lstm_step: state width mismatch");

  Tensor gates = add(add(matmul(x, w.w_x), matmul(h, w.w_h)), w.b);
  Tensor gi = sigmoid(slice_cols(gates, 0, hd));
  Tensor gf = sigmoid(slice_cols(gates, hd, hd));
  Tensor gg = tanh(slice_cols(gates, 2 * hd, hd));
  Tensor go = sigmoid(slice_cols(gates, 3 * hd, hd));
  Tensor c2 = add(mul(gf, c), mul(gi, gg));
  Tensor h2 = mul(go, tanh(c2));
  return {h2, c2};
}

Tensor lstm_sequence(const Tensor& xs, const LstmWeights& w, Tensor* final_h, Tensor* final_c) {
  check(xs.ndim() == 2, "lstm_sequence: expected {N, d_in}");
  const int64_t n = xs.dim(0);
  const int64_t hd = w.w_h.dim(0);
  Tensor h = Tensor::zeros({1, hd}, xs.dtype());
  Tensor c = Tensor::zeros({1, hd}, xs.dtype());
  std::vector<Tensor> hs;
  hs.reserve(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t) {
    Tensor xt = take_rows(xs, std::array<int64_t, 1>{t});
    auto [h2, c2] = lstm_step(xt, h, c, w);
    h = h2;
    c = c2;
    hs.push_back(h);
  }
  if (final_h) *final_h = h;
  if (final_c) *final_c = c;
  if (hs.empty()) return Tensor::zeros({0, hd}, xs.dtype());
  return concat_rows(hs);
}

}  // namespace vg::tc
