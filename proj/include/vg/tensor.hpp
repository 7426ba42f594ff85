#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vg/error.hpp"
#include "vg/rng.hpp"

// Dense-tensor library with reverse-mode automatic differentiation.
// Single-threaded execution is the correctness contract; callers that
// want parallelism run independent forward/backward passes on disjoint
// parameter copies and merge gradients in a canonical order.

namespace vg::tc {

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "float32" : "float64"; }
inline size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
  Shape shape;
  Dtype dtype = Dtype::f32;
  bool requires_grad = false;
  std::vector<float> f32;
  std::vector<double> f64;
  // Gradient buffers, zero-allocated on first accumulation. Same shape
  // as the value buffer by construction.
  std::vector<float> g32;
  std::vector<double> g64;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dt = Dtype::f32);
  static Tensor constant(Shape shape, double value, Dtype dt = Dtype::f32);
  static Tensor from_values(Shape shape, std::span<const double> values, Dtype dt = Dtype::f64);
  static Tensor from_values(Shape shape, std::initializer_list<double> values, Dtype dt = Dtype::f64);
  static Tensor randn(Shape shape, Rng& rng, double stddev, Dtype dt = Dtype::f32);

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int i) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;
  Dtype dtype() const;

  Tensor& requires_grad(bool rg);
  bool requires_grad() const;

  // Dtype-generic element access; slow, intended for tests and IO.
  double get(int64_t flat) const;
  void set(int64_t flat, double v);
  double item() const;

  std::span<float> f32();
  std::span<double> f64();
  std::span<const float> f32() const;
  std::span<const double> f64() const;

  bool has_grad() const;
  double grad_get(int64_t flat) const;
  void zero_grad();
  std::vector<double> grad_values() const;
  std::vector<double> values() const;

  Tensor clone() const;      // deep copy of values (grad not copied)
  Tensor to(Dtype dt) const; // dtype-converted deep copy

  std::shared_ptr<TensorData>& ptr() { return p_; }
  const std::shared_ptr<TensorData>& ptr() const { return p_; }
  TensorData* raw() const { return p_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> p) : p_(std::move(p)) {}
  std::shared_ptr<TensorData> p_;
  friend Tensor make_like(const Tensor&, Shape);
};

// Recorded primitive applications in topological order; backward visits
// every node exactly once in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse,
  // accumulating into every requires_grad tensor reachable from it.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// ---- elementwise ----
// Binary ops broadcast the right operand when its shape is a trailing
// suffix of the left shape (or a scalar); nothing else.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

// ---- reductions / layout ----
Tensor sum(const Tensor& x);  // all elements -> shape {1}
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose2d(const Tensor& x);
Tensor slice_cols(const Tensor& x, int64_t col0, int64_t ncols);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor take_rows(const Tensor& x, std::span<const int64_t> rows);
// {C, spatial...} -> {prod(spatial), C}; row index is the row-major
// (z-major) spatial flattening. Used to flatten feature volumes for
// attention.
Tensor channels_to_rows(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- neural-net primitives ----
// input {C_in, D, H, W}, kernels {C_out, C_in, 3, 3, 3}; stride 1,
// same padding.
Tensor conv3d(const Tensor& input, const Tensor& kernels);
// window 2, stride 2, ceil semantics at odd borders; gradient routed to
// the first occurrence of the max in row-major scan order.
Tensor maxpool3d(const Tensor& input);

struct RenormOpts {
  bool training = false;
  double r_max = 1.0;
  double d_max = 0.0;
  double eps = 1e-5;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;
};

// Batch renormalization over {C, rest...}: per-channel statistics over
// the non-channel dims, corrected toward running statistics by clipped
// r/d factors (treated as constants in backward, per the technique).
// Inference mode uses running statistics only. `observed`, when given,
// receives the batch statistics so the caller can update running
// averages once per step in canonical order.
Tensor batch_renorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    const Tensor& run_mean, const Tensor& run_var,
                    const RenormOpts& opts, ChannelStats* observed = nullptr);

struct LstmWeights {
  Tensor w_x;  // {d_in, 4h}, gate order [i, f, g, o]
  Tensor w_h;  // {h, 4h}
  Tensor b;    // {4h}
};

// x {1, d_in}, h/c {1, h} -> (h', c'). Standard cell: sigmoid gates,
// tanh candidate. Composed from taped primitives so backward through
// time comes from the tape.
std::pair<Tensor, Tensor> lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                                    const LstmWeights& w);

// Applies lstm_step across the rows of xs {N, d_in} from a zero state;
// returns all hidden states {N, h}. N == 0 yields an empty {0, h}.
Tensor lstm_sequence(const Tensor& xs, const LstmWeights& w,
                     Tensor* final_h = nullptr, Tensor* final_c = nullptr);

}  // namespace vg::tc
