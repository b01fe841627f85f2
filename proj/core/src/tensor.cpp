#include "glied/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace glied {

namespace {

thread_local GradientTape* g_active_tape = nullptr;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape) {
  long n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: dimensions must be positive");
    n *= d;
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), 0.0);
  return impl;
}

void check_finite(const detail::TensorImpl& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite value in forward result");
    }
  }
}

bool any_tracked(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->tracked()) return true;
  }
  return false;
}

// Records the op on the active tape when gradients can flow through it.
void record(const char* op, std::initializer_list<const Tensor*> inputs, const Tensor& output,
            std::function<void()> backward_fn) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr || !any_tracked(inputs)) return;
  GradientTape::Entry entry;
  entry.op = op;
  for (const Tensor* t : inputs) entry.inputs.push_back(t->impl());
  entry.output = output.impl();
  entry.backward = std::move(backward_fn);
  output.impl()->on_tape = true;
  tape->record(std::move(entry));
}

std::vector<double>* grad_of(const std::shared_ptr<detail::TensorImpl>& impl, bool tracked) {
  if (!tracked) return nullptr;
  impl->ensure_grad();
  return &impl->grad;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return Tensor(make_impl(std::move(shape))); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto impl = make_impl(std::move(shape));
  std::fill(impl->data.begin(), impl->data.end(), value);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  auto impl = make_impl(std::move(shape));
  if (impl->data.size() != values.size()) {
    throw std::invalid_argument("tensor: data length does not match shape");
  }
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
  auto impl = make_impl(std::move(shape));
  for (double& v : impl->data) v = rng.uniform(lo, hi);
  return Tensor(std::move(impl));
}

Tensor Tensor::glorot(int rows, int cols, Rng& rng) {
  double limit = std::sqrt(6.0 / (rows + cols));
  return uniform({rows, cols}, -limit, limit, rng);
}

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("tensor: value() requires a single element");
  return impl_->data[0];
}

double Tensor::at(int i) const {
  if (rank() != 1) throw std::invalid_argument("tensor: at(i) requires rank 1");
  return impl_->data[static_cast<size_t>(i)];
}

double Tensor::at(int i, int j) const {
  if (rank() != 2) throw std::invalid_argument("tensor: at(i,j) requires rank 2");
  return impl_->data[static_cast<size_t>(i) * dim(1) + j];
}

Tensor Tensor::clone() const {
  auto impl = make_impl(impl_->shape);
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// ---- GradientTape -------------------------------------------------------

GradientTape::GradientTape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

GradientTape::~GradientTape() { g_active_tape = previous_; }

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::record(Entry entry) { entries_.push_back(std::move(entry)); }

void GradientTape::run_backward(const Tensor& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!loss.impl()->on_tape) {
    throw std::invalid_argument("backward: loss was not produced on the active tape");
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // nothing flowed into this node
    it->backward();
  }
}

void backward(const Tensor& loss) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr) throw std::invalid_argument("backward: no active gradient tape");
  tape->run_backward(loss);
}

// ---- ops ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions do not agree");
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = out.raw_data().data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* crow = pc + i * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  check_finite(*out.impl(), "matmul");

  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  bool ta = a.tracked(), tb = b.tracked();
  record("matmul", {&a, &b}, out, [ai, bi, oi, m, k, n, ta, tb]() {
    const double* g = oi->grad.data();
    if (auto* ga = grad_of(ai, ta)) {
      // dA = dC * B^T
      const double* pb = bi->data.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += g[i * n + j] * pb[kk * n + j];
          (*ga)[i * k + kk] += acc;
        }
    }
    if (auto* gb = grad_of(bi, tb)) {
      // dB = A^T * dC
      const double* pa = ai->data.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double aik = pa[i * k + kk];
          for (int j = 0; j < n; ++j) (*gb)[kk * n + j] += aik * g[i * n + j];
        }
    }
  });
  return out;
}

namespace {

enum class Pairwise { Add, Sub, Mul };

Tensor pairwise(const Tensor& a, const Tensor& b, Pairwise kind, const char* name) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch (only scalar broadcast allowed)");
  }
  const Tensor& shaped = a_scalar && !b_scalar ? b : a;
  Tensor out = Tensor::zeros(shaped.shape());
  const int n = out.size();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < n; ++i) {
    const double x = a_scalar ? pa[0] : pa[i];
    const double y = b_scalar ? pb[0] : pb[i];
    po[i] = kind == Pairwise::Add ? x + y : kind == Pairwise::Sub ? x - y : x * y;
  }
  check_finite(*out.impl(), name);

  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  bool ta = a.tracked(), tb = b.tracked();
  record(name, {&a, &b}, out, [ai, bi, oi, kind, a_scalar, b_scalar, n, ta, tb]() {
    const double* g = oi->grad.data();
    if (auto* ga = grad_of(ai, ta)) {
      for (int i = 0; i < n; ++i) {
        double d = kind == Pairwise::Mul ? g[i] * (b_scalar ? bi->data[0] : bi->data[i]) : g[i];
        (*ga)[a_scalar ? 0 : i] += d;
      }
    }
    if (auto* gb = grad_of(bi, tb)) {
      for (int i = 0; i < n; ++i) {
        double d = g[i];
        if (kind == Pairwise::Mul)
          d *= a_scalar ? ai->data[0] : ai->data[i];
        else if (kind == Pairwise::Sub)
          d = -d;
        (*gb)[b_scalar ? 0 : i] += d;
      }
    }
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return pairwise(a, b, Pairwise::Add, "add"); }
Tensor add(const Tensor& a, double b) { return pairwise(a, Tensor::scalar(b), Pairwise::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return pairwise(a, b, Pairwise::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return pairwise(a, b, Pairwise::Mul, "mul"); }
Tensor mul(const Tensor& a, double b) { return pairwise(a, Tensor::scalar(b), Pairwise::Mul, "mul"); }

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const int n = x.size();
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;

  auto xi = x.impl(), oi = out.impl();
  record("relu", {&x}, out, [xi, oi, n]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    for (int i = 0; i < n; ++i)
      if (xi->data[i] > 0.0) (*gx)[i] += g[i];
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];

  auto xi = x.impl(), oi = out.impl();
  record("transpose", {&x}, out, [xi, oi, m, n]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) (*gx)[i * n + j] += g[j * m + i];
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  const int rank = parts[0].rank();
  if (rank != 1 && rank != 2) throw std::invalid_argument("concat: rank-1 or rank-2 only");
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: invalid axis");
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) {
        throw std::invalid_argument("concat: non-concat dimensions must agree");
      }
    }
  }

  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) total += p.dim(axis);
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out = Tensor::zeros(out_shape);
  double* po = out.raw_data().data();

  if (rank == 1 || axis == 0) {
    int offset = 0;
    for (const Tensor& p : parts) {
      std::memcpy(po + offset, p.data().data(), sizeof(double) * static_cast<size_t>(p.size()));
      offset += p.size();
    }
  } else {  // rank 2, axis 1
    const int rows = parts[0].dim(0);
    int col_offset = 0;
    for (const Tensor& p : parts) {
      const int cols = p.dim(1);
      const double* pp = p.data().data();
      for (int i = 0; i < rows; ++i)
        std::memcpy(po + i * total + col_offset, pp + i * cols, sizeof(double) * static_cast<size_t>(cols));
      col_offset += cols;
    }
  }

  std::vector<const Tensor*> input_ptrs;
  input_ptrs.reserve(parts.size());
  bool tracked = false;
  for (const Tensor& p : parts) tracked = tracked || p.tracked();
  GradientTape* tape = GradientTape::active();
  if (tape != nullptr && tracked) {
    GradientTape::Entry entry;
    entry.op = "concat";
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    std::vector<bool> part_tracked;
    for (const Tensor& p : parts) {
      entry.inputs.push_back(p.impl());
      impls.push_back(p.impl());
      part_tracked.push_back(p.tracked());
    }
    auto oi = out.impl();
    entry.output = oi;
    const int rows = rank == 2 ? parts[0].dim(0) : 1;
    entry.backward = [impls, part_tracked, oi, axis, rank, rows, total]() {
      const double* g = oi->grad.data();
      int offset = 0;
      for (size_t p = 0; p < impls.size(); ++p) {
        const auto& impl = impls[p];
        const int psize = impl->size();
        const int cols = rank == 2 ? impl->shape[1] : psize;
        if (auto* gp = grad_of(impl, part_tracked[p])) {
          if (rank == 1 || axis == 0) {
            for (int i = 0; i < psize; ++i) (*gp)[i] += g[offset + i];
          } else {
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < cols; ++j) (*gp)[i * cols + j] += g[i * total + offset + j];
          }
        }
        offset += (rank == 1 || axis == 0) ? psize : cols;
      }
    };
    oi->on_tape = true;
    tape->record(std::move(entry));
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  check_finite(*out.impl(), "sum");
  auto xi = x.impl(), oi = out.impl();
  const int n = x.size();
  record("sum", {&x}, out, [xi, oi, n]() {
    auto* gx = grad_of(xi, true);
    const double g = oi->grad[0];
    for (int i = 0; i < n; ++i) (*gx)[i] += g;
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const int n = x.size();
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc / n);
  check_finite(*out.impl(), "mean");
  auto xi = x.impl(), oi = out.impl();
  record("mean", {&x}, out, [xi, oi, n]() {
    auto* gx = grad_of(xi, true);
    const double g = oi->grad[0] / n;
    for (int i = 0; i < n; ++i) (*gx)[i] += g;
  });
  return out;
}

Tensor sum_axis(const Tensor& x, int axis) {
  if (x.rank() != 2) throw std::invalid_argument("sum_axis: rank-2 tensor required");
  if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: invalid axis");
  const int m = x.dim(0), n = x.dim(1);
  const int out_len = axis == 0 ? n : m;
  Tensor out = Tensor::zeros({out_len});
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[axis == 0 ? j : i] += px[i * n + j];
  check_finite(*out.impl(), "sum_axis");

  auto xi = x.impl(), oi = out.impl();
  record("sum_axis", {&x}, out, [xi, oi, m, n, axis]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) (*gx)[i * n + j] += g[axis == 0 ? j : i];
  });
  return out;
}

Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& keep, double value) {
  if (static_cast<int>(keep.size()) != x.size()) {
    throw std::invalid_argument("masked_fill: mask length mismatch");
  }
  Tensor out = Tensor::zeros(x.shape());
  const int n = x.size();
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < n; ++i) po[i] = keep[static_cast<size_t>(i)] ? px[i] : value;

  auto xi = x.impl(), oi = out.impl();
  record("masked_fill", {&x}, out, [xi, oi, keep, n]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    for (int i = 0; i < n; ++i)
      if (keep[static_cast<size_t>(i)]) (*gx)[i] += g[i];
  });
  return out;
}

namespace {

// Stable softmax over contiguous rows of length `width`.
void softmax_rows(const double* in, double* out, int rows, int width) {
  for (int r = 0; r < rows; ++r) {
    const double* x = in + r * width;
    double* y = out + r * width;
    double mx = x[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < width; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < width; ++j) y[j] /= z;
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw std::invalid_argument("softmax: invalid axis for rank-1 tensor");
  } else if (x.rank() == 2) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: invalid axis");
    if (axis == 0) return transpose(softmax(transpose(x), 1));
  } else {
    throw std::invalid_argument("softmax: rank-1 or rank-2 only");
  }

  const int width = x.rank() == 1 ? x.dim(0) : x.dim(1);
  const int rows = x.size() / width;
  Tensor out = Tensor::zeros(x.shape());
  softmax_rows(x.data().data(), out.raw_data().data(), rows, width);
  check_finite(*out.impl(), "softmax");

  auto xi = x.impl(), oi = out.impl();
  record("softmax", {&x}, out, [xi, oi, rows, width]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    const double* s = oi->data.data();
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int j = 0; j < width; ++j) dot += g[r * width + j] * s[r * width + j];
      for (int j = 0; j < width; ++j) {
        (*gx)[r * width + j] += s[r * width + j] * (g[r * width + j] - dot);
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  const int width = x.rank() == 1 ? x.dim(0) : x.dim(x.rank() - 1);
  if (x.rank() > 2) throw std::invalid_argument("layer_norm: rank-1 or rank-2 only");
  if (gain.size() != width || bias.size() != width) {
    throw std::invalid_argument("layer_norm: gain/bias must match last-axis size");
  }
  const int rows = x.size() / width;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> normalized(static_cast<size_t>(x.size()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  double* po = out.raw_data().data();
  for (int r = 0; r < rows; ++r) {
    const double* row = px + r * width;
    double mu = 0.0;
    for (int j = 0; j < width; ++j) mu += row[j];
    mu /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= width;
    const double istd = 1.0 / std::sqrt(var + epsilon);
    inv_std[static_cast<size_t>(r)] = istd;
    for (int j = 0; j < width; ++j) {
      const double y = (row[j] - mu) * istd;
      normalized[static_cast<size_t>(r * width + j)] = y;
      po[r * width + j] = y * pg[j] + pb[j];
    }
  }
  check_finite(*out.impl(), "layer_norm");

  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  bool tx = x.tracked(), tg = gain.tracked(), tb = bias.tracked();
  record("layer_norm", {&x, &gain, &bias}, out,
         [xi, gi, bi, oi, rows, width, normalized, inv_std, tx, tg, tb]() {
           const double* g = oi->grad.data();
           auto* gx = grad_of(xi, tx);
           auto* gg = grad_of(gi, tg);
           auto* gb = grad_of(bi, tb);
           for (int r = 0; r < rows; ++r) {
             const double* grow = g + r * width;
             const double* y = normalized.data() + r * width;
             if (gg != nullptr)
               for (int j = 0; j < width; ++j) (*gg)[j] += grow[j] * y[j];
             if (gb != nullptr)
               for (int j = 0; j < width; ++j) (*gb)[j] += grow[j];
             if (gx != nullptr) {
               double mean_gy = 0.0, mean_gyy = 0.0;
               for (int j = 0; j < width; ++j) {
                 const double gy = grow[j] * gi->data[j];
                 mean_gy += gy;
                 mean_gyy += gy * y[j];
               }
               mean_gy /= width;
               mean_gyy /= width;
               const double istd = inv_std[static_cast<size_t>(r)];
               for (int j = 0; j < width; ++j) {
                 const double gy = grow[j] * gi->data[j];
                 (*gx)[r * width + j] += istd * (gy - mean_gy - y[j] * mean_gyy);
               }
             }
           }
         });
  return out;
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;

  const int n = x.size();
  const double scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) mask[static_cast<size_t>(i)] = rng.bernoulli(rate) ? 0.0 : scale;

  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < n; ++i) po[i] = px[i] * mask[static_cast<size_t>(i)];

  auto xi = x.impl(), oi = out.impl();
  record("dropout", {&x}, out, [xi, oi, mask, n]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    for (int i = 0; i < n; ++i) (*gx)[i] += g[i] * mask[static_cast<size_t>(i)];
  });
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding_lookup: table must be rank 2");
  const int vocab = table.dim(0), width = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) throw std::out_of_range("embedding_lookup: id out of range");
  }
  const int rows = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({rows, width});
  const double* pt = table.data().data();
  double* po = out.raw_data().data();
  for (int r = 0; r < rows; ++r) {
    std::memcpy(po + r * width, pt + ids[static_cast<size_t>(r)] * width,
                sizeof(double) * static_cast<size_t>(width));
  }

  auto ti = table.impl(), oi = out.impl();
  record("embedding_lookup", {&table}, out, [ti, oi, ids, rows, width]() {
    auto* gt = grad_of(ti, true);
    const double* g = oi->grad.data();
    // repeated ids accumulate
    for (int r = 0; r < rows; ++r) {
      double* dst = gt->data() + ids[static_cast<size_t>(r)] * width;
      for (int j = 0; j < width; ++j) dst[j] += g[r * width + j];
    }
  });
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  if (x.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 tensor required");
  if (start < 0 || len <= 0 || start + len > x.dim(1)) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros({rows, len});
  const double* px = x.data().data();
  double* po = out.raw_data().data();
  for (int i = 0; i < rows; ++i)
    std::memcpy(po + i * len, px + i * cols + start, sizeof(double) * static_cast<size_t>(len));

  auto xi = x.impl(), oi = out.impl();
  record("slice_cols", {&x}, out, [xi, oi, start, len, rows, cols]() {
    auto* gx = grad_of(xi, true);
    const double* g = oi->grad.data();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < len; ++j) (*gx)[i * cols + start + j] += g[i * len + j];
  });
  return out;
}

Tensor token_log_probs(const Tensor& logits, const std::vector<int>& ids) {
  if (logits.rank() != 2) throw std::invalid_argument("token_log_probs: logits must be rank 2");
  const int rows = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int>(ids.size()) != rows) {
    throw std::invalid_argument("token_log_probs: one target per logits row required");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) throw std::out_of_range("token_log_probs: id out of range");
  }

  std::vector<double> probs(static_cast<size_t>(logits.size()));
  softmax_rows(logits.data().data(), probs.data(), rows, vocab);
  Tensor out = Tensor::zeros({rows});
  double* po = out.raw_data().data();
  const double* px = logits.data().data();
  for (int r = 0; r < rows; ++r) {
    const double* row = px + r * vocab;
    double mx = row[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    po[r] = row[ids[static_cast<size_t>(r)]] - mx - std::log(z);
  }
  check_finite(*out.impl(), "token_log_probs");

  auto li = logits.impl(), oi = out.impl();
  record("token_log_probs", {&logits}, out, [li, oi, ids, rows, vocab, probs]() {
    auto* gl = grad_of(li, true);
    const double* g = oi->grad.data();
    for (int r = 0; r < rows; ++r) {
      const double gr = g[r];
      const int target = ids[static_cast<size_t>(r)];
      for (int j = 0; j < vocab; ++j) {
        const double indicator = j == target ? 1.0 : 0.0;
        (*gl)[r * vocab + j] += gr * (indicator - probs[static_cast<size_t>(r * vocab + j)]);
      }
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int pad_id) {
  if (logits.rank() != 2 || static_cast<int>(targets.size()) != logits.dim(0)) {
    throw std::invalid_argument("cross_entropy: one target per logits row required");
  }
  std::vector<int> safe_targets = targets;
  std::vector<double> keep(targets.size(), 0.0);
  int live = 0;
  for (size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == pad_id) {
      safe_targets[t] = 0;  // any valid row; masked out below
    } else {
      keep[t] = 1.0;
      ++live;
    }
  }
  if (live == 0) throw std::invalid_argument("cross_entropy: every position is padding");

  Tensor lp = token_log_probs(logits, safe_targets);
  Tensor masked = mul(lp, Tensor::from_data({static_cast<int>(keep.size())}, keep));
  return mul(sum(masked), -1.0 / live);
}

}  // namespace glied
