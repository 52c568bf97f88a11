#include "bagel/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace bagel {

namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) throw ShapeError(std::string(op) + ": shape mismatch");
}

// used inside backward closures: the flag was captured when the op ran, so the
// current grad-enabled state is irrelevant here
bool want_grad(const Tensor& t) { return t.requires_grad; }

Tensor make_out(const std::vector<int>& shape, bool rg) {
  Tensor out = Tensor::zeros(shape, g_grad_enabled && rg);
  return out;
}

void attach(Tensor& out, std::vector<Tensor> parents, std::function<void(Tensor&)> bw) {
  if (!out.requires_grad) return;
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(bw);
}

// raw matmul kernels, accumulate into out
void mm_nn(double* out, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* oi = out + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) oi[j] += av * bp[j];
    }
  }
}

// out[m x k] += a[m x n] . b[k x n]^T
void mm_nt(double* out, const double* a, const double* b, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * n;
    double* oi = out + static_cast<size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* bj = b + static_cast<size_t>(j) * n;
      double acc = 0.0;
      for (int p = 0; p < n; ++p) acc += ai[p] * bj[p];
      oi[j] += acc;
    }
  }
}

// out[k x n] += a[m x k]^T . b[m x n]
void mm_tn(double* out, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    const double* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* op = out + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) op[j] += av * bi[j];
    }
  }
}

struct RopeAngles {
  // per token: angles for the row half then the column half
  std::vector<double> cs, sn;  // tokens x (dh/2) pairs
  int pairs_per_axis;
};

RopeAngles rope_angles(const std::vector<std::pair<int, int>>& positions, int dh, double base) {
  const int half = dh / 2;
  const int pairs = half / 2;  // rotary pairs per axis
  RopeAngles out;
  out.pairs_per_axis = pairs;
  const size_t n = positions.size();
  out.cs.resize(n * 2 * pairs);
  out.sn.resize(n * 2 * pairs);
  std::vector<double> theta(pairs);
  for (int j = 0; j < pairs; ++j) theta[j] = std::pow(base, -2.0 * j / half);
  for (size_t t = 0; t < n; ++t) {
    for (int axis = 0; axis < 2; ++axis) {
      const double pos = axis == 0 ? positions[t].first : positions[t].second;
      for (int j = 0; j < pairs; ++j) {
        const double ang = pos * theta[j];
        out.cs[(t * 2 + axis) * pairs + j] = std::cos(ang);
        out.sn[(t * 2 + axis) * pairs + j] = std::sin(ang);
      }
    }
  }
  return out;
}

void rope_apply(double* out, const double* in, const RopeAngles& ang, int tokens, int heads,
                int dh, bool inverse) {
  const int pairs = ang.pairs_per_axis;
  const int half = dh / 2;
  for (int t = 0; t < tokens; ++t) {
    for (int h = 0; h < heads; ++h) {
      const size_t off = (static_cast<size_t>(t) * heads + h) * dh;
      for (int axis = 0; axis < 2; ++axis) {
        const size_t aoff = (static_cast<size_t>(t) * 2 + axis) * pairs;
        for (int j = 0; j < pairs; ++j) {
          const double c = ang.cs[aoff + j];
          const double s = inverse ? -ang.sn[aoff + j] : ang.sn[aoff + j];
          const size_t i0 = off + axis * half + 2 * j;
          const double x0 = in[i0], x1 = in[i0 + 1];
          out[i0] = x0 * c - x1 * s;
          out[i0 + 1] = x0 * s + x1 * c;
        }
      }
    }
  }
}

}  // namespace

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative extent");
    n *= static_cast<size_t>(d);
  }
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void Tensor::ensure_grad() {
  if (!grad) grad = std::make_shared<std::vector<double>>(numel(), 0.0);
}

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(shape_numel(shape), 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::full(const std::vector<int>& shape, double value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

Tensor Tensor::ones(const std::vector<int>& shape, bool requires_grad) {
  return full(shape, 1.0, requires_grad);
}

Tensor Tensor::from_values(const std::vector<int>& shape, std::vector<double> values,
                           bool requires_grad) {
  if (values.size() != shape_numel(shape)) throw ShapeError("from_values: size mismatch");
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::randn(const std::vector<int>& shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (auto& v : *t.data) v = rng.normal() * stddev;
  return t;
}

void backward(Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  if (!loss.node && !loss.requires_grad) return;
  loss.ensure_grad();
  (*loss.grad)[0] = 1.0;

  // iterative post-order DFS over creator nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (loss.node) {
    visited.insert(loss.node.get());
    stack.push_back({loss.node.get(), 0});
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Tensor& p = f.node->parents[f.next_parent++];
      if (p.node && !visited.count(p.node.get())) {
        visited.insert(p.node.get());
        stack.push_back({p.node.get(), 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // every op captures its own output tensor by value inside the closure, so
  // the Tensor& parameter is unused; the root loss is passed as a placeholder
  for (auto it = order.rbegin(); it != order.rend(); ++it) (*it)->backward(loss);
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_out(a.shape, a.requires_grad || b.requires_grad);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (out.requires_grad) {
    Tensor a_ = a, b_ = b, o = out;
    attach(out, {a, b}, [a_, b_, o](Tensor&) mutable {
      const auto& g = *o.grad;
      if (want_grad(a_)) {
        a_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*a_.grad)[i] += g[i];
      }
      if (want_grad(b_)) {
        b_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*b_.grad)[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_out(a.shape, a.requires_grad || b.requires_grad);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (out.requires_grad) {
    Tensor a_ = a, b_ = b, o = out;
    attach(out, {a, b}, [a_, b_, o](Tensor&) mutable {
      const auto& g = *o.grad;
      if (want_grad(a_)) {
        a_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*a_.grad)[i] += g[i];
      }
      if (want_grad(b_)) {
        b_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*b_.grad)[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_out(a.shape, a.requires_grad || b.requires_grad);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (out.requires_grad) {
    Tensor a_ = a, b_ = b, o = out;
    attach(out, {a, b}, [a_, b_, o](Tensor&) mutable {
      const auto& g = *o.grad;
      if (want_grad(a_)) {
        a_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*a_.grad)[i] += g[i] * b_.at(i);
      }
      if (want_grad(b_)) {
        b_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*b_.grad)[i] += g[i] * a_.at(i);
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_out(a.shape, a.requires_grad);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  if (out.requires_grad) {
    Tensor a_ = a, o = out;
    attach(out, {a}, [a_, o, c](Tensor&) mutable {
      if (!want_grad(a_)) return;
      a_.ensure_grad();
      const auto& g = *o.grad;
      for (size_t i = 0; i < g.size(); ++i) (*a_.grad)[i] += g[i] * c;
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: expects 2-D inputs");
  const int m = a.dim(0), k = a.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner extents differ");
  const int n = b.dim(1);
  Tensor out = make_out({m, n}, a.requires_grad || b.requires_grad);
  mm_nn(out.ptr(), a.ptr(), b.ptr(), m, k, n);
  if (out.requires_grad) {
    Tensor a_ = a, b_ = b, o = out;
    attach(out, {a, b}, [a_, b_, o, m, k, n](Tensor&) mutable {
      const double* g = o.grad->data();
      if (want_grad(a_)) {
        a_.ensure_grad();
        mm_nt(a_.grad->data(), g, b_.ptr(), m, n, k);  // dA = dOut . B^T
      }
      if (want_grad(b_)) {
        b_.ensure_grad();
        mm_tn(b_.grad->data(), a_.ptr(), g, m, k, n);  // dB = A^T . dOut
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  const int d = x.cols();
  if (v.numel() != static_cast<size_t>(d)) throw ShapeError("add_rowvec: vector length mismatch");
  Tensor out = make_out(x.shape, x.requires_grad || v.requires_grad);
  const size_t rows = x.rows();
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out.at(r * d + j) = x.at(r * d + j) + v.at(j);
  if (out.requires_grad) {
    Tensor x_ = x, v_ = v, o = out;
    attach(out, {x, v}, [x_, v_, o, rows, d](Tensor&) mutable {
      const auto& g = *o.grad;
      if (want_grad(x_)) {
        x_.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) (*x_.grad)[i] += g[i];
      }
      if (want_grad(v_)) {
        v_.ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) (*v_.grad)[j] += g[r * d + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, const std::vector<int>& shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
  Tensor out = make_out(shape, x.requires_grad);
  std::copy(x.data->begin(), x.data->end(), out.data->begin());
  if (out.requires_grad) {
    Tensor x_ = x, o = out;
    attach(out, {x}, [x_, o](Tensor&) mutable {
      if (!want_grad(x_)) return;
      x_.ensure_grad();
      const auto& g = *o.grad;
      for (size_t i = 0; i < g.size(); ++i) (*x_.grad)[i] += g[i];
    });
  }
  return out;
}

Tensor reindex(const Tensor& x, const std::vector<size_t>& index_map,
               const std::vector<int>& out_shape) {
  if (index_map.size() != shape_numel(out_shape)) throw ShapeError("reindex: map size mismatch");
  Tensor out = make_out(out_shape, x.requires_grad);
  for (size_t i = 0; i < index_map.size(); ++i) out.at(i) = x.at(index_map[i]);
  if (out.requires_grad) {
    Tensor x_ = x, o = out;
    auto map = index_map;
    attach(out, {x}, [x_, o, map](Tensor&) mutable {
      if (!want_grad(x_)) return;
      x_.ensure_grad();
      const auto& g = *o.grad;
      for (size_t i = 0; i < map.size(); ++i) (*x_.grad)[map[i]] += g[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  const int d = x.cols();
  const size_t rows = x.rows();
  Tensor out = make_out({static_cast<int>(idx.size()), d}, x.requires_grad);
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<size_t>(idx[r]) >= rows)
      throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.ptr() + static_cast<size_t>(idx[r]) * d, d, out.ptr() + r * d);
  }
  if (out.requires_grad) {
    Tensor x_ = x, o = out;
    auto idx_ = idx;
    attach(out, {x}, [x_, o, idx_, d](Tensor&) mutable {
      if (!want_grad(x_)) return;
      x_.ensure_grad();
      const auto& g = *o.grad;
      for (size_t r = 0; r < idx_.size(); ++r)
        for (int j = 0; j < d; ++j)
          (*x_.grad)[static_cast<size_t>(idx_[r]) * d + j] += g[r * d + j];
    });
  }
  return out;
}

Tensor merge_rows(const std::vector<Tensor>& parts,
                  const std::vector<std::vector<int>>& row_idx, int n_rows) {
  if (parts.empty() || parts.size() != row_idx.size())
    throw ShapeError("merge_rows: parts/index mismatch");
  const int d = parts[0].cols();
  std::vector<uint8_t> covered(static_cast<size_t>(n_rows), 0);
  bool rg = false;
  for (size_t p = 0; p < parts.size(); ++p) {
    if (parts[p].cols() != d) throw ShapeError("merge_rows: column mismatch");
    if (parts[p].rows() != row_idx[p].size()) throw ShapeError("merge_rows: row count mismatch");
    rg = rg || parts[p].requires_grad;
    for (int r : row_idx[p]) {
      if (r < 0 || r >= n_rows || covered[static_cast<size_t>(r)])
        throw ShapeError("merge_rows: rows must cover the output disjointly");
      covered[static_cast<size_t>(r)] = 1;
    }
  }
  for (uint8_t c : covered)
    if (!c) throw ShapeError("merge_rows: uncovered output row");
  Tensor out = make_out({n_rows, d}, rg);
  for (size_t p = 0; p < parts.size(); ++p)
    for (size_t r = 0; r < row_idx[p].size(); ++r)
      std::copy_n(parts[p].ptr() + r * d, d, out.ptr() + static_cast<size_t>(row_idx[p][r]) * d);
  if (out.requires_grad) {
    std::vector<Tensor> parts_ = parts;
    auto idx_ = row_idx;
    Tensor o = out;
    attach(out, parts, [parts_, idx_, o, d](Tensor&) mutable {
      const auto& g = *o.grad;
      for (size_t p = 0; p < parts_.size(); ++p) {
        if (!want_grad(parts_[p])) continue;
        parts_[p].ensure_grad();
        for (size_t r = 0; r < idx_[p].size(); ++r)
          for (int j = 0; j < d; ++j)
            (*parts_[p].grad)[r * d + j] += g[static_cast<size_t>(idx_[p][r]) * d + j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int d = parts[0].cols();
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column mismatch");
    total += static_cast<int>(p.rows());
    rg = rg || p.requires_grad;
  }
  Tensor out = make_out({total, d}, rg);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.ptr() + off);
    off += p.numel();
  }
  if (out.requires_grad) {
    std::vector<Tensor> parts_ = parts;
    Tensor o = out;
    attach(out, parts, [parts_, o](Tensor&) mutable {
      const auto& g = *o.grad;
      size_t off2 = 0;
      for (auto& p : parts_) {
        if (want_grad(p)) {
          p.ensure_grad();
          for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += g[off2 + i];
        }
        off2 += p.numel();
      }
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  const int d = x.cols();
  if (d <= 0) throw ShapeError("rms_norm: empty last axis");
  if (eps < 0.0) throw ConfigError("rms_norm: eps must be non-negative");
  if (weight.numel() != static_cast<size_t>(d)) throw ShapeError("rms_norm: weight length mismatch");
  const size_t rows = x.rows();
  Tensor out = make_out(x.shape, x.requires_grad || weight.requires_grad);
  std::vector<double> inv(rows);
  for (size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    const double* xr = x.ptr() + r * d;
    for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
    inv[r] = 1.0 / std::sqrt(ss / d + eps);
    double* orow = out.ptr() + r * d;
    for (int j = 0; j < d; ++j) orow[j] = xr[j] * inv[r] * weight.at(static_cast<size_t>(j));
  }
  if (out.requires_grad) {
    Tensor x_ = x, w_ = weight, o = out;
    attach(out, {x, weight}, [x_, w_, o, inv, rows, d](Tensor&) mutable {
      const auto& g = *o.grad;
      const bool gx = want_grad(x_), gw = want_grad(w_);
      if (gx) x_.ensure_grad();
      if (gw) w_.ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double* xr = x_.ptr() + r * d;
        const double* gr = g.data() + r * d;
        const double ir = inv[r];
        double dot = 0.0;  // sum_j g_j w_j x_j
        for (int j = 0; j < d; ++j) dot += gr[j] * w_.at(static_cast<size_t>(j)) * xr[j];
        if (gx) {
          const double c = ir * ir * ir * dot / d;
          for (int j = 0; j < d; ++j)
            (*x_.grad)[r * d + j] += gr[j] * w_.at(static_cast<size_t>(j)) * ir - xr[j] * c;
        }
        if (gw)
          for (int j = 0; j < d; ++j) (*w_.grad)[j] += gr[j] * xr[j] * ir;
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = make_out(x.shape, x.requires_grad);
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x.at(i)));
    out.at(i) = x.at(i) * s;
  }
  if (out.requires_grad) {
    Tensor x_ = x, o = out;
    attach(out, {x}, [x_, o](Tensor&) mutable {
      if (!want_grad(x_)) return;
      x_.ensure_grad();
      const auto& g = *o.grad;
      for (size_t i = 0; i < g.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x_.at(i)));
        (*x_.grad)[i] += g[i] * s * (1.0 + x_.at(i) * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor swiglu(const Tensor& x) {
  const int d2 = x.cols();
  if (d2 % 2 != 0) throw ShapeError("swiglu: last extent must be even");
  const int h = d2 / 2;
  const size_t rows = x.rows();
  std::vector<int> out_shape = x.shape;
  out_shape.back() = h;
  Tensor out = make_out(out_shape, x.requires_grad);
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * d2;
    double* orow = out.ptr() + r * h;
    for (int j = 0; j < h; ++j) {
      const double gte = xr[j];
      const double s = 1.0 / (1.0 + std::exp(-gte));
      orow[j] = gte * s * xr[h + j];
    }
  }
  if (out.requires_grad) {
    Tensor x_ = x, o = out;
    attach(out, {x}, [x_, o, rows, h, d2](Tensor&) mutable {
      if (!want_grad(x_)) return;
      x_.ensure_grad();
      const auto& g = *o.grad;
      for (size_t r = 0; r < rows; ++r) {
        const double* xr = x_.ptr() + r * d2;
        const double* gr = g.data() + r * h;
        for (int j = 0; j < h; ++j) {
          const double gte = xr[j];
          const double s = 1.0 / (1.0 + std::exp(-gte));
          const double act = gte * s;
          (*x_.grad)[r * d2 + j] += gr[j] * xr[h + j] * s * (1.0 + gte * (1.0 - s));
          (*x_.grad)[r * d2 + h + j] += gr[j] * act;
        }
      }
    });
  }
  return out;
}

Tensor rope_2d(const Tensor& x, const std::vector<std::pair<int, int>>& positions, double base) {
  if (x.ndim() != 3) throw ShapeError("rope_2d: expects [tokens x heads x head_dim]");
  const int tokens = x.dim(0), heads = x.dim(1), dh = x.dim(2);
  if (dh % 4 != 0) throw ConfigError("rope_2d: head_dim must be divisible by 4");
  if (positions.size() != static_cast<size_t>(tokens))
    throw ShapeError("rope_2d: one position per token required");
  RopeAngles ang = rope_angles(positions, dh, base);
  Tensor out = make_out(x.shape, x.requires_grad);
  rope_apply(out.ptr(), x.ptr(), ang, tokens, heads, dh, false);
  if (out.requires_grad) {
    Tensor x_ = x, o = out;
    attach(out, {x}, [x_, o, ang, tokens, heads, dh](Tensor&) mutable {
      if (!want_grad(x_)) return;
      x_.ensure_grad();
      // rotation is orthogonal: gradient rotates by the negated angles
      std::vector<double> tmp(o.grad->size());
      rope_apply(tmp.data(), o.grad->data(), ang, tokens, heads, dh, true);
      for (size_t i = 0; i < tmp.size(); ++i) (*x_.grad)[i] += tmp[i];
    });
  }
  return out;
}

Tensor masked_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                             const MaskSpec& mask) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw ShapeError("attention: expects [tokens x heads x head_dim]");
  const int nq = q.dim(0), heads = q.dim(1), dh = q.dim(2);
  const int nk = k.dim(0);
  if (k.shape != v.shape || k.dim(1) != heads || k.dim(2) != dh)
    throw ShapeError("attention: k/v shape mismatch");
  if (mask.rows != nq || mask.cols != nk) throw LayoutError("attention: mask extents mismatch");

  // permitted key runs per query row
  std::vector<std::vector<std::pair<int, int>>> runs(static_cast<size_t>(nq));
  for (int i = 0; i < nq; ++i) {
    int j = 0;
    while (j < nk) {
      if (mask.at(i, j)) {
        int b = j;
        while (j < nk && mask.at(i, j)) ++j;
        runs[static_cast<size_t>(i)].push_back({b, j});
      } else {
        ++j;
      }
    }
    if (runs[static_cast<size_t>(i)].empty())
      throw LayoutError("attention: query row with no permitted keys");
  }

  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool rg = q.requires_grad || k.requires_grad || v.requires_grad;
  Tensor out = make_out(q.shape, rg);
  const bool keep_probs = out.requires_grad;
  // probs laid out [heads][nq x nk]; zero at forbidden entries
  auto probs = std::make_shared<std::vector<double>>();
  if (keep_probs) probs->assign(static_cast<size_t>(heads) * nq * nk, 0.0);

  std::vector<double> logits(static_cast<size_t>(nk));
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < nq; ++i) {
      const double* qi = q.ptr() + (static_cast<size_t>(i) * heads + h) * dh;
      double mx = -1e300;
      for (auto [b, e] : runs[static_cast<size_t>(i)]) {
        for (int j = b; j < e; ++j) {
          const double* kj = k.ptr() + (static_cast<size_t>(j) * heads + h) * dh;
          double acc = 0.0;
          for (int t = 0; t < dh; ++t) acc += qi[t] * kj[t];
          logits[static_cast<size_t>(j)] = acc * sc;
          mx = std::max(mx, logits[static_cast<size_t>(j)]);
        }
      }
      double denom = 0.0;
      for (auto [b, e] : runs[static_cast<size_t>(i)])
        for (int j = b; j < e; ++j) denom += std::exp(logits[static_cast<size_t>(j)] - mx);
      double* orow = out.ptr() + (static_cast<size_t>(i) * heads + h) * dh;
      for (auto [b, e] : runs[static_cast<size_t>(i)]) {
        for (int j = b; j < e; ++j) {
          const double p = std::exp(logits[static_cast<size_t>(j)] - mx) / denom;
          if (keep_probs)
            (*probs)[(static_cast<size_t>(h) * nq + i) * nk + j] = p;
          const double* vj = v.ptr() + (static_cast<size_t>(j) * heads + h) * dh;
          for (int t = 0; t < dh; ++t) orow[t] += p * vj[t];
        }
      }
    }
  }

  if (out.requires_grad) {
    Tensor q_ = q, k_ = k, v_ = v, o = out;
    attach(out, {q, k, v}, [q_, k_, v_, o, probs, runs, nq, nk, heads, dh, sc](Tensor&) mutable {
      const auto& g = *o.grad;
      const bool gq = want_grad(q_), gk = want_grad(k_), gv = want_grad(v_);
      if (gq) q_.ensure_grad();
      if (gk) k_.ensure_grad();
      if (gv) v_.ensure_grad();
      std::vector<double> ds(static_cast<size_t>(nk));
      for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < nq; ++i) {
          const double* go = g.data() + (static_cast<size_t>(i) * heads + h) * dh;
          const double* prow = probs->data() + (static_cast<size_t>(h) * nq + i) * nk;
          // dp_j = go . v_j ; ds_j = p_j (dp_j - sum_j' p_j' dp_j')
          double mean = 0.0;
          for (auto [b, e] : runs[static_cast<size_t>(i)]) {
            for (int j = b; j < e; ++j) {
              const double* vj = v_.ptr() + (static_cast<size_t>(j) * heads + h) * dh;
              double dp = 0.0;
              for (int t = 0; t < dh; ++t) dp += go[t] * vj[t];
              ds[static_cast<size_t>(j)] = dp;
              mean += prow[j] * dp;
            }
          }
          const double* qi = q_.ptr() + (static_cast<size_t>(i) * heads + h) * dh;
          for (auto [b, e] : runs[static_cast<size_t>(i)]) {
            for (int j = b; j < e; ++j) {
              const double p = prow[j];
              const double dsj = p * (ds[static_cast<size_t>(j)] - mean) * sc;
              const double* kj = k_.ptr() + (static_cast<size_t>(j) * heads + h) * dh;
              if (gv) {
                double* gvj = v_.grad->data() + (static_cast<size_t>(j) * heads + h) * dh;
                for (int t = 0; t < dh; ++t) gvj[t] += p * go[t];
              }
              if (gq) {
                double* gqi = q_.grad->data() + (static_cast<size_t>(i) * heads + h) * dh;
                for (int t = 0; t < dh; ++t) gqi[t] += dsj * kj[t];
              }
              if (gk) {
                double* gkj = k_.grad->data() + (static_cast<size_t>(j) * heads + h) * dh;
                for (int t = 0; t < dh; ++t) gkj[t] += dsj * qi[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const MaskSpec& mask,
                        const Tensor& q_norm_w, const Tensor& k_norm_w, double norm_eps) {
  if (q.ndim() != 3) throw ShapeError("masked_attention: expects [tokens x heads x head_dim]");
  const int heads = q.dim(1), dh = q.dim(2);
  auto norm_heads = [&](const Tensor& x, const Tensor& w) {
    Tensor flat = reshape(x, {x.dim(0) * heads, dh});
    Tensor n = rms_norm(flat, w, norm_eps);
    return reshape(n, x.shape);
  };
  return masked_attention_core(norm_heads(q, q_norm_w), norm_heads(k, k_norm_w), v, mask);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: expects [rows x vocab]");
  const int n = logits.dim(0), vsz = logits.dim(1);
  if (targets.size() != static_cast<size_t>(n))
    throw ShapeError("cross_entropy: one target per row required");
  int count = 0;
  for (int t : targets) {
    if (t >= vsz) throw ShapeError("cross_entropy: target out of vocab");
    if (t >= 0) ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy: no scored rows");
  Tensor out = make_out({1}, logits.requires_grad);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (targets[static_cast<size_t>(i)] < 0) continue;
    const double* row = logits.ptr() + static_cast<size_t>(i) * vsz;
    double mx = row[0];
    for (int j = 1; j < vsz; ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (int j = 0; j < vsz; ++j) lse += std::exp(row[j] - mx);
    total += std::log(lse) + mx - row[targets[static_cast<size_t>(i)]];
  }
  out.at(0) = total / count;
  if (out.requires_grad) {
    Tensor l_ = logits, o = out;
    auto tg = targets;
    attach(out, {logits}, [l_, o, tg, n, vsz, count](Tensor&) mutable {
      if (!want_grad(l_)) return;
      l_.ensure_grad();
      const double gscale = (*o.grad)[0] / count;
      for (int i = 0; i < n; ++i) {
        if (tg[static_cast<size_t>(i)] < 0) continue;
        const double* row = l_.ptr() + static_cast<size_t>(i) * vsz;
        double mx = row[0];
        for (int j = 1; j < vsz; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (int j = 0; j < vsz; ++j) lse += std::exp(row[j] - mx);
        double* grow = l_.grad->data() + static_cast<size_t>(i) * vsz;
        for (int j = 0; j < vsz; ++j) {
          double p = std::exp(row[j] - mx) / lse;
          grow[j] += gscale * (p - (j == tg[static_cast<size_t>(i)] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor masked_mse_mean(const Tensor& pred, const Tensor& target,
                       const std::vector<uint8_t>& element_mask) {
  check_same_shape(pred, target, "masked_mse");
  if (!element_mask.empty() && element_mask.size() != pred.numel())
    throw ShapeError("masked_mse: mask size mismatch");
  size_t count = 0;
  if (element_mask.empty()) {
    count = pred.numel();
  } else {
    for (uint8_t m : element_mask) count += m ? 1 : 0;
  }
  if (count == 0) throw ShapeError("masked_mse: empty mask, loss undefined");
  Tensor out = make_out({1}, pred.requires_grad);
  double total = 0.0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    if (!element_mask.empty() && !element_mask[i]) continue;
    const double d = pred.at(i) - target.at(i);
    total += d * d;
  }
  out.at(0) = total / static_cast<double>(count);
  if (out.requires_grad) {
    Tensor p_ = pred, t_ = target, o = out;
    auto m = element_mask;
    attach(out, {pred}, [p_, t_, o, m, count](Tensor&) mutable {
      if (!want_grad(p_)) return;
      p_.ensure_grad();
      const double gscale = 2.0 * (*o.grad)[0] / static_cast<double>(count);
      for (size_t i = 0; i < p_.numel(); ++i) {
        if (!m.empty() && !m[i]) continue;
        (*p_.grad)[i] += gscale * (p_.at(i) - t_.at(i));
      }
    });
  }
  return out;
}

Tensor sum_sq_diff(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "sum_sq_diff");
  Tensor out = make_out({1}, pred.requires_grad);
  double total = 0.0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred.at(i) - target.at(i);
    total += d * d;
  }
  out.at(0) = total;
  if (out.requires_grad) {
    Tensor p_ = pred, t_ = target, o = out;
    attach(out, {pred}, [p_, t_, o](Tensor&) mutable {
      if (!want_grad(p_)) return;
      p_.ensure_grad();
      const double g = 2.0 * (*o.grad)[0];
      for (size_t i = 0; i < p_.numel(); ++i) (*p_.grad)[i] += g * (p_.at(i) - t_.at(i));
    });
  }
  return out;
}

double scalar_value(const Tensor& t) {
  if (t.numel() != 1) throw ShapeError("scalar_value: tensor is not scalar");
  return t.at(0);
}

}  // namespace bagel
