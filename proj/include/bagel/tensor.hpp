#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bagel/errors.hpp"
#include "bagel/maskspec.hpp"
#include "bagel/rng.hpp"

namespace bagel {

struct Node;

// Dense 64-bit array with optional gradient buffer. Copies alias the same
// storage; buffers are treated as immutable once an op has produced them.
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;  // same length as data when present
  std::shared_ptr<Node> node;                 // creator op, if recorded
  bool requires_grad = false;

  Tensor() = default;

  size_t numel() const { return data ? data->size() : 0; }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double& at(size_t i) { return (*data)[i]; }
  double at(size_t i) const { return (*data)[i]; }

  // rows()/cols() view the array as [rows x last_dim]
  int cols() const { return shape.empty() ? 1 : shape.back(); }
  size_t rows() const { return cols() == 0 ? 0 : numel() / static_cast<size_t>(cols()); }

  void ensure_grad();
  void zero_grad();

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<int>& shape, double value, bool requires_grad = false);
  static Tensor ones(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor from_values(const std::vector<int>& shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor randn(const std::vector<int>& shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
};

// Backward rule for one recorded op. The graph is acyclic; backward() visits
// each node exactly once in reverse topological order.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(Tensor&)> backward;  // accumulate into parents' grads
};

size_t shape_numel(const std::vector<int>& shape);

// Global recording switch (thread-local). Inference runs with it off.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// Reverse-mode sweep from a scalar loss.
void backward(Tensor& loss);

// ---- ops ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// broadcast a [d] vector over every row of x [.. x d]
Tensor add_rowvec(const Tensor& x, const Tensor& v);

// view with identical element order
Tensor reshape(const Tensor& x, const std::vector<int>& shape);

// out[i] = x[index_map[i]]; index_map need not be a permutation
Tensor reindex(const Tensor& x, const std::vector<size_t>& index_map,
               const std::vector<int>& out_shape);

// row selection / disjoint reassembly over the leading axis of [n x d]
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor merge_rows(const std::vector<Tensor>& parts,
                  const std::vector<std::vector<int>>& row_idx, int n_rows);
Tensor concat_rows(const std::vector<Tensor>& parts);

// out = x / sqrt(mean(x^2) + eps) * weight, per last-axis vector
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps);

Tensor silu(const Tensor& x);

// gate/value split of the last axis: silu(x[.., :h]) * x[.., h:]
Tensor swiglu(const Tensor& x);

// Axial rotary encoding on [tokens x heads x head_dim]: first half of the
// head dims rotates with the row index, second half with the column index.
// head_dim must be divisible by 4.
Tensor rope_2d(const Tensor& x, const std::vector<std::pair<int, int>>& positions,
               double base = 10000.0);

// Softmax attention restricted to mask-permitted keys; probabilities are
// renormalized over the permitted set only. q: [nq x H x dh], k/v: [nk x H x dh],
// mask: nq x nk. Throws LayoutError on an all-false query row.
Tensor masked_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                             const MaskSpec& mask);

// QK-Norm (RMS over the head dim with learned scales) then the masked core.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const MaskSpec& mask, const Tensor& q_norm_w,
                        const Tensor& k_norm_w, double norm_eps = 1e-6);

// mean over rows of logsumexp(row) - row[target]; target -1 skips the row
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);

// mean of (pred - target)^2 over elements where element_mask is true
// (empty mask vector means all elements). target is a constant.
Tensor masked_mse_mean(const Tensor& pred, const Tensor& target,
                       const std::vector<uint8_t>& element_mask);

// sum of squared differences against a constant target (building block for
// multi-image losses)
Tensor sum_sq_diff(const Tensor& pred, const Tensor& target);

double scalar_value(const Tensor& t);

}  // namespace bagel
