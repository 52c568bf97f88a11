#pragma once

#include <cstdint>
#include <vector>

#include "bagel/errors.hpp"

namespace bagel {

// One allowed rectangle of (query rows) x (key cols). Half-open ranges.
struct MaskInterval {
  int q_begin = 0, q_end = 0;
  int k_begin = 0, k_end = 0;
};

// Boolean attention-permission matrix, query row -> key column.
// Square (rows == cols) for training masks; rectangular when querying new
// tokens against a longer cached context.
struct MaskSpec {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allow;  // rows*cols, row-major
  std::vector<MaskInterval> intervals;  // optional block form

  MaskSpec() = default;
  MaskSpec(int r, int c) : rows(r), cols(c), allow(static_cast<size_t>(r) * c, 0) {}

  bool at(int q, int k) const { return allow[static_cast<size_t>(q) * cols + k] != 0; }
  void set(int q, int k, bool v) { allow[static_cast<size_t>(q) * cols + k] = v ? 1 : 0; }

  // Square masks must permit self-attention on every row.
  void check_square_diagonal() const {
    if (rows != cols) throw LayoutError("mask: diagonal check requires square mask");
    for (int i = 0; i < rows; ++i)
      if (!at(i, i)) throw LayoutError("mask: token may not attend to itself");
  }
};

// Greedy block cover: consecutive identical query rows are grouped, then each
// group's permitted key set is cut into maximal runs. Round-trips exactly.
std::vector<MaskInterval> mask_to_intervals(const MaskSpec& mask);

// Expand a block cover back into a boolean matrix.
MaskSpec intervals_to_mask(const std::vector<MaskInterval>& intervals, int rows, int cols);

}  // namespace bagel
