#include "bagel/maskspec.hpp"

#include "bagel/errors.hpp"

namespace bagel {

std::vector<MaskInterval> mask_to_intervals(const MaskSpec& mask) {
  std::vector<MaskInterval> out;
  int q = 0;
  while (q < mask.rows) {
    // extend over consecutive identical query rows
    int q_end = q + 1;
    auto same_row = [&](int a, int b) {
      for (int k = 0; k < mask.cols; ++k)
        if (mask.at(a, k) != mask.at(b, k)) return false;
      return true;
    };
    while (q_end < mask.rows && same_row(q, q_end)) ++q_end;
    // one rectangle per maximal run of permitted keys
    int k = 0;
    while (k < mask.cols) {
      if (mask.at(q, k)) {
        int k_end = k;
        while (k_end < mask.cols && mask.at(q, k_end)) ++k_end;
        out.push_back({q, q_end, k, k_end});
        k = k_end;
      } else {
        ++k;
      }
    }
    q = q_end;
  }
  return out;
}

MaskSpec intervals_to_mask(const std::vector<MaskInterval>& intervals, int rows, int cols) {
  MaskSpec mask;
  mask.rows = rows;
  mask.cols = cols;
  mask.allow.assign(static_cast<size_t>(rows) * cols, 0);
  for (const auto& iv : intervals) {
    if (iv.q_begin < 0 || iv.q_end > rows || iv.k_begin < 0 || iv.k_end > cols ||
        iv.q_begin >= iv.q_end || iv.k_begin >= iv.k_end)
      throw LayoutError("intervals_to_mask: interval out of range");
    for (int q = iv.q_begin; q < iv.q_end; ++q)
      for (int k = iv.k_begin; k < iv.k_end; ++k) mask.set(q, k, true);
  }
  return mask;
}

}  // namespace bagel
