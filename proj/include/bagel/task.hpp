#pragma once

// Synthetic shapes-on-grid task: captions over a tiny fixed vocabulary
// describe one colored shape in one quadrant of a 64x64 image. Rendering is
// deterministic and attribute decoding inverts it exactly, so generation
// quality reduces to a mechanical classification check.

#include <optional>
#include <string>
#include <vector>

#include "bagel/layout.hpp"
#include "bagel/model.hpp"
#include "bagel/rng.hpp"
#include "bagel/tensor.hpp"
#include "bagel/vision.hpp"

namespace bagel {

// word ids; the caption grammar is [bos, color, shape, row, col, eos]
struct ToyVocab {
  static constexpr int bos = 0, eos = 1;
  static constexpr int first_color = 2;   // red green blue yellow
  static constexpr int first_shape = 6;   // square circle triangle
  static constexpr int first_row = 9;     // top bottom
  static constexpr int first_col = 11;    // left right
  static constexpr int size = 13;

  static const char* word(int id);
  static int id_of(const std::string& word);  // -1 when unknown
};

struct Attributes {
  int color = 0;  // 0..3
  int shape = 0;  // 0..2
  int row = 0;    // 0..1
  int col = 0;    // 0..1

  bool operator==(const Attributes&) const = default;
  int combo_index() const { return ((color * 3 + shape) * 2 + row) * 2 + col; }
};

std::vector<int> caption_tokens(const Attributes& a);
std::optional<Attributes> attributes_from_caption(const std::vector<int>& tokens);
std::string caption_text(const std::vector<int>& tokens);

// 64x64x3 render; pure colors on a dark background, shape inset in its cell
Tensor render_attributes(const Attributes& a);

struct TaskSample {
  SampleLayout layout;
  SampleInputs inputs;
  Attributes attrs;  // meaningful for image-bearing samples
  enum class Kind { Generation, Understanding, TextOnly } kind = Kind::TextOnly;
};

class ToyTask {
 public:
  explicit ToyTask(const ToyVae& vae);

  static constexpr int image_px = 64;

  bool is_holdout(const Attributes& a) const;
  Attributes draw_train_attributes(Rng& rng) const;
  const std::vector<Attributes>& holdout() const { return holdout_; }

  // caption -> image; the target carries only its noised split, exactly like
  // an in-flight image during inference, so the answer is never visible to
  // its own denoising queries during training
  TaskSample make_generation_sample(const Attributes& a, double timestep_shift, Rng& rng,
                                    Regime regime = Regime::InterleavedGen,
                                    double grouping_prob = 0.5) const;
  // image (ViT + clean conditioning) -> caption
  TaskSample make_understanding_sample(const Attributes& a) const;
  // caption alone, keeps the text head exercised without images
  TaskSample make_text_sample(const Attributes& a) const;

  // classify the dominant cell, then color, then shape against templates
  // projected through the same VAE subspace generated images live in
  Attributes decode_attributes(const Tensor& image) const;

  int latent_side() const { return image_px / vae_->downsample(); }

 private:
  const ToyVae* vae_;
  std::vector<Attributes> holdout_;
  // per (shape, cell): mean-centered unit-norm luminance template, 32x32
  std::vector<std::vector<double>> templates_;
};

}  // namespace bagel
