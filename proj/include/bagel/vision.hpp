#pragma once

// Frozen vision stand-ins. The VAE is an orthogonal projection per pixel
// block built from low-frequency DCT modes, so decode(encode(x)) reproduces
// x exactly on the retained subspace and nothing ever trains. The ViT is a
// one-block patch transformer with fixed random weights; only the MLP
// connector that follows it (owned by the model) is trainable.

#include "bagel/rng.hpp"
#include "bagel/tensor.hpp"

namespace bagel {

class ToyVae {
 public:
  ToyVae(int latent_channels, int downsample, double latent_scale);

  // {h, w, 3} pixels -> {h/ds, w/ds, channels} latents
  Tensor encode(const Tensor& image) const;
  // transpose map back to pixels; exact inverse on the projection subspace
  Tensor decode(const Tensor& latent) const;

  int channels() const { return ch_; }
  int downsample() const { return ds_; }

 private:
  int ch_ = 0, ds_ = 0;
  double scale_ = 1.0;
  // column-orthonormal, [ds*ds*3 x channels], block values ordered (py, px, c)
  std::vector<double> basis_;
};

class ToyVit {
 public:
  ToyVit(int patch, int width, Rng& rng);

  // {h, w, 3} pixels -> {(h/p)(w/p), width} features, gradient-free
  Tensor encode(const Tensor& image) const;

  int tokens_for(int h, int w) const;
  int patch() const { return patch_; }
  int width() const { return width_; }

 private:
  int patch_ = 0, width_ = 0;
  Tensor proj_;
  Tensor norm1_, wq_, wk_, wv_, wo_;
  Tensor norm2_, w_gate_up_, w_down_;
};

}  // namespace bagel
