#include "bagel/vision.hpp"

#include <cmath>

#include "bagel/errors.hpp"
#include "bagel/maskspec.hpp"

namespace bagel {

namespace {

// orthonormal 2-D DCT-II mode on an N x N block
double dct_mode(int n, int u, int v, int y, int x) {
  const double pi = 3.14159265358979323846;
  const double au = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
  const double av = v == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
  return au * av * std::cos((2 * y + 1) * u * pi / (2.0 * n)) *
         std::cos((2 * x + 1) * v * pi / (2.0 * n));
}

}  // namespace

ToyVae::ToyVae(int latent_channels, int downsample, double latent_scale)
    : ch_(latent_channels), ds_(downsample), scale_(latent_scale) {
  if (latent_channels != 16)
    throw ConfigError("toy vae: the DCT basis is laid out for 16 latent channels");
  if (downsample < 4) throw ConfigError("toy vae: downsample must be at least 4");
  if (latent_scale <= 0.0) throw ConfigError("toy vae: latent scale must be positive");

  // per latent channel: (color channel, vertical mode, horizontal mode);
  // the three (0,0) entries are per-color block means, the rest low-frequency
  // detail that keeps shape boundaries decodable
  const int modes[16][3] = {
      {0, 0, 0}, {1, 0, 0}, {2, 0, 0},                          // means
      {0, 0, 1}, {0, 1, 0}, {0, 1, 1}, {0, 0, 2}, {0, 2, 0},    // red detail
      {1, 0, 1}, {1, 1, 0}, {1, 1, 1}, {1, 0, 2},               // green detail
      {2, 0, 1}, {2, 1, 0}, {2, 1, 1}, {2, 2, 0},               // blue detail
  };
  const int block = ds_ * ds_ * 3;
  basis_.assign(static_cast<size_t>(block) * ch_, 0.0);
  for (int c = 0; c < ch_; ++c) {
    const int color = modes[c][0], u = modes[c][1], v = modes[c][2];
    for (int y = 0; y < ds_; ++y)
      for (int x = 0; x < ds_; ++x) {
        const size_t row = static_cast<size_t>((y * ds_ + x) * 3 + color);
        basis_[row * ch_ + c] = dct_mode(ds_, u, v, y, x);
      }
  }
}

Tensor ToyVae::encode(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(2) != 3)
    throw ShapeError("toy vae encode: expects {h, w, 3}");
  const int h = image.dim(0), w = image.dim(1);
  if (h % ds_ != 0 || w % ds_ != 0)
    throw ConfigError("toy vae encode: extents must be divisible by the downsample");
  const int hl = h / ds_, wl = w / ds_;
  Tensor latent = Tensor::zeros({hl, wl, ch_}, false);
  for (int by = 0; by < hl; ++by)
    for (int bx = 0; bx < wl; ++bx)
      for (int c = 0; c < ch_; ++c) {
        double acc = 0.0;
        for (int y = 0; y < ds_; ++y)
          for (int x = 0; x < ds_; ++x)
            for (int col = 0; col < 3; ++col) {
              const size_t row = static_cast<size_t>((y * ds_ + x) * 3 + col);
              const double px = image.at(
                  (static_cast<size_t>(by * ds_ + y) * w + (bx * ds_ + x)) * 3 + col);
              acc += basis_[row * ch_ + c] * px;
            }
        latent.at((static_cast<size_t>(by) * wl + bx) * ch_ + c) = acc / scale_;
      }
  return latent;
}

Tensor ToyVae::decode(const Tensor& latent) const {
  if (latent.ndim() != 3 || latent.dim(2) != ch_)
    throw ShapeError("toy vae decode: expects {h_lat, w_lat, channels}");
  const int hl = latent.dim(0), wl = latent.dim(1);
  const int h = hl * ds_, w = wl * ds_;
  Tensor image = Tensor::zeros({h, w, 3}, false);
  for (int by = 0; by < hl; ++by)
    for (int bx = 0; bx < wl; ++bx)
      for (int y = 0; y < ds_; ++y)
        for (int x = 0; x < ds_; ++x)
          for (int col = 0; col < 3; ++col) {
            const size_t row = static_cast<size_t>((y * ds_ + x) * 3 + col);
            double acc = 0.0;
            for (int c = 0; c < ch_; ++c)
              acc += basis_[row * ch_ + c] *
                     latent.at((static_cast<size_t>(by) * wl + bx) * ch_ + c);
            image.at((static_cast<size_t>(by * ds_ + y) * w + (bx * ds_ + x)) * 3 + col) =
                acc * scale_;
          }
  return image;
}

ToyVit::ToyVit(int patch, int width, Rng& rng) : patch_(patch), width_(width) {
  if (patch < 1 || width < 4 || width % 4 != 0)
    throw ConfigError("toy vit: width must be a positive multiple of 4");
  const int in_dim = patch * patch * 3;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double s_w = 1.0 / std::sqrt(static_cast<double>(width));
  proj_ = Tensor::randn({in_dim, width}, rng, s_in, false);
  norm1_ = Tensor::ones({width}, false);
  wq_ = Tensor::randn({width, width}, rng, s_w, false);
  wk_ = Tensor::randn({width, width}, rng, s_w, false);
  wv_ = Tensor::randn({width, width}, rng, s_w, false);
  wo_ = Tensor::randn({width, width}, rng, s_w, false);
  norm2_ = Tensor::ones({width}, false);
  w_gate_up_ = Tensor::randn({width, 2 * width}, rng, s_w, false);
  w_down_ = Tensor::randn({width, width}, rng, s_w, false);
}

int ToyVit::tokens_for(int h, int w) const {
  if (h % patch_ != 0 || w % patch_ != 0)
    throw ConfigError("toy vit: extents must be divisible by the patch size");
  return (h / patch_) * (w / patch_);
}

Tensor ToyVit::encode(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(2) != 3) throw ShapeError("toy vit: expects {h, w, 3}");
  const int h = image.dim(0), w = image.dim(1);
  const int n = tokens_for(h, w);
  const int in_dim = patch_ * patch_ * 3;

  NoGradGuard frozen;
  Tensor patches = Tensor::zeros({n, in_dim}, false);
  const int cols = w / patch_;
  for (int t = 0; t < n; ++t) {
    const int py = (t / cols) * patch_, px = (t % cols) * patch_;
    for (int y = 0; y < patch_; ++y)
      for (int x = 0; x < patch_; ++x)
        for (int c = 0; c < 3; ++c)
          patches.at(static_cast<size_t>(t) * in_dim + (y * patch_ + x) * 3 + c) =
              image.at((static_cast<size_t>(py + y) * w + (px + x)) * 3 + c);
  }

  Tensor x = matmul(patches, proj_);
  MaskSpec full;
  full.rows = n;
  full.cols = n;
  full.allow.assign(static_cast<size_t>(n) * n, 1);
  const int dh = width_ / 4;  // four heads, arbitrary but fixed
  auto heads = [&](const Tensor& m) { return reshape(m, {n, 4, dh}); };
  Tensor hn = rms_norm(x, norm1_, 1e-6);
  Tensor attn = masked_attention_core(heads(matmul(hn, wq_)), heads(matmul(hn, wk_)),
                                      heads(matmul(hn, wv_)), full);
  x = add(x, matmul(reshape(attn, {n, width_}), wo_));
  Tensor ffn = matmul(swiglu(matmul(rms_norm(x, norm2_, 1e-6), w_gate_up_)), w_down_);
  return add(x, ffn);
}

}  // namespace bagel
