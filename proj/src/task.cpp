#include "bagel/task.hpp"

#include <cmath>

#include "bagel/errors.hpp"
#include "bagel/flow.hpp"

namespace bagel {

namespace {

constexpr double kBackground = 0.10;
constexpr int kCell = 32;        // quadrant side in pixels
constexpr int kHalfShape = 13;   // shape half-extent inside a cell

const double kColors[4][3] = {
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.20, 0.30, 0.90},  // blue
    {0.90, 0.85, 0.15},  // yellow
};

const char* kWords[ToyVocab::size] = {"<bos>", "<eos>", "red",    "green", "blue",  "yellow",
                                      "square", "circle", "triangle", "top",  "bottom", "left",
                                      "right"};

bool inside_shape(int shape, int dy, int dx) {
  switch (shape) {
    case 0: return std::abs(dx) <= kHalfShape && std::abs(dy) <= kHalfShape;
    case 1: return dx * dx + dy * dy <= kHalfShape * kHalfShape;
    default: {
      // isoceles triangle, apex up
      if (dy < -kHalfShape || dy > kHalfShape) return false;
      const double half_w = kHalfShape * (dy + kHalfShape) / (2.0 * kHalfShape);
      return std::abs(dx) <= half_w;
    }
  }
}

}  // namespace

const char* ToyVocab::word(int id) {
  if (id < 0 || id >= size) throw InputError("vocab: id out of range");
  return kWords[id];
}

int ToyVocab::id_of(const std::string& w) {
  for (int i = 0; i < size; ++i)
    if (w == kWords[i]) return i;
  return -1;
}

std::vector<int> caption_tokens(const Attributes& a) {
  return {ToyVocab::bos,
          ToyVocab::first_color + a.color,
          ToyVocab::first_shape + a.shape,
          ToyVocab::first_row + a.row,
          ToyVocab::first_col + a.col,
          ToyVocab::eos};
}

std::optional<Attributes> attributes_from_caption(const std::vector<int>& tokens) {
  if (tokens.size() != 6 || tokens[0] != ToyVocab::bos || tokens[5] != ToyVocab::eos)
    return std::nullopt;
  Attributes a;
  a.color = tokens[1] - ToyVocab::first_color;
  a.shape = tokens[2] - ToyVocab::first_shape;
  a.row = tokens[3] - ToyVocab::first_row;
  a.col = tokens[4] - ToyVocab::first_col;
  if (a.color < 0 || a.color > 3 || a.shape < 0 || a.shape > 2 || a.row < 0 || a.row > 1 ||
      a.col < 0 || a.col > 1)
    return std::nullopt;
  return a;
}

std::string caption_text(const std::vector<int>& tokens) {
  std::string out;
  for (int id : tokens) {
    if (id == ToyVocab::bos || id == ToyVocab::eos) continue;
    if (!out.empty()) out.push_back(' ');
    out += ToyVocab::word(id);
  }
  return out;
}

Tensor render_attributes(const Attributes& a) {
  const int n = ToyTask::image_px;
  Tensor img = Tensor::full({n, n, 3}, kBackground, false);
  const int oy = a.row * kCell, ox = a.col * kCell;
  for (int y = 0; y < kCell; ++y)
    for (int x = 0; x < kCell; ++x) {
      if (!inside_shape(a.shape, y - kCell / 2, x - kCell / 2)) continue;
      for (int c = 0; c < 3; ++c)
        img.at((static_cast<size_t>(oy + y) * n + (ox + x)) * 3 + c) = kColors[a.color][c];
    }
  return img;
}

ToyTask::ToyTask(const ToyVae& vae) : vae_(&vae) {
  if (image_px % vae.downsample() != 0)
    throw ConfigError("toy task: image size must match the VAE downsample");

  // six held-out combinations, fixed so runs are comparable
  holdout_ = {
      {0, 0, 0, 0},  // red square top left
      {1, 1, 0, 1},  // green circle top right
      {2, 2, 1, 0},  // blue triangle bottom left
      {3, 0, 1, 1},  // yellow square bottom right
      {0, 1, 1, 1},  // red circle bottom right
      {2, 0, 0, 1},  // blue square top right
  };

  // shape templates as seen through the VAE projection, luminance only
  templates_.resize(3 * 4);
  for (int shape = 0; shape < 3; ++shape)
    for (int cell = 0; cell < 4; ++cell) {
      Attributes a;
      a.shape = shape;
      a.row = cell / 2;
      a.col = cell % 2;
      a.color = 3;  // bright reference color; correlation is scale-invariant
      Tensor proj = vae.decode(vae.encode(render_attributes(a)));
      std::vector<double> tpl(static_cast<size_t>(kCell) * kCell);
      const int oy = a.row * kCell, ox = a.col * kCell;
      double mean = 0.0;
      for (int y = 0; y < kCell; ++y)
        for (int x = 0; x < kCell; ++x) {
          double lum = 0.0;
          for (int c = 0; c < 3; ++c)
            lum += proj.at((static_cast<size_t>(oy + y) * image_px + (ox + x)) * 3 + c);
          tpl[static_cast<size_t>(y) * kCell + x] = lum;
          mean += lum;
        }
      mean /= tpl.size();
      double norm = 0.0;
      for (auto& v : tpl) {
        v -= mean;
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : tpl) v /= norm;
      templates_[static_cast<size_t>(shape) * 4 + cell] = std::move(tpl);
    }
}

bool ToyTask::is_holdout(const Attributes& a) const {
  for (const auto& h : holdout_)
    if (h == a) return true;
  return false;
}

Attributes ToyTask::draw_train_attributes(Rng& rng) const {
  for (;;) {
    Attributes a;
    a.color = static_cast<int>(rng.below(4));
    a.shape = static_cast<int>(rng.below(3));
    a.row = static_cast<int>(rng.below(2));
    a.col = static_cast<int>(rng.below(2));
    if (!is_holdout(a)) return a;
  }
}

TaskSample ToyTask::make_generation_sample(const Attributes& a, double timestep_shift, Rng& rng,
                                           Regime regime, double grouping_prob) const {
  TaskSample s;
  s.kind = TaskSample::Kind::Generation;
  s.attrs = a;
  s.layout.regime = regime;
  append_text_split(s.layout, 6);
  const int side = latent_side();
  ImageSets sets;
  sets.vit = false;   // the target must stay invisible to its own denoising
  sets.clean = false;  // nothing in a single-image sample may read clean keys
  append_image_splits(s.layout, side, side, sets);
  if (regime == Regime::DiffusionForcing)
    assign_noise_levels(s.layout, grouping_prob, timestep_shift, rng);
  else
    assign_independent_noise(s.layout, timestep_shift, rng);

  s.inputs.text.push_back(caption_tokens(a));
  Tensor x0 = vae_->encode(render_attributes(a));
  s.inputs.clean.push_back(x0);
  s.inputs.eps.push_back(Tensor::randn(x0.shape, rng));
  s.inputs.pixels.push_back(Tensor());
  return s;
}

TaskSample ToyTask::make_understanding_sample(const Attributes& a) const {
  TaskSample s;
  s.kind = TaskSample::Kind::Understanding;
  s.attrs = a;
  const int side = latent_side();
  ImageSets sets;
  sets.noised = false;
  append_image_splits(s.layout, side, side, sets);
  append_text_split(s.layout, 6);

  Tensor img = render_attributes(a);
  s.inputs.pixels.push_back(img);
  s.inputs.clean.push_back(vae_->encode(img));
  s.inputs.eps.push_back(Tensor());
  s.inputs.text.push_back(caption_tokens(a));
  return s;
}

TaskSample ToyTask::make_text_sample(const Attributes& a) const {
  TaskSample s;
  s.kind = TaskSample::Kind::TextOnly;
  s.attrs = a;
  append_text_split(s.layout, 6);
  s.inputs.text.push_back(caption_tokens(a));
  return s;
}

Attributes ToyTask::decode_attributes(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(0) != image_px || image.dim(1) != image_px)
    throw InputError("decode_attributes: expected a 64x64x3 image");
  Attributes out;

  // cell with the most luminance deviation from the background
  double best_energy = -1.0;
  int best_cell = 0;
  for (int cell = 0; cell < 4; ++cell) {
    const int oy = (cell / 2) * kCell, ox = (cell % 2) * kCell;
    double energy = 0.0;
    for (int y = 0; y < kCell; ++y)
      for (int x = 0; x < kCell; ++x)
        for (int c = 0; c < 3; ++c)
          energy += std::abs(
              image.at((static_cast<size_t>(oy + y) * image_px + (ox + x)) * 3 + c) - kBackground);
    if (energy > best_energy) {
      best_energy = energy;
      best_cell = cell;
    }
  }
  out.row = best_cell / 2;
  out.col = best_cell % 2;

  // color: direction of the mean above-background excess in the chosen cell
  const int oy = out.row * kCell, ox = out.col * kCell;
  double mean_rgb[3] = {0, 0, 0};
  for (int y = 0; y < kCell; ++y)
    for (int x = 0; x < kCell; ++x)
      for (int c = 0; c < 3; ++c)
        mean_rgb[c] +=
            image.at((static_cast<size_t>(oy + y) * image_px + (ox + x)) * 3 + c) - kBackground;
  double len = std::sqrt(mean_rgb[0] * mean_rgb[0] + mean_rgb[1] * mean_rgb[1] +
                         mean_rgb[2] * mean_rgb[2]);
  if (len < 1e-12) len = 1e-12;
  double best_cos = -2.0;
  for (int color = 0; color < 4; ++color) {
    double dot = 0.0, clen = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double cc = kColors[color][c] - kBackground;
      dot += cc * mean_rgb[c];
      clen += cc * cc;
    }
    const double cosine = dot / (len * std::sqrt(clen));
    if (cosine > best_cos) {
      best_cos = cosine;
      out.color = color;
    }
  }

  // shape: correlation of cell luminance against the projected templates
  std::vector<double> lum(static_cast<size_t>(kCell) * kCell);
  double mean = 0.0;
  for (int y = 0; y < kCell; ++y)
    for (int x = 0; x < kCell; ++x) {
      double l = 0.0;
      for (int c = 0; c < 3; ++c)
        l += image.at((static_cast<size_t>(oy + y) * image_px + (ox + x)) * 3 + c);
      lum[static_cast<size_t>(y) * kCell + x] = l;
      mean += l;
    }
  mean /= lum.size();
  double norm = 0.0;
  for (auto& v : lum) {
    v -= mean;
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) norm = 1e-12;
  double best_corr = -2.0;
  for (int shape = 0; shape < 3; ++shape) {
    const auto& tpl = templates_[static_cast<size_t>(shape) * 4 + best_cell];
    double corr = 0.0;
    for (size_t i = 0; i < lum.size(); ++i) corr += lum[i] * tpl[i] / norm;
    if (corr > best_corr) {
      best_corr = corr;
      out.shape = shape;
    }
  }
  return out;
}

}  // namespace bagel
