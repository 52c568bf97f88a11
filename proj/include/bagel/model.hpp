#pragma once

// The transformer: token embedding over interleaved modalities, blocks in
// three expert variants with hard modality routing and one shared masked
// self-attention, output heads, and analytic FLOPs accounting.
//
// Routing is by token kind: VAE tokens (clean and noised) go to the
// generation expert, text and ViT tokens to the understanding expert. The
// variants differ only in which weight tensors the two experts share:
//   Dense  - the generation expert aliases every understanding tensor
//   MoE    - the FFN matrices are distinct, everything else aliased
//   MoT    - nothing aliased
// One code path serves all three, so tying MoT weights to the understanding
// values reproduces Dense bit for bit.

#include <string>
#include <utility>
#include <vector>

#include "bagel/layout.hpp"
#include "bagel/maskspec.hpp"
#include "bagel/tensor.hpp"
#include "bagel/vision.hpp"

namespace bagel {

enum class Variant { Dense, MoE, MoT };

Variant variant_from_name(const std::string& name);
const char* variant_name(Variant v);

struct ModelConfig {
  int layers = 2;
  int d_model = 48;
  int heads = 4;
  int head_dim = 12;
  int ffn_hidden = 96;
  int vocab_size = 16;
  Variant variant = Variant::MoT;
  int latent_channels = 16;
  int patch = 2;
  int vae_downsample = 8;
  double vae_scale = 4.0;
  int vit_patch = 16;
  int vit_width = 32;
  int temb_dim = 256;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  int patch_dim() const { return patch * patch * latent_channels; }
  void validate() const;
};

struct ExpertWeights {
  Tensor attn_norm, wq, wk, wv, wo, q_norm, k_norm;
  Tensor ffn_norm, w_gate_up, w_down;
};

struct LayerParams {
  ExpertWeights und, gen;
};

struct ModelParams {
  ModelConfig cfg;
  std::vector<LayerParams> layers;
  Tensor tok_embed, unembed;
  Tensor patch_embed, vel_head;
  Tensor final_norm_und, final_norm_gen;
  Tensor temb_w1, temb_b1, temb_w2, temb_b2;
  Tensor conn_w1, conn_b1, conn_w2, conn_b2;

  // every distinct tensor once, with a stable name; aliased generation-expert
  // slots are omitted according to the variant
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<Tensor*> trainable();
};

ModelParams init_params(const ModelConfig& cfg, Rng& rng);

// copies understanding-expert values into the generation expert (alias-aware:
// a no-op for tensors the variant already shares)
void tie_generation_expert(ModelParams& params);

// per-sample tensors feeding embed_tokens; entries are indexed by image_id
// and may stay empty when the corresponding split is absent
struct SampleInputs {
  std::vector<std::vector<int>> text;  // one id vector per text split, in order
  std::vector<Tensor> pixels;          // {h, w, 3} per image, needed when has_vit
  std::vector<Tensor> clean;           // {h_lat, w_lat, C} per image
  std::vector<Tensor> eps;             // unit noise, same shape as clean
  std::vector<Tensor> noised;          // explicit x_t; overrides clean/eps mixing
};

struct EmbeddedBatch {
  Tensor x;  // {tokens, d_model}
  std::vector<int> und_rows, gen_rows;
  std::vector<int> text_rows;  // global row of every text token, layout order
  std::vector<std::pair<int, int>> positions;
  // {sample, image_id, global row of first noised token} per noised split
  struct NoisedSpan {
    int sample, image_id, first_row;
  };
  std::vector<NoisedSpan> noised_spans;
};

EmbeddedBatch embed_tokens(const PackedSequence& packed, const std::vector<SampleInputs>& inputs,
                           const ModelParams& params, const ToyVit& vit);

struct ImageVelocity {
  int sample = -1;
  int image_id = -1;
  Tensor v;  // {h_lat, w_lat, C}
};

struct ForwardResult {
  Tensor text_logits;  // {text tokens, vocab}, rows in layout order
  std::vector<int> text_rows;
  std::vector<ImageVelocity> velocities;
};

Tensor forward_block(const Tensor& x, const MaskSpec& mask, const EmbeddedBatch& batch,
                     const LayerParams& layer, const ModelConfig& cfg);

ForwardResult forward_model(const PackedSequence& packed, const MaskSpec& mask,
                            const std::vector<SampleInputs>& inputs, const ModelParams& params,
                            const ToyVit& vit);

// multiply-add count of the block stack (projections, attention over the
// permitted mask entries, FFN), doubled to FLOPs; embedding and head costs
// are excluded. Routing only partitions tokens between identically shaped
// experts, so all variants produce the same count for the same layout.
long long count_flops(const ModelConfig& cfg, const PackedSequence& packed);

// sinusoidal timestep features followed by the model's two-layer MLP
Tensor timestep_embedding(double t, const ModelParams& params);

// latent {h_lat, w_lat, C} <-> token {#patches, 4C} reshaping, 2x2 patches
// with slot order (dy, dx, channel); unpatchify carries gradients
Tensor patchify(const Tensor& latent, int C);
Tensor unpatchify(const Tensor& tokens, int h_lat, int w_lat, int C);

}  // namespace bagel
