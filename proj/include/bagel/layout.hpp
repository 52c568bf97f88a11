#pragma once

// Interleaved-sequence schema: modality splits, the three visual token sets
// per image, noise grouping, condition dropout flags, and sequence packing.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bagel/errors.hpp"
#include "bagel/rng.hpp"

namespace bagel {

enum class ModalityKind { Text, Vit, VaeClean, VaeNoised };

const char* modality_name(ModalityKind k);

// maximal run of consecutive same-modality tokens
struct Split {
  ModalityKind kind = ModalityKind::Text;
  int token_count = 0;
  int image_id = -1;  // >= 0 for Vit/Vae kinds, -1 for Text
  std::vector<std::pair<int, int>> positions;  // per-token (row, col) rope position
};

struct DropFlags {
  bool text_ctx = false;   // hide all text keys from this image's vision queries
  bool vit = false;        // hide this image's ViT split from queries outside the image
  bool vae_clean = false;  // hide this image's clean split from queries outside the image
};

struct ImageRecord {
  int image_id = -1;
  int h_lat = 0, w_lat = 0;  // latent grid extents before 2x2 patching
  double t = 0.0;            // noise level in [0,1]
  int group_id = -1;         // images sharing a group share t and attend mutually
  bool has_vit = true;
  bool has_clean = true;   // false only for an in-flight image during decoding
  bool has_noised = true;  // false for pure-conditioning images (no diffusion target)
  DropFlags dropped;
  // indices into SampleLayout::splits, -1 when the set is absent
  int vit_split = -1;
  int clean_split = -1;
  int noised_split = -1;

  int patch_rows() const { return h_lat / 2; }
  int patch_cols() const { return w_lat / 2; }
  int vae_tokens() const { return patch_rows() * patch_cols(); }
};

enum class Regime { InterleavedGen, DiffusionForcing };

struct SampleLayout {
  std::vector<Split> splits;
  std::vector<ImageRecord> images;
  Regime regime = Regime::InterleavedGen;

  int total_tokens() const;
};

struct PackedSequence {
  std::vector<SampleLayout> samples;
  std::vector<int> sample_offsets;  // token offset of each sample's first token
  int total_tokens = 0;

  // per-token sample index, length total_tokens
  std::vector<int> sample_of_token() const;
};

// one line of a sample script: `text <n>` or `image <h_lat> <w_lat> [gen|cond] [novit]`
struct ScriptItem {
  bool is_image = false;
  int text_len = 0;
  int h_lat = 0, w_lat = 0;
  bool has_noised = true;  // gen tag; cond images carry no noised set and t = 0
  bool has_vit = true;
};

std::vector<ScriptItem> parse_sample_script(const std::string& text);

// Emits splits in the fixed per-image order ViT, VaeClean, VaeNoised with
// grid positions; text splits get sequential (p, p) positions counted across
// the whole sample. The toy ViT patch is twice the VAE downsample, so the ViT
// token grid coincides with the 2x2-patched latent grid.
SampleLayout build_sample_layout(const std::vector<ScriptItem>& script, Regime regime);

// Incremental construction, used by the decoding engine to grow a layout as
// the context evolves. Text positions continue the sample's running counter.
void append_text_split(SampleLayout& layout, int token_count);

struct ImageSets {
  bool vit = true;
  bool clean = true;
  bool noised = true;
};

// appends the image's splits in the fixed order and returns its image_id
int append_image_splits(SampleLayout& layout, int h_lat, int w_lat, ImageSets sets,
                        double t = 0.0);

// Diffusion-forcing noise assignment: merge each adjacent image pair into one
// group with probability grouping_prob, then draw a single shifted timestep
// per group. Rejects layouts not built for the DiffusionForcing regime.
void assign_noise_levels(SampleLayout& layout, double grouping_prob, double shift, Rng& rng);

// Independent per-image noise for the InterleavedGen regime (each image its
// own group). Conditioning-only images keep t = 0.
void assign_independent_noise(SampleLayout& layout, double shift, Rng& rng);

// Sets condition-dropout flags per image; token counts and split order are
// never altered, masking happens downstream.
void apply_cfg_dropout(SampleLayout& layout, Rng& rng, double p_text = 0.1, double p_vit = 0.5,
                       double p_vae = 0.1);

// Greedy first-fit packing. Packs are closed once they reach min_len; a final
// merge pass combines small leftovers. Every emitted pack is within
// [min_len, max_len] except possibly the last, guaranteed when sample lengths
// do not exceed max_len - min_len. A sample longer than max_len is an error.
std::vector<PackedSequence> pack_sequences(const std::vector<SampleLayout>& samples, int min_len,
                                           int max_len);

// single-sample pack, used by tests and inference layouts
PackedSequence pack_one(const SampleLayout& sample);

}  // namespace bagel
