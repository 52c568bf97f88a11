#pragma once

// Interleaved decoding with a per-layer key/value cache. Text generation
// extends the context token by token; image generation denoises a latent
// against the cached context, decodes it, then finalizes the image by
// appending its ViT and clean-latent tokens to the cache. Noised tokens are
// evaluation-only and never stored.
//
// Guidance runs as extra velocity evaluations against the same cache with
// key-visibility filtering (condition-dropout flags on a throwaway layout
// copy); the cache itself is never duplicated or mutated by them.

#include <string>
#include <vector>

#include "bagel/layout.hpp"
#include "bagel/model.hpp"
#include "bagel/rng.hpp"
#include "bagel/tensor.hpp"
#include "bagel/vision.hpp"

namespace bagel {

// negative sampling fields mean "not set here, fall back to the run default"
struct ScriptDirective {
  enum class Kind { Prompt, GenText, GenImage };
  Kind kind = Kind::Prompt;
  std::vector<int> prompt_ids;                  // Prompt
  int max_len = 0;                              // GenText
  double temperature = -1.0;                    //   "
  int h_lat = 0, w_lat = 0, steps = -1;         // GenImage
  double cfg_text = -1.0, cfg_image = -1.0;     //   "
};

// Line-oriented decode script, '#' starts a comment:
//   prompt <word ...>                        caption words, wrapped in bos/eos
//   gentext <max_len> [temperature]
//   genimage <h_lat> <w_lat> [steps] [cfg_text] [cfg_image]
std::vector<ScriptDirective> parse_decode_script(const std::string& text);

// fallbacks for directive fields the script leaves unset
struct SamplingDefaults {
  int steps = 50;
  double cfg_text = 1.0;
  double cfg_image = 1.0;
  double temperature = 0.0;
  double schedule_shift = 1.0;
};

struct TranscriptSegment {
  enum class Kind { Prompt, Text, Image };
  Kind kind = Kind::Prompt;
  std::vector<int> tokens;
  Tensor pixels, x0;
  std::string image_file;  // set when the transcript was written to disk
};

struct Transcript {
  std::vector<TranscriptSegment> segments;
};

class InferenceEngine {
 public:
  // A cache-free engine recomputes every prefix key/value on each call while
  // keeping identical visibility semantics; it is the reference the cached
  // path is checked against.
  InferenceEngine(const ModelParams& params, const ToyVit& vit, const ToyVae& vae,
                  unsigned long long seed, bool use_cache = true);

  // opens a new text split and commits it to the cache
  void append_text(const std::vector<int>& ids);

  // Extends the last text split token by token, seeding a fresh split with
  // bos_id when the context does not end in text. Sampled tokens join the
  // cache as they are emitted; generation stops after eos_id or max_len.
  std::vector<int> generate_text(int max_len, double temperature = 0.0, int eos_id = 1,
                                 int bos_id = 0);

  struct ImageResult {
    Tensor pixels, x0;
    int image_id = -1;
  };
  // Denoises a fresh image in context: Gaussian start at t = 1, Euler steps
  // over a (optionally shifted) uniform schedule, classifier-free guidance
  // with separate text and image-context weights. Weights of exactly 1 skip
  // the extra passes. The finished image enters the context as ViT plus
  // clean tokens.
  ImageResult generate_image(int h_lat, int w_lat, int steps, double cfg_text = 1.0,
                             double cfg_image = 1.0, double schedule_shift = 1.0);

  const SampleLayout& context() const { return ctx_; }
  bool cached() const { return use_cache_; }
  int cache_tokens() const { return static_cast<int>(meta_.size()); }

  struct CacheEntry {
    ModalityKind kind = ModalityKind::Text;
    int image_id = -1;  // -1 for text entries
    int pos = 0;        // flat context position at append time
  };
  const std::vector<CacheEntry>& cache_entries() const { return meta_; }

  // logits of the most recently appended token; valid only while the context
  // ends in text
  const Tensor& last_text_logits() const;

 private:
  struct LayerCache {
    std::vector<double> k, v;  // [entry][head][head_dim], rope and qk-norm applied
  };

  // Runs the layer stack over the last n_suffix tokens of `layout`; prefix
  // keys come from the cache (or are recomputed without one). `masked`
  // differs from `layout` only in condition-dropout flags and governs the
  // suffix rows' visibility. Returns final hidden states {n_suffix, d}.
  Tensor forward_suffix(const SampleLayout& layout, const SampleLayout& masked,
                        const SampleInputs& inputs, int n_suffix, bool commit);
  void commit_suffix(int n_suffix);  // forward + cache write + logits capture
  int next_text_position() const;
  int sample_from_logits(const Tensor& logits, double temperature);

  const ModelParams* params_;
  const ToyVit* vit_;
  const ToyVae* vae_;
  bool use_cache_;
  Rng rng_;
  SampleLayout ctx_;
  SampleInputs inputs_;
  std::vector<LayerCache> cache_;
  std::vector<CacheEntry> meta_;
  Tensor last_logits_;
  bool last_is_text_ = false;
};

// executes directives in order against one engine; when out_dir is non-empty
// it is created and filled with transcript.json plus one PPM file per image
Transcript run_script(InferenceEngine& engine, const std::vector<ScriptDirective>& script,
                      const std::string& out_dir = "",
                      const SamplingDefaults& defaults = {});

void write_ppm(const std::string& path, const Tensor& pixels);

}  // namespace bagel
