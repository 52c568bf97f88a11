#include "bagel/infer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "bagel/errors.hpp"
#include "bagel/flow.hpp"
#include "bagel/mask.hpp"
#include "bagel/task.hpp"

namespace bagel {

namespace {

// per-token (kind, image_id) for the last m tokens of a layout
std::vector<std::pair<ModalityKind, int>> tail_tokens(const SampleLayout& layout, int m) {
  std::vector<std::pair<ModalityKind, int>> all;
  for (const auto& sp : layout.splits)
    for (int i = 0; i < sp.token_count; ++i) all.emplace_back(sp.kind, sp.image_id);
  if (m > static_cast<int>(all.size()))
    throw LayoutError("inference: suffix longer than the context");
  return {all.end() - m, all.end()};
}

}  // namespace

InferenceEngine::InferenceEngine(const ModelParams& params, const ToyVit& vit, const ToyVae& vae,
                                 unsigned long long seed, bool use_cache)
    : params_(&params), vit_(&vit), vae_(&vae), use_cache_(use_cache), rng_(seed) {
  params.cfg.validate();
  cache_.resize(static_cast<size_t>(params.cfg.layers));
}

int InferenceEngine::next_text_position() const {
  int n = 0;
  for (const auto& sp : ctx_.splits)
    if (sp.kind == ModalityKind::Text) n += sp.token_count;
  return n;
}

Tensor InferenceEngine::forward_suffix(const SampleLayout& layout, const SampleLayout& masked,
                                       const SampleInputs& inputs, int m, bool commit) {
  NoGradGuard guard;
  const ModelConfig& cfg = params_->cfg;
  PackedSequence packed = pack_one(layout);
  const int n = packed.total_tokens;
  const int prefix = n - m;
  if (m <= 0 || prefix < 0) throw LayoutError("inference: bad suffix extent");

  const auto tail = tail_tokens(layout, m);
  if (commit)
    for (const auto& [kind, image_id] : tail)
      if (kind == ModalityKind::VaeNoised)
        throw LayoutError("inference: noised tokens never enter the cache");

  std::vector<SampleInputs> in{inputs};
  EmbeddedBatch batch = embed_tokens(packed, in, *params_, *vit_);

  // visibility of the suffix rows honors the dropout flags on `masked`; the
  // prefix was (or would have been) computed without them
  MaskSpec suffix_rows = mask_rows_for_suffix(pack_one(masked), m);

  if (!use_cache_) {
    MaskSpec mask = build_mask(packed);
    for (int q = 0; q < m; ++q)
      for (int k = 0; k < n; ++k) mask.set(prefix + q, k, suffix_rows.at(q, k));
    Tensor x = batch.x;
    for (const LayerParams& layer : params_->layers) x = forward_block(x, mask, batch, layer, cfg);
    std::vector<int> rows(static_cast<size_t>(m));
    std::iota(rows.begin(), rows.end(), prefix);
    return gather_rows(x, rows);
  }

  if (static_cast<int>(meta_.size()) != prefix)
    throw LayoutError("inference cache out of sync with the context");

  const int H = cfg.heads, dh = cfg.head_dim, d = cfg.d_model;

  std::vector<int> su, sg;  // suffix-relative expert row sets
  for (int r : batch.und_rows)
    if (r >= prefix) su.push_back(r - prefix);
  for (int r : batch.gen_rows)
    if (r >= prefix) sg.push_back(r - prefix);
  const std::vector<std::vector<int>> row_sets = {su, sg};
  std::vector<std::pair<int, int>> pos(batch.positions.begin() + prefix, batch.positions.end());

  std::vector<int> srows(static_cast<size_t>(m));
  std::iota(srows.begin(), srows.end(), prefix);
  Tensor x = gather_rows(batch.x, srows);

  for (size_t l = 0; l < params_->layers.size(); ++l) {
    const LayerParams& layer = params_->layers[l];
    LayerCache& lc = cache_[l];

    auto project = [&](const ExpertWeights& e, const std::vector<int>& rows) {
      const int mm = static_cast<int>(rows.size());
      Tensor hn = rms_norm(gather_rows(x, rows), e.attn_norm, cfg.norm_eps);
      auto head_norm = [&](Tensor proj, const Tensor& w) {
        return reshape(rms_norm(reshape(std::move(proj), {mm * H, dh}), w, cfg.norm_eps), {mm, d});
      };
      struct QKV {
        Tensor q, k, v;
      };
      return QKV{head_norm(matmul(hn, e.wq), e.q_norm), head_norm(matmul(hn, e.wk), e.k_norm),
                 matmul(hn, e.wv)};
    };
    auto u = project(layer.und, su);
    auto g = project(layer.gen, sg);
    Tensor q = merge_rows({u.q, g.q}, row_sets, m);
    Tensor k_s = merge_rows({u.k, g.k}, row_sets, m);
    Tensor v_s = merge_rows({u.v, g.v}, row_sets, m);

    q = rope_2d(reshape(q, {m, H, dh}), pos, cfg.rope_base);
    k_s = rope_2d(reshape(k_s, {m, H, dh}), pos, cfg.rope_base);
    Tensor v3 = reshape(v_s, {m, H, dh});

    // stored prefix keys followed by the fresh suffix keys
    Tensor k_full = Tensor::zeros({n, H, dh}, false);
    Tensor v_full = Tensor::zeros({n, H, dh}, false);
    std::copy(lc.k.begin(), lc.k.end(), k_full.data->begin());
    std::copy(lc.v.begin(), lc.v.end(), v_full.data->begin());
    std::copy(k_s.data->begin(), k_s.data->end(),
              k_full.data->begin() + static_cast<long>(lc.k.size()));
    std::copy(v3.data->begin(), v3.data->end(),
              v_full.data->begin() + static_cast<long>(lc.v.size()));

    Tensor attn = reshape(masked_attention_core(q, k_full, v_full, suffix_rows), {m, d});

    auto out_proj = [&](const ExpertWeights& e, const std::vector<int>& rows) {
      return matmul(gather_rows(attn, rows), e.wo);
    };
    Tensor x1 = add(x, merge_rows({out_proj(layer.und, su), out_proj(layer.gen, sg)}, row_sets, m));

    auto ffn = [&](const ExpertWeights& e, const std::vector<int>& rows) {
      Tensor hn = rms_norm(gather_rows(x1, rows), e.ffn_norm, cfg.norm_eps);
      return matmul(swiglu(matmul(hn, e.w_gate_up)), e.w_down);
    };
    x = add(x1, merge_rows({ffn(layer.und, su), ffn(layer.gen, sg)}, row_sets, m));

    if (commit) {
      lc.k.insert(lc.k.end(), k_s.data->begin(), k_s.data->end());
      lc.v.insert(lc.v.end(), v3.data->begin(), v3.data->end());
    }
  }

  if (commit)
    for (int i = 0; i < m; ++i)
      meta_.push_back({tail[static_cast<size_t>(i)].first, tail[static_cast<size_t>(i)].second,
                       prefix + i});
  return x;
}

void InferenceEngine::commit_suffix(int m) {
  NoGradGuard guard;
  const ModelConfig& cfg = params_->cfg;
  Tensor h = forward_suffix(ctx_, ctx_, inputs_, m, true);
  if (ctx_.splits.back().kind == ModalityKind::Text) {
    std::vector<int> last{h.dim(0) - 1};
    Tensor hn = rms_norm(gather_rows(h, last), params_->final_norm_und, cfg.norm_eps);
    last_logits_ = matmul(hn, params_->unembed);
    last_is_text_ = true;
  } else {
    last_is_text_ = false;
  }
}

void InferenceEngine::append_text(const std::vector<int>& ids) {
  if (ids.empty()) throw InputError("append_text: empty token list");
  for (int id : ids)
    if (id < 0 || id >= params_->cfg.vocab_size)
      throw InputError("append_text: token id out of range");
  append_text_split(ctx_, static_cast<int>(ids.size()));
  inputs_.text.push_back(ids);
  commit_suffix(static_cast<int>(ids.size()));
}

const Tensor& InferenceEngine::last_text_logits() const {
  if (!last_is_text_) throw LayoutError("no text logits: context does not end in text");
  return last_logits_;
}

int InferenceEngine::sample_from_logits(const Tensor& logits, double temperature) {
  if (temperature < 0.0) throw ConfigError("sampling temperature must be non-negative");
  const int vocab = logits.dim(1);
  if (temperature == 0.0) {
    int best = 0;
    for (int i = 1; i < vocab; ++i)
      if (logits.at(static_cast<size_t>(i)) > logits.at(static_cast<size_t>(best))) best = i;
    return best;
  }
  double mx = logits.at(0);
  for (int i = 1; i < vocab; ++i) mx = std::max(mx, logits.at(static_cast<size_t>(i)));
  std::vector<double> p(static_cast<size_t>(vocab));
  double sum = 0.0;
  for (int i = 0; i < vocab; ++i) {
    p[static_cast<size_t>(i)] = std::exp((logits.at(static_cast<size_t>(i)) - mx) / temperature);
    sum += p[static_cast<size_t>(i)];
  }
  double u = rng_.uniform() * sum;
  for (int i = 0; i < vocab; ++i) {
    u -= p[static_cast<size_t>(i)];
    if (u <= 0.0) return i;
  }
  return vocab - 1;
}

std::vector<int> InferenceEngine::generate_text(int max_len, double temperature, int eos_id,
                                                int bos_id) {
  if (max_len <= 0) return {};
  if (!last_is_text_) append_text({bos_id});

  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_len) {
    const int id = sample_from_logits(last_text_logits(), temperature);
    // extend the live split so a generated caption stays one split, as trained
    const int p = next_text_position();
    Split& sp = ctx_.splits.back();
    sp.positions.emplace_back(p, p);
    sp.token_count += 1;
    inputs_.text.back().push_back(id);
    commit_suffix(1);
    out.push_back(id);
    if (id == eos_id) break;
  }
  return out;
}

InferenceEngine::ImageResult InferenceEngine::generate_image(int h_lat, int w_lat, int steps,
                                                             double cfg_text, double cfg_image,
                                                             double schedule_shift) {
  const ModelConfig& cfg = params_->cfg;
  const int grain = 2 * cfg.patch;
  if (h_lat <= 0 || w_lat <= 0 || h_lat % grain || w_lat % grain)
    throw InputError("generate_image: latent extents must be positive multiples of " +
                     std::to_string(grain));
  if (steps <= 0) throw ConfigError("generate_image: steps must be positive");
  if (cfg_text < 0.0 || cfg_image < 0.0)
    throw ConfigError("generate_image: guidance weights must be non-negative");
  if (schedule_shift < 1.0) throw ConfigError("generate_image: schedule shift must be >= 1");

  const bool has_ctx_images = !ctx_.images.empty();
  const bool bypass = cfg_text == 1.0 && cfg_image == 1.0;

  auto eval = [&](const Tensor& x, double t, bool drop_text, bool drop_images) {
    SampleLayout layout = ctx_;
    ImageSets sets;
    sets.vit = false;
    sets.clean = false;
    const int id = append_image_splits(layout, h_lat, w_lat, sets, t);
    SampleLayout masked = layout;
    if (drop_text) masked.images[static_cast<size_t>(id)].dropped.text_ctx = true;
    if (drop_images)
      for (int i = 0; i < id; ++i) {
        masked.images[static_cast<size_t>(i)].dropped.vit = true;
        masked.images[static_cast<size_t>(i)].dropped.vae_clean = true;
      }
    SampleInputs in = inputs_;
    in.noised.resize(static_cast<size_t>(id) + 1);
    in.noised[static_cast<size_t>(id)] = x;
    const int m = layout.images[static_cast<size_t>(id)].vae_tokens();
    Tensor h = forward_suffix(layout, masked, in, m, false);
    Tensor patches =
        matmul(rms_norm(h, params_->final_norm_gen, cfg.norm_eps), params_->vel_head);
    return unpatchify(patches, h_lat, w_lat, cfg.latent_channels);
  };

  auto velocity = [&](const Tensor& x, double t) -> Tensor {
    NoGradGuard guard;
    Tensor v_full = eval(x, t, false, false);
    if (bypass) return v_full;
    Tensor v_unc = eval(x, t, true, true);
    Tensor v_img = has_ctx_images ? eval(x, t, true, false) : v_unc;
    Tensor out = Tensor::zeros(v_full.shape, false);
    for (size_t i = 0; i < out.numel(); ++i)
      out.at(i) = v_unc.at(i) + cfg_image * (v_img.at(i) - v_unc.at(i)) +
                  cfg_text * (v_full.at(i) - v_img.at(i));
    return out;
  };

  Tensor x_start = Tensor::randn({h_lat, w_lat, cfg.latent_channels}, rng_);
  std::vector<double> schedule = make_t_schedule(steps);
  if (schedule_shift != 1.0)
    for (double& t : schedule) t = schedule_shift * t / (1.0 + (schedule_shift - 1.0) * t);
  Tensor x0 = euler_sample(velocity, std::move(x_start), schedule);

  NoGradGuard guard;
  Tensor pixels = vae_->decode(x0);

  // finalize: the image joins the context through its ViT and clean tokens
  const int before = ctx_.total_tokens();
  ImageSets sets;
  sets.noised = false;
  const int id = append_image_splits(ctx_, h_lat, w_lat, sets, 0.0);
  const size_t slot = static_cast<size_t>(id) + 1;
  if (inputs_.pixels.size() < slot) inputs_.pixels.resize(slot);
  if (inputs_.clean.size() < slot) inputs_.clean.resize(slot);
  if (inputs_.eps.size() < slot) inputs_.eps.resize(slot);
  if (inputs_.noised.size() < slot) inputs_.noised.resize(slot);
  inputs_.pixels[static_cast<size_t>(id)] = pixels;
  inputs_.clean[static_cast<size_t>(id)] = x0;
  commit_suffix(ctx_.total_tokens() - before);
  return {pixels, x0, id};
}

std::vector<ScriptDirective> parse_decode_script(const std::string& text) {
  std::vector<ScriptDirective> script;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> args;
    std::string word;
    while (ls >> word) args.push_back(word);
    if (args.empty()) continue;

    auto fail = [&](const std::string& why) -> void {
      throw ConfigError("decode script line " + std::to_string(line_no) + ": " + why);
    };
    auto as_int = [&](const std::string& a) {
      size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(a, &used);
      } catch (const std::exception&) {
        used = std::string::npos;
      }
      if (used != a.size()) fail("expected an integer, got '" + a + "'");
      return v;
    };
    auto as_double = [&](const std::string& a) {
      size_t used = 0;
      double v = 0;
      try {
        v = std::stod(a, &used);
      } catch (const std::exception&) {
        used = std::string::npos;
      }
      if (used != a.size()) fail("expected a number, got '" + a + "'");
      return v;
    };

    ScriptDirective dir;
    if (args[0] == "prompt") {
      dir.kind = ScriptDirective::Kind::Prompt;
      if (args.size() < 2) fail("prompt needs at least one word");
      dir.prompt_ids.push_back(ToyVocab::bos);
      for (size_t i = 1; i < args.size(); ++i) {
        const int id = ToyVocab::id_of(args[i]);
        if (id < 0) fail("unknown word '" + args[i] + "'");
        dir.prompt_ids.push_back(id);
      }
      dir.prompt_ids.push_back(ToyVocab::eos);
    } else if (args[0] == "gentext") {
      dir.kind = ScriptDirective::Kind::GenText;
      if (args.size() < 2 || args.size() > 3) fail("usage: gentext <max_len> [temperature]");
      dir.max_len = as_int(args[1]);
      if (dir.max_len < 0) fail("max_len must be non-negative");
      if (args.size() == 3) {
        dir.temperature = as_double(args[2]);
        if (dir.temperature < 0.0) fail("temperature must be non-negative");
      }
    } else if (args[0] == "genimage") {
      dir.kind = ScriptDirective::Kind::GenImage;
      if (args.size() < 3 || args.size() > 6)
        fail("usage: genimage <h_lat> <w_lat> [steps] [cfg_text] [cfg_image]");
      dir.h_lat = as_int(args[1]);
      dir.w_lat = as_int(args[2]);
      if (args.size() > 3) {
        dir.steps = as_int(args[3]);
        if (dir.steps <= 0) fail("steps must be positive");
      }
      if (args.size() > 4) {
        dir.cfg_text = as_double(args[4]);
        if (dir.cfg_text < 0.0) fail("cfg_text must be non-negative");
      }
      if (args.size() > 5) {
        dir.cfg_image = as_double(args[5]);
        if (dir.cfg_image < 0.0) fail("cfg_image must be non-negative");
      }
    } else {
      fail("unknown directive '" + args[0] + "'");
    }
    script.push_back(std::move(dir));
  }
  if (script.empty()) throw ConfigError("decode script has no directives");
  return script;
}

void write_ppm(const std::string& path, const Tensor& pixels) {
  if (pixels.ndim() != 3 || pixels.dim(2) != 3) throw InputError("write_ppm: expected {h, w, 3}");
  const int h = pixels.dim(0), w = pixels.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open image file: " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  for (size_t i = 0; i < pixels.numel(); ++i) {
    const double v = std::clamp(pixels.at(i), 0.0, 1.0);
    out.put(static_cast<char>(std::lround(v * 255.0)));
  }
  if (!out) throw ConfigError("image write failed: " + path);
}

Transcript run_script(InferenceEngine& engine, const std::vector<ScriptDirective>& script,
                      const std::string& out_dir, const SamplingDefaults& defaults) {
  if (script.empty()) throw ConfigError("decode script has no directives");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  Transcript transcript;
  int image_ix = 0;
  for (const auto& dir : script) {
    TranscriptSegment seg;
    switch (dir.kind) {
      case ScriptDirective::Kind::Prompt:
        engine.append_text(dir.prompt_ids);
        seg.kind = TranscriptSegment::Kind::Prompt;
        seg.tokens = dir.prompt_ids;
        break;
      case ScriptDirective::Kind::GenText: {
        const double temp = dir.temperature >= 0.0 ? dir.temperature : defaults.temperature;
        seg.kind = TranscriptSegment::Kind::Text;
        seg.tokens = engine.generate_text(dir.max_len, temp);
        break;
      }
      case ScriptDirective::Kind::GenImage: {
        const int steps = dir.steps > 0 ? dir.steps : defaults.steps;
        const double cfg_text = dir.cfg_text >= 0.0 ? dir.cfg_text : defaults.cfg_text;
        const double cfg_image = dir.cfg_image >= 0.0 ? dir.cfg_image : defaults.cfg_image;
        auto image = engine.generate_image(dir.h_lat, dir.w_lat, steps, cfg_text, cfg_image,
                                           defaults.schedule_shift);
        seg.kind = TranscriptSegment::Kind::Image;
        seg.pixels = image.pixels;
        seg.x0 = image.x0;
        if (!out_dir.empty()) {
          seg.image_file = "image-" + std::to_string(image_ix) + ".ppm";
          write_ppm(out_dir + "/" + seg.image_file, image.pixels);
        }
        ++image_ix;
        break;
      }
    }
    transcript.segments.push_back(std::move(seg));
  }

  if (!out_dir.empty()) {
    nlohmann::json segments = nlohmann::json::array();
    for (const auto& seg : transcript.segments) {
      nlohmann::json j;
      switch (seg.kind) {
        case TranscriptSegment::Kind::Prompt: j["type"] = "prompt"; break;
        case TranscriptSegment::Kind::Text: j["type"] = "text"; break;
        case TranscriptSegment::Kind::Image: j["type"] = "image"; break;
      }
      if (seg.kind == TranscriptSegment::Kind::Image) {
        j["file"] = seg.image_file;
      } else {
        j["tokens"] = seg.tokens;
        std::string words;
        for (int id : seg.tokens) {
          if (!words.empty()) words.push_back(' ');
          words += id >= 0 && id < ToyVocab::size ? ToyVocab::word(id) : "<unk>";
        }
        j["words"] = words;
      }
      segments.push_back(std::move(j));
    }
    std::ofstream out(out_dir + "/transcript.json");
    if (!out) throw ConfigError("cannot write transcript.json in " + out_dir);
    out << nlohmann::json{{"segments", std::move(segments)}}.dump(2) << "\n";
  }
  return transcript;
}

}  // namespace bagel
