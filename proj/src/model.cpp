#include "bagel/model.hpp"

#include <cmath>

#include "bagel/errors.hpp"
#include "bagel/flow.hpp"
#include "bagel/mask.hpp"

namespace bagel {

Variant variant_from_name(const std::string& name) {
  if (name == "dense") return Variant::Dense;
  if (name == "moe") return Variant::MoE;
  if (name == "mot") return Variant::MoT;
  throw ConfigError("unknown variant '" + name + "' (expected dense, moe, or mot)");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Dense: return "dense";
    case Variant::MoE: return "moe";
    case Variant::MoT: return "mot";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: need at least one layer");
  if (d_model != heads * head_dim) throw ConfigError("model: d_model must equal heads*head_dim");
  if (head_dim % 4 != 0) throw ConfigError("model: head_dim must be divisible by 4");
  if (ffn_hidden % 2 != 0) throw ConfigError("model: ffn_hidden must be even");
  if (vocab_size < 2) throw ConfigError("model: vocab too small");
  if (patch != 2) throw ConfigError("model: patch embedding is fixed at 2x2");
  if (temb_dim % 2 != 0) throw ConfigError("model: temb_dim must be even");
  if (vit_patch % vae_downsample != 0 || vit_patch / vae_downsample != patch)
    throw ConfigError("model: vit patch must cover exactly one 2x2-patched latent cell");
}

namespace {

ExpertWeights make_expert(const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.d_model, f = cfg.ffn_hidden, dh = cfg.head_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  ExpertWeights e;
  e.attn_norm = Tensor::ones({d}, true);
  e.wq = Tensor::randn({d, d}, rng, sd, true);
  e.wk = Tensor::randn({d, d}, rng, sd, true);
  e.wv = Tensor::randn({d, d}, rng, sd, true);
  e.wo = Tensor::randn({d, d}, rng, sd, true);
  e.q_norm = Tensor::ones({dh}, true);
  e.k_norm = Tensor::ones({dh}, true);
  e.ffn_norm = Tensor::ones({d}, true);
  e.w_gate_up = Tensor::randn({d, 2 * f}, rng, sd, true);
  e.w_down = Tensor::randn({f, d}, rng, sf, true);
  return e;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.d_model;
  ModelParams p;
  p.cfg = cfg;

  // globals first, each expert from a forked stream: variants sharing a seed
  // then agree on every tensor the variants have in common
  p.tok_embed = Tensor::randn({cfg.vocab_size, d}, rng, 1.0, true);
  p.unembed = Tensor::randn({d, cfg.vocab_size}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  p.patch_embed = Tensor::randn({cfg.patch_dim(), d}, rng,
                                1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), true);
  p.vel_head = Tensor::zeros({d, cfg.patch_dim()}, true);  // start at zero velocity
  p.final_norm_und = Tensor::ones({d}, true);
  p.final_norm_gen = Tensor::ones({d}, true);
  p.temb_w1 = Tensor::randn({cfg.temb_dim, d}, rng,
                            1.0 / std::sqrt(static_cast<double>(cfg.temb_dim)), true);
  p.temb_b1 = Tensor::zeros({d}, true);
  p.temb_w2 = Tensor::randn({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  p.temb_b2 = Tensor::zeros({d}, true);
  p.conn_w1 = Tensor::randn({cfg.vit_width, d}, rng,
                            1.0 / std::sqrt(static_cast<double>(cfg.vit_width)), true);
  p.conn_b1 = Tensor::zeros({d}, true);
  p.conn_w2 = Tensor::randn({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  p.conn_b2 = Tensor::zeros({d}, true);

  for (int l = 0; l < cfg.layers; ++l) {
    LayerParams layer;
    layer.und = make_expert(cfg, rng);
    switch (cfg.variant) {
      case Variant::Dense:
        layer.gen = layer.und;  // full alias
        break;
      case Variant::MoE: {
        layer.gen = layer.und;
        Rng fr = rng.fork(1000 + l);
        ExpertWeights own = make_expert(cfg, fr);
        layer.gen.w_gate_up = own.w_gate_up;
        layer.gen.w_down = own.w_down;
        break;
      }
      case Variant::MoT: {
        Rng fr = rng.fork(1000 + l);
        layer.gen = make_expert(cfg, fr);
        break;
      }
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto put = [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); };
  put("tok_embed", tok_embed);
  put("unembed", unembed);
  put("patch_embed", patch_embed);
  put("vel_head", vel_head);
  put("final_norm_und", final_norm_und);
  put("final_norm_gen", final_norm_gen);
  put("temb_w1", temb_w1);
  put("temb_b1", temb_b1);
  put("temb_w2", temb_w2);
  put("temb_b2", temb_b2);
  put("conn_w1", conn_w1);
  put("conn_b1", conn_b1);
  put("conn_w2", conn_w2);
  put("conn_b2", conn_b2);
  auto put_expert = [&](const std::string& prefix, ExpertWeights& e, bool ffn_only) {
    if (!ffn_only) {
      put(prefix + "attn_norm", e.attn_norm);
      put(prefix + "wq", e.wq);
      put(prefix + "wk", e.wk);
      put(prefix + "wv", e.wv);
      put(prefix + "wo", e.wo);
      put(prefix + "q_norm", e.q_norm);
      put(prefix + "k_norm", e.k_norm);
      put(prefix + "ffn_norm", e.ffn_norm);
    }
    put(prefix + "w_gate_up", e.w_gate_up);
    put(prefix + "w_down", e.w_down);
  };
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    put_expert(base + "und.", layers[l].und, false);
    if (cfg.variant == Variant::MoE) put_expert(base + "gen.", layers[l].gen, true);
    if (cfg.variant == Variant::MoT) put_expert(base + "gen.", layers[l].gen, false);
  }
  return out;
}

std::vector<Tensor*> ModelParams::trainable() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

void tie_generation_expert(ModelParams& params) {
  for (auto& layer : params.layers) {
    auto copy_into = [](const Tensor& src, Tensor& dst) {
      if (src.data == dst.data) return;
      if (src.shape != dst.shape) throw ShapeError("tie: expert shape mismatch");
      std::copy(src.data->begin(), src.data->end(), dst.data->begin());
    };
    copy_into(layer.und.attn_norm, layer.gen.attn_norm);
    copy_into(layer.und.wq, layer.gen.wq);
    copy_into(layer.und.wk, layer.gen.wk);
    copy_into(layer.und.wv, layer.gen.wv);
    copy_into(layer.und.wo, layer.gen.wo);
    copy_into(layer.und.q_norm, layer.gen.q_norm);
    copy_into(layer.und.k_norm, layer.gen.k_norm);
    copy_into(layer.und.ffn_norm, layer.gen.ffn_norm);
    copy_into(layer.und.w_gate_up, layer.gen.w_gate_up);
    copy_into(layer.und.w_down, layer.gen.w_down);
  }
}

Tensor timestep_embedding(double t, const ModelParams& params) {
  const int dim = params.cfg.temb_dim;
  const int half = dim / 2;
  Tensor sinus = Tensor::zeros({1, dim}, false);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    const double arg = t * 1000.0 * freq;
    sinus.at(static_cast<size_t>(i)) = std::sin(arg);
    sinus.at(static_cast<size_t>(half + i)) = std::cos(arg);
  }
  Tensor h = silu(add_rowvec(matmul(sinus, params.temb_w1), params.temb_b1));
  return add_rowvec(matmul(h, params.temb_w2), params.temb_b2);  // {1, d}
}

// latent {h_lat, w_lat, C} -> {#patches, 4C}, slot order (dy, dx, channel)
Tensor patchify(const Tensor& latent, int C) {
  if (latent.ndim() != 3 || latent.dim(2) != C) throw InputError("patchify: bad latent shape");
  const int h = latent.dim(0), w = latent.dim(1);
  if (h % 2 || w % 2) throw InputError("patchify: latent extents must be even");
  const int ph = h / 2, pw = w / 2;
  Tensor out = Tensor::zeros({ph * pw, 4 * C}, false);
  for (int r = 0; r < ph; ++r)
    for (int c = 0; c < pw; ++c)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int ch = 0; ch < C; ++ch)
            out.at((static_cast<size_t>(r) * pw + c) * 4 * C + (dy * 2 + dx) * C + ch) =
                latent.at((static_cast<size_t>(2 * r + dy) * w + (2 * c + dx)) * C + ch);
  return out;
}

// inverse of patchify on the model's velocity output, gradient-carrying
Tensor unpatchify(const Tensor& tokens, int h_lat, int w_lat, int C) {
  const int pw = w_lat / 2;
  std::vector<size_t> map(static_cast<size_t>(h_lat) * w_lat * C);
  for (int r = 0; r < h_lat; ++r)
    for (int c = 0; c < w_lat; ++c)
      for (int ch = 0; ch < C; ++ch) {
        const size_t dst = (static_cast<size_t>(r) * w_lat + c) * C + ch;
        const size_t tok = static_cast<size_t>(r / 2) * pw + (c / 2);
        const size_t slot = static_cast<size_t>((r % 2) * 2 + (c % 2)) * C + ch;
        map[dst] = tok * (4 * C) + slot;
      }
  return reindex(tokens, map, {h_lat, w_lat, C});
}

namespace {

const Tensor& require_input(const std::vector<Tensor>& v, int image_id, const char* what) {
  if (image_id < 0 || static_cast<size_t>(image_id) >= v.size() ||
      v[static_cast<size_t>(image_id)].numel() == 0)
    throw InputError(std::string("embed: missing ") + what + " for image " +
                     std::to_string(image_id));
  return v[static_cast<size_t>(image_id)];
}

}  // namespace

EmbeddedBatch embed_tokens(const PackedSequence& packed, const std::vector<SampleInputs>& inputs,
                           const ModelParams& params, const ToyVit& vit) {
  if (inputs.size() != packed.samples.size())
    throw InputError("embed: one SampleInputs per packed sample required");
  const ModelConfig& cfg = params.cfg;
  const int C = cfg.latent_channels;

  EmbeddedBatch batch;
  std::vector<Tensor> parts;
  int row = 0;
  for (size_t si = 0; si < packed.samples.size(); ++si) {
    const SampleLayout& s = packed.samples[si];
    const SampleInputs& in = inputs[si];
    size_t text_i = 0;
    for (const Split& sp : s.splits) {
      Tensor part;
      switch (sp.kind) {
        case ModalityKind::Text: {
          if (text_i >= in.text.size()) throw InputError("embed: missing text ids for a split");
          const auto& ids = in.text[text_i++];
          if (static_cast<int>(ids.size()) != sp.token_count)
            throw InputError("embed: text id count does not match the split");
          for (int id : ids)
            if (id < 0 || id >= cfg.vocab_size) throw InputError("embed: text id out of vocab");
          part = gather_rows(params.tok_embed, ids);
          for (int i = 0; i < sp.token_count; ++i) batch.text_rows.push_back(row + i);
          for (int i = 0; i < sp.token_count; ++i) batch.und_rows.push_back(row + i);
          break;
        }
        case ModalityKind::Vit: {
          const Tensor& px = require_input(in.pixels, sp.image_id, "pixels");
          Tensor feats = vit.encode(px);
          if (feats.dim(0) != sp.token_count)
            throw InputError("embed: vit token count does not match the split");
          Tensor h = silu(add_rowvec(matmul(feats, params.conn_w1), params.conn_b1));
          part = add_rowvec(matmul(h, params.conn_w2), params.conn_b2);
          for (int i = 0; i < sp.token_count; ++i) batch.und_rows.push_back(row + i);
          break;
        }
        case ModalityKind::VaeClean: {
          const Tensor& x0 = require_input(in.clean, sp.image_id, "clean latent");
          part = matmul(patchify(x0, C), params.patch_embed);
          for (int i = 0; i < sp.token_count; ++i) batch.gen_rows.push_back(row + i);
          break;
        }
        case ModalityKind::VaeNoised: {
          const ImageRecord& img = s.images[static_cast<size_t>(sp.image_id)];
          Tensor xt;
          if (static_cast<size_t>(sp.image_id) < in.noised.size() &&
              in.noised[static_cast<size_t>(sp.image_id)].numel() > 0) {
            xt = in.noised[static_cast<size_t>(sp.image_id)];
          } else {
            const Tensor& x0 = require_input(in.clean, sp.image_id, "clean latent");
            const Tensor& eps = require_input(in.eps, sp.image_id, "noise");
            xt = noise_latents(x0, eps, img.t);
          }
          part = add_rowvec(matmul(patchify(xt, C), params.patch_embed),
                            timestep_embedding(img.t, params));
          batch.noised_spans.push_back({static_cast<int>(si), sp.image_id, row});
          for (int i = 0; i < sp.token_count; ++i) batch.gen_rows.push_back(row + i);
          break;
        }
      }
      if (part.dim(0) != sp.token_count) throw InputError("embed: split size mismatch");
      for (const auto& pos : sp.positions) batch.positions.push_back(pos);
      parts.push_back(std::move(part));
      row += sp.token_count;
    }
  }
  batch.x = concat_rows(parts);
  return batch;
}

Tensor forward_block(const Tensor& x, const MaskSpec& mask, const EmbeddedBatch& batch,
                     const LayerParams& layer, const ModelConfig& cfg) {
  const int n = x.dim(0), H = cfg.heads, dh = cfg.head_dim, d = cfg.d_model;

  // per-expert projection with that expert's norms, merged into one sequence
  auto project = [&](const ExpertWeights& e, const std::vector<int>& rows) {
    const int m = static_cast<int>(rows.size());
    Tensor hn = rms_norm(gather_rows(x, rows), e.attn_norm, cfg.norm_eps);
    auto head_norm = [&](Tensor proj, const Tensor& w) {
      return reshape(rms_norm(reshape(std::move(proj), {m * H, dh}), w, cfg.norm_eps), {m, d});
    };
    struct QKV {
      Tensor q, k, v;
    };
    return QKV{head_norm(matmul(hn, e.wq), e.q_norm), head_norm(matmul(hn, e.wk), e.k_norm),
               matmul(hn, e.wv)};
  };
  auto u = project(layer.und, batch.und_rows);
  auto g = project(layer.gen, batch.gen_rows);
  const std::vector<std::vector<int>> row_sets = {batch.und_rows, batch.gen_rows};
  Tensor q = merge_rows({u.q, g.q}, row_sets, n);
  Tensor k = merge_rows({u.k, g.k}, row_sets, n);
  Tensor v = merge_rows({u.v, g.v}, row_sets, n);

  q = rope_2d(reshape(q, {n, H, dh}), batch.positions, cfg.rope_base);
  k = rope_2d(reshape(k, {n, H, dh}), batch.positions, cfg.rope_base);
  Tensor attn = reshape(masked_attention_core(q, k, reshape(v, {n, H, dh}), mask), {n, d});

  auto out_proj = [&](const ExpertWeights& e, const std::vector<int>& rows) {
    return matmul(gather_rows(attn, rows), e.wo);
  };
  Tensor x1 = add(x, merge_rows({out_proj(layer.und, batch.und_rows),
                                 out_proj(layer.gen, batch.gen_rows)},
                                row_sets, n));

  auto ffn = [&](const ExpertWeights& e, const std::vector<int>& rows) {
    Tensor hn = rms_norm(gather_rows(x1, rows), e.ffn_norm, cfg.norm_eps);
    return matmul(swiglu(matmul(hn, e.w_gate_up)), e.w_down);
  };
  return add(x1, merge_rows({ffn(layer.und, batch.und_rows), ffn(layer.gen, batch.gen_rows)},
                            row_sets, n));
}

ForwardResult forward_model(const PackedSequence& packed, const MaskSpec& mask,
                            const std::vector<SampleInputs>& inputs, const ModelParams& params,
                            const ToyVit& vit) {
  const ModelConfig& cfg = params.cfg;
  EmbeddedBatch batch = embed_tokens(packed, inputs, params, vit);
  if (mask.rows != batch.x.dim(0) || mask.cols != batch.x.dim(0))
    throw LayoutError("forward: mask extents do not match the token count");

  Tensor x = batch.x;
  for (const LayerParams& layer : params.layers) x = forward_block(x, mask, batch, layer, cfg);

  ForwardResult out;
  out.text_rows = batch.text_rows;
  Tensor text_h = rms_norm(gather_rows(x, batch.text_rows), params.final_norm_und, cfg.norm_eps);
  out.text_logits = matmul(text_h, params.unembed);

  for (const auto& span : batch.noised_spans) {
    const ImageRecord& img =
        packed.samples[static_cast<size_t>(span.sample)].images[static_cast<size_t>(span.image_id)];
    std::vector<int> rows(static_cast<size_t>(img.vae_tokens()));
    for (size_t i = 0; i < rows.size(); ++i) rows[i] = span.first_row + static_cast<int>(i);
    Tensor h = rms_norm(gather_rows(x, rows), params.final_norm_gen, cfg.norm_eps);
    Tensor patches = matmul(h, params.vel_head);
    out.velocities.push_back(
        {span.sample, span.image_id,
         unpatchify(patches, img.h_lat, img.w_lat, cfg.latent_channels)});
  }
  return out;
}

long long count_flops(const ModelConfig& cfg, const PackedSequence& packed) {
  const long long d = cfg.d_model, f = cfg.ffn_hidden;
  long long n_und = 0, n_gen = 0;
  for (const auto& s : packed.samples)
    for (const auto& sp : s.splits) {
      if (sp.kind == ModalityKind::Text || sp.kind == ModalityKind::Vit)
        n_und += sp.token_count;
      else
        n_gen += sp.token_count;
    }
  const MaskSpec mask = build_mask(packed);
  long long pairs = 0;
  for (uint8_t a : mask.allow) pairs += a;

  // multiply-adds: per token 4 d^2 for Q/K/V/O plus 3 d f for the SwiGLU FFN
  // (gate, up, down), regardless of which expert serves it; attention scores
  // and the weighted value sum touch each permitted pair twice across heads.
  const long long per_token = 4 * d * d + 3 * d * f;
  const long long per_layer = n_und * per_token + n_gen * per_token + 2 * pairs * d;
  return 2 * cfg.layers * per_layer;  // two FLOPs per multiply-add
}

}  // namespace bagel
