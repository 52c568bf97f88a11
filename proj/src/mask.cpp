#include "bagel/mask.hpp"

#include <string>

namespace bagel {

namespace {

bool is_vision(ModalityKind k) { return k != ModalityKind::Text; }

enum class Rel { None, Full, Causal };

// split-level visibility of key split ik for query split iq, one sample
Rel split_relation(const SampleLayout& s, int iq, int ik) {
  const Split& qs = s.splits[static_cast<size_t>(iq)];
  const Split& ks = s.splits[static_cast<size_t>(ik)];
  if (iq == ik) return qs.kind == ModalityKind::Text ? Rel::Causal : Rel::Full;

  const bool df = s.regime == Regime::DiffusionForcing;

  if (qs.kind == ModalityKind::Text) {
    if (ik > iq) return Rel::None;
    if (ks.kind == ModalityKind::Text) return Rel::Full;
    const ImageRecord& b = s.images[static_cast<size_t>(ks.image_id)];
    switch (ks.kind) {
      case ModalityKind::Vit: return b.dropped.vit ? Rel::None : Rel::Full;
      case ModalityKind::VaeClean:
        if (df) return Rel::None;
        return b.dropped.vae_clean ? Rel::None : Rel::Full;
      case ModalityKind::VaeNoised: return df ? Rel::Full : Rel::None;
      default: return Rel::None;
    }
  }

  // vision query
  const ImageRecord& a = s.images[static_cast<size_t>(qs.image_id)];
  if (ks.kind == ModalityKind::Text)
    return (ik < iq && !a.dropped.text_ctx) ? Rel::Full : Rel::None;

  const ImageRecord& b = s.images[static_cast<size_t>(ks.image_id)];
  if (a.image_id == b.image_id) {
    // the clean set conditions later content only: it sees the image's ViT
    // tokens but is mutually hidden from the noised set
    switch (qs.kind) {
      case ModalityKind::Vit: return ks.kind == ModalityKind::VaeNoised ? Rel::Full : Rel::None;
      case ModalityKind::VaeClean: return ks.kind == ModalityKind::Vit ? Rel::Full : Rel::None;
      case ModalityKind::VaeNoised: return ks.kind == ModalityKind::Vit ? Rel::Full : Rel::None;
      default: return Rel::None;
    }
  }

  const bool key_precedes = b.image_id < a.image_id;
  if (!df) {
    if (!key_precedes) return Rel::None;
    switch (ks.kind) {
      case ModalityKind::Vit: return b.dropped.vit ? Rel::None : Rel::Full;
      case ModalityKind::VaeClean: return b.dropped.vae_clean ? Rel::None : Rel::Full;
      default: return Rel::None;  // noised keys of other images stay hidden
    }
  }
  // diffusion forcing: noised keys stand in for clean ones; one noise group
  // gets mutual attention among its members' ViT and noised sets
  const bool grant = key_precedes ||
                     (a.group_id == b.group_id &&
                      (qs.kind == ModalityKind::Vit || qs.kind == ModalityKind::VaeNoised));
  switch (ks.kind) {
    case ModalityKind::Vit: return (grant && !b.dropped.vit) ? Rel::Full : Rel::None;
    case ModalityKind::VaeNoised: return grant ? Rel::Full : Rel::None;
    default: return Rel::None;
  }
}

}  // namespace

MaskSpec build_mask(const PackedSequence& packed) {
  const int n = packed.total_tokens;
  MaskSpec mask;
  mask.rows = n;
  mask.cols = n;
  mask.allow.assign(static_cast<size_t>(n) * n, 0);

  for (size_t si = 0; si < packed.samples.size(); ++si) {
    const SampleLayout& s = packed.samples[si];
    for (const auto& sp : s.splits) {
      if (is_vision(sp.kind) &&
          (sp.image_id < 0 || sp.image_id >= static_cast<int>(s.images.size())))
        throw LayoutError("build_mask: vision split without a valid image");
      if (!is_vision(sp.kind) && sp.image_id != -1)
        throw LayoutError("build_mask: text split carries an image id");
    }
    // token offset of each split within the pack
    std::vector<int> split_off(s.splits.size());
    int off = packed.sample_offsets[si];
    for (size_t i = 0; i < s.splits.size(); ++i) {
      split_off[i] = off;
      off += s.splits[i].token_count;
    }
    for (size_t iq = 0; iq < s.splits.size(); ++iq) {
      for (size_t ik = 0; ik < s.splits.size(); ++ik) {
        const Rel rel = split_relation(s, static_cast<int>(iq), static_cast<int>(ik));
        if (rel == Rel::None) continue;
        const int q0 = split_off[iq], k0 = split_off[ik];
        const int nq = s.splits[iq].token_count, nk = s.splits[ik].token_count;
        if (rel == Rel::Full) {
          for (int q = 0; q < nq; ++q)
            for (int k = 0; k < nk; ++k) mask.set(q0 + q, k0 + k, true);
        } else {
          for (int q = 0; q < nq; ++q)
            for (int k = 0; k <= q; ++k) mask.set(q0 + q, k0 + k, true);
        }
      }
    }
  }
  return mask;
}

namespace {

// per-token view used by the oracle only
struct TokenDesc {
  int sample;
  int split;
  int pos;  // index within the split
  ModalityKind kind;
  int image;  // -1 for text
};

std::vector<TokenDesc> flatten_tokens(const PackedSequence& packed) {
  std::vector<TokenDesc> toks;
  toks.reserve(static_cast<size_t>(packed.total_tokens));
  for (size_t si = 0; si < packed.samples.size(); ++si) {
    const SampleLayout& s = packed.samples[si];
    for (size_t sp = 0; sp < s.splits.size(); ++sp)
      for (int p = 0; p < s.splits[sp].token_count; ++p)
        toks.push_back({static_cast<int>(si), static_cast<int>(sp), p, s.splits[sp].kind,
                        s.splits[sp].image_id});
  }
  return toks;
}

// direct rule evaluation for one (query, key) token pair; no code shared with
// the split-level builder above beyond the data types
bool oracle_allows(const SampleLayout& s, const TokenDesc& q, const TokenDesc& k) {
  if (q.sample != k.sample) return false;

  // within one split: causal for text, full for vision
  if (q.split == k.split) {
    if (q.kind == ModalityKind::Text) return k.pos <= q.pos;
    return true;
  }

  const bool forcing = s.regime == Regime::DiffusionForcing;
  const ImageRecord* qi = q.image >= 0 ? &s.images[static_cast<size_t>(q.image)] : nullptr;
  const ImageRecord* ki = k.image >= 0 ? &s.images[static_cast<size_t>(k.image)] : nullptr;

  // same image, different splits
  if (qi && ki && q.image == k.image) {
    const bool grant_set = [](ModalityKind m) {
      return m == ModalityKind::Vit || m == ModalityKind::VaeNoised;
    }(q.kind) && (k.kind == ModalityKind::Vit || k.kind == ModalityKind::VaeNoised);
    if (grant_set) return true;
    if (q.kind == ModalityKind::VaeClean && k.kind == ModalityKind::Vit) return true;
    return false;  // clean is hidden from noised and vice versa; vit never sees clean
  }

  // text key
  if (k.kind == ModalityKind::Text) {
    if (k.split > q.split) return false;
    if (qi && qi->dropped.text_ctx) return false;
    return true;
  }

  // vision key of another image (or any image, for a text query)
  const bool key_earlier = k.split < q.split;
  bool visible = false;
  if (!forcing) {
    if (k.kind == ModalityKind::Vit) visible = key_earlier && !ki->dropped.vit;
    if (k.kind == ModalityKind::VaeClean) visible = key_earlier && !ki->dropped.vae_clean;
    // noised keys of other images are never context in this regime
  } else {
    bool reach = key_earlier;
    if (qi && qi->group_id == ki->group_id &&
        (q.kind == ModalityKind::Vit || q.kind == ModalityKind::VaeNoised))
      reach = true;
    if (k.kind == ModalityKind::Vit) visible = reach && !ki->dropped.vit;
    if (k.kind == ModalityKind::VaeNoised) visible = reach;
    // clean keys are fully replaced by noised ones in this regime
  }
  return visible;
}

}  // namespace

MaskSpec oracle_mask(const PackedSequence& packed) {
  const int n = packed.total_tokens;
  MaskSpec mask;
  mask.rows = n;
  mask.cols = n;
  mask.allow.assign(static_cast<size_t>(n) * n, 0);
  const auto toks = flatten_tokens(packed);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k) {
      const TokenDesc& qt = toks[static_cast<size_t>(q)];
      if (oracle_allows(packed.samples[static_cast<size_t>(qt.sample)], qt,
                        toks[static_cast<size_t>(k)]))
        mask.set(q, k, true);
    }
  return mask;
}

MaskSpec mask_rows_for_suffix(const PackedSequence& packed, int suffix_tokens) {
  const MaskSpec full = build_mask(packed);
  if (suffix_tokens < 0 || suffix_tokens > full.rows)
    throw LayoutError("mask_rows_for_suffix: suffix larger than the layout");
  MaskSpec out;
  out.rows = suffix_tokens;
  out.cols = full.cols;
  out.allow.assign(static_cast<size_t>(suffix_tokens) * full.cols, 0);
  const int first = full.rows - suffix_tokens;
  for (int q = 0; q < suffix_tokens; ++q)
    for (int k = 0; k < full.cols; ++k) out.set(q, k, full.at(first + q, k));
  return out;
}

std::string render_mask(const MaskSpec& mask) {
  std::string out;
  out.reserve(static_cast<size_t>(mask.rows) * (mask.cols + 1));
  for (int q = 0; q < mask.rows; ++q) {
    for (int k = 0; k < mask.cols; ++k) out.push_back(mask.at(q, k) ? '#' : '.');
    out.push_back('\n');
  }
  return out;
}

}  // namespace bagel
