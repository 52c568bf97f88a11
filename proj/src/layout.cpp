#include "bagel/layout.hpp"

#include <algorithm>
#include <sstream>

#include "bagel/flow.hpp"

namespace bagel {

const char* modality_name(ModalityKind k) {
  switch (k) {
    case ModalityKind::Text: return "text";
    case ModalityKind::Vit: return "vit";
    case ModalityKind::VaeClean: return "vae_clean";
    case ModalityKind::VaeNoised: return "vae_noised";
  }
  return "?";
}

int SampleLayout::total_tokens() const {
  int n = 0;
  for (const auto& s : splits) n += s.token_count;
  return n;
}

std::vector<int> PackedSequence::sample_of_token() const {
  std::vector<int> out(static_cast<size_t>(total_tokens));
  for (size_t s = 0; s < samples.size(); ++s) {
    const int begin = sample_offsets[s];
    const int end = begin + samples[s].total_tokens();
    for (int i = begin; i < end; ++i) out[static_cast<size_t>(i)] = static_cast<int>(s);
  }
  return out;
}

std::vector<ScriptItem> parse_sample_script(const std::string& text) {
  std::vector<ScriptItem> items;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word) || word[0] == '#') continue;
    const std::string where = " (line " + std::to_string(lineno) + ")";
    ScriptItem item;
    if (word == "text") {
      if (!(ls >> item.text_len) || item.text_len <= 0)
        throw ConfigError("script: text needs a positive token count" + where);
    } else if (word == "image") {
      item.is_image = true;
      if (!(ls >> item.h_lat >> item.w_lat))
        throw ConfigError("script: image needs latent extents" + where);
      std::string tag;
      while (ls >> tag) {
        if (tag == "gen") item.has_noised = true;
        else if (tag == "cond") item.has_noised = false;
        else if (tag == "novit") item.has_vit = false;
        else throw ConfigError("script: unknown image tag '" + tag + "'" + where);
      }
    } else {
      throw ConfigError("script: unknown directive '" + word + "'" + where);
    }
    if (ls >> word && word[0] != '#')
      throw ConfigError("script: trailing tokens" + where);
    items.push_back(item);
  }
  if (items.empty()) throw ConfigError("script: no items");
  return items;
}

namespace {

std::vector<std::pair<int, int>> grid_positions(int rows, int cols) {
  std::vector<std::pair<int, int>> pos;
  pos.reserve(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) pos.push_back({r, c});
  return pos;
}

}  // namespace

void append_text_split(SampleLayout& layout, int token_count) {
  if (token_count <= 0) throw LayoutError("append_text_split: need a positive token count");
  int text_pos = 0;
  for (const auto& s : layout.splits)
    if (s.kind == ModalityKind::Text) text_pos += s.token_count;
  Split s;
  s.kind = ModalityKind::Text;
  s.token_count = token_count;
  for (int i = 0; i < token_count; ++i) {
    s.positions.push_back({text_pos, text_pos});
    ++text_pos;
  }
  layout.splits.push_back(std::move(s));
}

int append_image_splits(SampleLayout& layout, int h_lat, int w_lat, ImageSets sets, double t) {
  if (h_lat <= 0 || w_lat <= 0) throw LayoutError("append_image_splits: zero-size image");
  if (h_lat % 2 != 0 || w_lat % 2 != 0)
    throw LayoutError("append_image_splits: latent extents must be divisible by 2");
  if (!sets.vit && !sets.clean && !sets.noised)
    throw LayoutError("append_image_splits: image with no token sets");
  ImageRecord img;
  img.image_id = static_cast<int>(layout.images.size());
  img.h_lat = h_lat;
  img.w_lat = w_lat;
  img.group_id = img.image_id;
  img.has_vit = sets.vit;
  img.has_clean = sets.clean;
  img.has_noised = sets.noised;
  img.t = t;
  const auto grid = grid_positions(img.patch_rows(), img.patch_cols());
  auto push_split = [&](ModalityKind kind, int& slot) {
    Split s;
    s.kind = kind;
    s.token_count = static_cast<int>(grid.size());
    s.image_id = img.image_id;
    s.positions = grid;
    slot = static_cast<int>(layout.splits.size());
    layout.splits.push_back(std::move(s));
  };
  if (img.has_vit) push_split(ModalityKind::Vit, img.vit_split);
  if (img.has_clean) push_split(ModalityKind::VaeClean, img.clean_split);
  if (img.has_noised) push_split(ModalityKind::VaeNoised, img.noised_split);
  layout.images.push_back(img);
  return img.image_id;
}

SampleLayout build_sample_layout(const std::vector<ScriptItem>& script, Regime regime) {
  if (script.empty()) throw LayoutError("build_sample_layout: empty script");
  SampleLayout layout;
  layout.regime = regime;
  for (const auto& item : script) {
    if (!item.is_image) {
      append_text_split(layout, item.text_len);
      continue;
    }
    ImageSets sets;
    sets.vit = item.has_vit;
    sets.clean = true;
    sets.noised = item.has_noised;
    append_image_splits(layout, item.h_lat, item.w_lat, sets);
  }
  return layout;
}

void assign_noise_levels(SampleLayout& layout, double grouping_prob, double shift, Rng& rng) {
  if (layout.regime != Regime::DiffusionForcing)
    throw LayoutError("assign_noise_levels: layout is not in the diffusion-forcing regime");
  if (grouping_prob < 0.0 || grouping_prob > 1.0)
    throw ConfigError("assign_noise_levels: grouping_prob outside [0,1]");
  if (layout.images.empty()) return;
  int group = 0;
  layout.images[0].group_id = 0;
  for (size_t i = 1; i < layout.images.size(); ++i) {
    if (!rng.bernoulli(grouping_prob)) ++group;
    layout.images[i].group_id = group;
  }
  double t = 0.0;
  int prev_group = -1;
  for (auto& img : layout.images) {
    if (img.group_id != prev_group) {
      t = sample_timestep(shift, rng);
      prev_group = img.group_id;
    }
    img.t = img.has_noised ? t : 0.0;
  }
}

void assign_independent_noise(SampleLayout& layout, double shift, Rng& rng) {
  for (auto& img : layout.images) {
    img.group_id = img.image_id;
    img.t = img.has_noised ? sample_timestep(shift, rng) : 0.0;
  }
}

void apply_cfg_dropout(SampleLayout& layout, Rng& rng, double p_text, double p_vit, double p_vae) {
  for (double p : {p_text, p_vit, p_vae})
    if (p < 0.0 || p > 1.0) throw ConfigError("apply_cfg_dropout: probability outside [0,1]");
  for (auto& img : layout.images) {
    img.dropped.text_ctx = rng.bernoulli(p_text);
    img.dropped.vit = rng.bernoulli(p_vit);
    img.dropped.vae_clean = rng.bernoulli(p_vae);
  }
}

PackedSequence pack_one(const SampleLayout& sample) {
  PackedSequence pack;
  pack.samples.push_back(sample);
  pack.sample_offsets.push_back(0);
  pack.total_tokens = sample.total_tokens();
  return pack;
}

std::vector<PackedSequence> pack_sequences(const std::vector<SampleLayout>& samples, int min_len,
                                           int max_len) {
  if (min_len > max_len || min_len < 0)
    throw ConfigError("pack_sequences: invalid length range");

  struct OpenPack {
    std::vector<const SampleLayout*> members;
    int len = 0;
  };
  std::vector<OpenPack> done;
  std::vector<OpenPack> open;

  for (const auto& s : samples) {
    const int n = s.total_tokens();
    if (n > max_len)
      throw LayoutError("pack_sequences: sample of " + std::to_string(n) +
                        " tokens exceeds max_len " + std::to_string(max_len));
    size_t slot = open.size();
    for (size_t i = 0; i < open.size(); ++i) {
      if (open[i].len + n <= max_len) {
        slot = i;
        break;
      }
    }
    if (slot == open.size()) open.push_back({});
    open[slot].members.push_back(&s);
    open[slot].len += n;
    if (open[slot].len >= min_len) {
      done.push_back(std::move(open[slot]));
      open.erase(open.begin() + static_cast<long>(slot));
    }
  }

  // leftovers are all below min_len; merge them first-fit so at most the
  // final pack can fall short (guaranteed when samples are <= max-min long)
  std::vector<OpenPack> rest;
  for (auto& p : open) {
    size_t slot = rest.size();
    for (size_t i = 0; i < rest.size(); ++i) {
      if (rest[i].len + p.len <= max_len) {
        slot = i;
        break;
      }
    }
    if (slot == rest.size()) {
      rest.push_back(std::move(p));
    } else {
      auto& dst = rest[slot];
      dst.members.insert(dst.members.end(), p.members.begin(), p.members.end());
      dst.len += p.len;
    }
  }
  for (auto& p : rest) done.push_back(std::move(p));

  std::vector<PackedSequence> out;
  out.reserve(done.size());
  for (const auto& p : done) {
    PackedSequence pack;
    int off = 0;
    for (const SampleLayout* s : p.members) {
      pack.samples.push_back(*s);
      pack.sample_offsets.push_back(off);
      off += s->total_tokens();
    }
    pack.total_tokens = off;
    out.push_back(std::move(pack));
  }
  return out;
}

}  // namespace bagel
