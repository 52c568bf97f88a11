#pragma once

// Compiles an interleaved layout into its attention mask, plus a brute-force
// per-token-pair oracle kept deliberately free of shared logic so the two can
// be tested against each other.

#include "bagel/layout.hpp"
#include "bagel/maskspec.hpp"

namespace bagel {

// Split-level mask construction. The rules, per query token:
//  - tokens of different samples never attend to each other
//  - text is causal within its split; vision splits are full within the split
//  - a token sees preceding splits of its sample, filtered by the rules below
//  - within one image, its ViT and noised tokens attend to each other fully;
//    the clean set sees the ViT set but clean and noised are mutually hidden
//    (clean tokens condition later content, not their own denoising)
//  - interleaved-generation regime: earlier images expose ViT and clean keys,
//    never noised ones
//  - diffusion-forcing regime: earlier images expose ViT and noised keys,
//    never clean ones; images in one noise group additionally get mutual full
//    attention among their ViT and noised sets
//  - condition dropout: an image's dropped ViT or clean split is hidden from
//    every query outside that image; a dropped text context hides all text
//    keys from that image's own vision queries only
MaskSpec build_mask(const PackedSequence& packed);

// Independent restatement of the same rules, evaluated per token pair.
MaskSpec oracle_mask(const PackedSequence& packed);

// Rectangular mask for incremental decoding: rows are the tokens of a new
// trailing split appended to the layout, columns are all tokens. Slicing the
// full mask keeps cached inference exactly equivalent to recomputation.
MaskSpec mask_rows_for_suffix(const PackedSequence& packed, int suffix_tokens);

// text-grid rendering ('#' permitted, '.' blocked) with one row per query
std::string render_mask(const MaskSpec& mask);

}  // namespace bagel
