#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <map>
#include <set>

#include "bagel/layout.hpp"
#include "doctest.h"

using namespace bagel;

TEST_CASE("sample scripts parse directives and tags") {
  auto items = parse_sample_script("text 3\nimage 4 6 cond novit\n# comment\nimage 4 4 gen\n");
  REQUIRE(items.size() == 3);
  CHECK_FALSE(items[0].is_image);
  CHECK(items[0].text_len == 3);
  CHECK(items[1].is_image);
  CHECK(items[1].h_lat == 4);
  CHECK(items[1].w_lat == 6);
  CHECK_FALSE(items[1].has_noised);
  CHECK_FALSE(items[1].has_vit);
  CHECK(items[2].has_noised);
  CHECK(items[2].has_vit);

  CHECK_THROWS_AS(parse_sample_script("text 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_sample_script("frobnicate 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_sample_script("image 4 4 shiny\n"), ConfigError);
  CHECK_THROWS_AS(parse_sample_script("text 2 extra\n"), ConfigError);
  CHECK_THROWS_AS(parse_sample_script(""), ConfigError);
}

TEST_CASE("layouts interleave splits in fixed per-image order") {
  auto items = parse_sample_script("text 2\nimage 4 6 gen\ntext 3\n");
  SampleLayout layout = build_sample_layout(items, Regime::InterleavedGen);

  REQUIRE(layout.splits.size() == 5);
  CHECK(layout.splits[0].kind == ModalityKind::Text);
  CHECK(layout.splits[1].kind == ModalityKind::Vit);
  CHECK(layout.splits[2].kind == ModalityKind::VaeClean);
  CHECK(layout.splits[3].kind == ModalityKind::VaeNoised);
  CHECK(layout.splits[4].kind == ModalityKind::Text);

  // 4x6 latent -> 2x3 patch grid, shared by all three visual sets
  for (int i : {1, 2, 3}) {
    CHECK(layout.splits[static_cast<size_t>(i)].token_count == 6);
    CHECK(layout.splits[static_cast<size_t>(i)].image_id == 0);
    CHECK(layout.splits[static_cast<size_t>(i)].positions.front() == std::pair<int, int>{0, 0});
    CHECK(layout.splits[static_cast<size_t>(i)].positions.back() == std::pair<int, int>{1, 2});
  }

  // text positions count text tokens only, across the whole sample
  CHECK(layout.splits[0].positions == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  CHECK(layout.splits[4].positions == std::vector<std::pair<int, int>>{{2, 2}, {3, 3}, {4, 4}});

  CHECK(layout.total_tokens() == 2 + 18 + 3);
  REQUIRE(layout.images.size() == 1);
  CHECK(layout.images[0].vae_tokens() == 6);
  CHECK(layout.images[0].noised_split == 3);
}

TEST_CASE("conditioning images carry no noised split and stay at t zero") {
  auto items = parse_sample_script("image 4 4 cond\nimage 4 4 gen\n");
  SampleLayout layout = build_sample_layout(items, Regime::InterleavedGen);
  REQUIRE(layout.images.size() == 2);
  CHECK_FALSE(layout.images[0].has_noised);
  CHECK(layout.images[0].noised_split == -1);
  CHECK(layout.images[1].has_noised);

  Rng rng(5);
  assign_independent_noise(layout, 4.0, rng);
  CHECK(layout.images[0].t == 0.0);
  CHECK(layout.images[1].t > 0.0);
  CHECK(layout.images[0].group_id != layout.images[1].group_id);
}

TEST_CASE("image splits reject odd extents and empty set choices") {
  SampleLayout layout;
  CHECK_THROWS_AS(append_image_splits(layout, 3, 4, {}), LayoutError);
  CHECK_THROWS_AS(append_image_splits(layout, 4, 0, {}), LayoutError);
  ImageSets none{false, false, false};
  CHECK_THROWS_AS(append_image_splits(layout, 4, 4, none), LayoutError);
}

TEST_CASE("diffusion forcing grouping merges adjacent images") {
  auto items = parse_sample_script("image 4 4 gen\nimage 4 4 gen\nimage 4 4 gen\n");

  SUBCASE("probability one fuses everything into one noise level") {
    SampleLayout layout = build_sample_layout(items, Regime::DiffusionForcing);
    Rng rng(7);
    assign_noise_levels(layout, 1.0, 1.0, rng);
    CHECK(layout.images[0].group_id == layout.images[2].group_id);
    CHECK(layout.images[0].t == layout.images[1].t);
    CHECK(layout.images[1].t == layout.images[2].t);
  }

  SUBCASE("probability zero keeps every image independent") {
    SampleLayout layout = build_sample_layout(items, Regime::DiffusionForcing);
    Rng rng(7);
    assign_noise_levels(layout, 0.0, 1.0, rng);
    std::set<int> groups;
    std::set<double> levels;
    for (const auto& img : layout.images) {
      groups.insert(img.group_id);
      levels.insert(img.t);
    }
    CHECK(groups.size() == 3);
    CHECK(levels.size() == 3);
  }

  SUBCASE("wrong regime is rejected") {
    SampleLayout layout = build_sample_layout(items, Regime::InterleavedGen);
    Rng rng(7);
    CHECK_THROWS_AS(assign_noise_levels(layout, 0.5, 1.0, rng), LayoutError);
  }
}

TEST_CASE("condition dropout hits its target frequencies") {
  auto items = parse_sample_script("image 4 4 gen\n");
  Rng rng(99);
  int text = 0, vit = 0, clean = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    SampleLayout layout = build_sample_layout(items, Regime::InterleavedGen);
    apply_cfg_dropout(layout, rng, 0.1, 0.5, 0.1);
    text += layout.images[0].dropped.text_ctx;
    vit += layout.images[0].dropped.vit;
    clean += layout.images[0].dropped.vae_clean;
    CHECK(layout.total_tokens() == 12);  // flags never change token counts
  }
  CHECK(std::abs(text / double(trials) - 0.1) < 0.02);
  CHECK(std::abs(vit / double(trials) - 0.5) < 0.02);
  CHECK(std::abs(clean / double(trials) - 0.1) < 0.02);

  SampleLayout layout = build_sample_layout(items, Regime::InterleavedGen);
  CHECK_THROWS_AS(apply_cfg_dropout(layout, rng, -0.1, 0.5, 0.1), ConfigError);
}

TEST_CASE("packing keeps every pack in range and conserves tokens") {
  Rng rng(3);
  std::vector<SampleLayout> samples;
  std::multiset<int> want_lengths;
  long long want_total = 0;
  for (int i = 0; i < 1000; ++i) {
    const int len = 50 + static_cast<int>(rng.below(51));
    SampleLayout s;
    append_text_split(s, len);
    samples.push_back(std::move(s));
    want_lengths.insert(len);
    want_total += len;
  }

  auto packs = pack_sequences(samples, 900, 1000);
  REQUIRE(!packs.empty());

  long long got_total = 0;
  std::multiset<int> got_lengths;
  int short_packs = 0;
  for (const auto& p : packs) {
    CHECK(p.total_tokens <= 1000);
    if (p.total_tokens < 900) ++short_packs;
    got_total += p.total_tokens;
    REQUIRE(p.samples.size() == p.sample_offsets.size());
    int off = 0;
    for (size_t i = 0; i < p.samples.size(); ++i) {
      CHECK(p.sample_offsets[i] == off);
      off += p.samples[i].total_tokens();
      got_lengths.insert(p.samples[i].total_tokens());
    }
    CHECK(off == p.total_tokens);
  }
  // sample lengths stay within max-min, so at most the final pack runs short
  CHECK(short_packs <= 1);
  CHECK(got_total == want_total);
  CHECK(got_lengths == want_lengths);
}

TEST_CASE("oversized samples and bad ranges are rejected") {
  SampleLayout big;
  append_text_split(big, 60);
  CHECK_THROWS_AS(pack_sequences({big}, 10, 50), LayoutError);
  CHECK_THROWS_AS(pack_sequences({big}, 50, 10), ConfigError);
}

TEST_CASE("token to sample mapping follows pack offsets") {
  SampleLayout a, b;
  append_text_split(a, 2);
  append_text_split(b, 3);
  auto packs = pack_sequences({a, b}, 5, 10);
  REQUIRE(packs.size() == 1);
  CHECK(packs[0].sample_of_token() == std::vector<int>{0, 0, 1, 1, 1});

  PackedSequence one = pack_one(a);
  CHECK(one.total_tokens == 2);
  CHECK(one.sample_offsets == std::vector<int>{0});
}
