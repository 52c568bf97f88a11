#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "bagel/mask.hpp"
#include "bagel/model.hpp"
#include "bagel/vision.hpp"
#include "doctest.h"

using namespace bagel;

namespace {

ModelConfig small_config(Variant variant, int layers = 2) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.d_model = 24;
  cfg.heads = 2;
  cfg.head_dim = 12;
  cfg.ffn_hidden = 32;
  cfg.vocab_size = 16;
  cfg.variant = variant;
  cfg.latent_channels = 16;
  cfg.vit_width = 32;
  cfg.temb_dim = 64;
  return cfg;
}

void fill_randn(Tensor& t, Rng& rng) {
  for (size_t i = 0; i < t.numel(); ++i) t.at(i) = rng.normal();
}

// [text 3][image 4x4 gen] at noise level t
struct TestBatch {
  PackedSequence packed;
  std::vector<SampleInputs> inputs;
};

TestBatch text_image_batch(Rng& rng, double t = 0.7) {
  SampleLayout layout;
  layout.regime = Regime::InterleavedGen;
  append_text_split(layout, 3);
  append_image_splits(layout, 4, 4, {true, true, true}, t);
  SampleInputs in;
  in.text = {{0, 1, 2}};
  in.pixels = {Tensor::randn({32, 32, 3}, rng)};
  in.clean = {Tensor::randn({4, 4, 16}, rng)};
  in.eps = {Tensor::randn({4, 4, 16}, rng)};
  TestBatch b;
  b.packed = pack_one(layout);
  b.inputs = {std::move(in)};
  return b;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

double max_forward_diff(const ForwardResult& a, const ForwardResult& b) {
  double m = max_abs_diff(a.text_logits, b.text_logits);
  REQUIRE(a.velocities.size() == b.velocities.size());
  for (size_t i = 0; i < a.velocities.size(); ++i)
    m = std::max(m, max_abs_diff(a.velocities[i].v, b.velocities[i].v));
  return m;
}

bool all_zero(const Tensor& t) {
  if (!t.grad) return true;
  for (double g : *t.grad)
    if (g != 0.0) return false;
  return true;
}

}  // namespace

TEST_CASE("vae decode is the exact right inverse of encode") {
  ToyVae vae(16, 8, 4.0);
  Rng rng(3);
  Tensor z = Tensor::randn({4, 4, 16}, rng);
  Tensor back = vae.encode(vae.decode(z));
  CHECK(max_abs_diff(z, back) < 1e-10);

  // encode-decode is a projection: applying it twice changes nothing
  Tensor x = Tensor::randn({32, 32, 3}, rng);
  Tensor once = vae.decode(vae.encode(x));
  Tensor twice = vae.decode(vae.encode(once));
  CHECK(max_abs_diff(once, twice) < 1e-10);
}

TEST_CASE("vit features are deterministic in the seed and carry no graph") {
  Rng r1(5), r2(5), r3(6);
  ToyVit a(16, 32, r1), b(16, 32, r2), c(16, 32, r3);
  Rng rng(8);
  Tensor img = Tensor::randn({32, 32, 3}, rng);
  Tensor fa = a.encode(img), fb = b.encode(img), fc = c.encode(img);
  CHECK(fa.dim(0) == a.tokens_for(32, 32));
  CHECK(fa.dim(0) == 4);
  CHECK(fa.dim(1) == 32);
  CHECK(max_abs_diff(fa, fb) == 0.0);
  CHECK(max_abs_diff(fa, fc) > 1e-6);
  CHECK(fa.node == nullptr);
  CHECK_FALSE(fa.requires_grad);
}

TEST_CASE("patchify and unpatchify are inverse views") {
  Rng rng(4);
  Tensor z = Tensor::randn({4, 6, 16}, rng);
  Tensor p = patchify(z, 16);
  CHECK(p.dim(0) == 6);
  CHECK(p.dim(1) == 64);
  Tensor back = unpatchify(p, 4, 6, 16);
  CHECK(max_abs_diff(z, back) == 0.0);
  CHECK_THROWS_AS(patchify(Tensor::zeros({3, 4, 16}), 16), InputError);
}

TEST_CASE("tying the generation expert reproduces the dense variant") {
  Rng rng(21);
  TestBatch batch = text_image_batch(rng);
  MaskSpec mask = build_mask(batch.packed);
  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);

  Rng init_d(9);
  ModelParams dense = init_params(small_config(Variant::Dense), init_d);
  Rng head_rng(55);
  fill_randn(dense.vel_head, head_rng);  // zero-initialized head would hide differences

  for (Variant v : {Variant::MoT, Variant::MoE}) {
    Rng init_v(9);
    ModelParams other = init_params(small_config(v), init_v);
    tie_generation_expert(other);
    Rng head_rng2(55);
    fill_randn(other.vel_head, head_rng2);
    ForwardResult a = forward_model(batch.packed, mask, batch.inputs, dense, vit);
    ForwardResult b = forward_model(batch.packed, mask, batch.inputs, other, vit);
    CHECK(max_forward_diff(a, b) < 1e-12);
  }
}

TEST_CASE("untied experts change only generation-routed tokens") {
  Rng rng(22);
  TestBatch batch = text_image_batch(rng);
  MaskSpec mask = build_mask(batch.packed);
  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);

  Rng init_d(9), init_m(9);
  ModelParams dense = init_params(small_config(Variant::Dense), init_d);
  ModelParams mot = init_params(small_config(Variant::MoT), init_m);
  Rng h1(55), h2(55);
  fill_randn(dense.vel_head, h1);
  fill_randn(mot.vel_head, h2);

  // a text-only sample routes every token through the shared understanding
  // expert, so the untied generation weights are unreachable
  SampleLayout text_only;
  text_only.regime = Regime::InterleavedGen;
  append_text_split(text_only, 4);
  PackedSequence packed = pack_one(text_only);
  std::vector<SampleInputs> in(1);
  in[0].text = {{3, 1, 4, 1}};
  MaskSpec tmask = build_mask(packed);
  ForwardResult ta = forward_model(packed, tmask, in, dense, vit);
  ForwardResult tb = forward_model(packed, tmask, in, mot, vit);
  CHECK(max_abs_diff(ta.text_logits, tb.text_logits) < 1e-12);

  // an image-bearing sample reaches them and the outputs drift apart
  ForwardResult ia = forward_model(batch.packed, mask, batch.inputs, dense, vit);
  ForwardResult ib = forward_model(batch.packed, mask, batch.inputs, mot, vit);
  CHECK(max_forward_diff(ia, ib) > 1e-8);
}

TEST_CASE("hard routing starves the idle expert of gradient") {
  Rng rng(23);
  TestBatch batch = text_image_batch(rng);
  MaskSpec mask = build_mask(batch.packed);
  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);

  // one layer: understanding tokens feed generation queries only through
  // pre-FFN attention keys, so a velocity-only loss reaches the understanding
  // attention weights but never its FFN or query path
  Rng init(9);
  ModelParams params = init_params(small_config(Variant::MoT, 1), init);
  Rng head_rng(55);
  fill_randn(params.vel_head, head_rng);

  SUBCASE("velocity loss") {
    for (Tensor* t : params.trainable()) t->zero_grad();
    ForwardResult out = forward_model(batch.packed, mask, batch.inputs, params, vit);
    Tensor loss = sum_sq_diff(out.velocities[0].v, Tensor::zeros(out.velocities[0].v.shape));
    backward(loss);
    const ExpertWeights& und = params.layers[0].und;
    const ExpertWeights& gen = params.layers[0].gen;
    CHECK(all_zero(und.w_gate_up));
    CHECK(all_zero(und.w_down));
    CHECK(all_zero(und.wq));
    CHECK(all_zero(und.wo));
    CHECK_FALSE(all_zero(und.wk));
    CHECK_FALSE(all_zero(und.wv));
    CHECK_FALSE(all_zero(gen.w_gate_up));
    CHECK_FALSE(all_zero(gen.wq));
    CHECK(all_zero(params.unembed));
  }

  SUBCASE("text loss") {
    for (Tensor* t : params.trainable()) t->zero_grad();
    ForwardResult out = forward_model(batch.packed, mask, batch.inputs, params, vit);
    Tensor loss = cross_entropy_mean(out.text_logits, {1, 2, -1});
    backward(loss);
    const ExpertWeights& gen = params.layers[0].gen;
    // text precedes the image, so generation tokens are not even keys for it
    CHECK(all_zero(gen.w_gate_up));
    CHECK(all_zero(gen.wk));
    CHECK(all_zero(params.vel_head));
    CHECK_FALSE(all_zero(params.layers[0].und.w_gate_up));
  }
}

TEST_CASE("velocity output tracks the declared noise level") {
  Rng rng(24);
  TestBatch batch = text_image_batch(rng, 0.3);
  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);
  Rng init(9);
  ModelParams params = init_params(small_config(Variant::MoT), init);
  Rng head_rng(55);
  fill_randn(params.vel_head, head_rng);

  // pin the noised latent so only the timestep embedding can differ
  batch.inputs[0].noised = {Tensor::randn({4, 4, 16}, rng)};
  MaskSpec mask = build_mask(batch.packed);
  ForwardResult low = forward_model(batch.packed, mask, batch.inputs, params, vit);

  batch.packed.samples[0].images[0].t = 0.9;
  ForwardResult high = forward_model(batch.packed, mask, batch.inputs, params, vit);
  CHECK(max_abs_diff(low.velocities[0].v, high.velocities[0].v) > 1e-8);
}

TEST_CASE("packed neighbours cannot influence each other") {
  Rng rng(25);
  SampleLayout a;
  a.regime = Regime::InterleavedGen;
  append_text_split(a, 4);

  auto make_pack = [&](const SampleLayout& first) {
    SampleLayout b;
    b.regime = Regime::InterleavedGen;
    append_text_split(b, 2);
    append_image_splits(b, 4, 4, {true, true, true}, 0.5);
    PackedSequence pack;
    pack.samples = {first, b};
    pack.sample_offsets = {0, first.total_tokens()};
    pack.total_tokens = first.total_tokens() + b.total_tokens();
    return pack;
  };

  PackedSequence pack = make_pack(a);
  std::vector<SampleInputs> inputs(2);
  inputs[0].text = {{5, 6, 7, 8}};
  inputs[1].text = {{1, 2}};
  inputs[1].pixels = {Tensor::randn({32, 32, 3}, rng)};
  inputs[1].clean = {Tensor::randn({4, 4, 16}, rng)};
  inputs[1].eps = {Tensor::randn({4, 4, 16}, rng)};

  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);
  Rng init(9);
  ModelParams params = init_params(small_config(Variant::MoT), init);
  Rng head_rng(55);
  fill_randn(params.vel_head, head_rng);

  MaskSpec mask = build_mask(pack);
  ForwardResult before = forward_model(pack, mask, inputs, params, vit);

  // rewrite the second sample's content; the first sample's rows must not move
  auto changed = inputs;
  changed[1].text = {{9, 10}};
  changed[1].clean = {Tensor::randn({4, 4, 16}, rng)};
  changed[1].eps = {Tensor::randn({4, 4, 16}, rng)};
  ForwardResult after = forward_model(pack, mask, changed, params, vit);

  for (int row = 0; row < 4; ++row)
    for (int c = 0; c < 16; ++c)
      CHECK(before.text_logits.at(static_cast<size_t>(row) * 16 + c) ==
            after.text_logits.at(static_cast<size_t>(row) * 16 + c));
  CHECK(max_abs_diff(before.velocities[0].v, after.velocities[0].v) > 1e-8);
}

TEST_CASE("flop counts ignore routing and follow the mask") {
  auto items = parse_sample_script("text 4\nimage 4 4 cond\nimage 4 4 gen\n");
  SampleLayout layout = build_sample_layout(items, Regime::InterleavedGen);
  PackedSequence packed = pack_one(layout);

  const long long dense = count_flops(small_config(Variant::Dense), packed);
  CHECK(dense == count_flops(small_config(Variant::MoE), packed));
  CHECK(dense == count_flops(small_config(Variant::MoT), packed));

  // hand count for a two-token text sample: 3 permitted pairs
  SampleLayout tiny;
  tiny.regime = Regime::InterleavedGen;
  append_text_split(tiny, 2);
  ModelConfig cfg = small_config(Variant::Dense);
  const long long d = cfg.d_model, f = cfg.ffn_hidden;
  const long long per_token = 4 * d * d + 3 * d * f;
  const long long want = 2 * cfg.layers * (2 * per_token + 2 * 3 * d);
  CHECK(count_flops(cfg, pack_one(tiny)) == want);
}

TEST_CASE("embedding bookkeeping partitions rows by expert") {
  Rng rng(26);
  TestBatch batch = text_image_batch(rng);
  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);
  Rng init(9);
  ModelParams params = init_params(small_config(Variant::MoT), init);

  EmbeddedBatch eb = embed_tokens(batch.packed, batch.inputs, params, vit);
  CHECK(eb.x.dim(0) == 3 + 4 + 4 + 4);
  CHECK(eb.x.dim(1) == 24);
  // text + vit rows to the understanding expert, vae rows to generation
  CHECK(eb.und_rows == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(eb.gen_rows == std::vector<int>{7, 8, 9, 10, 11, 12, 13, 14});
  CHECK(eb.text_rows == std::vector<int>{0, 1, 2});
  REQUIRE(eb.noised_spans.size() == 1);
  CHECK(eb.noised_spans[0].first_row == 11);
  CHECK(eb.positions.size() == 15);
}

TEST_CASE("missing declared inputs are rejected") {
  Rng rng(27);
  TestBatch batch = text_image_batch(rng);
  Rng vit_rng(77);
  ToyVit vit(16, 32, vit_rng);
  Rng init(9);
  ModelParams params = init_params(small_config(Variant::MoT), init);

  auto broken = batch.inputs;
  broken[0].pixels.clear();
  CHECK_THROWS_AS(embed_tokens(batch.packed, broken, params, vit), InputError);

  auto no_eps = batch.inputs;
  no_eps[0].eps.clear();
  CHECK_THROWS_AS(embed_tokens(batch.packed, no_eps, params, vit), InputError);
}

TEST_CASE("timestep embedding is a deterministic smooth feature") {
  Rng init(9);
  ModelParams params = init_params(small_config(Variant::MoT), init);
  Tensor a = timestep_embedding(0.25, params);
  Tensor b = timestep_embedding(0.25, params);
  Tensor c = timestep_embedding(0.75, params);
  CHECK(a.dim(1) == 24);
  CHECK(max_abs_diff(a, b) == 0.0);
  CHECK(max_abs_diff(a, c) > 1e-8);
}
