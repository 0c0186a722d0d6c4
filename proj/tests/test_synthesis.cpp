#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "lapig/data.hpp"
#include "lapig/synthesis.hpp"

using namespace lapig;

namespace {

SynthesisModelConfig tiny_model() {
  SynthesisModelConfig c;
  c.text.token_dim = 512;
  c.text.layers = 1;
  c.text.ffn_hidden = 32;
  c.text.max_len = 96;
  c.unet.base_channels = 8;
  c.unet.channel_mults = {1, 2};
  c.unet.attention_levels = {false, true};
  c.unet.time_dim = 16;
  c.unet.time_hidden = 32;
  c.unet.context_dim = 512;
  c.unet.attn_dim = 16;
  c.unet.groups = 4;
  c.schedule = {50, 1e-3, 0.2};
  return c;
}

IdentityEncoder<float> tiny_identity_encoder() {
  IdentityEncoderConfig c;
  c.widths = {4, 8};
  c.num_classes = 4;
  return IdentityEncoder<float>(c, 3);
}

std::vector<SynthesisExample> toy_examples(int n, std::size_t size, std::uint64_t seed = 5) {
  std::vector<SynthesisExample> out;
  for (int id = 0; id < n; ++id) {
    const auto p = identity_params(seed, id);
    SynthesisExample ex;
    ex.identity_id = id;
    for (View v : kAllViews) ex.targets[v] = normalize<float>(render_face(p, v, size).visible);
    ex.id_image = ex.targets[View::front];
    ex.caption = caption_from_template(p.attributes());
    out.push_back(std::move(ex));
  }
  return out;
}

Var<double> random_image(Rng& rng, Shape s) { return leaf(rand_uniform<double>(s, rng, -1, 1)); }

}  // namespace

TEST(SsimVar, AgreesWithMetric) {
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    auto a = random_image(rng, {3, 12, 10});
    auto b = leaf(a.value() * 0.6 + rand_uniform<double>({3, 12, 10}, rng, -0.4, 0.4));
    EXPECT_NEAR(ssim_var(a, b).item(), ssim(a.value(), b.value()), 1e-12);
  }
}

TEST(PoseLoss, IdenticalSetsGiveMinusFour) {
  Rng rng(2);
  std::vector<Var<float>> gen;
  std::vector<Tensor<float>> ref;
  std::vector<View> views(kAllViews.begin(), kAllViews.end());
  for (int i = 0; i < 4; ++i) {
    ref.push_back(rand_uniform<float>({3, 16, 16}, rng, -1, 1));
    gen.push_back(constant(ref.back()));
  }
  EXPECT_EQ(pose_loss(gen, views, ref, views).item(), -4.0f);
}

TEST(PoseLoss, MatchesMetricOracleOnRandomPairs) {
  Rng rng(3);
  std::vector<View> views(kAllViews.begin(), kAllViews.end());
  for (int t = 0; t < 10; ++t) {
    std::vector<Var<double>> gen;
    std::vector<Tensor<double>> ref;
    double oracle = 0;
    for (int i = 0; i < 4; ++i) {
      gen.push_back(random_image(rng, {1, 8, 8}));
      ref.push_back(rand_uniform<double>({1, 8, 8}, rng, -1, 1));
      oracle -= ssim(gen.back().value(), ref.back());
    }
    const double got = pose_loss(gen, views, ref, views).item();
    EXPECT_NEAR(got, oracle, 1e-6);
    EXPECT_GE(got, -4.0);
  }
}

TEST(PoseLoss, MismatchedLabelsRejected) {
  Rng rng(4);
  std::vector<Var<double>> gen{random_image(rng, {1, 8, 8}), random_image(rng, {1, 8, 8})};
  std::vector<Tensor<double>> ref{gen[0].value(), gen[1].value()};
  EXPECT_THROW(pose_loss(gen, {View::front, View::left}, ref, {View::left, View::front}), std::invalid_argument);
  EXPECT_THROW(pose_loss(gen, {View::front}, ref, {View::front, View::left}), std::invalid_argument);
}

TEST(PoseLoss, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  std::vector<View> views(kAllViews.begin(), kAllViews.end());
  std::vector<Var<double>> gen;
  std::vector<Tensor<double>> ref;
  for (int i = 0; i < 4; ++i) {
    gen.push_back(random_image(rng, {1, 8, 8}));
    ref.push_back(rand_uniform<double>({1, 8, 8}, rng, -1, 1));
  }
  auto f = [&] { return pose_loss(gen, views, ref, views); };
  EXPECT_LT(lapig::testing::gradient_rel_error(f, gen, 1e-5), 1e-3);
}

TEST(TrainSynthesis, ZeroPoseWeightIsPlainConditionalDiffusion) {
  const auto data = toy_examples(2, 16);
  const auto id_enc = tiny_identity_encoder();
  SynthesisTrainConfig tc;
  tc.epochs = 2;
  tc.lr = 1e-3;
  tc.lambda_pose = 0;
  tc.seed = 11;
  SynthesisModel<float> model(tiny_model(), 7);
  train_synthesis(model, id_enc, data, tc);

  // Independent loop: noise-prediction loss only, same randomness protocol.
  SynthesisModel<float> ref(tiny_model(), 7);
  ParameterSet<float> ps;
  ps.attach_all("unet.", ref.unet.parameters());
  ps.attach_all("text.", ref.text.parameters());
  AdamConfig ac;
  ac.lr = tc.lr;
  Adam<float> opt(ps, ac);
  Rng rng(tc.seed);
  std::uniform_int_distribution<std::size_t> pick_t(1, ref.schedule.steps());
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    std::vector<std::size_t> order{0, 1};
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      const auto token = pad_identity(id_enc.extract(data[i].id_image), 512);
      Var<float> total;
      for (View v : kAllViews) {
        const auto& x0 = data[i].targets.at(v);
        const std::size_t t = pick_t(rng);
        const auto eps = randn<float>(x0.shape(), rng);
        auto ctx = ref.text.encode(customize_prompt(v, data[i].caption), token).embeddings;
        auto l = diffusion_loss<float>(ref.unet, x0, {ctx, {}}, t, eps, ref.schedule);
        total = total.defined() ? add(total, l) : l;
      }
      scale(scale(total, 0.25f), 1.0f).backward();
      opt.step();
    }
  }
  for (const auto& [name, v] : ps.items()) {
    const auto& trained = name.rfind("unet.", 0) == 0 ? model.unet.parameters().get(name.substr(5))
                                                      : model.text.parameters().get(name.substr(5));
    ASSERT_EQ(trained.value(), v.value()) << name;
  }
}

TEST(TrainSynthesis, PoseTermChangesTheUpdate) {
  const auto data = toy_examples(2, 16);
  const auto id_enc = tiny_identity_encoder();
  SynthesisTrainConfig tc;
  tc.epochs = 1;
  tc.lr = 1e-3;
  tc.seed = 11;
  SynthesisModel<float> a(tiny_model(), 7), b(tiny_model(), 7);
  tc.lambda_pose = 0;
  train_synthesis(a, id_enc, data, tc);
  tc.lambda_pose = 0.1;
  const auto hist = train_synthesis(b, id_enc, data, tc);
  EXPECT_NE(a.unet.parameters().hash(), b.unet.parameters().hash());
  EXPECT_GE(hist[0].total, -0.1 * 4);
}

TEST(TrainSynthesis, BitwiseReproducible) {
  const auto data = toy_examples(2, 16);
  const auto id_enc = tiny_identity_encoder();
  SynthesisTrainConfig tc;
  tc.epochs = 5;
  tc.lr = 1e-3;
  tc.seed = 12;
  SynthesisModel<float> a(tiny_model(), 7), b(tiny_model(), 7);
  const auto ha = train_synthesis(a, id_enc, data, tc);
  const auto hb = train_synthesis(b, id_enc, data, tc);
  ASSERT_EQ(ha.size(), 5u);
  for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_EQ(ha[i].total, hb[i].total);
  EXPECT_EQ(a.unet.parameters().hash(), b.unet.parameters().hash());
  EXPECT_EQ(a.text.parameters().snapshot(), b.text.parameters().snapshot());
}

TEST(TrainSynthesis, IncompleteIdentitiesSkipped) {
  auto data = toy_examples(3, 16);
  data[1].targets.erase(View::up);
  const auto id_enc = tiny_identity_encoder();
  SynthesisTrainConfig tc;
  tc.epochs = 1;
  SynthesisModel<float> m(tiny_model(), 7);
  EXPECT_EQ(train_synthesis(m, id_enc, data, tc)[0].skipped, 1u);
  for (auto& ex : data) ex.targets.erase(View::left);
  EXPECT_THROW(train_synthesis(m, id_enc, data, tc), std::invalid_argument);
  tc.lambda_pose = -1;
  EXPECT_THROW(train_synthesis(m, id_enc, toy_examples(1, 16), tc), std::invalid_argument);
}

TEST(TrainSynthesis, PoseLossImprovesOverTraining) {
  const auto data = toy_examples(4, 16);
  const auto id_enc = tiny_identity_encoder();
  SynthesisTrainConfig tc;
  tc.epochs = 50;
  tc.lr = 2e-3;
  tc.seed = 13;
  SynthesisModel<float> m(tiny_model(), 7);
  const auto hist = train_synthesis(m, id_enc, data, tc);
  EXPECT_LT(hist.back().pose, hist.front().pose);
}

TEST(SynthesizeViews, FourLabelledDeterministicImages) {
  const auto data = toy_examples(2, 16);
  const auto id_enc = tiny_identity_encoder();
  SynthesisModel<float> m(tiny_model(), 7);
  const Tensor<float> id_copy = data[0].id_image;
  const auto a = synthesize_views(data[0].id_image, data[0].caption, m, id_enc, 21);
  EXPECT_EQ(data[0].id_image, id_copy);
  ASSERT_EQ(a.images.size(), 4u);
  EXPECT_EQ(a.views, std::vector<View>(kAllViews.begin(), kAllViews.end()));
  for (const auto& im : a.images) {
    EXPECT_EQ(im.shape(), (Shape{3, 16, 16}));
    for (float v : im.values()) EXPECT_TRUE(v >= -1 && v <= 1);
  }
  const auto b = synthesize_views(data[0].id_image, data[0].caption, m, id_enc, 21);
  EXPECT_EQ(a.images, b.images);
  const auto other = synthesize_views(data[1].id_image, data[0].caption, m, id_enc, 21);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_GT(max_abs_diff(a.images[i], other.images[i]), 0.0f);
  EXPECT_THROW(synthesize_views(data[0].id_image, Caption{}, m, id_enc, 21), std::invalid_argument);
}
