#include <limits>

#include "support.hpp"

namespace im2sp {
namespace {

using testing::tiny_config;

std::vector<sequence_example> random_corpus(const model_config &c, std::size_t n, std::uint64_t seed) {
  rng gen(seed);
  std::vector<sequence_example> out(n);
  for (auto &ex : out) {
    ex.image_tokens.resize(c.max_image_tokens());
    for (auto &t : ex.image_tokens)
      t = static_cast<unit_id>(gen.below(c.image_vocab));
    ex.target.resize(gen.between(1, c.max_unit_len));
    for (auto &t : ex.target)
      t = static_cast<unit_id>(gen.below(c.base_vocab()));
  }
  return out;
}

bool same_params(const model_params &a, const model_params &b) {
  std::vector<const tensor *> ta;
  for_each_tensor(a, [&](const std::string &, const tensor &t) { ta.push_back(&t); });
  std::size_t i = 0;
  bool same = true;
  for_each_tensor(b, [&](const std::string &, const tensor &t) { same = same && t == *ta[i++]; });
  return same;
}

TEST(LearningRate, LinearWarmupThenConstant) {
  train_hyper h;
  h.lr = 2e-3;
  h.warmup_steps = 100;
  EXPECT_DOUBLE_EQ(learning_rate(h, 1), 2e-5);
  EXPECT_DOUBLE_EQ(learning_rate(h, 50), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(h, 100), 2e-3);
  EXPECT_DOUBLE_EQ(learning_rate(h, 5000), 2e-3);
  h.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(learning_rate(h, 1), 2e-3);
}

TEST(TrainHyper, KeyValueRoundTrip) {
  train_hyper h;
  h.lr = 3e-4;
  h.steps = 77;
  h.seed = 12;
  h.clip_norm = 0.0;
  const auto back = train_hyper::from_kv(kv_config::parse(h.to_kv().to_string()));
  EXPECT_EQ(back.lr, h.lr);
  EXPECT_EQ(back.steps, 77u);
  EXPECT_EQ(back.seed, 12u);
  EXPECT_EQ(back.clip_norm, 0.0);
}

TEST(Train, LossDecreasesOnToyCorpus) {
  const auto c = tiny_config();
  const auto corpus = random_corpus(c, 16, 1);
  train_hyper h;
  h.steps = 200;
  h.batch_size = 4;
  h.warmup_steps = 10;
  h.lr = 3e-3;
  const auto r = train(init_random(c, 1), corpus, h);
  ASSERT_EQ(r.loss_trace.size(), 200u);
  double before = 0, after = 0;
  for (const auto &ex : corpus) {
    before += forward_loss(init_random(c, 1), ex.image_tokens, ex.target).loss;
    after += forward_loss(r.params, ex.image_tokens, ex.target).loss;
  }
  EXPECT_LT(after, before);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
}

TEST(Train, ZeroLearningRateLeavesParams) {
  const auto c = tiny_config();
  const auto p = init_random(c, 2);
  train_hyper h;
  h.steps = 5;
  h.lr = 0.0;
  EXPECT_TRUE(same_params(train(p, random_corpus(c, 4, 2), h).params, p));
}

TEST(Train, DeterministicGivenSeed) {
  const auto c = tiny_config();
  const auto corpus = random_corpus(c, 10, 3);
  train_hyper h;
  h.steps = 20;
  h.batch_size = 3;
  const auto a = train(init_random(c, 1), corpus, h), b = train(init_random(c, 1), corpus, h);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_TRUE(same_params(a.params, b.params));
  h.seed = 1;
  EXPECT_NE(train(init_random(c, 1), corpus, h).loss_trace, a.loss_trace);
}

TEST(Train, FrozenTensorsUnchanged) {
  const auto text = init_random(tiny_config(output_kind::text), 4);
  const auto p = init_transfer(text, tiny_config());
  train_hyper h;
  h.steps = 10;
  h.batch_size = 2;
  h.warmup_steps = 1;
  const auto r = train(p, random_corpus(p.config, 6, 4), h);
  EXPECT_EQ(r.params.image_embed, p.image_embed);
  EXPECT_EQ(r.params.image_row_pos, p.image_row_pos);
  EXPECT_EQ(r.params.image_col_pos, p.image_col_pos);
  EXPECT_NE(r.params.blocks[0].w_qkv, p.blocks[0].w_qkv);
  EXPECT_NE(r.params.token_embed, p.token_embed);
  EXPECT_EQ(r.params.frozen, p.frozen);
}

TEST(Train, CallbackCanStopEarly) {
  const auto c = tiny_config();
  train_hyper h;
  h.steps = 50;
  std::size_t calls = 0;
  const auto r = train(init_random(c, 1), random_corpus(c, 4, 5), h, [&](std::size_t step, double) {
    ++calls;
    return step < 7;
  });
  EXPECT_EQ(calls, 7u);
  EXPECT_EQ(r.loss_trace.size(), 7u);
}

TEST(Train, NonFiniteLossIsReported) {
  const auto c = tiny_config();
  auto p = init_random(c, 1);
  p.w_out(0, 0) = std::numeric_limits<double>::quiet_NaN();
  train_hyper h;
  h.steps = 3;
  EXPECT_THROW(train(p, random_corpus(c, 2, 6), h), numeric_error);
}

TEST(Train, RejectsBadInput) {
  const auto c = tiny_config();
  train_hyper h;
  EXPECT_THROW(train(init_random(c, 1), {}, h), invalid_argument);
  h.batch_size = 0;
  EXPECT_THROW(train(init_random(c, 1), random_corpus(c, 2, 1), h), invalid_argument);
}

TEST(PretrainText, OverfitsSixteenPairs) {
  gen_options opt;
  opt.n_items = 16;
  const auto corpus = gen_corpus(opt);
  std::vector<image> pictures;
  for (const auto &item : corpus.items)
    pictures.push_back(item.picture);
  const auto icb = fit_image_codebook(pictures, 64, 4, 0);
  std::vector<sequence_example> text;
  for (const auto &item : corpus.items)
    text.push_back({encode_image(item.picture, icb.centroids, 4).units.tokens(), item.words});
  model_config c;
  c.output = output_kind::text;
  train_hyper h;
  h.steps = 400;
  const auto r = pretrain_text(init_random(c, 0), text, h);
  EXPECT_GE(teacher_forced_accuracy(r.params, text), 0.95);
  EXPECT_THROW(pretrain_text(init_random(model_config{}, 0), text, h), invalid_argument);
}

TEST(TeacherForcedAccuracy, CountsArgmaxMatches) {
  auto c = tiny_config();
  auto p = init_random(c, 1);
  p.w_out.setZero();
  p.b_out.setZero();
  p.b_out(0, 2) = 5.0; // always predicts unit 2
  const std::vector<sequence_example> data{{{0, 1}, {2, 2, 1}}, {{3}, {}}};
  // positions: 2 2 1 EOS | EOS -> two correct of five
  EXPECT_DOUBLE_EQ(teacher_forced_accuracy(p, data), 2.0 / 5.0);
}

TEST(StepsToThreshold, TrailingMeanCrossing) {
  std::vector<double> trace(30, 1.0);
  for (std::size_t i = 15; i < 30; ++i)
    trace[i] = 0.1;
  // step 20 averages five 1.0s and five 0.1s (0.55); step 21 gives 0.46
  EXPECT_EQ(steps_to_threshold(trace, 0.5), 21u);
  EXPECT_EQ(steps_to_threshold(trace, 0.5, 1), 16u);
  EXPECT_FALSE(steps_to_threshold(trace, 0.05));
  EXPECT_FALSE(steps_to_threshold(std::vector<double>(5, 0.0), 0.5));
}

} // namespace
} // namespace im2sp
