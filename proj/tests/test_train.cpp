#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace qkvae;
using qkvae::testing::scratch_dir;

namespace {

std::string usage_error(const std::string& text) {
  try {
    parse_train_config(text);
  } catch (const UsageError& e) {
    return e.what();
  }
  return "";
}

std::vector<TokenSeq> toy_corpus(std::size_t n, std::size_t vocab, std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(kReservedTokens, static_cast<int>(vocab) - 1);
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::vector<TokenSeq> out(n);
  for (auto& s : out) {
    s.resize(len(rng));
    for (int& t : s) t = tok(rng);
  }
  return out;
}

TrainConfig toy_config() {
  TrainConfig c = tiny_config(8);
  c.batch_size = 4;
  c.steps = 30;
  c.checkpoint_every = 5;
  c.seed = 5;
  return c;
}

std::vector<std::string> run_metrics(Trainer& t, std::int64_t until) {
  std::vector<std::string> lines;
  t.run(until, [&](const StepMetrics& m) {
    StepMetrics copy = m;
    copy.wall_ms = 0;
    lines.push_back(format_metrics(copy));
  });
  return lines;
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndWhitespace) {
  const auto c = parse_train_config(
      "# desk run\nmode = advae\n d_model=32 \nheads=2\nlatents=4\nd_sem=16  # trailing comment\n"
      "lr=2e-3\noptimizer=sgd\nsteps=100\nsem_anneal_start=1\nsem_anneal_end=2\nsyn_anneal_start=3\n"
      "syn_anneal_end=4\nseed=9\n\n");
  EXPECT_EQ(c.model.mode, ModelMode::kAdvae);
  EXPECT_EQ(c.model.d_model, 32u);
  EXPECT_EQ(c.model.d_sem, 16u);
  EXPECT_EQ(c.lr, 2e-3);
  EXPECT_EQ(c.optimizer, OptimizerKind::kSgd);
  EXPECT_EQ(c.steps, 100);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.syn_anneal_end, 4);
}

TEST(Config, ErrorsNameTheLineAndKey) {
  EXPECT_NE(usage_error("lr=1e-3\nbogus=1\n").find("line 2"), std::string::npos);
  EXPECT_NE(usage_error("bogus=1\n").find("bogus"), std::string::npos);
  EXPECT_NE(usage_error("d_model\n").find("key=value"), std::string::npos);
  EXPECT_NE(usage_error("lr=fast\n").find("'lr'"), std::string::npos);
  EXPECT_NE(usage_error("lr=1e-3x\n").find("'lr'"), std::string::npos);
  EXPECT_NE(usage_error("heads=-2\n").find("non-negative integer"), std::string::npos);
  EXPECT_NE(usage_error("heads=2.5\n").find("non-negative integer"), std::string::npos);
  EXPECT_FALSE(usage_error("mode=lstm\n").empty());
  EXPECT_FALSE(usage_error("sem_anneal_end=8000\n").empty());
  EXPECT_FALSE(usage_error("lr=0\n").empty());
  EXPECT_FALSE(usage_error("lambda_fb=-1\n").empty());
  EXPECT_THROW(load_train_config("/nonexistent/x.cfg"), DataError);
}

TEST(Config, EntriesRoundTrip) {
  TrainConfig c = toy_config();
  c.lr = 3.5e-4;
  c.model.mode = ModelMode::kAdvae;
  const TrainConfig d = TrainConfig::from_entries(c.entries());
  EXPECT_EQ(d.entries(), c.entries());
}

TEST(Objective, BetaZeroLossIsNll) {
  const TrainConfig cfg = toy_config();
  const QkvaeModel<double> m(cfg.model, 1);
  const auto batch = make_batch(toy_corpus(3, 12, 6, 2), 6);
  Rng noise(3);
  const auto terms = elbo_loss(m, batch, 0, cfg, noise);
  EXPECT_EQ(terms.beta_sem, 0.0);
  EXPECT_EQ(terms.beta_syn, 0.0);
  EXPECT_EQ(terms.loss.item(), terms.nll);
  EXPECT_GT(terms.kl_sem, 0.0);
}

TEST(Objective, MatchesClosedFormForGivenPosteriors) {
  const TrainConfig cfg = toy_config();
  const QkvaeModel<double> m(cfg.model, 1);
  const auto batch = make_batch(toy_corpus(2, 12, 6, 4), 6);
  std::mt19937_64 rng(5);
  Posteriors<double> post;
  post.sem = {Tensor<double>::randn({2, 2, 2}, rng), positive_std(Tensor<double>::randn({2, 2, 2}, rng))};
  post.syn = GaussianPosterior<double>{Tensor<double>::randn({2, 4}, rng, 0.05),
                                       Tensor<double>::full({2, 4}, 1.0)};
  const std::int64_t step = 12;  // beta_sem at its final value, beta_syn mid-anneal
  Rng noise(6);
  const auto terms = elbo_from_posteriors(m, batch, post, step, cfg, noise);
  auto kl_dims = [](const GaussianPosterior<double>& p, std::size_t per_row) {
    std::vector<double> out(per_row, 0.0);
    const auto mu = p.mean.data(), sd = p.std.data();
    const std::size_t rows = mu.size() / per_row;
    for (std::size_t i = 0; i < mu.size(); ++i)
      out[i % per_row] += 0.5 * (mu[i] * mu[i] + sd[i] * sd[i] - 1.0 - 2.0 * std::log(sd[i])) / double(rows);
    return out;
  };
  auto fb = [&](const std::vector<double>& d) {
    double s = 0;
    for (double v : d) s += std::max(v, cfg.lambda_fb);
    return s;
  };
  const double tokens = double(batch.target_tokens()) / 2.0;
  const double bs = beta_at(step, cfg.sem_schedule()), by = beta_at(step, cfg.syn_schedule());
  EXPECT_EQ(bs, 0.6);
  EXPECT_GT(by, 0.0);
  const auto ks = kl_dims(post.sem, 4), ky = kl_dims(*post.syn, 4);
  const double want = terms.nll + (bs * fb(ks) + by * fb(ky)) / tokens;
  EXPECT_NEAR(terms.loss.item(), want, 1e-12);
  double raw = 0;
  for (double v : ks) raw += v;
  EXPECT_NEAR(terms.kl_sem, raw, 1e-12);
}

TEST(Objective, PosteriorEqualToPriorCostsOnlyTheFreeBits) {
  TrainConfig cfg = toy_config();
  const QkvaeModel<double> m(cfg.model, 1);
  const auto batch = make_batch(toy_corpus(2, 12, 6, 7), 6);
  Posteriors<double> post;
  post.sem = {Tensor<double>::zeros({2, 2, 2}), Tensor<double>::full({2, 2, 2}, 1.0)};
  post.syn = GaussianPosterior<double>{Tensor<double>::zeros({2, 4}), Tensor<double>::full({2, 4}, 1.0)};
  const double tokens = double(batch.target_tokens()) / 2.0;
  for (double lambda : {0.0, 0.05}) {
    cfg.lambda_fb = lambda;
    Rng noise(8);
    const auto t = elbo_from_posteriors(m, batch, post, 40, cfg, noise);
    EXPECT_EQ(t.kl_sem, 0.0);
    EXPECT_EQ(t.kl_syn, 0.0);
    EXPECT_NEAR(t.loss.item(), t.nll + (0.6 * 4 * lambda + 0.3 * 4 * lambda) / tokens, 1e-12);
    if (lambda == 0.0) EXPECT_EQ(t.loss.item(), t.nll);
  }
}

TEST(Optimizer, AdamMatchesHandComputedUpdates) {
  Tensor<double> p({2}, {1.0, -2.0}, true);
  std::vector<Tensor<double>> params{p};
  AdamState<double> st;
  const AdamHyper h{0.1, 0.9, 0.999, 1e-8};
  const std::vector<std::array<double, 2>> grads{{0.5, -1.0}, {0.2, 3.0}, {-0.4, 0.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
  for (std::size_t t = 0; t < grads.size(); ++t) {
    p.zero_grad();
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      tape.backward(sum(mul(p, Tensor<double>({2}, {grads[t][0], grads[t][1]}))));
    }
    adam_step(params, st, h);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t][i] * grads[t][i];
      const double mh = m[i] / (1 - std::pow(0.9, t + 1.0)), vh = v[i] / (1 - std::pow(0.999, t + 1.0));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.data()[i], x[i], 1e-12) << "step " << t << " coord " << i;
    }
  }
  EXPECT_EQ(st.t, 3);
  // First step moves each coordinate by ~lr against the gradient sign.
  Tensor<double> q({1}, {0.0}, true);
  std::vector<Tensor<double>> qs{q};
  AdamState<double> s2;
  std::vector<Tensor<double>> wrong{q, p};
  adam_step(qs, s2, h);
  EXPECT_EQ(q.data()[0], 0.0);  // no gradient, no move
  EXPECT_THROW(adam_step(wrong, s2, h), ShapeError);
}

TEST(Optimizer, SgdStepAndSingleStepDescent) {
  const TrainConfig cfg = toy_config();
  const QkvaeModel<double> m(cfg.model, 2);
  const auto batch = make_batch(toy_corpus(4, 12, 6, 9), 6);
  std::vector<Tensor<double>> params;
  for (auto& [n, t] : m.parameters()) params.push_back(t);
  auto loss = [&] {
    Rng noise(10);
    return elbo_loss(m, batch, 12, cfg, noise).loss;
  };
  double before;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto l = loss();
    before = l.item();
    tape.backward(l);
  }
  const double g0 = params[0].grad()[0], x0 = params[0].data()[0];
  sgd_step(params, 1e-3);
  EXPECT_NEAR(params[0].data()[0], x0 - 1e-3 * g0, 1e-15);
  NoGradScope<double> off;
  EXPECT_LT(loss().item(), before);
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  CheckpointData ck;
  ck.config = {{"a", 1.5}, {"b", -2.0}};
  ck.tensors = {{"w", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"s", {1}, {7.25f}}};
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 6), std::string("QKVAE\0", 6));
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config, ck.config);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors[0].shape, (Shape{2, 3}));
  EXPECT_EQ(back.tensors[1].data, std::vector<float>{7.25f});
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  CheckpointData ck;
  ck.config = {{"a", 1.0}};
  ck.tensors = {{"w", {2}, {1, 2}}};
  const std::string bytes = encode_checkpoint(ck);
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) EXPECT_THROW(decode_checkpoint(bytes.substr(0, cut)), DataError);
  auto message = [](const std::string& b) {
    try {
      decode_checkpoint(b);
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("XKVAE" + bytes.substr(5)).find("bad magic"), std::string::npos);
  std::string v2 = bytes;
  v2[6] = 2;
  EXPECT_NE(message(v2).find("version"), std::string::npos);
  EXPECT_NE(message(bytes + "x").find("trailing"), std::string::npos);
  EXPECT_NE(message(bytes.substr(0, bytes.size() - 1)).find("truncated"), std::string::npos);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch_dir("ckpt");
  Trainer t = Trainer::fresh(toy_config(), toy_corpus(10, 12, 6, 11));
  t.run(3, {});
  save_checkpoint(t.state(), dir + "/a.bin");
  save_checkpoint(load_checkpoint(dir + "/a.bin"), dir + "/b.bin");
  EXPECT_EQ(read_file(dir + "/a.bin"), read_file(dir + "/b.bin"));
  EXPECT_FALSE(std::filesystem::exists(dir + "/a.bin.tmp"));
  const auto back = load_checkpoint(dir + "/a.bin");
  EXPECT_EQ(back.step, 3);
  EXPECT_EQ(back.adam.t, 3);
}

TEST(Checkpoint, ShapeMismatchIsReported) {
  Trainer t = Trainer::fresh(toy_config(), toy_corpus(4, 12, 6, 12));
  auto ck = to_checkpoint(t.state());
  ck.tensors[0].shape = {1, 1};
  ck.tensors[0].data = {0.f};
  EXPECT_THROW(from_checkpoint(ck), DataError);
}

TEST(Training, FixedSeedReplaysMetrics) {
  const auto corpus = toy_corpus(10, 12, 6, 13);
  Trainer a = Trainer::fresh(toy_config(), corpus), b = Trainer::fresh(toy_config(), corpus);
  const auto la = run_metrics(a, 25);
  EXPECT_EQ(la, run_metrics(b, 25));
  TrainConfig other = toy_config();
  other.seed = 6;
  Trainer c = Trainer::fresh(other, corpus);
  EXPECT_NE(run_metrics(c, 25), la);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto dir = scratch_dir("resume");
  const auto corpus = toy_corpus(10, 12, 6, 14);
  TrainConfig cfg = toy_config();
  cfg.model.dropout = 0.1;
  Trainer full = Trainer::fresh(cfg, corpus);
  const auto whole = run_metrics(full, 20);

  Trainer first = Trainer::fresh(cfg, corpus);
  auto part = run_metrics(first, 10);
  save_checkpoint(first.state(), dir + "/mid.bin");
  Trainer second(load_checkpoint(dir + "/mid.bin"), corpus);
  const auto rest = run_metrics(second, 20);
  part.insert(part.end(), rest.begin(), rest.end());
  EXPECT_EQ(part, whole);
  save_checkpoint(full.state(), dir + "/full.bin");
  save_checkpoint(second.state(), dir + "/resumed.bin");
  EXPECT_EQ(read_file(dir + "/full.bin"), read_file(dir + "/resumed.bin"));
}

TEST(Training, RunWritesPeriodicCheckpoints) {
  const auto dir = scratch_dir("periodic");
  Trainer t = Trainer::fresh(toy_config(), toy_corpus(10, 12, 6, 15));
  int calls = 0;
  t.run(7, [&](const StepMetrics&) { ++calls; }, dir + "/c.bin");
  EXPECT_EQ(calls, 7);
  EXPECT_EQ(load_checkpoint(dir + "/c.bin").step, 7);
  EXPECT_EQ(t.batches_per_epoch(), 3u);
  EXPECT_EQ(Trainer::fresh(toy_config(), toy_corpus(10, 12, 6, 15)).total_steps(), 30);
}

TEST(Training, EpochsCoverEveryExampleOnce) {
  Trainer t = Trainer::fresh(toy_config(), toy_corpus(10, 12, 6, 16));
  for (std::int64_t epoch = 0; epoch < 3; ++epoch) {
    std::vector<std::size_t> all;
    for (std::int64_t s = 0; s < 3; ++s) {
      const auto idx = t.batch_indices(epoch * 3 + s);
      all.insert(all.end(), idx.begin(), idx.end());
    }
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
  }
}

TEST(Training, RejectsBadCorpora) {
  const TrainConfig cfg = toy_config();
  EXPECT_THROW(Trainer::fresh(cfg, {}), DataError);
  EXPECT_THROW(Trainer::fresh(cfg, {{4, 5}, {}}), DataError);
  EXPECT_THROW(Trainer::fresh(cfg, {TokenSeq(7, 4)}), DataError);
  EXPECT_THROW(Trainer::fresh(cfg, {{4, 99}}), DataError);
}

TEST(Metrics, FormatIsTabSeparated) {
  EXPECT_STREQ(kMetricHeader, "step\tnll\tkl_sem\tkl_syn\tbeta_sem\tbeta_syn\twall_ms");
  EXPECT_EQ(format_metrics({12, 0.5, 1.25, 0, 0.6, 0.3, 2.5}), "12\t0.5\t1.25\t0\t0.6\t0.3\t2.5");
}

TEST(Seeds, MixSeedSeparatesStreams) {
  EXPECT_EQ(mix_seed(1, 2, 3), mix_seed(1, 2, 3));
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 2, 4));
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(2, 2, 3));
}
