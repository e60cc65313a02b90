#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "spnas/error.hpp"
#include "spnas/search.hpp"
#include "spnas/train.hpp"
#include "test_util.hpp"

using namespace spnas;

namespace {

SearchSpaceConfig tiny_space() {
  SearchSpaceConfig c;
  c.image_size = 8;
  c.in_channels = 1;
  c.classes = 4;
  c.stem_channels = 8;
  c.stem_stride = 1;
  c.head_channels = 16;
  c.layers = {{8, 1}, {16, 2}, {16, 1}};
  return c;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.space = tiny_space();
  c.data.classes = 4;
  c.data.image_size = 8;
  c.data.n = 120;
  c.search.batch = 32;
  c.search.epochs = 2;
  c.search.proxy_epochs = 0;
  c.train.batch = 32;
  c.train.epochs = 1;
  return c;
}

struct Fixture {
  ExperimentConfig cfg = tiny_config();
  Dataset data = make_dataset(cfg.data, 0);
  LatencyTable lut = make_lut(cfg, 0);
};

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("spnas_search_" + name)).string();
}

Architecture minimal_decode(const SearchSpaceConfig& space) {
  Architecture a;
  for (const auto& s : space.layer_specs()) a.push_back(s.skippable() ? MBConvType::skip_op() : MBConvType::min_type());
  return a;
}

}  // namespace

TEST(Config, RoundTripsThroughJson) {
  ExperimentConfig c = tiny_config();
  c.search.variant = Variant::single_softmax;
  c.search.lambda = 0.25;
  c.search.runtime_form = RuntimeForm::ratio;
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  nlohmann::json j = to_json(tiny_config());
  j["search"]["lamda"] = 1.0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["search"]["lambda"] = -1.0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["search"]["epochs"] = 0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["extra"] = {};
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(tiny_config());
  j["search"]["variant"] = "nope";
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, ArchitectureJsonRoundTrip) {
  const Architecture a{MBConvType::skip_op(), {5, 6, 0.25, false}, {3, 3, 0.0, false}};
  EXPECT_EQ(architecture_from_json(architecture_to_json(a)), a);
  EXPECT_EQ(architecture_from_json(nlohmann::json::parse(R"(["skip", "MBConv-5x5-6-0.25"])")),
            (Architecture{MBConvType::skip_op(), {5, 6, 0.25, false}}));
}

TEST(Loss, Examples) {
  EXPECT_EQ(search_loss(0.7, 3.0, 0.0), 0.7);
  EXPECT_NEAR(search_loss(1.0, std::numbers::e, 2.0), 3.0, 1e-15);
  EXPECT_THROW(search_loss(1.0, 0.0, 1.0), NumericError);
  EXPECT_THROW(search_loss(1.0, -1.0, 0.0), NumericError);
  Graph g;
  EXPECT_THROW(search_loss(g.scalar(1.0), g.scalar(0.0), 1.0), NumericError);
}

// d loss / d t = d CE / d t + lambda * (d R / d t) / R, checked against central
// differences of the full loss.
TEST(Loss, ThresholdGradientMatchesFiniteDifferences) {
  Fixture f;
  const double lambda = 0.7;
  SinglePathModel model(f.cfg.space, IndicatorMode::sigmoid, 5.0, 3);
  std::vector<int> idx(f.data.train.begin(), f.data.train.begin() + 16);
  const Tensor x = f.data.batch_images(idx);
  const auto labels = f.data.batch_labels(idx);
  ForwardContext ctx;
  ctx.lut = &f.lut;

  enum class Part { loss, ce, runtime };
  auto run = [&](Part part) {
    Graph g;
    ModelOutput out = model.forward(g, g.constant(x), ctx);
    Var ce = cross_entropy(out.logits, labels);
    Var root = part == Part::loss ? search_loss(ce, out.runtime_ms, lambda) : part == Part::ce ? ce : out.runtime_ms;
    for (Parameter* p : model.arch_params()) p->zero_grad();
    g.backward(root);
    return std::make_pair(root.item(), out.runtime_ms.item());
  };
  std::vector<Parameter*> ts = model.arch_params();
  // Nudge thresholds off the initial ties so every gate is in the sigmoid's
  // sensitive range but not exactly symmetric.
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i]->value[0] += 0.01 * (static_cast<double>(i % 3) - 1.0);

  for (std::size_t i = 0; i < ts.size(); ++i) {
    Parameter* t = ts[i];
    run(Part::loss);
    const double g_loss = t->grad[0];
    run(Part::ce);
    const double g_ce = t->grad[0];
    const auto [r, r0] = run(Part::runtime);
    const double g_r = t->grad[0];
    EXPECT_NEAR(g_loss, g_ce + lambda * g_r / r, 1e-10 * (1.0 + std::abs(g_loss)));

    const double h = 1e-6, base = t->value[0];
    t->value[0] = base + h;
    const double up = run(Part::loss).first;
    t->value[0] = base - h;
    const double down = run(Part::loss).first;
    t->value[0] = base;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(g_loss, fd, 1e-4 * std::max(1e-3, std::abs(fd))) << t->name;
  }
}

TEST(Search, ZeroStepsDecodesMinimalTypes) {
  Fixture f;
  f.cfg.search.steps = 0;
  const SearchReport r = search(f.cfg, f.data, f.lut);
  EXPECT_EQ(r.architecture, minimal_decode(f.cfg.space));
  EXPECT_TRUE(r.log.empty());
  EXPECT_DOUBLE_EQ(r.runtime_ms, network_runtime(r.architecture, f.lut));
}

TEST(Search, HugeLambdaSkipsEverySkippableLayer) {
  Fixture f;
  f.cfg.search.lambda = 1e3;
  for (Variant v : {Variant::single_sigmoid, Variant::single_ste}) {
    f.cfg.search.variant = v;
    EXPECT_EQ(search(f.cfg, f.data, f.lut).architecture, minimal_decode(f.cfg.space)) << variant_name(v);
  }
}

TEST(Search, SameSeedGivesIdenticalReport) {
  Fixture f;
  f.cfg.search.lambda = 0.3;
  const SearchReport a = search(f.cfg, f.data, f.lut), b = search(f.cfg, f.data, f.lut);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].ce, b.log[i].ce);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.log_csv(), b.log_csv());
}

TEST(Search, LoggedLossIdentityAndStepAudit) {
  Fixture f;
  for (double lambda : {0.0, 0.5, 4.0}) {
    f.cfg.search.lambda = lambda;
    const SearchReport r = search(f.cfg, f.data, f.lut);
    const std::size_t batches = batches_per_epoch(f.data.train.size(), f.cfg.search.batch) * f.cfg.search.epochs;
    ASSERT_EQ(r.log.size(), batches);
    for (const auto& s : r.log) EXPECT_LT(std::abs(s.loss - (s.ce + lambda * std::log(s.runtime_ms))), 1e-12);
    // One optimizer step per batch, and it always updates weights and
    // thresholds together.
    EXPECT_EQ(r.optimizer_steps, batches);
    EXPECT_EQ(r.weight_steps, batches);
    EXPECT_EQ(r.arch_steps, batches);
    EXPECT_EQ(r.frozen_grad_violations, 0u);
  }
}

TEST(Search, DropoutFollowsSchedule) {
  Fixture f;
  const SearchReport r = search(f.cfg, f.data, f.lut);
  for (const auto& s : r.log) EXPECT_EQ(s.dropout_p, f.cfg.search.dropout.at(s.step, r.log.size()));
  EXPECT_GT(r.log.front().dropout_p, 0.0);
  EXPECT_EQ(r.log.back().dropout_p, 0.0);
}

TEST(Search, RuntimeTermPressure) {
  Fixture f;
  f.cfg.search.epochs = 3;
  for (std::uint64_t seed : {0u, 1u}) {
    f.cfg.search.seed = seed;
    f.cfg.search.lambda = 0.0;
    const double r0 = search(f.cfg, f.data, f.lut).runtime_ms;
    f.cfg.search.lambda = 10.0;
    const double r10 = search(f.cfg, f.data, f.lut).runtime_ms;
    EXPECT_LE(r10, r0);
  }
}

TEST(Search, DivergenceNamesLastGoodCheckpoint) {
  Fixture f;
  f.cfg.search.lr = 1e12;
  f.cfg.search.epochs = 20;
  try {
    search(f.cfg, f.data, f.lut);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("last good checkpoint: none"), std::string::npos) << e.what();
  }

  // Full-batch steps with a learning rate that ramps up: the first epochs
  // survive and leave a checkpoint behind.
  const std::string path = temp_path("diverge.ckpt");
  std::filesystem::remove(path);
  f.cfg.search.checkpoint = path;
  f.cfg.search.batch = 1000;
  f.cfg.search.epochs = 400;
  f.cfg.search.warmup_fraction = 1.0;
  f.cfg.search.lr = 1e6;
  try {
    search(f.cfg, f.data, f.lut);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("last good checkpoint: " + path), std::string::npos) << e.what();
    const Checkpoint ck = load_checkpoint(path);
    EXPECT_GE(ck.meta.at("step").get<int>(), 1);
  }
}

TEST(Checkpoint, RoundTripRestoresEveryArray) {
  Fixture f;
  const std::string path = temp_path("rt.ckpt");
  f.cfg.search.checkpoint = path;
  f.cfg.search.lambda = 0.2;
  const SearchReport r = search(f.cfg, f.data, f.lut);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(decode_checkpoint(ck), r.architecture);

  SinglePathModel fresh(f.cfg.space, IndicatorMode::sigmoid, 5.0, 12345);
  restore_model(fresh, ck);
  const auto state = fresh.state();
  ASSERT_EQ(state.size(), ck.arrays.size());
  for (std::size_t i = 0; i < state.size(); ++i) {
    EXPECT_EQ(state[i].first, ck.arrays[i].name);
    EXPECT_TRUE(testutil::bitwise_equal(*state[i].second, ck.arrays[i].value));
  }
  EXPECT_EQ(fresh.decode(), r.architecture);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  Checkpoint ck;
  ck.meta = {{"k", 1}};
  ck.arrays.push_back({"a", testutil::random_tensor({2, 3}, 0)});
  const std::string path = temp_path("corrupt.ckpt");
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_TRUE(testutil::bitwise_equal(*back.find("a"), ck.arrays[0].value));
  EXPECT_EQ(back.meta, ck.meta);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "X" << bytes.substr(1);
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

// One-hot softmax logits reduce the softmax variant to the hard single-path
// forward of the selected type.
TEST(Softmax, OneHotLogitsEqualHardSinglePathForward) {
  const SearchSpaceConfig space = tiny_space();
  const Tensor x = testutil::random_tensor({3, 1, 8, 8}, 5, 0.0, 1.0);
  std::mt19937_64 rng(0);
  for (int trial = 0; trial < 12; ++trial) {
    Architecture arch;
    for (const auto& s : space.layer_specs()) {
      const auto c = MBConvType::candidates(s.skippable());
      arch.push_back(c[rng() % c.size()]);
    }
    SoftmaxModel soft(space, 9);
    for (std::size_t i = 0; i < arch.size(); ++i) {
      auto& l = soft.logits[i];
      const MBConvType& t = arch[i];
      auto one_hot = [](Parameter& p, int idx) {
        p.value.fill(-1e3);
        p.value[idx] = 1e3;
      };
      one_hot(l.kernel, t.kernel == 5 ? 1 : 0);
      one_hot(l.se, se_index(t.se));
      if (l.skippable) one_hot(l.expansion, t.skip ? 0 : (t.expansion == 6 ? 2 : 1));
      else one_hot(l.expansion, t.expansion == 6 ? 1 : 0);
    }
    EXPECT_EQ(soft.decode(), arch);
    Supernet hard(space, 9);
    hard.force(arch);
    Graph g1, g2;
    ForwardContext ctx;
    const Tensor a = soft.forward(g1, g1.constant(x), ctx).logits.value();
    const Tensor b = hard.forward(g2, g2.constant(x), IndicatorMode::hard, 5.0, true).logits.value();
    EXPECT_LT(max_abs_diff(a, b), 1e-12) << architecture_str(arch);
  }
}

// Without SE the runtime is multilinear in the gates, so evaluating it at the
// expected gates gives the expected LUT runtime under the factorized type
// distribution. (The SE factor multiplies k/e terms by themselves, so with SE
// mass the identity no longer holds.)
TEST(Softmax, RuntimeIsExpectationOverTypesWithoutSe) {
  const SearchSpaceConfig space = tiny_space();
  ExperimentConfig cfg = tiny_config();
  const LatencyTable lut = make_lut(cfg, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SoftmaxModel m(space, 0);
    for (Parameter* p : m.arch_params()) p->value = testutil::random_tensor(p->value.shape(), seed * 31 + p->numel(), -2, 2);
    for (auto& l : m.logits) {
      l.se.value.fill(-1e3);
      l.se.value[se_index(0.0)] = 1e3;
    }
    double expected = lut.fixed_overhead_ms;
    const TypeDistribution d = m.distribution();
    for (std::size_t i = 0; i < d.size(); ++i) {
      double total = 0.0;
      for (const auto& [t, p] : d[i]) {
        expected += p * lut.lookup(static_cast<int>(i), t);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    Graph g;
    ForwardContext ctx;
    ctx.lut = &lut;
    const double r = m.forward(g, g.constant(Tensor({2, 1, 8, 8}, 0.5)), ctx).runtime_ms.item();
    EXPECT_NEAR(r, expected, 1e-12 * expected);
  }
}

TEST(Softmax, DecodeIgnoresConstantShiftPerGroup) {
  const SearchSpaceConfig space = tiny_space();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SoftmaxModel m(space, 0);
    for (Parameter* p : m.arch_params()) p->value = testutil::random_tensor(p->value.shape(), seed * 7 + p->numel());
    const Architecture before = m.decode();
    std::mt19937_64 rng(seed);
    for (Parameter* p : m.arch_params()) {
      const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
      for (double& v : p->value.vec()) v += c;
    }
    EXPECT_EQ(m.decode(), before);
  }
  SoftmaxModel uniform(space, 0);
  EXPECT_EQ(uniform.decode(), minimal_decode(space));
}

TEST(MultiPath, IdenticalPathsMakeOutputInvariantToWeights) {
  const LayerSpec spec{8, 8, 1, 6};
  const MBConvType t{5, 3, 0.25, false};
  MultiPathLayer layer("dup", spec, {t, t}, 4);
  const Tensor x = testutil::random_tensor({2, 8, 6, 6}, 1);
  Tensor first;
  for (double a : {0.0, 3.0, -7.0, 0.4}) {
    layer.logits.value[0] = a;
    Graph g;
    const Tensor y = layer.forward(g, g.constant(x), layer.path_weights(g), true).value();
    if (first.empty()) first = y;
    EXPECT_LT(max_abs_diff(y, first), 1e-12);
  }
}

TEST(MultiPath, PathWeightsSumToOne) {
  MultiPathModel m(tiny_space(), 0);
  for (Parameter* p : m.arch_params()) p->value = testutil::random_tensor(p->value.shape(), p->numel());
  for (auto& l : m.layers) {
    Graph g;
    const Tensor w = l.path_weights(g).value();
    double s = 0.0;
    for (double v : w.vec()) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Bilevel, PhasesAlternateAndFrozenGroupsGetNoGradient) {
  Fixture f;
  f.cfg.search.epochs = 1;
  for (Variant v : {Variant::single_softmax, Variant::multi_path_softmax}) {
    f.cfg.search.variant = v;
    f.cfg.search.lambda = 0.5;
    const SearchReport r = search_bilevel(f.cfg, f.data, f.lut);
    EXPECT_GT(r.weight_steps, 0u);
    EXPECT_EQ(r.weight_steps, r.arch_steps);
    EXPECT_EQ(r.optimizer_steps, r.weight_steps + r.arch_steps);
    EXPECT_EQ(r.frozen_grad_violations, 0u);
    EXPECT_EQ(r.log.size(), 2 * r.weight_steps);
    for (const auto& s : r.log) EXPECT_LT(std::abs(s.loss - (s.ce + 0.5 * std::log(s.runtime_ms))), 1e-12);
    EXPECT_EQ(r.architecture.size(), f.cfg.space.layers.size());
    EXPECT_FALSE(r.distribution.empty());
  }
}

// Independent check of the freezing mechanism the bilevel loop relies on.
TEST(Bilevel, FrozenParametersAccumulateNothing) {
  SoftmaxModel m(tiny_space(), 0);
  for (Parameter* p : m.arch_params()) p->requires_grad = false;
  Graph g;
  ForwardContext ctx;
  Var ce = cross_entropy(m.forward(g, g.constant(Tensor({2, 1, 8, 8}, 0.3)), ctx).logits, std::vector<int>{0, 1});
  for (Parameter* p : m.arch_params()) p->zero_grad();
  g.backward(ce);
  for (Parameter* p : m.arch_params())
    for (double v : p->grad.vec()) EXPECT_EQ(v, 0.0);
  bool weight_grad = false;
  for (Parameter* p : m.weight_params())
    for (double v : p->grad.vec()) weight_grad |= v != 0.0;
  EXPECT_TRUE(weight_grad);
}

TEST(Bilevel, SameSeedIsDeterministic) {
  Fixture f;
  f.cfg.search.epochs = 1;
  f.cfg.search.variant = Variant::single_softmax;
  f.cfg.search.gumbel_temperature = 1.0;
  EXPECT_EQ(search_bilevel(f.cfg, f.data, f.lut).to_json().dump(), search_bilevel(f.cfg, f.data, f.lut).to_json().dump());
}

TEST(Bilevel, RejectsSinglePathVariants) {
  Fixture f;
  EXPECT_THROW(search_bilevel(f.cfg, f.data, f.lut), ConfigError);
  f.cfg.search.variant = Variant::single_softmax;
  EXPECT_THROW(search(f.cfg, f.data, f.lut), ConfigError);
  f.cfg.search.variant = Variant::random;
  EXPECT_THROW(run_search(f.cfg, f.data, f.lut), ConfigError);
}

TEST(TrainFixed, ZeroEpochsIsChance) {
  const Dataset d = synth_classification(4, 1000, 8, 0);
  TrainConfig t;
  t.epochs = 0;
  const double acc = train_fixed(tiny_space(), minimal_decode(tiny_space()), d, t, 0).accuracy;
  // 200 validation samples: binomial sd of ~0.031 around 0.25.
  EXPECT_NEAR(acc, 0.25, 0.125);
}

TEST(TrainFixed, SameSeedSameAccuracy) {
  const Dataset d = synth_classification(4, 200, 8, 0);
  TrainConfig t;
  t.epochs = 2;
  t.batch = 32;
  const Architecture arch{{5, 6, 0.5, false}, {3, 3, 0.25, false}, MBConvType::skip_op()};
  const TrainResult a = train_fixed(tiny_space(), arch, d, t, 3), b = train_fixed(tiny_space(), arch, d, t, 3);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.final_ce, b.final_ce);
}

// An all-skip network is the stem followed by the head; training those two
// pieces by hand must give the same accuracy.
TEST(TrainFixed, AllSkipEqualsStemPlusHeadModel) {
  SearchSpaceConfig space = tiny_space();
  space.layers = {{8, 1}, {8, 1}};
  const Dataset d = synth_classification(4, 160, 8, 2);
  TrainConfig t;
  t.epochs = 3;
  t.batch = 32;
  const double via_train_fixed =
      train_fixed(space, Architecture(2, MBConvType::skip_op()), d, t, 4).accuracy;

  Stem stem(space, 4);
  Head head(space, 4);
  ParamList params;
  stem.collect(params);
  head.collect(params);
  Sgd opt(t.momentum);
  opt.add_group({params, 1.0, t.weight_decay});
  BatchStream stream(d.train, t.batch, 4);
  const std::size_t total = t.epochs * stream.batches_per_epoch();
  const auto warmup = static_cast<std::size_t>(t.warmup_fraction * static_cast<double>(total));
  for (std::size_t step = 0; step < total; ++step) {
    const auto idx = stream.next();
    Graph g;
    Var logits = head.forward(g, stem.forward(g, g.constant(d.batch_images(idx)), true), true);
    Var ce = cross_entropy(logits, d.batch_labels(idx));
    opt.zero_grad();
    g.backward(ce);
    opt.step(warmup_cosine_lr(t.lr, step, total, warmup));
  }
  std::size_t correct = 0;
  for (int i : d.valid) {
    Graph g;
    const std::vector<int> one{i};
    const Tensor l = head.forward(g, stem.forward(g, g.constant(d.batch_images(one)), false), false).value();
    int best = 0;
    for (int c = 1; c < 4; ++c)
      if (l[c] > l[best]) best = c;
    correct += best == d.labels[i];
  }
  EXPECT_NEAR(via_train_fixed, static_cast<double>(correct) / d.valid.size(), 1e-12);
}

TEST(TrainFixed, BatchStreamCoversEveryIndexOncePerEpoch) {
  for (int n : {2, 5, 33, 64, 65, 100}) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = 100 + i;
    BatchStream s(idx, 32, 1);
    for (int epoch = 0; epoch < 2; ++epoch) {
      std::vector<int> seen;
      for (std::size_t b = 0; b < s.batches_per_epoch(); ++b) {
        const auto batch = s.next();
        EXPECT_GE(batch.size(), 2u);
        seen.insert(seen.end(), batch.begin(), batch.end());
      }
      std::sort(seen.begin(), seen.end());
      EXPECT_EQ(seen, idx);
    }
  }
}
