#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "test_util.hpp"
#include "udah/errors.hpp"
#include "udah/grad_suite.hpp"
#include "udah/trainer.hpp"

using namespace udah;
using udah::testing::TempDir;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.lr = 0.01;
  c.batch_size = 32;
  c.epochs = 3;
  c.code_length = 16;
  c.pairs_per_node = 4;
  c.encoder_widths = {16, 8};
  c.discriminator_widths = {8};
  c.seed = 5;
  return c;
}

DomainPair small_pair(double shift = 1.0, std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.nodes_per_class = 20;
  spec.attr_dim = 10;
  spec.edge_prob_in = 0.3;
  spec.edge_prob_out = 0.02;
  spec.attr_shift = shift;
  spec.seed = seed;
  return gen_synthetic_pair(spec);
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Mean source cross-entropy of the source discriminator at inference.
double source_ce(const ModelParams& params, const Graph& g) {
  ad::Tape t;
  std::mt19937_64 rng(0);
  auto probs = discriminate(t, params.source_disc, t.constant(embed_graph(params, g)), false, rng);
  return loss::loss_source_ce(probs, g.labels()).value().item();
}

LossTerms constant_terms(ad::Tape& t, double v) {
  auto c = [&] { return t.constant(Tensor::scalar(v)); };
  return {c(), c(), c(), c(), c(), c(), c()};
}

}  // namespace

// ---- configuration ----------------------------------------------------------

TEST(Ablation, ParseAndPrint) {
  EXPECT_EQ(parse_ablation("none"), Ablation{});
  EXPECT_EQ(parse_ablation(""), Ablation{});
  const Ablation a = parse_ablation("no_L3,NoDAH");
  EXPECT_TRUE(a.no_classification);
  EXPECT_TRUE(a.no_adaptation);
  EXPECT_FALSE(a.no_alignment);
  EXPECT_EQ(parse_ablation(ablation_string(a)), a);
  EXPECT_THROW(parse_ablation("no_L9"), ConfigError);
}

TEST(Config, ApplyOverridesAndRejectsUnknownKeys) {
  TrainConfig c;
  c.apply({{"lr", "0.02"}, {"lambda", "3"}, {"encoder_widths", "8,4"}, {"ablation", "no_L4"}, {"epochs", "7"}});
  EXPECT_EQ(c.lr, 0.02);
  EXPECT_EQ(c.margin, 3.0);
  EXPECT_EQ(c.encoder_widths, (std::vector<std::size_t>{8, 4}));
  EXPECT_TRUE(c.ablation.no_alignment);
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_THROW(c.apply({{"learning_rate", "1"}}), ConfigError);
  EXPECT_THROW(c.apply({{"lr", "fast"}}), ConfigError);
  EXPECT_THROW(c.apply({{"epochs", "-1"}}), ConfigError);
  EXPECT_THROW(c.apply({{"binary_similarity", "maybe"}}), ConfigError);
}

TEST(Config, ToStringRoundTrips) {
  TrainConfig c = small_config();
  c.ablation.no_distillation = true;
  c.margin = 2.5;
  std::map<std::string, std::string> kv;
  std::istringstream in(c.to_string());
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    ASSERT_NE(eq, std::string::npos) << line;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  TrainConfig d;
  d.apply(kv);
  EXPECT_EQ(d.to_string(), c.to_string());
}

TEST(Config, ValidateRanges) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate(4));
  c.batch_size = 4;
  EXPECT_THROW(c.validate(4), ConfigError);
  c = TrainConfig{};
  c.threshold = 1.0;
  EXPECT_THROW(c.validate(4), ConfigError);
  c = TrainConfig{};
  c.lr = 0;
  EXPECT_THROW(c.validate(4), ConfigError);
  c = TrainConfig{};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(4), ConfigError);
  c = TrainConfig{};
  c.beta = -1;
  EXPECT_THROW(c.validate(4), ConfigError);
}

TEST(Config, FileParsingReportsLineNumbers) {
  TempDir dir("config");
  std::ofstream(dir.path() / "ok.cfg") << "# comment\nlr = 0.5\n\nepochs=2  # trailing\n";
  const TrainConfig c = load_config(dir.path() / "ok.cfg");
  EXPECT_EQ(c.lr, 0.5);
  EXPECT_EQ(c.epochs, 2u);
  std::ofstream(dir.path() / "bad.cfg") << "lr=0.5\nnot a pair\n";
  try {
    read_key_values(dir.path() / "bad.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_config(dir.path() / "missing.cfg"), ConfigError);
}

// ---- objective composition ------------------------------------------------------

TEST(TotalLoss, ActiveTermsPerVariant) {
  TrainConfig c;
  ActiveTerms full = active_terms(c);
  EXPECT_TRUE(full.l1_source && full.l1_target && full.l2 && full.l3_source && full.l3_target && full.kl && full.l4);
  c.ablation = parse_ablation("NoDAH");
  ActiveTerms nodah = active_terms(c);
  EXPECT_TRUE(nodah.l1_source && nodah.l2 && nodah.l3_source);
  EXPECT_FALSE(nodah.l1_target || nodah.l3_target || nodah.kl || nodah.l4);
  c.ablation = parse_ablation("no_L3");
  EXPECT_FALSE(active_terms(c).l3_source || active_terms(c).l3_target);
  c = TrainConfig{};
  c.target_structure = false;
  EXPECT_FALSE(active_terms(c).l1_target);
}

TEST(TotalLoss, ZeroComponentsGiveZero) {
  ad::Tape t;
  EXPECT_EQ(total_loss(TrainConfig{}, constant_terms(t, 0.0)).value().item(), 0.0);
}

TEST(TotalLoss, WeightedSumOfComponents) {
  ad::Tape t;
  TrainConfig c;
  c.alpha = 2;
  c.beta = 3;
  c.sigma = 5;
  c.delta = 7;
  LossTerms terms{t.constant(Tensor::scalar(1)), t.constant(Tensor::scalar(10)), t.constant(Tensor::scalar(100)),
                  t.constant(Tensor::scalar(1000)), t.constant(Tensor::scalar(1e4)), t.constant(Tensor::scalar(1e5)),
                  t.constant(Tensor::scalar(1e6))};
  // 2*(1+10) + 3*100 + 5*(1000+1e4) + 7e6 + 1e5
  EXPECT_EQ(total_loss(c, terms).value().item(), 22 + 300 + 55000 + 7e6 + 1e5);
  c.ablation = parse_ablation("NoDAH");
  EXPECT_EQ(total_loss(c, terms).value().item(), 2 + 300 + 5000);
}

TEST(TotalLoss, OnlyStructureLeft) {
  ad::Tape t;
  TrainConfig c;
  c.alpha = 1;
  c.beta = c.sigma = c.delta = 0;
  c.ablation.no_distillation = true;
  LossTerms terms = constant_terms(t, 4.0);
  terms.l1_target = t.constant(Tensor::scalar(2.5));
  EXPECT_EQ(total_loss(c, terms).value().item(), 6.5);
}

TEST(TotalLoss, NonFiniteComponentIsNamed) {
  ad::Tape t;
  LossTerms terms = constant_terms(t, 1.0);
  terms.l4 = t.constant(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
  try {
    total_loss(TrainConfig{}, terms);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("L4"), std::string::npos);
  }
  // An ablated term may be anything.
  TrainConfig c;
  c.ablation.no_alignment = true;
  EXPECT_NO_THROW(total_loss(c, terms));
}

TEST(Objective, GradientsScaleWithTheWeight) {
  const DomainPair pair = toy_pair(3);
  const std::vector<int> labels(pair.source.labels().begin(), pair.source.labels().end());
  std::vector<NodeId> nodes(10);
  for (NodeId v = 0; v < 10; ++v) nodes[v] = v;
  TrainConfig c = small_config();
  c.batch_size = 10;
  c.beta = c.sigma = c.delta = 0;
  c.ablation.no_distillation = true;
  const StepBatch batch = prepare_step(pair, labels, nodes, nodes, c, 11);
  ModelParams params = init_model(c.model_config(6, 3), 2);
  auto grads = [&](double alpha) {
    c.alpha = alpha;
    ad::Tape t;
    t.backward(forward_objective(t, params, pair, batch, c).total);
    return t.grad_of(params.encoder.layers[0].affine.weight);
  };
  const Tensor g1 = grads(1.0), g3 = grads(3.0);
  double norm = 0;
  for (std::size_t i = 0; i < g1.size(); ++i) {
    EXPECT_NEAR(g3[i], 3 * g1[i], 1e-12 * (1 + std::abs(g3[i])));
    norm += std::abs(g1[i]);
  }
  EXPECT_GT(norm, 0.0);
}

TEST(Objective, PrepareStepPutsBatchRowsFirst) {
  const DomainPair pair = small_pair();
  const std::vector<int> labels(pair.source.labels().begin(), pair.source.labels().end());
  const std::vector<NodeId> sb{4, 9, 1, 30, 22}, tb{0, 2, 5, 7, 8};
  const StepBatch b = prepare_step(pair, labels, sb, tb, small_config(), 1);
  ASSERT_EQ(b.source_batch, sb.size());
  EXPECT_TRUE(std::equal(sb.begin(), sb.end(), b.source_nodes.begin()));
  EXPECT_TRUE(std::equal(tb.begin(), tb.end(), b.target_nodes.begin()));
  EXPECT_EQ(b.gumbel.shape(), (Shape{5, 32}));
  for (std::size_t i = 0; i < sb.size(); ++i) EXPECT_EQ(b.source_labels[i], labels[sb[i]]);
  for (NodeId r : b.source_contrast.anchors) EXPECT_LT(r, b.source_batch);
}

// ---- optimizer -------------------------------------------------------------------

TEST(Sgd, Arithmetic) {
  Tensor p = Tensor::vector({1.0, 3.0});
  std::vector<std::pair<std::string, Tensor*>> named{{"p", &p}};
  const Tensor grads[] = {Tensor::vector({2.0, 0.0})};
  sgd_step(named, grads, 0.005);
  EXPECT_DOUBLE_EQ(p[0], 0.99);
  EXPECT_EQ(p[1], 3.0);
}

TEST(Sgd, RejectsBadGradients) {
  Tensor p = Tensor::vector({1.0, 3.0});
  std::vector<std::pair<std::string, Tensor*>> named{{"encoder.w", &p}};
  const Tensor nan_grad[] = {Tensor::vector({std::nan(""), 0.0})};
  try {
    sgd_step(named, nan_grad, 0.1);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w"), std::string::npos);
  }
  EXPECT_EQ(p[0], 1.0);
  const Tensor wrong[] = {Tensor::vector({1.0})};
  EXPECT_THROW(sgd_step(named, wrong, 0.1), ShapeError);
}

TEST(Sgd, MomentumAccumulatesVelocity) {
  TrainConfig c = small_config();
  ModelParams params = init_model(c.model_config(4, 2), 1);
  Tensor& b = params.head.classifier.bias;
  const double start = b[0];
  SgdOptimizer opt(0.1, 0.5);
  for (int step = 0; step < 2; ++step) {
    ad::Tape t;
    t.backward(ad::sum(t.param(b)));
    opt.step(params, t);
  }
  // Velocities 1 then 1.5.
  EXPECT_NEAR(b[0], start - 0.1 * 2.5, 1e-15);
}

// ---- training ----------------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialParams) {
  TrainConfig c = small_config();
  c.epochs = 0;
  const DomainPair pair = small_pair();
  const TrainResult r = train(pair, c);
  EXPECT_TRUE(r.report.epochs.empty());
  const ModelParams init = init_model(c.model_config(10, 3), c.seed);
  auto a = r.params.named_parameters();
  auto b = init.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second);
}

TEST(Train, SourceCrossEntropyDecreases) {
  TrainConfig c = small_config();
  c.epochs = 30;
  const DomainPair pair = small_pair(0.0);
  const double before = source_ce(init_model(c.model_config(10, 3), c.seed), pair.source);
  const TrainResult r = train(pair, c);
  const double after = source_ce(r.params, pair.source);
  EXPECT_NEAR(before, std::log(3.0), 0.5);
  EXPECT_LT(after, before);
}

TEST(Train, ReportBreakdownSumsToTotal) {
  TrainConfig c = small_config();
  const TrainResult r = train(small_pair(), c);
  ASSERT_EQ(r.report.epochs.size(), 3u);
  for (const EpochReport& e : r.report.epochs) {
    EXPECT_NEAR(weighted_total(c, e.loss), e.loss.total, 1e-9 * (1 + std::abs(e.loss.total)));
    EXPECT_GE(e.pseudo_acceptance, 0.0);
    EXPECT_LE(e.pseudo_acceptance, 1.0);
  }
  const std::string csv = r.report.to_csv();
  EXPECT_EQ(csv.rfind(TrainReport::csv_header(), 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Train, BitIdenticalAcrossRuns) {
  TempDir dir("train_det");
  TrainConfig c = small_config();
  const DomainPair pair = small_pair();
  save_checkpoint(train(pair, c).params, dir.path() / "a.ckpt");
  save_checkpoint(train(pair, c).params, dir.path() / "b.ckpt");
  EXPECT_EQ(file_bytes(dir.path() / "a.ckpt"), file_bytes(dir.path() / "b.ckpt"));
  c.seed = 6;
  save_checkpoint(train(pair, c).params, dir.path() / "c.ckpt");
  EXPECT_NE(file_bytes(dir.path() / "a.ckpt"), file_bytes(dir.path() / "c.ckpt"));
}

TEST(Train, NeverReadsTargetLabels) {
  const DomainPair pair = small_pair();
  const std::uint64_t before = pair.target.label_reads();
  TrainConfig c = small_config();
  train(pair, c);
  c.ablation = parse_ablation("NoDAH");
  train(pair, c);
  EXPECT_EQ(pair.target.label_reads(), before);
  EXPECT_GT(pair.source.label_reads(), 0u);
}

TEST(Train, WorksWithUnlabeledTarget) {
  const DomainPair labeled = small_pair();
  const DomainPair pair{labeled.source, labeled.target.unlabeled()};
  EXPECT_NO_THROW(train(pair, small_config()));
}

TEST(Train, WritesPeriodicAndFinalCheckpoints) {
  TempDir dir("train_ckpt");
  TrainConfig c = small_config();
  c.checkpoint_every = 2;
  c.checkpoint_dir = dir.path();
  const TrainResult r = train(small_pair(), c);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "epoch_2.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "epoch_1.ckpt"));
  const ModelParams final = load_checkpoint(dir.path() / "final.ckpt");
  EXPECT_EQ(final.encoder.layers[0].affine.weight, r.params.encoder.layers[0].affine.weight);
}

TEST(Train, DivergenceKeepsLastGoodCheckpoint) {
  TempDir dir("train_nan");
  TrainConfig c = small_config();
  c.lr = 1e300;
  c.epochs = 5;
  c.checkpoint_dir = dir.path();
  EXPECT_THROW(train(small_pair(), c), NumericalError);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "last_good.ckpt"));
  const ModelParams last = load_checkpoint(dir.path() / "last_good.ckpt");
  for (const auto& [name, t] : last.named_parameters()) EXPECT_TRUE(t->all_finite()) << name;
}
