#include "udah/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "udah/errors.hpp"

namespace udah {

namespace {

constexpr std::size_t kNoRow = static_cast<std::size_t>(-1);

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

double to_double(const std::string& key, const std::string& v) {
  double out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

std::vector<std::size_t> to_widths(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_uint(key, item));
  if (out.empty()) throw ConfigError("config: " + key + " needs at least one width");
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Batch nodes first, then every other node a contrast group mentions.
std::vector<NodeId> encoded_rows(std::span<const NodeId> batch, const ContrastBatch& contrast, std::size_t num_nodes,
                                 std::vector<std::size_t>& row_of) {
  row_of.assign(num_nodes, kNoRow);
  std::vector<NodeId> rows;
  auto add = [&](NodeId v) {
    if (row_of[v] == kNoRow) {
      row_of[v] = rows.size();
      rows.push_back(v);
    }
  };
  for (NodeId v : batch) add(v);
  for (std::size_t k = 0; k < contrast.size(); ++k) {
    for (NodeId v : contrast.positives[k]) add(v);
    for (NodeId v : contrast.negatives[k]) add(v);
  }
  return rows;
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

ad::Var structure_loss(ad::Var z, const ContrastBatch& contrast, const TrainConfig& cfg, std::uint64_t seed) {
  if (contrast.size() == 0) return z.tape().constant(Tensor::scalar(0.0));
  if (cfg.ablation.pairwise_structure) return loss::loss_pairwise_contrastive(z, contrast, cfg.margin, seed);
  return loss::loss_groupwise_contrastive(z, contrast, cfg.margin);
}

bool needs_target(const ActiveTerms& a) { return a.l1_target || a.l3_target || a.kl || a.l4; }

double frob_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

// ---- ablation switches ---------------------------------------------------

Ablation parse_ablation(const std::string& list) {
  Ablation a;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty() || item == "none" || item == "full") continue;
    if (item == "no_L1_group") a.pairwise_structure = true;
    else if (item == "no_L2_gumbel") a.sign_hash = true;
    else if (item == "no_L3") a.no_classification = true;
    else if (item == "no_L4") a.no_alignment = true;
    else if (item == "no_Lkl") a.no_distillation = true;
    else if (item == "NoDAH") a.no_adaptation = true;
    else throw ConfigError("unknown ablation switch '" + item + "'");
  }
  return a;
}

std::string ablation_string(const Ablation& a) {
  std::vector<std::string> parts;
  if (a.pairwise_structure) parts.emplace_back("no_L1_group");
  if (a.sign_hash) parts.emplace_back("no_L2_gumbel");
  if (a.no_classification) parts.emplace_back("no_L3");
  if (a.no_alignment) parts.emplace_back("no_L4");
  if (a.no_distillation) parts.emplace_back("no_Lkl");
  if (a.no_adaptation) parts.emplace_back("NoDAH");
  if (parts.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? "," : "") + parts[i];
  return s;
}

// ---- config --------------------------------------------------------------

void TrainConfig::validate(std::size_t num_classes) const {
  if (!(lr > 0.0)) throw ConfigError("config: lr must be positive");
  for (auto [name, w] : {std::pair{"alpha", alpha}, {"beta", beta}, {"sigma", sigma}, {"delta", delta}}) {
    if (!(w >= 0.0)) throw ConfigError(std::string("config: ") + name + " must be non-negative");
  }
  if (!(margin > 0.0)) throw ConfigError("config: margin must be positive");
  if (!(tau > 0.0)) throw ConfigError("config: tau must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("config: threshold must lie in (0, 1)");
  if (!(center_step >= 0.0 && center_step <= 1.0)) throw ConfigError("config: center_step must lie in [0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("config: momentum must lie in [0, 1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("config: dropout must lie in [0, 1)");
  if (code_length == 0) throw ConfigError("config: code_length must be positive");
  if (batch_size <= num_classes) {
    throw ConfigError("config: batch_size " + std::to_string(batch_size) + " must exceed the number of classes (" +
                      std::to_string(num_classes) + ")");
  }
}

void TrainConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, v] : values) {
    if (key == "lr") lr = to_double(key, v);
    else if (key == "alpha") alpha = to_double(key, v);
    else if (key == "beta") beta = to_double(key, v);
    else if (key == "sigma") sigma = to_double(key, v);
    else if (key == "delta") delta = to_double(key, v);
    else if (key == "margin" || key == "lambda") margin = to_double(key, v);
    else if (key == "tau") tau = to_double(key, v);
    else if (key == "threshold") threshold = to_double(key, v);
    else if (key == "center_step" || key == "epsilon") center_step = to_double(key, v);
    else if (key == "momentum") momentum = to_double(key, v);
    else if (key == "dropout") dropout = to_double(key, v);
    else if (key == "batch_size") batch_size = to_uint(key, v);
    else if (key == "epochs") epochs = to_uint(key, v);
    else if (key == "code_length") code_length = to_uint(key, v);
    else if (key == "pairs_per_node") pairs_per_node = to_uint(key, v);
    else if (key == "encoder_widths") encoder_widths = to_widths(key, v);
    else if (key == "discriminator_widths") discriminator_widths = to_widths(key, v);
    else if (key == "seed") seed = to_uint(key, v);
    else if (key == "binary_similarity") binary_similarity = to_bool(key, v);
    else if (key == "target_structure") target_structure = to_bool(key, v);
    else if (key == "checkpoint_every") checkpoint_every = to_uint(key, v);
    else if (key == "checkpoint_dir") checkpoint_dir = v;
    else if (key == "ablation") ablation = parse_ablation(v);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
}

std::string TrainConfig::to_string() const {
  std::ostringstream os;
  os << "lr=" << fmt_double(lr) << '\n'
     << "alpha=" << fmt_double(alpha) << '\n'
     << "beta=" << fmt_double(beta) << '\n'
     << "sigma=" << fmt_double(sigma) << '\n'
     << "delta=" << fmt_double(delta) << '\n'
     << "margin=" << fmt_double(margin) << '\n'
     << "tau=" << fmt_double(tau) << '\n'
     << "threshold=" << fmt_double(threshold) << '\n'
     << "center_step=" << fmt_double(center_step) << '\n'
     << "momentum=" << fmt_double(momentum) << '\n'
     << "dropout=" << fmt_double(dropout) << '\n'
     << "batch_size=" << batch_size << '\n'
     << "epochs=" << epochs << '\n'
     << "code_length=" << code_length << '\n'
     << "pairs_per_node=" << pairs_per_node << '\n'
     << "encoder_widths=" << join(encoder_widths) << '\n'
     << "discriminator_widths=" << join(discriminator_widths) << '\n'
     << "seed=" << seed << '\n'
     << "binary_similarity=" << (binary_similarity ? "true" : "false") << '\n'
     << "target_structure=" << (target_structure ? "true" : "false") << '\n'
     << "checkpoint_every=" << checkpoint_every << '\n'
     << "checkpoint_dir=" << checkpoint_dir.string() << '\n'
     << "ablation=" << ablation_string(ablation) << '\n';
  return os.str();
}

ModelConfig TrainConfig::model_config(std::size_t input_dim, std::size_t num_classes) const {
  ModelConfig m;
  m.input_dim = input_dim;
  m.encoder_widths = encoder_widths;
  m.discriminator_widths = discriminator_widths;
  m.code_length = code_length;
  m.num_classes = num_classes;
  m.dropout = dropout;
  return m;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

TrainConfig load_config(const std::filesystem::path& path) {
  TrainConfig cfg;
  cfg.apply(read_key_values(path));
  return cfg;
}

// ---- objective -----------------------------------------------------------

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  l1_source += o.l1_source;
  l1_target += o.l1_target;
  l2 += o.l2;
  l3_source += o.l3_source;
  l3_target += o.l3_target;
  kl += o.kl;
  l4 += o.l4;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double f) const {
  return {l1_source * f, l1_target * f, l2 * f, l3_source * f, l3_target * f, kl * f, l4 * f, total * f};
}

ActiveTerms active_terms(const TrainConfig& cfg) {
  const Ablation& a = cfg.ablation;
  const bool adapt = !a.no_adaptation;
  return ActiveTerms{
      .l1_source = true,
      .l1_target = adapt && cfg.target_structure,
      .l2 = true,
      .l3_source = !a.no_classification,
      .l3_target = adapt && !a.no_classification,
      .kl = adapt && !a.no_distillation,
      .l4 = adapt && !a.no_alignment,
  };
}

ad::Var total_loss(const TrainConfig& cfg, const LossTerms& terms) {
  const ActiveTerms on = active_terms(cfg);
  const std::pair<const char*, std::pair<bool, std::pair<ad::Var, double>>> parts[] = {
      {"L1_source", {on.l1_source, {terms.l1_source, cfg.alpha}}},
      {"L1_target", {on.l1_target, {terms.l1_target, cfg.alpha}}},
      {"L2", {on.l2, {terms.l2, cfg.beta}}},
      {"L3_source", {on.l3_source, {terms.l3_source, cfg.sigma}}},
      {"L3_target", {on.l3_target, {terms.l3_target, cfg.sigma}}},
      {"L4", {on.l4, {terms.l4, cfg.delta}}},
      {"L_kl", {on.kl, {terms.kl, 1.0}}},
  };
  ad::Var total;
  for (const auto& [name, entry] : parts) {
    const auto& [active, term] = entry;
    const auto& [var, weight] = term;
    if (!active) continue;
    if (!var.valid()) throw std::logic_error(std::string("total_loss: active term ") + name + " was not computed");
    if (!std::isfinite(var.value().item())) throw NumericalError(std::string("non-finite loss component ") + name);
    ad::Var weighted = ad::scale(var, weight);
    total = total.valid() ? ad::add(total, weighted) : weighted;
  }
  return total;
}

double weighted_total(const TrainConfig& cfg, const LossBreakdown& b) {
  const ActiveTerms on = active_terms(cfg);
  double t = 0.0;
  if (on.l1_source) t += cfg.alpha * b.l1_source;
  if (on.l1_target) t += cfg.alpha * b.l1_target;
  if (on.l2) t += cfg.beta * b.l2;
  if (on.l3_source) t += cfg.sigma * b.l3_source;
  if (on.l3_target) t += cfg.sigma * b.l3_target;
  if (on.l4) t += cfg.delta * b.l4;
  if (on.kl) t += b.kl;
  return t;
}

StepBatch prepare_step(const DomainPair& pair, std::span<const int> source_labels, std::span<const NodeId> source_batch,
                       std::span<const NodeId> target_batch, const TrainConfig& cfg, std::uint64_t step_seed) {
  std::mt19937_64 rng(step_seed);
  const ActiveTerms on = active_terms(cfg);
  StepBatch b;
  std::vector<std::size_t> row_of;

  const ContrastBatch src = sample_contrast_batch(pair.source, source_batch, rng());
  b.source_nodes = encoded_rows(source_batch, src, pair.source.num_nodes(), row_of);
  b.source_contrast = loss::to_rows(src, row_of);
  b.source_batch = source_batch.size();
  for (NodeId v : source_batch) b.source_labels.push_back(source_labels[v]);

  const std::uint64_t target_seed = rng();
  if (needs_target(on)) {
    ContrastBatch tgt;
    if (on.l1_target) tgt = sample_contrast_batch(pair.target, target_batch, target_seed);
    b.target_nodes = encoded_rows(target_batch, tgt, pair.target.num_nodes(), row_of);
    b.target_contrast = loss::to_rows(tgt, row_of);
    b.target_batch = target_batch.size();
  }

  b.pairs = loss::build_similarity_pairs(b.source_labels, rng(), cfg.pairs_per_node);
  if (cfg.binary_similarity) {
    for (auto& p : b.pairs) p.s = p.s > 0 ? 1.0 : 0.0;
  }
  b.gumbel = sample_gumbel(b.source_batch, cfg.code_length * 2, rng);
  b.dropout_seed = rng();
  b.pairwise_seed = rng();
  return b;
}

StepOutput forward_objective(ad::Tape& tape, const ModelParams& params, const DomainPair& pair, const StepBatch& batch,
                             const TrainConfig& cfg) {
  const ActiveTerms on = active_terms(cfg);
  std::mt19937_64 drop_rng(batch.dropout_seed);
  StepOutput out;
  LossTerms& t = out.terms;

  ad::Var zs_all = encode(tape, params.encoder, tape.constant(pair.source.dense_attributes(batch.source_nodes)), true, drop_rng);
  const auto src_rows = first_rows(batch.source_batch);
  ad::Var zs = ad::gather_rows(zs_all, src_rows);
  out.source_embedding = zs.value();

  t.l1_source = structure_loss(zs_all, batch.source_contrast, cfg, batch.pairwise_seed);

  ad::Var logits = hash_logits(tape, params.head, zs);
  if (cfg.ablation.sign_hash) {
    t.l2 = loss::loss_hash_sign(logits, batch.pairs, cfg.code_length);
  } else {
    t.l2 = loss::loss_hash(relax_blocks(logits, batch.gumbel, cfg.tau, 2), batch.pairs, cfg.code_length);
  }

  if (on.l3_source) t.l3_source = loss::loss_source_ce(discriminate(tape, params.source_disc, zs, true, drop_rng), batch.source_labels);

  if (needs_target(on)) {
    ad::Var zt_all =
        encode(tape, params.encoder, tape.constant(pair.target.dense_attributes(batch.target_nodes)), true, drop_rng);
    ad::Var zt = ad::gather_rows(zt_all, first_rows(batch.target_batch));
    out.target_embedding = zt.value();
    if (on.l1_target) t.l1_target = structure_loss(zt_all, batch.target_contrast, cfg, batch.pairwise_seed + 1);

    ad::Var teacher = discriminate(tape, params.source_disc, zt, true, drop_rng);
    out.pseudo = loss::assign_pseudo_labels(teacher.value(), cfg.threshold);
    if (on.l3_target || on.kl) {
      ad::Var student = discriminate(tape, params.target_disc, zt, true, drop_rng);
      if (on.l3_target) t.l3_target = loss::loss_target_ce(student, out.pseudo);
      if (on.kl) t.kl = loss::loss_kl(student, teacher);
    }
    if (on.l4) t.l4 = loss::loss_center_alignment(zs, batch.source_labels, zt, out.pseudo, params.config.num_classes);
  }
  out.total = total_loss(cfg, t);
  return out;
}

// ---- optimizer -----------------------------------------------------------

void sgd_step(std::span<const std::pair<std::string, Tensor*>> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("sgd_step: parameter and gradient counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, p] = params[k];
    if (grads[k].shape() != p->shape()) {
      throw ShapeError("sgd_step: gradient of " + name + " has shape " + shape_string(grads[k].shape()) + ", expected " +
                       shape_string(p->shape()));
    }
    if (!grads[k].all_finite()) throw NumericalError("non-finite gradient in " + name);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].second;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grads[k][i];
  }
}

void SgdOptimizer::step(ModelParams& params, const ad::Tape& tape) {
  auto named = params.named_parameters();
  std::vector<Tensor> grads;
  grads.reserve(named.size());
  for (const auto& [name, p] : named) grads.push_back(tape.grad_of(*p));
  if (momentum_ == 0.0) {
    sgd_step(named, grads, lr_);
    return;
  }
  for (std::size_t k = 0; k < named.size(); ++k) {
    if (!grads[k].all_finite()) throw NumericalError("non-finite gradient in " + named[k].first);
  }
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto [it, fresh] = velocity_.try_emplace(named[k].first, named[k].second->shape());
    Tensor& v = it->second;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = momentum_ * v[i] + grads[k][i];
    grads[k] = v;
  }
  sgd_step(named, grads, lr_);
}

// ---- report --------------------------------------------------------------

const char* TrainReport::csv_header() {
  return "epoch,l1_source,l1_target,l2,l3_source,l3_target,kl,l4,total,pseudo_acceptance,center_drift";
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << csv_header() << '\n';
  for (const EpochReport& e : epochs) {
    const LossBreakdown& l = e.loss;
    os << e.epoch;
    for (double v : {l.l1_source, l.l1_target, l.l2, l.l3_source, l.l3_target, l.kl, l.l4, l.total, e.pseudo_acceptance,
                     e.center_drift}) {
      os << ',' << fmt_double(v);
    }
    os << '\n';
  }
  return os.str();
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_csv();
}

// ---- training loop -------------------------------------------------------

TrainResult train(const DomainPair& pair, const TrainConfig& cfg) {
  pair.validate();
  const std::size_t num_classes = pair.source.num_classes();
  cfg.validate(num_classes);

  TrainResult result{init_model(cfg.model_config(pair.source.attr_dim(), num_classes), cfg.seed), {}};
  ModelParams& params = result.params;
  if (cfg.epochs == 0) return result;

  const std::vector<int> source_labels(pair.source.labels().begin(), pair.source.labels().end());
  const ActiveTerms on = active_terms(cfg);
  MinibatchStream stream(pair.source.num_nodes(), pair.target.num_nodes(), num_classes, cfg.batch_size,
                         cfg.seed ^ 0xa5a5a5a5ULL);
  std::mt19937_64 step_seeds(cfg.seed + 1);
  SgdOptimizer optimizer(cfg.lr, cfg.momentum);
  const bool checkpoints = !cfg.checkpoint_dir.empty();
  if (checkpoints) std::filesystem::create_directories(cfg.checkpoint_dir);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const Tensor source_before = params.source_centers.centers;
    const Tensor target_before = params.target_centers.centers;
    LossBreakdown sum;
    std::size_t steps = 0, accepted = 0, target_rows = 0;

    for (const auto& [source_batch, target_batch] : stream.next_epoch()) {
      const StepBatch batch = prepare_step(pair, source_labels, source_batch, target_batch, cfg, step_seeds());
      ad::Tape tape;
      try {
        StepOutput out = forward_objective(tape, params, pair, batch, cfg);
        if (!std::isfinite(out.total.value().item())) throw NumericalError("non-finite total loss");
        tape.backward(out.total);
        optimizer.step(params, tape);

        auto value = [](const ad::Var& v) { return v.valid() ? v.value().item() : 0.0; };
        const LossTerms& t = out.terms;
        sum += LossBreakdown{value(t.l1_source), value(t.l1_target), value(t.l2), value(t.l3_source),
                             value(t.l3_target), value(t.kl),        value(t.l4), out.total.value().item()};

        auto [sm, sp] = loss::batch_class_means(out.source_embedding, batch.source_labels, num_classes);
        loss::update_centers(params.source_centers, sm, sp, cfg.center_step);
        if (needs_target(on)) {
          auto [tm, tp] = loss::batch_class_means(out.target_embedding, out.pseudo, num_classes);
          loss::update_centers(params.target_centers, tm, tp, cfg.center_step);
          accepted += static_cast<std::size_t>(
              std::count_if(out.pseudo.begin(), out.pseudo.end(), [](int y) { return y != loss::kRejected; }));
          target_rows += out.pseudo.size();
        }
      } catch (const NumericalError& e) {
        spdlog::error("epoch {}: {}", epoch, e.what());
        if (checkpoints) save_checkpoint(params, cfg.checkpoint_dir / "last_good.ckpt");
        throw;
      }
      ++steps;
    }

    EpochReport rep;
    rep.epoch = epoch;
    rep.loss = sum.scaled(1.0 / static_cast<double>(std::max<std::size_t>(steps, 1)));
    rep.pseudo_acceptance = target_rows ? static_cast<double>(accepted) / static_cast<double>(target_rows) : 0.0;
    rep.center_drift = frob_diff(source_before, params.source_centers.centers) +
                       frob_diff(target_before, params.target_centers.centers);
    spdlog::debug("epoch {} total {:.6f} l3s {:.6f} accept {:.3f}", epoch, rep.loss.total, rep.loss.l3_source,
                  rep.pseudo_acceptance);
    result.report.epochs.push_back(rep);

    if (checkpoints && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      save_checkpoint(params, cfg.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"));
    }
  }
  if (checkpoints) save_checkpoint(params, cfg.checkpoint_dir / "final.ckpt");
  return result;
}

}  // namespace udah
