#include "udah/ablation.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <random>

#include "udah/errors.hpp"

namespace udah {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

std::vector<Variant> standard_variants() {
  auto with = [](auto set) {
    Ablation a;
    set(a);
    return a;
  };
  return {
      {"full", Ablation{}},
      {"NoDAH", with([](Ablation& a) { a.no_adaptation = true; })},
      {"-L1", with([](Ablation& a) { a.pairwise_structure = true; })},
      {"-L2", with([](Ablation& a) { a.sign_hash = true; })},
      {"-L3", with([](Ablation& a) { a.no_classification = true; })},
      {"-L4", with([](Ablation& a) { a.no_alignment = true; })},
      {"-Lkl", with([](Ablation& a) { a.no_distillation = true; })},
  };
}

ClassificationScores source_classifier_scores(const ModelParams& params, const Graph& g) {
  if (!g.has_labels()) throw DataError("source_classifier_scores: graph has no labels");
  const Tensor z = embed_graph(params, g);
  ad::Tape tape;
  std::mt19937_64 unused(0);
  const Tensor probs = discriminate(tape, params.source_disc, tape.constant(z), false, unused).value();

  const std::span<const int> labels = g.labels();
  const std::size_t k = params.config.num_classes;
  std::vector<std::size_t> tp(k, 0), fp(k, 0), fn(k, 0);
  std::size_t correct = 0;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const double* row = &probs.at(v, 0);
    const auto pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    const auto truth = static_cast<std::size_t>(labels[v]);
    if (pred == truth) {
      ++correct;
      ++tp[pred];
    } else {
      ++fp[pred];
      ++fn[truth];
    }
  }
  double macro = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++counted;
    macro += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  return {static_cast<double>(correct) / static_cast<double>(labels.size()),
          counted ? macro / static_cast<double>(counted) : 0.0};
}

AblationTable run_ablation_suite(const DomainPair& pair, const TrainConfig& cfg, const AblationOptions& opts) {
  const TargetHoldout holdout = make_target_holdout(pair.target, opts.tasks, opts.holdout_seed);
  const DomainPair training{pair.source, holdout.train};

  AblationTable table;
  for (const Variant& v : opts.variants) {
    TrainConfig variant_cfg = cfg;
    variant_cfg.ablation = v.ablation;
    variant_cfg.checkpoint_dir.clear();
    spdlog::info("ablation: training {}", v.name);
    const TrainResult trained = train(training, variant_cfg);
    const auto codes = emit_codes(trained.params, pair.target);
    table.rows.push_back({v.name, evaluate_codes(codes, pair.target, holdout, opts.tasks, opts.split_seed)});
  }
  return table;
}

std::string AblationTable::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const AblationRow& r : rows) {
    nlohmann::ordered_json row = {{"variant", r.name}};
    row.update(nlohmann::ordered_json::parse(r.target.to_json()));
    j.push_back(row);
  }
  return j.dump(2) + "\n";
}

std::string AblationTable::to_table() const {
  std::string out = "variant  mean-F1              micro-F1             macro-F1             AUC                  NDCG@50\n";
  auto cell = [](std::optional<double> v) {
    std::string s = v ? fmt(*v) : "-";
    s.resize(std::max<std::size_t>(s.size(), 21), ' ');
    return s;
  };
  for (const AblationRow& r : rows) {
    std::string name = r.name;
    name.resize(9, ' ');
    const auto& c = r.target.classification;
    out += name + cell(c ? std::optional(c->mean()) : std::nullopt) +
           cell(c ? std::optional(c->micro_f1) : std::nullopt) + cell(c ? std::optional(c->macro_f1) : std::nullopt) +
           cell(r.target.link_auc) + cell(r.target.ndcg) + "\n";
  }
  return out;
}

}  // namespace udah
