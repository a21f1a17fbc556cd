#include "seqdef/harness.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "seqdef/rng.hpp"

namespace seqdef {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

// Substream salts off the plan seed. Artifacts first, attacks second.
constexpr uint64_t kDataSalt = 0x80;
constexpr uint64_t kSubstituteSalt = 0x81;
constexpr uint64_t kEmbeddingSalt = 0x82;
constexpr uint64_t kBenignGenSalt = 0x83;
constexpr uint64_t kMaliciousGenSalt = 0x84;
constexpr uint64_t kEnsembleSalt = 0x85;
constexpr uint64_t kSignatureSourceSalt = 0x86;
constexpr uint64_t kAdvTrainSourceSalt = 0x87;
constexpr uint64_t kModelSalt = 0x88;
constexpr uint64_t kTrainingSalt = 0x89;
constexpr uint64_t kEnsemblePoolSalt = 0x8a;
constexpr uint64_t kWhiteboxSalt = 0x91;
constexpr uint64_t kBlackboxSalt = 0x92;
constexpr uint64_t kRandomSalt = 0x93;
constexpr uint64_t kAdaptiveSalt = 0x94;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename F>
auto stage(const char* name, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("stage ") + name + ": " + e.what());
  }
}

// One evaluated defense with every artifact it points into, so the wrapper's
// internal pointers stay valid for the lifetime of the run.
struct BuiltDefense {
  std::string id;
  std::unique_ptr<Defense> defense;
  DefendedModel system;
  double train_seconds = 0.0;

  std::unique_ptr<SqueezeDetector> detector;
  std::unique_ptr<SignatureSet> signature_set;
  std::unique_ptr<NeighborIndex> index;
  std::unique_ptr<Ensemble> ensemble;
  std::unique_ptr<GeneratorModel> benign_gen;
  std::unique_ptr<GeneratorModel> malicious_gen;
  std::unique_ptr<RnnClassifier> advtrain_model;
};

std::vector<TokenSeq> class_sequences(const Dataset& data, Label label) {
  std::vector<TokenSeq> out;
  for (const auto& sample : data.samples) {
    if (sample.label == label) out.push_back(sample.seq);
  }
  return out;
}

AttackConfig attack_base(const ExperimentPlan& plan, int32_t window) {
  AttackConfig cfg;
  cfg.n = window;
  cfg.max_insertions_per_window = plan.max_insertions_per_window;
  cfg.adaptive_iteration_cap = plan.adaptive_iteration_cap;
  return cfg;
}

double recall_or_zero(const Defense& defense, const std::vector<TokenSeq>& set) {
  return set.empty() ? 0.0 : adversarial_recall(defense, set);
}

BuiltDefense build_defense(const std::string& id, const ExperimentPlan& plan,
                           const RnnClassifier& base, const RnnClassifier& substitute,
                           const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                           const Dataset& train) {
  BuiltDefense out;
  out.id = id;
  out.system.classifier = &base;
  const auto start = Clock::now();

  if (id == "squeeze") {
    const auto counts = build_cooccurrence(train, plan.vocab_size, plan.squeeze_radius);
    GloveConfig gcfg = plan.embedding;
    gcfg.seed = mix_seed(plan.seed, kEmbeddingSalt);
    const auto glove = train_embeddings(counts, gcfg);
    auto map = build_squeeze_map(glove.embedding, plan.squeeze_target);
    const double threshold = calibrate_threshold(map, base, train);
    out.detector = std::make_unique<SqueezeDetector>(SqueezeDetector{std::move(map), threshold});
    out.defense = std::make_unique<SqueezeDefense>(base, *out.detector);
    out.system.squeeze = out.detector.get();
  } else if (id == "signatures") {
    AdversarialExampleSource source;
    source.target = &base;
    source.substitute = &substitute;
    source.config = attack_base(plan, model_cfg.window);
    source.config.seed = mix_seed(plan.seed, kSignatureSourceSalt);
    std::vector<TokenSeq> x_adv;
    size_t attacked = 0;
    for (const auto& sample : train.samples) {
      if (sample.label != Label::kMalicious) continue;
      if (attacked >= static_cast<size_t>(plan.signature_pool)) break;
      if (base.classify_sequence(sample.seq).label != Label::kMalicious) continue;
      const auto r = source.perturb(sample.seq, attacked);
      ++attacked;
      if (r.evaded) x_adv.push_back(r.perturbed);
    }
    out.signature_set = std::make_unique<SignatureSet>(
        build_signature_set(x_adv, class_sequences(train, Label::kBenign), plan.signatures));
    out.defense = std::make_unique<SignatureDefense>(base, *out.signature_set);
    out.system.signatures = out.signature_set.get();
  } else if (id == "neighbor") {
    out.index = std::make_unique<NeighborIndex>(build_index(base.config(), train));
    out.defense = std::make_unique<NeighborDefense>(base, *out.index);
  } else if (id == "ensemble") {
    EnsembleConfig ecfg = plan.ensemble;
    ecfg.seed = mix_seed(plan.seed, kEnsembleSalt);
    AdversarialExampleSource source;
    source.target = &base;
    source.substitute = &substitute;
    source.config = attack_base(plan, model_cfg.window);
    source.config.seed = mix_seed(plan.seed, kEnsemblePoolSalt);
    const bool adversarial = variant_uses_adversarial(ecfg.variant);
    out.ensemble = std::make_unique<Ensemble>(
        train_ensemble(ecfg, model_cfg, train_cfg, train, adversarial ? &source : nullptr));
    out.defense = std::make_unique<EnsembleDefense>(*out.ensemble);
    out.system.members = member_views(*out.ensemble);
  } else if (id == "defgen") {
    out.benign_gen = std::make_unique<GeneratorModel>(train_generator(
        class_sequences(train, Label::kBenign), plan.vocab_size, Label::kBenign,
        plan.generator_order, mix_seed(plan.seed, kBenignGenSalt), plan.generator_smoothing));
    out.malicious_gen = std::make_unique<GeneratorModel>(train_generator(
        class_sequences(train, Label::kMalicious), plan.vocab_size, Label::kMalicious,
        plan.generator_order, mix_seed(plan.seed, kMaliciousGenSalt), plan.generator_smoothing));
    out.defense = std::make_unique<DefGenDefense>(base, *out.benign_gen, *out.malicious_gen,
                                                  plan.defgen);
  } else if (id == "advtrain") {
    AdversarialExampleSource source;
    source.target = &base;
    source.substitute = &substitute;
    source.config = attack_base(plan, model_cfg.window);
    source.config.seed = mix_seed(plan.seed, kAdvTrainSourceSalt);
    auto result = adversarial_training(train, source, plan.advtrain_fraction, model_cfg,
                                       train_cfg);
    out.advtrain_model = std::make_unique<RnnClassifier>(std::move(result.model));
    out.defense = std::make_unique<AdvTrainDefense>(*out.advtrain_model);
    out.system.classifier = out.advtrain_model.get();
  } else {
    throw std::invalid_argument("unknown defense id: " + id);
  }

  out.system.defense = out.defense.get();
  out.train_seconds = seconds_since(start);
  return out;
}

void append_row(std::string& csv, const DefenseRow& row, bool csv_timings) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f,%.3f,%.3f\n",
                row.defense.c_str(), row.adaptive_recall, row.whitebox_recall,
                row.blackbox_recall, row.random_recall, row.clean_accuracy, row.fpr,
                csv_timings ? row.train_overhead_s : 0.0,
                csv_timings ? row.inference_overhead_s : 0.0);
  csv += buf;
}

json plan_to_json(const ExperimentPlan& plan) {
  return json{
      {"dataset",
       {{"vocab_size", plan.vocab_size},
        {"len_min", plan.len_min},
        {"len_max", plan.len_max},
        {"overlap", plan.overlap},
        {"counts",
         {{"train_benign", plan.counts.train_benign},
          {"train_malicious", plan.counts.train_malicious},
          {"validation_benign", plan.counts.validation_benign},
          {"validation_malicious", plan.counts.validation_malicious},
          {"test_benign", plan.counts.test_benign},
          {"test_malicious", plan.counts.test_malicious},
          {"holdout_benign", plan.counts.holdout_benign},
          {"holdout_malicious", plan.counts.holdout_malicious}}}}},
      {"classifier",
       {{"cell", cell_name(plan.classifier.cell)},
        {"hidden_units", plan.classifier.hidden_units},
        {"window", plan.classifier.window},
        {"dropout", plan.classifier.dropout},
        {"bidirectional", plan.classifier.bidirectional},
        {"depth", plan.classifier.depth}}},
      {"training",
       {{"optimizer", optimizer_name(plan.training.optimizer)},
        {"epochs", plan.training.epochs},
        {"batch_size", plan.training.batch_size},
        {"learning_rate", plan.training.learning_rate}}},
      {"substitute", {{"hidden_units", plan.substitute.hidden_units},
                      {"epochs", plan.substitute.epochs}}},
      {"attack_samples", plan.attack_samples},
      {"max_insertions_per_window", plan.max_insertions_per_window},
      {"random_seeds", plan.random_seeds},
      {"adaptive_iteration_cap", plan.adaptive_iteration_cap},
      {"defenses", plan.defenses},
      {"squeeze", {{"radius", plan.squeeze_radius},
                   {"target", plan.squeeze_target},
                   {"embedding_dim", plan.embedding.dim},
                   {"embedding_iterations", plan.embedding.iterations}}},
      {"signatures", {{"n", plan.signatures.n},
                      {"threshold_p", plan.signatures.threshold_p},
                      {"threshold_sigs", plan.signatures.threshold_sigs},
                      {"pool", plan.signature_pool}}},
      {"ensemble", {{"variant", ensemble_variant_name(plan.ensemble.variant)},
                    {"size", plan.ensemble.size},
                    {"voting", voting_name(plan.ensemble.voting)},
                    {"adversarial_fraction", plan.ensemble.adversarial_fraction},
                    {"per_member_pools", plan.ensemble.per_member_pools}}},
      {"defgen", {{"m_generated", plan.defgen.m_generated},
                  {"generator_order", plan.generator_order},
                  {"generator_smoothing", plan.generator_smoothing}}},
      {"advtrain_fraction", plan.advtrain_fraction},
      {"csv_timings", plan.csv_timings},
      {"seed", plan.seed}};
}

}  // namespace

NullDefense::NullDefense(const RnnClassifier& classifier) : model_(&classifier) {}

std::string NullDefense::id() const { return "none"; }

DefenseDecision NullDefense::decide(const TokenSeq& seq) const {
  const auto decision = model_->classify_sequence(seq);
  return {decision.label, false, decision.confidence};
}

double adversarial_recall(const Defense& defense, const std::vector<TokenSeq>& adversarial) {
  if (adversarial.empty()) throw std::invalid_argument("adversarial set is empty");
  size_t caught = 0;
  for (const auto& seq : adversarial) {
    const auto decision = defense.decide(seq);
    if (decision.flagged || decision.label == Label::kMalicious) ++caught;
  }
  return 100.0 * static_cast<double>(caught) / static_cast<double>(adversarial.size());
}

EvalStats defended_accuracy(const Defense& defense, const Dataset& clean) {
  if (clean.samples.empty()) throw std::invalid_argument("clean set is empty");
  EvalStats stats;
  stats.total = clean.samples.size();
  for (const auto& sample : clean.samples) {
    const auto decision = defense.decide(sample.seq);
    const Label predicted =
        decision.flagged ? Label::kMalicious : decision.label;  // flag coercion
    if (predicted == sample.label) ++stats.correct;
    if (sample.label == Label::kBenign) {
      ++stats.benign_total;
      if (predicted == Label::kMalicious) ++stats.false_positives;
    }
  }
  stats.accuracy = static_cast<double>(stats.correct) / static_cast<double>(stats.total);
  stats.fpr = stats.benign_total == 0
                  ? 0.0
                  : static_cast<double>(stats.false_positives) /
                        static_cast<double>(stats.benign_total);
  return stats;
}

ExperimentPlan make_desk_plan() {
  ExperimentPlan plan;
  plan.counts.train_benign = 1000;
  plan.counts.train_malicious = 1000;
  plan.counts.test_benign = 250;
  plan.counts.test_malicious = 250;
  plan.counts.holdout_benign = 35;
  plan.counts.holdout_malicious = 35;
  plan.classifier.cell = CellKind::kLstm;
  plan.classifier.hidden_units = 32;
  plan.classifier.window = 40;
  plan.training.epochs = 8;
  plan.substitute.hidden_units = 32;
  plan.substitute.epochs = 8;
  plan.ensemble.variant = EnsembleVariant::kSubsequence;
  plan.ensemble.size = 9;
  plan.ensemble.voting = Voting::kSoft;
  return plan;
}

std::string report_csv(const MetricsReport& report, bool csv_timings) {
  std::string csv =
      "defense,adaptive_recall,whitebox_recall,blackbox_recall,random_recall,"
      "clean_accuracy,fpr,train_overhead_s,inference_overhead_s\n";
  for (const auto& row : report.rows) append_row(csv, row, csv_timings);
  return csv;
}

MetricsReport run_experiment_table(const ExperimentPlan& plan,
                                   const std::filesystem::path& csv_path) {
  if (plan.vocab_size < 2) throw std::invalid_argument("plan needs a vocabulary");
  if (plan.attack_samples < 1) throw std::invalid_argument("plan needs attack samples");
  if (plan.random_seeds < 1) throw std::invalid_argument("plan needs random seeds");

  MetricsReport report;
  report.seed = plan.seed;

  const auto synth = stage("dataset", [&] {
    const auto spec = SynthSpec::make(plan.vocab_size, plan.len_min, plan.len_max,
                                      plan.overlap, mix_seed(plan.seed, kDataSalt));
    return generate_synthetic(spec, plan.counts);
  });

  ModelConfig model_cfg = plan.classifier;
  model_cfg.vocab_width = synth.vocab.width();
  model_cfg.seed = mix_seed(plan.seed, kModelSalt);
  TrainConfig train_cfg = plan.training;
  train_cfg.seed = mix_seed(plan.seed, kTrainingSalt);

  auto base = stage("baseline", [&] {
    const auto start = Clock::now();
    auto model = RnnClassifier::init(model_cfg);
    model.fit(synth.train, train_cfg);
    report.baseline_train_s = seconds_since(start);
    return model;
  });
  const auto baseline_stats = stage("baseline", [&] {
    return evaluate_accuracy(base, synth.test);
  });
  report.baseline_accuracy = baseline_stats.accuracy;
  report.baseline_fpr = baseline_stats.fpr;

  const auto substitute = stage("substitute", [&] {
    SubstituteSpec spec = plan.substitute;
    spec.seed = mix_seed(plan.seed, kSubstituteSalt);
    return train_substitute(base, synth.holdout, spec);
  });

  // Malicious test samples the baseline catches: the attack's precondition.
  std::vector<TokenSeq> targets;
  for (const auto& sample : synth.test.samples) {
    if (targets.size() >= static_cast<size_t>(plan.attack_samples)) break;
    if (sample.label != Label::kMalicious) continue;
    if (base.classify_sequence(sample.seq).label != Label::kMalicious) continue;
    targets.push_back(sample.seq);
  }
  report.attacked = targets.size();

  const AttackConfig acfg = attack_base(plan, model_cfg.window);

  // Adversarial sets: outputs that evade the undefended baseline.
  std::vector<TokenSeq> wb_set;
  std::vector<TokenSeq> bb_set;
  stage("whitebox attack", [&] {
    for (size_t i = 0; i < targets.size(); ++i) {
      AttackConfig cfg = acfg;
      cfg.variant = AttackVariant::kWhitebox;
      cfg.seed = mix_seed(plan.seed, kWhiteboxSalt, i);
      const auto r = attack_sequence(base, base, targets[i], cfg);
      if (r.evaded) wb_set.push_back(r.perturbed);
    }
    return 0;
  });
  stage("blackbox attack", [&] {
    for (size_t i = 0; i < targets.size(); ++i) {
      AttackConfig cfg = acfg;
      cfg.variant = AttackVariant::kBlackbox;
      cfg.seed = mix_seed(plan.seed, kBlackboxSalt, i);
      const auto r = attack_sequence(base, substitute, targets[i], cfg);
      if (r.evaded) bb_set.push_back(r.perturbed);
    }
    return 0;
  });
  std::vector<std::vector<TokenSeq>> random_sets(static_cast<size_t>(plan.random_seeds));
  stage("random attack", [&] {
    for (int32_t s = 0; s < plan.random_seeds; ++s) {
      const uint64_t run_seed = mix_seed(plan.seed, kRandomSalt, static_cast<uint64_t>(s));
      for (size_t i = 0; i < targets.size(); ++i) {
        AttackConfig cfg = acfg;
        cfg.variant = AttackVariant::kRandom;
        cfg.seed = mix_seed(run_seed, i);
        const auto r = attack_random(base, targets[i], cfg);
        if (r.evaded) random_sets[static_cast<size_t>(s)].push_back(r.perturbed);
      }
    }
    return 0;
  });
  report.whitebox_set = wb_set.size();
  report.blackbox_set = bb_set.size();
  for (const auto& set : random_sets) report.random_sets.push_back(set.size());

  std::vector<BuiltDefense> defenses;
  for (const auto& id : plan.defenses) {
    defenses.push_back(stage(("defense " + id).c_str(), [&] {
      return build_defense(id, plan, base, substitute, model_cfg, train_cfg, synth.train);
    }));
  }

  // Best adaptive attack per defense; same denominator rule as above.
  std::vector<std::vector<TokenSeq>> adaptive_sets(defenses.size());
  for (size_t d = 0; d < defenses.size(); ++d) {
    stage(("adaptive attack " + defenses[d].id).c_str(), [&] {
      const uint64_t run_seed = mix_seed(plan.seed, kAdaptiveSalt, d);
      for (size_t i = 0; i < targets.size(); ++i) {
        AttackConfig cfg = acfg;
        cfg.adaptive_target = defenses[d].id;
        cfg.seed = mix_seed(run_seed, i);
        const auto r = adaptive_attack(defenses[d].id, defenses[d].system, targets[i], cfg);
        if (base.classify_sequence(r.perturbed).label == Label::kBenign) {
          adaptive_sets[d].push_back(r.perturbed);
        }
      }
      return 0;
    });
  }

  const auto score = [&](const Defense& defense, const std::vector<TokenSeq>& adaptive_set,
                         double train_seconds) {
    DefenseRow row;
    row.defense = defense.id();
    row.whitebox_recall = recall_or_zero(defense, wb_set);
    row.blackbox_recall = recall_or_zero(defense, bb_set);
    double random_sum = 0.0;
    int32_t random_runs = 0;
    for (const auto& set : random_sets) {
      const double recall = recall_or_zero(defense, set);
      row.random_recalls.push_back(recall);
      if (!set.empty()) {
        random_sum += recall;
        ++random_runs;
      }
    }
    row.random_recall = random_runs == 0 ? 0.0 : random_sum / random_runs;
    row.adaptive_recall = recall_or_zero(defense, adaptive_set);
    row.adaptive_set = adaptive_set.size();
    row.train_overhead_s = train_seconds;
    const auto start = Clock::now();
    const auto stats = defended_accuracy(defense, synth.test);
    row.inference_overhead_s = seconds_since(start);
    row.clean_accuracy = 100.0 * stats.accuracy;
    row.fpr = 100.0 * stats.fpr;
    return row;
  };

  stage("report", [&] {
    // The baseline row's adaptive column reuses the white-box set: with no
    // defense there is nothing to adapt to, and the result is 0 either way.
    const NullDefense none(base);
    report.rows.push_back(score(none, wb_set, 0.0));
    for (size_t d = 0; d < defenses.size(); ++d) {
      report.rows.push_back(
          score(*defenses[d].defense, adaptive_sets[d], defenses[d].train_seconds));
    }
    return 0;
  });

  stage("artifacts", [&] {
    if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
    std::ofstream csv_out(csv_path);
    if (!csv_out) throw std::runtime_error("cannot write " + csv_path.string());
    csv_out << report_csv(report, plan.csv_timings);

    json rows = json::array();
    for (const auto& row : report.rows) {
      rows.push_back({{"defense", row.defense},
                      {"adaptive_recall", row.adaptive_recall},
                      {"whitebox_recall", row.whitebox_recall},
                      {"blackbox_recall", row.blackbox_recall},
                      {"random_recall", row.random_recall},
                      {"random_recalls", row.random_recalls},
                      {"adaptive_set", row.adaptive_set},
                      {"clean_accuracy", row.clean_accuracy},
                      {"fpr", row.fpr},
                      {"train_overhead_s", row.train_overhead_s},
                      {"inference_overhead_s", row.inference_overhead_s}});
    }
    const json meta{
        {"plan", plan_to_json(plan)},
        {"denominator_rule", "attack outputs that evade the undefended classifier"},
        {"attacked", report.attacked},
        {"denominators",
         {{"whitebox", report.whitebox_set},
          {"blackbox", report.blackbox_set},
          {"random", report.random_sets}}},
        {"baseline",
         {{"train_seconds", report.baseline_train_s},
          {"accuracy", report.baseline_accuracy},
          {"fpr", report.baseline_fpr}}},
        {"rows", rows},
        {"csv", csv_path.filename().string()}};
    std::ofstream meta_out(csv_path.string() + ".meta.json");
    if (!meta_out) throw std::runtime_error("cannot write sidecar for " + csv_path.string());
    meta_out << meta.dump(2) << "\n";
    return 0;
  });

  return report;
}

}  // namespace seqdef
