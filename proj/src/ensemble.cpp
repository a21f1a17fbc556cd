#include "seqdef/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "seqdef/rng.hpp"

namespace seqdef {
namespace {

using nlohmann::json;

// Seed-derivation salts. Member salts combine the ensemble seed with the
// member (or pool) index so recipes are independent substreams.
constexpr uint64_t kInitSalt = 0x31;
constexpr uint64_t kTrainSalt = 0x32;
constexpr uint64_t kBagSalt = 0x33;
constexpr uint64_t kPoolSalt = 0x34;
constexpr uint64_t kSelectSalt = 0x41;

std::vector<int32_t> resolve_offsets(const EnsembleConfig& config, int32_t window) {
  if (!variant_uses_offsets(config.variant)) {
    if (!config.offsets.empty()) {
      throw std::invalid_argument("offsets are only valid for subsequence variants");
    }
    return std::vector<int32_t>(static_cast<size_t>(config.size), 0);
  }
  if (config.offsets.empty()) {
    const int32_t stride = (window + 13) / 14;
    std::vector<int32_t> offsets(static_cast<size_t>(config.size));
    for (int32_t k = 0; k < config.size; ++k) offsets[static_cast<size_t>(k)] = k * stride;
    return offsets;
  }
  if (config.offsets.size() != static_cast<size_t>(config.size)) {
    throw std::invalid_argument("offsets must list one entry per member");
  }
  if (config.offsets.front() < 0) throw std::invalid_argument("offsets must be non-negative");
  for (size_t k = 1; k < config.offsets.size(); ++k) {
    if (config.offsets[k] <= config.offsets[k - 1]) {
      throw std::invalid_argument("offsets must be strictly increasing");
    }
  }
  return config.offsets;
}

// Malicious training rows chosen for adversarial replacement, in a seeded
// shuffled order so the white/black alternation is not tied to dataset order.
std::vector<size_t> select_malicious_rows(const Dataset& train, double fraction, uint64_t seed) {
  std::vector<size_t> malicious;
  for (size_t row = 0; row < train.samples.size(); ++row) {
    if (train.samples[row].label == Label::kMalicious) malicious.push_back(row);
  }
  Rng rng(seed);
  rng.shuffle(malicious);
  const auto count = static_cast<size_t>(fraction * static_cast<double>(malicious.size()));
  malicious.resize(count);
  return malicious;
}

struct PoolOutcome {
  std::vector<TokenSeq> perturbed;  // parallel to rows; failures keep the original
  int64_t failures = 0;
};

PoolOutcome attack_rows(const Dataset& train, const std::vector<size_t>& rows,
                        const AdversarialExampleSource& source, const std::string& pool_id) {
  PoolOutcome out;
  out.perturbed.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& seq = train.samples[rows[i]].seq;
    if (source.target->classify_sequence(seq).label != Label::kMalicious) {
      ++out.failures;
      out.perturbed.push_back(seq);
      continue;
    }
    out.perturbed.push_back(source.perturb(seq, i).perturbed);
  }
  if (!rows.empty() && out.failures * 10 > static_cast<int64_t>(rows.size()) * 9) {
    std::cerr << "warning: " << pool_id << ": " << out.failures << " of " << rows.size()
              << " attacks could not start (target already benign); keeping originals\n";
  }
  return out;
}

Dataset apply_pool(Dataset base, const std::vector<size_t>& rows, const PoolOutcome& pool) {
  for (size_t i = 0; i < rows.size(); ++i) base.samples[rows[i]].seq = pool.perturbed[i];
  return base;
}

// The member's training view of one sequence: for subsequence members, the
// declared window-length range starting at the offset; otherwise unchanged.
TokenSeq training_view(const TokenSeq& seq, int32_t offset, int32_t window) {
  const auto begin = std::min(static_cast<size_t>(offset), seq.size());
  const auto end = std::min(begin + static_cast<size_t>(window), seq.size());
  return TokenSeq(std::vector<int32_t>(seq.tokens.begin() + static_cast<int64_t>(begin),
                                       seq.tokens.begin() + static_cast<int64_t>(end)));
}

Dataset member_training_set(const Dataset& base, const MemberRecipe& recipe, bool bagged,
                            bool sliced, int32_t window) {
  std::vector<size_t> rows;
  if (bagged) {
    rows = recipe.bag;
  } else {
    rows.resize(base.samples.size());
    std::iota(rows.begin(), rows.end(), size_t{0});
  }
  Dataset out;
  out.samples.reserve(rows.size());
  size_t empty_views = 0;
  for (const size_t row : rows) {
    auto sample = base.samples[row];
    if (sliced) {
      sample.seq = training_view(sample.seq, recipe.offset, window);
      if (sample.seq.size() == 0) ++empty_views;
    }
    out.samples.push_back(std::move(sample));
  }
  if (empty_views > 0) {
    std::cerr << "warning: member at offset " << recipe.offset << " sees " << empty_views
              << " empty sequences (shorter than the offset); they train as padding\n";
  }
  return out;
}

DefenseDecision to_decision(const EnsemblePrediction& prediction) {
  return {prediction.label, false, prediction.vote};
}

json recipe_to_json(const MemberRecipe& recipe, const std::string& checkpoint) {
  return json{{"checkpoint", checkpoint}, {"offset", recipe.offset},
              {"init_seed", recipe.init_seed}, {"train_seed", recipe.train_seed},
              {"bagging_seed", recipe.bagging_seed}, {"bag", recipe.bag},
              {"pool_id", recipe.pool_id}};
}

}  // namespace

std::string ensemble_variant_name(EnsembleVariant variant) {
  switch (variant) {
    case EnsembleVariant::kRegular: return "regular";
    case EnsembleVariant::kSubsequence: return "subsequence";
    case EnsembleVariant::kBagging: return "bagging";
    case EnsembleVariant::kBaggingSubsequence: return "bagging_subsequence";
    case EnsembleVariant::kAdversarial: return "adversarial";
    case EnsembleVariant::kAdversarialSubsequence: return "adversarial_subsequence";
  }
  throw std::invalid_argument("unknown ensemble variant");
}

EnsembleVariant parse_ensemble_variant(const std::string& name) {
  if (name == "regular") return EnsembleVariant::kRegular;
  if (name == "subsequence") return EnsembleVariant::kSubsequence;
  if (name == "bagging") return EnsembleVariant::kBagging;
  if (name == "bagging_subsequence") return EnsembleVariant::kBaggingSubsequence;
  if (name == "adversarial") return EnsembleVariant::kAdversarial;
  if (name == "adversarial_subsequence") return EnsembleVariant::kAdversarialSubsequence;
  throw std::invalid_argument("unknown ensemble variant: " + name);
}

bool variant_uses_offsets(EnsembleVariant variant) {
  return variant == EnsembleVariant::kSubsequence ||
         variant == EnsembleVariant::kBaggingSubsequence ||
         variant == EnsembleVariant::kAdversarialSubsequence;
}

bool variant_uses_bagging(EnsembleVariant variant) {
  return variant == EnsembleVariant::kBagging ||
         variant == EnsembleVariant::kBaggingSubsequence;
}

bool variant_uses_adversarial(EnsembleVariant variant) {
  return variant == EnsembleVariant::kAdversarial ||
         variant == EnsembleVariant::kAdversarialSubsequence;
}

std::string voting_name(Voting voting) {
  return voting == Voting::kSoft ? "soft" : "hard";
}

Voting parse_voting(const std::string& name) {
  if (name == "soft") return Voting::kSoft;
  if (name == "hard") return Voting::kHard;
  throw std::invalid_argument("unknown voting mode: " + name);
}

Ensemble train_ensemble(const EnsembleConfig& config, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, const Dataset& train,
                        const AdversarialExampleSource* source) {
  if (config.size < 1) throw std::invalid_argument("ensemble size must be at least 1");
  if (config.adversarial_fraction < 0.0 || config.adversarial_fraction > 1.0) {
    throw std::invalid_argument("adversarial_fraction must be in [0, 1]");
  }
  if (train.samples.empty()) throw std::invalid_argument("training set is empty");
  const bool adversarial = variant_uses_adversarial(config.variant);
  if (adversarial && (source == nullptr || source->target == nullptr)) {
    throw std::invalid_argument("adversarial ensembles need an attack source");
  }
  const auto offsets = resolve_offsets(config, model_cfg.window);
  const bool bagged = variant_uses_bagging(config.variant);
  const bool sliced = variant_uses_offsets(config.variant);

  Ensemble out;
  out.config = config;
  out.config.offsets = offsets;

  std::vector<PoolOutcome> pools;
  if (adversarial) {
    out.replaced_rows = select_malicious_rows(train, config.adversarial_fraction,
                                              mix_seed(config.seed, kSelectSalt));
    const size_t pool_count = config.per_member_pools ? static_cast<size_t>(config.size) : 1;
    for (size_t p = 0; p < pool_count; ++p) {
      AdversarialExampleSource pool_source = *source;
      pool_source.config.seed = mix_seed(source->config.seed, kPoolSalt, p);
      pools.push_back(attack_rows(train, out.replaced_rows, pool_source,
                                  "pool-" + std::to_string(p)));
    }
  }

  for (int32_t k = 0; k < config.size; ++k) {
    MemberRecipe recipe;
    recipe.offset = offsets[static_cast<size_t>(k)];
    recipe.init_seed = mix_seed(config.seed, kInitSalt, static_cast<uint64_t>(k));
    recipe.train_seed = mix_seed(config.seed, kTrainSalt, static_cast<uint64_t>(k));
    if (bagged) {
      recipe.bagging_seed = mix_seed(config.seed, kBagSalt, static_cast<uint64_t>(k));
      Rng rng(recipe.bagging_seed);
      recipe.bag.resize(train.samples.size());
      for (auto& row : recipe.bag) row = rng.below(train.samples.size());
    }

    const Dataset* base = &train;
    Dataset replaced;
    if (adversarial) {
      const size_t p = config.per_member_pools ? static_cast<size_t>(k) : 0;
      recipe.pool_id = "pool-" + std::to_string(p);
      replaced = apply_pool(train, out.replaced_rows, pools[p]);
      base = &replaced;
    }
    const Dataset member_set = member_training_set(*base, recipe, bagged, sliced,
                                                   model_cfg.window);

    ModelConfig mc = model_cfg;
    mc.seed = recipe.init_seed;
    TrainConfig tc = train_cfg;
    tc.seed = recipe.train_seed;
    auto model = RnnClassifier::init(mc);
    model.fit(member_set, tc);
    out.members.push_back(std::move(model));
    out.recipes.push_back(std::move(recipe));
  }
  return out;
}

TokenSeq member_view(const TokenSeq& seq, int32_t offset) {
  if (offset < 0) throw std::invalid_argument("member offset must be non-negative");
  if (static_cast<size_t>(offset) >= seq.size()) return TokenSeq{};
  return TokenSeq(std::vector<int32_t>(seq.tokens.begin() + offset, seq.tokens.end()));
}

EnsemblePrediction ensemble_predict(const Ensemble& ensemble, const TokenSeq& seq,
                                    Voting voting) {
  if (ensemble.members.empty() || ensemble.members.size() != ensemble.recipes.size()) {
    throw std::invalid_argument("ensemble has no trained members");
  }
  EnsemblePrediction out;
  for (size_t k = 0; k < ensemble.members.size(); ++k) {
    const auto view = member_view(seq, ensemble.recipes[k].offset);
    const auto decision = ensemble.members[k].classify_sequence(view);
    out.member_confidences.push_back(decision.confidence);
    out.member_labels.push_back(decision.label);
  }
  const auto size = static_cast<double>(ensemble.members.size());
  if (voting == Voting::kSoft) {
    double sum = 0.0;
    for (const double c : out.member_confidences) sum += c;
    out.vote = sum / size;
    out.label = out.vote >= 0.5 ? Label::kMalicious : Label::kBenign;
  } else {
    const auto malicious = std::count(out.member_labels.begin(), out.member_labels.end(),
                                      Label::kMalicious);
    out.vote = static_cast<double>(malicious) / size;
    // strict majority; an even split fails closed
    out.label = 2 * malicious >= static_cast<int64_t>(ensemble.members.size())
                    ? Label::kMalicious
                    : Label::kBenign;
  }
  return out;
}

EnsemblePrediction ensemble_predict(const Ensemble& ensemble, const TokenSeq& seq) {
  return ensemble_predict(ensemble, seq, ensemble.config.voting);
}

std::vector<MemberView> member_views(const Ensemble& ensemble) {
  std::vector<MemberView> views;
  views.reserve(ensemble.members.size());
  for (size_t k = 0; k < ensemble.members.size(); ++k) {
    views.push_back({&ensemble.members[k], ensemble.recipes[k].offset});
  }
  return views;
}

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir) {
  if (ensemble.members.size() != ensemble.recipes.size()) {
    throw std::invalid_argument("ensemble members and recipes disagree");
  }
  std::filesystem::create_directories(dir);
  json members = json::array();
  for (size_t k = 0; k < ensemble.members.size(); ++k) {
    const std::string checkpoint = "member-" + std::to_string(k) + ".bin";
    ensemble.members[k].save(dir / checkpoint);
    members.push_back(recipe_to_json(ensemble.recipes[k], checkpoint));
  }
  const json manifest{{"format", "seqdef-ensemble"},
                      {"version", 1},
                      {"variant", ensemble_variant_name(ensemble.config.variant)},
                      {"size", ensemble.config.size},
                      {"voting", voting_name(ensemble.config.voting)},
                      {"adversarial_fraction", ensemble.config.adversarial_fraction},
                      {"per_member_pools", ensemble.config.per_member_pools},
                      {"seed", ensemble.config.seed},
                      {"replaced_rows", ensemble.replaced_rows},
                      {"members", members}};
  std::ofstream out(dir / "ensemble.json");
  if (!out) throw std::runtime_error("cannot write ensemble manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Ensemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream in(dir / "ensemble.json");
  if (!in) throw std::runtime_error("cannot open ensemble manifest in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("ensemble manifest parse error: " + std::string(e.what()));
  }
  try {
    if (manifest.at("format").get<std::string>() != "seqdef-ensemble" ||
        manifest.at("version").get<int>() != 1) {
      throw std::runtime_error("not a seqdef ensemble manifest");
    }
    Ensemble out;
    out.config.variant = parse_ensemble_variant(manifest.at("variant").get<std::string>());
    out.config.size = manifest.at("size").get<int32_t>();
    out.config.voting = parse_voting(manifest.at("voting").get<std::string>());
    out.config.adversarial_fraction = manifest.at("adversarial_fraction").get<double>();
    out.config.per_member_pools = manifest.at("per_member_pools").get<bool>();
    out.config.seed = manifest.at("seed").get<uint64_t>();
    out.replaced_rows = manifest.at("replaced_rows").get<std::vector<size_t>>();
    const auto& members = manifest.at("members");
    if (!members.is_array() ||
        members.size() != static_cast<size_t>(out.config.size)) {
      throw std::runtime_error("ensemble manifest member count mismatch");
    }
    for (const auto& entry : members) {
      MemberRecipe recipe;
      recipe.offset = entry.at("offset").get<int32_t>();
      recipe.init_seed = entry.at("init_seed").get<uint64_t>();
      recipe.train_seed = entry.at("train_seed").get<uint64_t>();
      recipe.bagging_seed = entry.at("bagging_seed").get<uint64_t>();
      recipe.bag = entry.at("bag").get<std::vector<size_t>>();
      recipe.pool_id = entry.at("pool_id").get<std::string>();
      out.members.push_back(RnnClassifier::load(dir / entry.at("checkpoint").get<std::string>()));
      out.recipes.push_back(std::move(recipe));
    }
    if (variant_uses_offsets(out.config.variant)) {
      for (const auto& recipe : out.recipes) out.config.offsets.push_back(recipe.offset);
    }
    return out;
  } catch (const json::exception& e) {
    throw std::runtime_error("ensemble manifest field error: " + std::string(e.what()));
  }
}

AdvTrainResult adversarial_training(const Dataset& train, const AdversarialExampleSource& source,
                                    double fraction, const ModelConfig& model_cfg,
                                    const TrainConfig& train_cfg) {
  if (fraction < 0.0 || fraction > 1.0) {
    throw std::invalid_argument("adversarial fraction must be in [0, 1]");
  }
  if (source.target == nullptr) throw std::invalid_argument("attack source has no target");
  if (train.samples.empty()) throw std::invalid_argument("training set is empty");

  const auto rows = select_malicious_rows(train, fraction, mix_seed(train_cfg.seed, kSelectSalt));
  const auto pool = attack_rows(train, rows, source, "adversarial-training");
  const auto augmented = apply_pool(train, rows, pool);

  AdvTrainResult out{RnnClassifier::init(model_cfg), {}, pool.failures};
  out.model.fit(augmented, train_cfg);
  for (const size_t row : rows) out.replaced_ids.push_back(train.samples[row].id);
  return out;
}

EnsembleDefense::EnsembleDefense(const Ensemble& ensemble) : ensemble_(&ensemble) {
  if (ensemble.members.empty()) throw std::invalid_argument("ensemble has no members");
}

std::string EnsembleDefense::id() const { return "ensemble"; }

DefenseDecision EnsembleDefense::decide(const TokenSeq& seq) const {
  return to_decision(ensemble_predict(*ensemble_, seq));
}

AdvTrainDefense::AdvTrainDefense(const RnnClassifier& retrained) : model_(&retrained) {}

std::string AdvTrainDefense::id() const { return "advtrain"; }

DefenseDecision AdvTrainDefense::decide(const TokenSeq& seq) const {
  const auto decision = model_->classify_sequence(seq);
  return {decision.label, false, decision.confidence};
}

}  // namespace seqdef
