#include "seqdef/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqdef/attack.hpp"
#include "seqdef/data.hpp"
#include "seqdef/embed.hpp"
#include "seqdef/ensemble.hpp"
#include "seqdef/harness.hpp"
#include "seqdef/model.hpp"
#include "seqdef/proximity.hpp"
#include "seqdef/rng.hpp"
#include "seqdef/signatures.hpp"
#include "seqdef/squeeze.hpp"

namespace seqdef {
namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Bad flag combinations, malformed config files and the like: exit status 1,
// as opposed to runtime failures (exit status 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Seed substreams, shared with the experiment harness so a CLI run with the
// same seed produces the same artifacts as the corresponding eval stage.
constexpr uint64_t kDataSalt = 0x80;
constexpr uint64_t kSubstituteSalt = 0x81;
constexpr uint64_t kEmbedSalt = 0x82;
constexpr uint64_t kBenignGenSalt = 0x83;
constexpr uint64_t kMaliciousGenSalt = 0x84;
constexpr uint64_t kEnsembleSalt = 0x85;
constexpr uint64_t kModelSalt = 0x88;
constexpr uint64_t kTrainSalt = 0x89;
constexpr uint64_t kWhiteboxSalt = 0x91;
constexpr uint64_t kBlackboxSalt = 0x92;
constexpr uint64_t kRandomSalt = 0x93;

struct Globals {
  std::string workdir = ".";
  std::string config;
  uint64_t seed = 0;
  int32_t jobs = 1;
  bool verbose = false;
};

fs::path resolve(const Globals& g, const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() ? p : fs::path(g.workdir) / p;
}

void chat(const Globals& g, const std::string& line) {
  if (g.verbose) std::cerr << line << "\n";
}

// --- flat key = value files ---------------------------------------------

struct KeyValue {
  std::string key;
  std::string value;
  int line = 0;
};

std::string trim(const std::string& text) {
  const auto a = text.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = text.find_last_not_of(" \t\r");
  return text.substr(a, b - a + 1);
}

std::vector<KeyValue> read_flat_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw UsageError("cannot read " + path.string());
  std::vector<KeyValue> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + " line " + std::to_string(number) +
                       ": expected key = value");
    }
    KeyValue kv;
    kv.key = trim(text.substr(0, eq));
    kv.value = trim(text.substr(eq + 1));
    kv.line = number;
    if (kv.key.empty()) {
      throw UsageError(path.string() + " line " + std::to_string(number) + ": empty key");
    }
    out.push_back(std::move(kv));
  }
  return out;
}

int64_t to_int(const std::string& value, const std::string& what) {
  size_t used = 0;
  int64_t parsed = 0;
  try {
    parsed = std::stoll(value, &used);
  } catch (const std::exception&) {
    throw UsageError(what + ": not an integer: \"" + value + "\"");
  }
  if (used != value.size()) throw UsageError(what + ": not an integer: \"" + value + "\"");
  return parsed;
}

uint64_t to_seed(const std::string& value, const std::string& what) {
  size_t used = 0;
  uint64_t parsed = 0;
  try {
    parsed = std::stoull(value, &used);
  } catch (const std::exception&) {
    throw UsageError(what + ": not a seed: \"" + value + "\"");
  }
  if (used != value.size()) throw UsageError(what + ": not a seed: \"" + value + "\"");
  return parsed;
}

double to_real(const std::string& value, const std::string& what) {
  size_t used = 0;
  double parsed = 0.0;
  try {
    parsed = std::stod(value, &used);
  } catch (const std::exception&) {
    throw UsageError(what + ": not a number: \"" + value + "\"");
  }
  if (used != value.size()) throw UsageError(what + ": not a number: \"" + value + "\"");
  return parsed;
}

bool to_bool(const std::string& value, const std::string& what) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw UsageError(what + ": not a boolean: \"" + value + "\"");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream stream(value);
  std::string item;
  while (std::getline(stream, item, ',')) {
    const auto text = trim(item);
    if (!text.empty()) out.push_back(text);
  }
  return out;
}

std::vector<int32_t> split_ints(const std::string& value, const std::string& what) {
  std::vector<int32_t> out;
  for (const auto& item : split_list(value)) {
    out.push_back(static_cast<int32_t>(to_int(item, what)));
  }
  return out;
}

// Config-file defaults for the invoked subcommand: each key names a long
// option; the setter applies the value unless the flag was already given on
// the command line (flags override file values).
struct ConfigBinding {
  CLI::App* scope = nullptr;
  std::string flag;
  std::function<void(const std::string&)> set;
};

class ConfigMap {
 public:
  void bind(CLI::App* scope, const std::string& flag,
            std::function<void(const std::string&)> set) {
    const auto key = flag.substr(2);  // strip the leading dashes
    map_[key] = ConfigBinding{scope, flag, std::move(set)};
  }

  void apply(const fs::path& path) const {
    for (const auto& kv : read_flat_file(path)) {
      const auto hit = map_.find(kv.key);
      if (hit == map_.end()) {
        throw UsageError(path.string() + " line " + std::to_string(kv.line) +
                         ": unknown key \"" + kv.key + "\"");
      }
      const auto& binding = hit->second;
      if (binding.scope->count(binding.flag) > 0) continue;  // flag wins
      binding.set(kv.value);
    }
  }

 private:
  std::map<std::string, ConfigBinding> map_;
};

// --- artifact metadata ----------------------------------------------------

void write_meta(const fs::path& artifact, const ordered_json& meta) {
  const auto path = artifact.string() + ".meta.json";
  std::ofstream out(path);
  if (!out.good()) throw std::runtime_error("cannot write " + path);
  out << meta.dump(2) << "\n";
}

ordered_json meta_head(const char* command, const Globals& g, uint64_t seed) {
  ordered_json meta;
  meta["command"] = command;
  meta["seed"] = seed;
  meta["workdir"] = g.workdir;
  meta["jobs"] = g.jobs;
  return meta;
}

// --- synth -----------------------------------------------------------------

struct SynthOptions {
  std::string out;
  int32_t vocab_size = 50;
  int32_t len_min = 40;
  int32_t len_max = 80;
  double overlap = 0.3;
  SplitCounts counts{1000, 1000, 0, 0, 250, 250, 35, 35};
};

void run_synth(const Globals& g, const SynthOptions& o, uint64_t seed) {
  const auto spec =
      SynthSpec::make(o.vocab_size, o.len_min, o.len_max, o.overlap, mix_seed(seed, kDataSalt));
  const auto data = generate_synthetic(spec, o.counts);
  const auto dir = resolve(g, o.out);
  fs::create_directories(dir);
  save_vocabulary(data.vocab, dir / "vocab.txt");
  ordered_json files = ordered_json::array();
  files.push_back("vocab.txt");
  const std::pair<const char*, const Dataset*> splits[] = {{"train", &data.train},
                                                           {"validation", &data.validation},
                                                           {"test", &data.test},
                                                           {"holdout", &data.holdout}};
  for (const auto& [name, split] : splits) {
    if (split->samples.empty()) continue;
    const auto file = std::string(name) + ".jsonl";
    save_dataset(*split, data.vocab, dir / file);
    files.push_back(file);
  }
  auto meta = meta_head("synth", g, seed);
  meta["vocab_size"] = o.vocab_size;
  meta["len_min"] = o.len_min;
  meta["len_max"] = o.len_max;
  meta["overlap"] = o.overlap;
  meta["counts"] = {{"train_benign", o.counts.train_benign},
                    {"train_malicious", o.counts.train_malicious},
                    {"validation_benign", o.counts.validation_benign},
                    {"validation_malicious", o.counts.validation_malicious},
                    {"test_benign", o.counts.test_benign},
                    {"test_malicious", o.counts.test_malicious},
                    {"holdout_benign", o.counts.holdout_benign},
                    {"holdout_malicious", o.counts.holdout_malicious}};
  meta["files"] = files;
  write_meta(dir / "synth", meta);
  std::cout << "wrote " << dir.string() << " (train " << data.train.size() << ", validation "
            << data.validation.size() << ", test " << data.test.size() << ", holdout "
            << data.holdout.size() << ")\n";
}

// --- train -----------------------------------------------------------------

struct TrainOptions {
  std::string kind = "classifier";
  std::string vocab;
  std::string data;
  std::string out;
  size_t min_len = 0;
  // classifier
  std::string cell = "lstm";
  int32_t hidden = 128;
  int32_t window = 140;
  double dropout = 0.2;
  int32_t depth = 1;
  bool bidirectional = false;
  std::string optimizer = "adam";
  int32_t epochs = 10;
  int32_t batch = 32;
  double learning_rate = 0.0;
  // substitute
  std::string target;
  // ensemble
  std::string variant = "regular";
  int32_t size = 9;
  std::string voting = "soft";
  std::string offsets;
  // generator
  int32_t order = 2;
  double smoothing = 0.1;
  std::string klass = "malicious";
};

void run_train(const Globals& g, const TrainOptions& o, uint64_t seed) {
  // flag validation comes before any file access so bad invocations stay
  // usage errors even when the paths are wrong too
  if (o.kind == "substitute" && o.target.empty()) {
    throw UsageError("train --kind substitute needs --target");
  }
  if (o.kind == "ensemble" && variant_uses_adversarial(parse_ensemble_variant(o.variant))) {
    throw UsageError("adversarial ensemble variants need the attack pipeline; use eval");
  }
  const auto vocab = load_vocabulary(resolve(g, o.vocab));
  auto data = load_dataset(resolve(g, o.data), vocab);
  if (o.min_len > 0) data = filter_min_length(data, o.min_len);
  const auto out = resolve(g, o.out);

  ModelConfig mc;
  mc.cell = parse_cell(o.cell);
  mc.hidden_units = o.hidden;
  mc.window = o.window;
  mc.vocab_width = vocab.width();
  mc.dropout = o.dropout;
  mc.depth = o.depth;
  mc.bidirectional = o.bidirectional;
  mc.seed = mix_seed(seed, kModelSalt);
  TrainConfig tc;
  tc.optimizer = parse_optimizer(o.optimizer);
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.learning_rate = o.learning_rate;
  tc.seed = mix_seed(seed, kTrainSalt);

  auto meta = meta_head("train", g, seed);
  meta["kind"] = o.kind;
  meta["vocab"] = o.vocab;
  meta["data"] = o.data;
  meta["min_len"] = o.min_len;

  if (o.kind == "classifier") {
    auto model = RnnClassifier::init(mc);
    const auto losses = model.fit(data, tc);
    model.save(out);
    meta["cell"] = o.cell;
    meta["hidden_units"] = o.hidden;
    meta["window"] = o.window;
    meta["dropout"] = o.dropout;
    meta["depth"] = o.depth;
    meta["bidirectional"] = o.bidirectional;
    meta["optimizer"] = o.optimizer;
    meta["epochs"] = o.epochs;
    meta["batch_size"] = o.batch;
    meta["learning_rate"] = o.learning_rate;
    meta["final_loss"] = losses.empty() ? 0.0 : losses.back();
    write_meta(out, meta);
    std::cout << "trained " << o.cell << " classifier on " << data.size() << " samples, final loss "
              << (losses.empty() ? 0.0 : losses.back()) << ", saved " << out.string() << "\n";
  } else if (o.kind == "substitute") {
    const auto target = RnnClassifier::load(resolve(g, o.target));
    SubstituteSpec spec;
    spec.hidden_units = o.hidden;
    spec.epochs = o.epochs;
    spec.seed = mix_seed(seed, kSubstituteSalt);
    const auto substitute = train_substitute(target, data, spec);
    substitute.save(out);
    meta["target"] = o.target;
    meta["hidden_units"] = o.hidden;
    meta["epochs"] = o.epochs;
    write_meta(out, meta);
    std::cout << "trained substitute on " << data.size() << " target-labeled samples, saved "
              << out.string() << "\n";
  } else if (o.kind == "ensemble") {
    EnsembleConfig ec;
    ec.variant = parse_ensemble_variant(o.variant);
    ec.size = o.size;
    ec.voting = parse_voting(o.voting);
    if (!o.offsets.empty()) ec.offsets = split_ints(o.offsets, "--offsets");
    ec.seed = mix_seed(seed, kEnsembleSalt);
    const auto ensemble = train_ensemble(ec, mc, tc, data, nullptr);
    fs::create_directories(out);
    save_ensemble(ensemble, out);
    meta["variant"] = o.variant;
    meta["size"] = o.size;
    meta["voting"] = o.voting;
    meta["offsets"] = o.offsets;
    meta["cell"] = o.cell;
    meta["hidden_units"] = o.hidden;
    meta["window"] = o.window;
    meta["epochs"] = o.epochs;
    write_meta(out / "ensemble.json", meta);
    std::cout << "trained " << o.variant << " ensemble of " << o.size << ", saved " << out.string()
              << "\n";
  } else if (o.kind == "generator") {
    const auto klass = parse_label(o.klass);
    std::vector<TokenSeq> sequences;
    for (const auto& sample : data.samples) {
      if (sample.label == klass) sequences.push_back(sample.seq);
    }
    const auto gen_seed =
        mix_seed(seed, klass == Label::kBenign ? kBenignGenSalt : kMaliciousGenSalt);
    const auto generator =
        train_generator(sequences, vocab.size(), klass, o.order, gen_seed, o.smoothing);
    save_generator(generator, out);
    meta["class"] = o.klass;
    meta["order"] = o.order;
    meta["smoothing"] = o.smoothing;
    meta["sequences"] = sequences.size();
    write_meta(out, meta);
    std::cout << "trained order-" << o.order << " " << o.klass << " generator on "
              << sequences.size() << " sequences, saved " << out.string() << "\n";
  } else {
    throw UsageError("unknown --kind \"" + o.kind + "\"");
  }
}

// --- embed -----------------------------------------------------------------

struct EmbedOptions {
  std::string vocab;
  std::string data;
  std::string out;
  int32_t radius = 5;
  int32_t dim = 32;
  int32_t iterations = 30;
  double learning_rate = 0.05;
  double x_max = 100.0;
  double alpha = 0.75;
};

void run_embed(const Globals& g, const EmbedOptions& o, uint64_t seed) {
  const auto vocab = load_vocabulary(resolve(g, o.vocab));
  const auto data = load_dataset(resolve(g, o.data), vocab);
  const auto counts = build_cooccurrence(data, vocab.size(), o.radius);
  GloveConfig gc;
  gc.dim = o.dim;
  gc.iterations = o.iterations;
  gc.learning_rate = o.learning_rate;
  gc.x_max = o.x_max;
  gc.alpha = o.alpha;
  gc.seed = mix_seed(seed, kEmbedSalt);
  const auto result = train_embeddings(counts, gc);
  const auto out = resolve(g, o.out);
  save_embedding(result.embedding, out);
  auto meta = meta_head("embed", g, seed);
  meta["vocab"] = o.vocab;
  meta["data"] = o.data;
  meta["radius"] = o.radius;
  meta["dim"] = o.dim;
  meta["iterations"] = o.iterations;
  meta["learning_rate"] = o.learning_rate;
  meta["x_max"] = o.x_max;
  meta["alpha"] = o.alpha;
  meta["final_objective"] =
      result.objective_history.empty() ? 0.0 : result.objective_history.back();
  write_meta(out, meta);
  std::cout << "trained " << o.dim << "-dim embeddings, final objective "
            << (result.objective_history.empty() ? 0.0 : result.objective_history.back())
            << ", saved " << out.string() << "\n";
}

// --- squeeze ---------------------------------------------------------------

struct SqueezeOptions {
  std::string vocab;
  std::string embeddings;
  std::string model;
  std::string data;
  std::string out;
  int32_t target = 25;
};

void run_squeeze(const Globals& g, const SqueezeOptions& o, uint64_t seed) {
  const auto embedding = load_embedding(resolve(g, o.embeddings));
  const auto model = RnnClassifier::load(resolve(g, o.model));
  const auto vocab = load_vocabulary(resolve(g, o.vocab));
  const auto data = load_dataset(resolve(g, o.data), vocab);
  SqueezeDetector detector;
  detector.map = build_squeeze_map(embedding, o.target);
  detector.threshold = calibrate_threshold(detector.map, model, data);
  const auto out = resolve(g, o.out);
  save_squeeze(detector, out);
  auto meta = meta_head("squeeze", g, seed);
  meta["vocab"] = o.vocab;
  meta["embeddings"] = o.embeddings;
  meta["model"] = o.model;
  meta["data"] = o.data;
  meta["target"] = o.target;
  meta["threshold"] = detector.threshold;
  write_meta(out, meta);
  std::cout << "squeezed " << detector.map.vocab_size() << " tokens into " << o.target
            << " groups, threshold " << detector.threshold << ", saved " << out.string() << "\n";
}

// --- attack ----------------------------------------------------------------

struct AttackOptions {
  std::string vocab;
  std::string model;
  std::string substitute;
  std::string data;
  std::string log;
  std::string adv_out;
  std::string variant = "whitebox";
  int32_t samples = 0;  // 0 attacks every eligible sample
  int32_t max_insertions = -1;
};

void run_attack(const Globals& g, const AttackOptions& o, uint64_t seed) {
  const auto variant = parse_variant(o.variant);
  if (variant == AttackVariant::kBlackbox && o.substitute.empty()) {
    throw UsageError("attack --variant blackbox needs --substitute");
  }
  const auto vocab = load_vocabulary(resolve(g, o.vocab));
  const auto target = RnnClassifier::load(resolve(g, o.model));
  std::optional<RnnClassifier> substitute;
  if (!o.substitute.empty()) substitute = RnnClassifier::load(resolve(g, o.substitute));
  const auto data = load_dataset(resolve(g, o.data), vocab);

  std::vector<const LabeledSample*> eligible;
  for (const auto& sample : data.samples) {
    if (sample.label != Label::kMalicious) continue;
    if (target.classify_sequence(sample.seq).label != Label::kMalicious) continue;
    eligible.push_back(&sample);
    if (o.samples > 0 && eligible.size() == static_cast<size_t>(o.samples)) break;
  }

  AttackConfig cfg;
  cfg.n = target.config().window;
  cfg.max_insertions_per_window = o.max_insertions;
  cfg.variant = variant;
  const uint64_t salt = variant == AttackVariant::kWhitebox   ? kWhiteboxSalt
                        : variant == AttackVariant::kBlackbox ? kBlackboxSalt
                                                              : kRandomSalt;

  const auto log_path = resolve(g, o.log);
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path);
  if (!log.good()) throw std::runtime_error("cannot write " + log_path.string());

  Dataset adversarial;
  size_t evaded = 0;
  for (size_t i = 0; i < eligible.size(); ++i) {
    const auto& sample = *eligible[i];
    cfg.seed = mix_seed(seed, salt, i);
    const auto result = variant == AttackVariant::kRandom
                            ? attack_random(target, sample.seq, cfg)
                            : attack_sequence(target, variant == AttackVariant::kWhitebox
                                                          ? target
                                                          : *substitute,
                                              sample.seq, cfg);
    ordered_json line;
    line["id"] = sample.id;
    line["variant"] = variant_name(variant);
    line["evaded"] = result.evaded;
    auto insertions = ordered_json::array();
    for (const auto& ins : result.insertions) {
      insertions.push_back({ins.window, ins.position, ins.token});
    }
    line["insertions"] = std::move(insertions);
    line["queries"] = result.queries;
    log << line.dump() << "\n";
    if (result.evaded) {
      ++evaded;
      adversarial.samples.push_back({sample.id, Label::kMalicious, result.perturbed});
    }
    chat(g, "attacked " + sample.id + (result.evaded ? ": evaded" : ": held"));
  }
  log.close();

  auto meta = meta_head("attack", g, seed);
  meta["vocab"] = o.vocab;
  meta["model"] = o.model;
  meta["substitute"] = o.substitute;
  meta["data"] = o.data;
  meta["variant"] = o.variant;
  meta["samples"] = o.samples;
  meta["max_insertions"] = o.max_insertions;
  meta["attacked"] = eligible.size();
  meta["evaded"] = evaded;
  write_meta(log_path, meta);
  if (!o.adv_out.empty()) {
    save_dataset(adversarial, vocab, resolve(g, o.adv_out));
  }
  std::cout << "attacked " << eligible.size() << " samples, evaded " << evaded;
  if (!eligible.empty()) {
    std::cout << " (" << (100.0 * static_cast<double>(evaded) / eligible.size()) << "%)";
  }
  std::cout << ", log " << log_path.string() << "\n";
}

// --- signatures --------------------------------------------------------------

struct SignatureOptions {
  std::string vocab;
  std::string adv;
  std::string benign;
  std::string sigs;
  std::string data;
  std::string out;
  int32_t n = 5;
  double threshold_p = 1.0;
  int32_t threshold_sigs = 1;
};

void run_signatures(const Globals& g, const SignatureOptions& o, uint64_t seed) {
  const auto vocab = load_vocabulary(resolve(g, o.vocab));
  if (!o.adv.empty()) {
    if (o.benign.empty() || o.out.empty()) {
      throw UsageError("signature mining needs --adv, --benign and --out");
    }
    const auto adv_data = load_dataset(resolve(g, o.adv), vocab);
    const auto benign_data = load_dataset(resolve(g, o.benign), vocab);
    std::vector<TokenSeq> x_adv;
    for (const auto& sample : adv_data.samples) x_adv.push_back(sample.seq);
    std::vector<TokenSeq> x_benign;
    for (const auto& sample : benign_data.samples) {
      if (sample.label == Label::kBenign) x_benign.push_back(sample.seq);
    }
    SignatureConfig cfg;
    cfg.n = o.n;
    cfg.threshold_p = o.threshold_p;
    cfg.threshold_sigs = o.threshold_sigs;
    const auto set = build_signature_set(x_adv, x_benign, cfg);
    const auto out = resolve(g, o.out);
    save_signatures(set, vocab, out);
    auto meta = meta_head("signatures", g, seed);
    meta["vocab"] = o.vocab;
    meta["adv"] = o.adv;
    meta["benign"] = o.benign;
    meta["n"] = o.n;
    meta["threshold_p"] = o.threshold_p;
    meta["threshold_sigs"] = o.threshold_sigs;
    meta["signatures"] = set.signatures.size();
    write_meta(out, meta);
    std::cout << "mined " << set.signatures.size() << " signatures from " << x_adv.size()
              << " adversarial and " << x_benign.size() << " benign samples, saved "
              << out.string() << "\n";
    return;
  }
  if (o.sigs.empty() || o.data.empty()) {
    throw UsageError("pass --adv/--benign/--out to mine or --sigs/--data to scan");
  }
  const auto set = load_signatures(resolve(g, o.sigs), vocab);
  const auto data = load_dataset(resolve(g, o.data), vocab);
  std::ostringstream lines;
  size_t flagged = 0;
  for (const auto& sample : data.samples) {
    const auto verdict = detect(set, sample.seq);
    if (verdict.adversarial) ++flagged;
    ordered_json line;
    line["id"] = sample.id;
    line["adversarial"] = verdict.adversarial;
    line["matched"] = verdict.matched.size();
    lines << line.dump() << "\n";
  }
  if (o.out.empty()) {
    std::cout << lines.str();
  } else {
    const auto out = resolve(g, o.out);
    std::ofstream file(out);
    if (!file.good()) throw std::runtime_error("cannot write " + out.string());
    file << lines.str();
    auto meta = meta_head("signatures", g, seed);
    meta["vocab"] = o.vocab;
    meta["sigs"] = o.sigs;
    meta["data"] = o.data;
    meta["flagged"] = flagged;
    write_meta(out, meta);
    std::cout << "flagged " << flagged << " of " << data.size() << ", wrote " << out.string()
              << "\n";
  }
}

// --- defend ----------------------------------------------------------------

struct DefendOptions {
  std::string defense = "none";
  std::string vocab;
  std::string model;
  std::string data;
  std::string out;
  std::string squeeze;
  std::string sigs;
  std::string train;
  std::string ensemble_dir;
  std::string benign_gen;
  std::string malicious_gen;
  int32_t m_generated = 50;
};

void run_defend(const Globals& g, const DefendOptions& o, uint64_t seed) {
  // flag validation before any file access, so bad invocations are usage
  // errors regardless of path validity
  if (o.defense != "ensemble" && o.model.empty()) {
    throw UsageError("defense \"" + o.defense + "\" needs --model");
  }
  if (o.defense == "squeeze" && o.squeeze.empty()) {
    throw UsageError("defense \"squeeze\" needs --squeeze");
  }
  if (o.defense == "signatures" && o.sigs.empty()) {
    throw UsageError("defense \"signatures\" needs --sigs");
  }
  if (o.defense == "neighbor" && o.train.empty()) {
    throw UsageError("defense \"neighbor\" needs --train");
  }
  if (o.defense == "ensemble" && o.ensemble_dir.empty()) {
    throw UsageError("defense \"ensemble\" needs --ensemble-dir");
  }
  if (o.defense == "defgen" && (o.benign_gen.empty() || o.malicious_gen.empty())) {
    throw UsageError("defense \"defgen\" needs --benign-gen and --malicious-gen");
  }

  const auto vocab = load_vocabulary(resolve(g, o.vocab));
  const auto data = load_dataset(resolve(g, o.data), vocab);

  std::optional<RnnClassifier> model;
  const auto need_model = [&]() -> const RnnClassifier& {
    if (!model) model = RnnClassifier::load(resolve(g, o.model));
    return *model;
  };

  // loaded artifacts, owned here for the defense's lifetime
  std::optional<SqueezeDetector> detector;
  std::optional<SignatureSet> set;
  std::optional<NeighborIndex> index;
  std::optional<Ensemble> ensemble;
  std::optional<GeneratorModel> benign_gen, malicious_gen;
  std::unique_ptr<Defense> defense;

  if (o.defense == "none") {
    defense = std::make_unique<NullDefense>(need_model());
  } else if (o.defense == "squeeze") {
    const auto& base = need_model();
    detector = load_squeeze(resolve(g, o.squeeze));
    defense = std::make_unique<SqueezeDefense>(base, *detector);
  } else if (o.defense == "signatures") {
    const auto& base = need_model();
    set = load_signatures(resolve(g, o.sigs), vocab);
    defense = std::make_unique<SignatureDefense>(base, *set);
  } else if (o.defense == "neighbor") {
    const auto& base = need_model();
    index = build_index(base.config(), load_dataset(resolve(g, o.train), vocab));
    defense = std::make_unique<NeighborDefense>(base, *index);
  } else if (o.defense == "ensemble") {
    ensemble = load_ensemble(resolve(g, o.ensemble_dir));
    defense = std::make_unique<EnsembleDefense>(*ensemble);
  } else if (o.defense == "defgen") {
    const auto& base = need_model();
    benign_gen = load_generator(resolve(g, o.benign_gen));
    malicious_gen = load_generator(resolve(g, o.malicious_gen));
    DefGenConfig cfg;
    cfg.m_generated = o.m_generated;
    defense = std::make_unique<DefGenDefense>(base, *benign_gen, *malicious_gen, cfg);
  } else if (o.defense == "advtrain") {
    defense = std::make_unique<AdvTrainDefense>(need_model());
  } else {
    throw UsageError("unknown defense \"" + o.defense + "\"");
  }

  std::ostringstream lines;
  size_t malicious = 0, flagged = 0;
  for (const auto& sample : data.samples) {
    const auto decision = defense->decide(sample.seq);
    if (decision.label == Label::kMalicious) ++malicious;
    if (decision.flagged) ++flagged;
    ordered_json line;
    line["id"] = sample.id;
    line["label"] = label_name(decision.label);
    line["flagged"] = decision.flagged;
    line["confidence"] = decision.confidence;
    lines << line.dump() << "\n";
  }
  if (o.out.empty()) {
    std::cout << lines.str();
  } else {
    const auto out = resolve(g, o.out);
    std::ofstream file(out);
    if (!file.good()) throw std::runtime_error("cannot write " + out.string());
    file << lines.str();
    auto meta = meta_head("defend", g, seed);
    meta["defense"] = o.defense;
    meta["vocab"] = o.vocab;
    meta["model"] = o.model;
    meta["data"] = o.data;
    meta["inputs"] = data.size();
    meta["malicious"] = malicious;
    meta["flagged"] = flagged;
    write_meta(out, meta);
    std::cout << "defense " << o.defense << ": " << data.size() << " inputs, " << malicious
              << " malicious, " << flagged << " flagged, wrote " << out.string() << "\n";
  }
}

// --- eval ------------------------------------------------------------------

struct EvalOptions {
  std::string plan;
  std::string csv = "table.csv";
};

ExperimentPlan parse_plan_file(const fs::path& path) {
  auto plan = make_desk_plan();
  for (const auto& kv : read_flat_file(path)) {
    const auto what = path.string() + " line " + std::to_string(kv.line) + ", " + kv.key;
    const auto i32 = [&] { return static_cast<int32_t>(to_int(kv.value, what)); };
    if (kv.key == "vocab_size") plan.vocab_size = i32();
    else if (kv.key == "len_min") plan.len_min = i32();
    else if (kv.key == "len_max") plan.len_max = i32();
    else if (kv.key == "overlap") plan.overlap = to_real(kv.value, what);
    else if (kv.key == "train_benign") plan.counts.train_benign = i32();
    else if (kv.key == "train_malicious") plan.counts.train_malicious = i32();
    else if (kv.key == "validation_benign") plan.counts.validation_benign = i32();
    else if (kv.key == "validation_malicious") plan.counts.validation_malicious = i32();
    else if (kv.key == "test_benign") plan.counts.test_benign = i32();
    else if (kv.key == "test_malicious") plan.counts.test_malicious = i32();
    else if (kv.key == "holdout_benign") plan.counts.holdout_benign = i32();
    else if (kv.key == "holdout_malicious") plan.counts.holdout_malicious = i32();
    else if (kv.key == "cell") plan.classifier.cell = parse_cell(kv.value);
    else if (kv.key == "hidden_units") plan.classifier.hidden_units = i32();
    else if (kv.key == "window") plan.classifier.window = i32();
    else if (kv.key == "dropout") plan.classifier.dropout = to_real(kv.value, what);
    else if (kv.key == "bidirectional") plan.classifier.bidirectional = to_bool(kv.value, what);
    else if (kv.key == "depth") plan.classifier.depth = i32();
    else if (kv.key == "optimizer") plan.training.optimizer = parse_optimizer(kv.value);
    else if (kv.key == "epochs") plan.training.epochs = i32();
    else if (kv.key == "batch_size") plan.training.batch_size = i32();
    else if (kv.key == "learning_rate") plan.training.learning_rate = to_real(kv.value, what);
    else if (kv.key == "substitute_hidden") plan.substitute.hidden_units = i32();
    else if (kv.key == "substitute_epochs") plan.substitute.epochs = i32();
    else if (kv.key == "attack_samples") plan.attack_samples = i32();
    else if (kv.key == "max_insertions_per_window") plan.max_insertions_per_window = i32();
    else if (kv.key == "random_seeds") plan.random_seeds = i32();
    else if (kv.key == "adaptive_iteration_cap") plan.adaptive_iteration_cap = i32();
    else if (kv.key == "defenses") plan.defenses = split_list(kv.value);
    else if (kv.key == "embed_dim") plan.embedding.dim = i32();
    else if (kv.key == "embed_iterations") plan.embedding.iterations = i32();
    else if (kv.key == "embed_learning_rate") plan.embedding.learning_rate = to_real(kv.value, what);
    else if (kv.key == "embed_x_max") plan.embedding.x_max = to_real(kv.value, what);
    else if (kv.key == "embed_alpha") plan.embedding.alpha = to_real(kv.value, what);
    else if (kv.key == "squeeze_radius") plan.squeeze_radius = i32();
    else if (kv.key == "squeeze_target") plan.squeeze_target = i32();
    else if (kv.key == "signature_n") plan.signatures.n = i32();
    else if (kv.key == "signature_threshold_p") plan.signatures.threshold_p = to_real(kv.value, what);
    else if (kv.key == "signature_threshold_sigs") plan.signatures.threshold_sigs = i32();
    else if (kv.key == "signature_pool") plan.signature_pool = i32();
    else if (kv.key == "ensemble_variant") plan.ensemble.variant = parse_ensemble_variant(kv.value);
    else if (kv.key == "ensemble_size") plan.ensemble.size = i32();
    else if (kv.key == "ensemble_voting") plan.ensemble.voting = parse_voting(kv.value);
    else if (kv.key == "ensemble_offsets") plan.ensemble.offsets = split_ints(kv.value, what);
    else if (kv.key == "ensemble_adversarial_fraction")
      plan.ensemble.adversarial_fraction = to_real(kv.value, what);
    else if (kv.key == "ensemble_per_member_pools")
      plan.ensemble.per_member_pools = to_bool(kv.value, what);
    else if (kv.key == "defgen_m") plan.defgen.m_generated = i32();
    else if (kv.key == "generator_order") plan.generator_order = i32();
    else if (kv.key == "generator_smoothing") plan.generator_smoothing = to_real(kv.value, what);
    else if (kv.key == "advtrain_fraction") plan.advtrain_fraction = to_real(kv.value, what);
    else if (kv.key == "csv_timings") plan.csv_timings = to_bool(kv.value, what);
    else if (kv.key == "seed") plan.seed = to_seed(kv.value, what);
    else throw UsageError(path.string() + " line " + std::to_string(kv.line) +
                          ": unknown key \"" + kv.key + "\"");
  }
  return plan;
}

void run_eval(const Globals& g, const EvalOptions& o, bool seed_given, uint64_t seed) {
  auto plan = o.plan.empty() ? make_desk_plan() : parse_plan_file(resolve(g, o.plan));
  if (seed_given) plan.seed = seed;  // the flag outranks the plan file
  const auto csv = resolve(g, o.csv);
  const auto report = run_experiment_table(plan, csv);
  std::cout << report_csv(report, plan.csv_timings);
  std::cout << "wrote " << csv.string() << " and " << csv.string() << ".meta.json\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  Globals g;
  SynthOptions so;
  TrainOptions to;
  EmbedOptions eo;
  SqueezeOptions qo;
  AttackOptions ao;
  SignatureOptions go;
  DefendOptions fo;
  EvalOptions vo;
  ConfigMap config;

  CLI::App app{"sequence classifier attack and defense toolkit", "seqdef"};
  app.require_subcommand(1);
  app.add_option("--workdir", g.workdir, "base directory for relative paths");
  app.add_option("--config", g.config,
                 "flat key = value file supplying defaults; explicit flags win");
  app.add_option("--seed", g.seed, "seed for every stream the subcommand draws");
  app.add_option("--jobs", g.jobs, "parallelism cap (all stages are single threaded today)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--verbose", g.verbose, "progress chatter on stderr");
  config.bind(&app, "--workdir", [&](const std::string& v) { g.workdir = v; });
  config.bind(&app, "--jobs",
              [&](const std::string& v) { g.jobs = static_cast<int32_t>(to_int(v, "jobs")); });
  config.bind(&app, "--verbose", [&](const std::string& v) { g.verbose = to_bool(v, "verbose"); });

  bool config_seed = false;
  config.bind(&app, "--seed", [&](const std::string& v) {
    g.seed = to_seed(v, "seed");
    config_seed = true;
  });

  const auto bind_int = [&](CLI::App* sub, const std::string& flag, int32_t& slot) {
    config.bind(sub, flag,
                [&slot, flag](const std::string& v) {
                  slot = static_cast<int32_t>(to_int(v, flag));
                });
  };
  const auto bind_size = [&](CLI::App* sub, const std::string& flag, size_t& slot) {
    config.bind(sub, flag,
                [&slot, flag](const std::string& v) {
                  slot = static_cast<size_t>(to_int(v, flag));
                });
  };
  const auto bind_real = [&](CLI::App* sub, const std::string& flag, double& slot) {
    config.bind(sub, flag, [&slot, flag](const std::string& v) { slot = to_real(v, flag); });
  };
  const auto bind_text = [&](CLI::App* sub, const std::string& flag, std::string& slot) {
    config.bind(sub, flag, [&slot](const std::string& v) { slot = v; });
  };
  const auto bind_flag = [&](CLI::App* sub, const std::string& flag, bool& slot) {
    config.bind(sub, flag, [&slot, flag](const std::string& v) { slot = to_bool(v, flag); });
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic token-trace dataset");
  synth->fallthrough();
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--vocab-size", so.vocab_size, "distinct tokens");
  synth->add_option("--len-min", so.len_min, "shortest sequence");
  synth->add_option("--len-max", so.len_max, "longest sequence");
  synth->add_option("--overlap", so.overlap, "class transition-table overlap in [0, 1]");
  synth->add_option("--train-benign", so.counts.train_benign);
  synth->add_option("--train-malicious", so.counts.train_malicious);
  synth->add_option("--val-benign", so.counts.validation_benign);
  synth->add_option("--val-malicious", so.counts.validation_malicious);
  synth->add_option("--test-benign", so.counts.test_benign);
  synth->add_option("--test-malicious", so.counts.test_malicious);
  synth->add_option("--holdout-benign", so.counts.holdout_benign);
  synth->add_option("--holdout-malicious", so.counts.holdout_malicious);
  bind_text(synth, "--out", so.out);
  bind_int(synth, "--vocab-size", so.vocab_size);
  bind_int(synth, "--len-min", so.len_min);
  bind_int(synth, "--len-max", so.len_max);
  bind_real(synth, "--overlap", so.overlap);
  config.bind(synth, "--train-benign",
              [&](const std::string& v) { so.counts.train_benign = (int)to_int(v, "train-benign"); });
  config.bind(synth, "--train-malicious", [&](const std::string& v) {
    so.counts.train_malicious = (int)to_int(v, "train-malicious");
  });
  config.bind(synth, "--val-benign",
              [&](const std::string& v) { so.counts.validation_benign = (int)to_int(v, "val-benign"); });
  config.bind(synth, "--val-malicious", [&](const std::string& v) {
    so.counts.validation_malicious = (int)to_int(v, "val-malicious");
  });
  config.bind(synth, "--test-benign",
              [&](const std::string& v) { so.counts.test_benign = (int)to_int(v, "test-benign"); });
  config.bind(synth, "--test-malicious", [&](const std::string& v) {
    so.counts.test_malicious = (int)to_int(v, "test-malicious");
  });
  config.bind(synth, "--holdout-benign", [&](const std::string& v) {
    so.counts.holdout_benign = (int)to_int(v, "holdout-benign");
  });
  config.bind(synth, "--holdout-malicious", [&](const std::string& v) {
    so.counts.holdout_malicious = (int)to_int(v, "holdout-malicious");
  });

  auto* train = app.add_subcommand("train", "train a classifier, substitute, ensemble or generator");
  train->fallthrough();
  train->add_option("--kind", to.kind, "classifier | substitute | ensemble | generator")
      ->check(CLI::IsMember({"classifier", "substitute", "ensemble", "generator"}));
  train->add_option("--vocab", to.vocab, "vocabulary file")->required();
  train->add_option("--data", to.data, "training JSONL")->required();
  train->add_option("--out", to.out, "checkpoint path (ensemble: directory)")->required();
  train->add_option("--min-len", to.min_len, "drop sequences shorter than this");
  train->add_option("--cell", to.cell)->check(CLI::IsMember({"rnn", "lstm", "gru"}));
  train->add_option("--hidden", to.hidden, "hidden units");
  train->add_option("--window", to.window, "window length");
  train->add_option("--dropout", to.dropout);
  train->add_option("--depth", to.depth, "stacked recurrent layers");
  train->add_flag("--bidirectional", to.bidirectional);
  train->add_option("--optimizer", to.optimizer)->check(CLI::IsMember({"adam", "adadelta"}));
  train->add_option("--epochs", to.epochs);
  train->add_option("--batch", to.batch);
  train->add_option("--lr", to.learning_rate, "0 picks the optimizer default");
  train->add_option("--target", to.target, "target checkpoint (substitute only)");
  train->add_option("--variant", to.variant, "ensemble variant")
      ->check(CLI::IsMember({"regular", "subsequence", "bagging", "bagging_subsequence",
                             "adversarial", "adversarial_subsequence"}));
  train->add_option("--size", to.size, "ensemble members");
  train->add_option("--voting", to.voting)->check(CLI::IsMember({"soft", "hard"}));
  train->add_option("--offsets", to.offsets, "comma-separated subsequence offsets");
  train->add_option("--order", to.order, "generator context length");
  train->add_option("--smoothing", to.smoothing, "generator additive smoothing");
  train->add_option("--class", to.klass, "generator class")
      ->check(CLI::IsMember({"benign", "malicious"}));
  bind_text(train, "--kind", to.kind);
  bind_text(train, "--vocab", to.vocab);
  bind_text(train, "--data", to.data);
  bind_text(train, "--out", to.out);
  bind_size(train, "--min-len", to.min_len);
  bind_text(train, "--cell", to.cell);
  bind_int(train, "--hidden", to.hidden);
  bind_int(train, "--window", to.window);
  bind_real(train, "--dropout", to.dropout);
  bind_int(train, "--depth", to.depth);
  bind_flag(train, "--bidirectional", to.bidirectional);
  bind_text(train, "--optimizer", to.optimizer);
  bind_int(train, "--epochs", to.epochs);
  bind_int(train, "--batch", to.batch);
  bind_real(train, "--lr", to.learning_rate);
  bind_text(train, "--target", to.target);
  bind_text(train, "--variant", to.variant);
  bind_int(train, "--size", to.size);
  bind_text(train, "--voting", to.voting);
  bind_text(train, "--offsets", to.offsets);
  bind_int(train, "--order", to.order);
  bind_real(train, "--smoothing", to.smoothing);
  bind_text(train, "--class", to.klass);

  auto* embed = app.add_subcommand("embed", "train token embeddings from co-occurrence counts");
  embed->fallthrough();
  embed->add_option("--vocab", eo.vocab)->required();
  embed->add_option("--data", eo.data)->required();
  embed->add_option("--out", eo.out)->required();
  embed->add_option("--radius", eo.radius, "co-occurrence window radius");
  embed->add_option("--dim", eo.dim, "embedding dimension");
  embed->add_option("--iterations", eo.iterations);
  embed->add_option("--lr", eo.learning_rate);
  embed->add_option("--x-max", eo.x_max, "weighting cutoff");
  embed->add_option("--alpha", eo.alpha, "weighting exponent");
  bind_text(embed, "--vocab", eo.vocab);
  bind_text(embed, "--data", eo.data);
  bind_text(embed, "--out", eo.out);
  bind_int(embed, "--radius", eo.radius);
  bind_int(embed, "--dim", eo.dim);
  bind_int(embed, "--iterations", eo.iterations);
  bind_real(embed, "--lr", eo.learning_rate);
  bind_real(embed, "--x-max", eo.x_max);
  bind_real(embed, "--alpha", eo.alpha);

  auto* squeeze = app.add_subcommand("squeeze", "build a squeeze map and calibrate its threshold");
  squeeze->fallthrough();
  squeeze->add_option("--vocab", qo.vocab)->required();
  squeeze->add_option("--embeddings", qo.embeddings)->required();
  squeeze->add_option("--model", qo.model)->required();
  squeeze->add_option("--data", qo.data, "calibration split")->required();
  squeeze->add_option("--out", qo.out)->required();
  squeeze->add_option("--target", qo.target, "squeezed vocabulary size");
  bind_text(squeeze, "--vocab", qo.vocab);
  bind_text(squeeze, "--embeddings", qo.embeddings);
  bind_text(squeeze, "--model", qo.model);
  bind_text(squeeze, "--data", qo.data);
  bind_text(squeeze, "--out", qo.out);
  bind_int(squeeze, "--target", qo.target);

  auto* attack = app.add_subcommand("attack", "run an insertion attack and log the results");
  attack->fallthrough();
  attack->add_option("--vocab", ao.vocab)->required();
  attack->add_option("--model", ao.model, "target checkpoint")->required();
  attack->add_option("--data", ao.data, "samples to attack")->required();
  attack->add_option("--log", ao.log, "JSONL attack log")->required();
  attack->add_option("--variant", ao.variant)
      ->check(CLI::IsMember({"whitebox", "blackbox", "random"}));
  attack->add_option("--substitute", ao.substitute, "substitute checkpoint (blackbox)");
  attack->add_option("--samples", ao.samples, "cap on attacked samples; 0 = all");
  attack->add_option("--max-insertions", ao.max_insertions,
                     "per-window insertion budget; -1 = default");
  attack->add_option("--adv-out", ao.adv_out, "write evading sequences as a JSONL dataset");
  bind_text(attack, "--vocab", ao.vocab);
  bind_text(attack, "--model", ao.model);
  bind_text(attack, "--data", ao.data);
  bind_text(attack, "--log", ao.log);
  bind_text(attack, "--variant", ao.variant);
  bind_text(attack, "--substitute", ao.substitute);
  bind_int(attack, "--samples", ao.samples);
  bind_int(attack, "--max-insertions", ao.max_insertions);
  bind_text(attack, "--adv-out", ao.adv_out);

  auto* signatures = app.add_subcommand("signatures", "mine adversarial signatures or scan with them");
  signatures->fallthrough();
  signatures->add_option("--vocab", go.vocab)->required();
  signatures->add_option("--adv", go.adv, "adversarial JSONL (mining)");
  signatures->add_option("--benign", go.benign, "benign training JSONL (mining)");
  signatures->add_option("--sigs", go.sigs, "signature file (scanning)");
  signatures->add_option("--data", go.data, "JSONL to scan");
  signatures->add_option("--out", go.out, "signature file (mining) or scan report");
  signatures->add_option("--n", go.n, "n-gram length");
  signatures->add_option("--threshold-p", go.threshold_p, "membership probability threshold");
  signatures->add_option("--threshold-sigs", go.threshold_sigs, "detection match threshold");
  bind_text(signatures, "--vocab", go.vocab);
  bind_text(signatures, "--adv", go.adv);
  bind_text(signatures, "--benign", go.benign);
  bind_text(signatures, "--sigs", go.sigs);
  bind_text(signatures, "--data", go.data);
  bind_text(signatures, "--out", go.out);
  bind_int(signatures, "--n", go.n);
  bind_real(signatures, "--threshold-p", go.threshold_p);
  bind_int(signatures, "--threshold-sigs", go.threshold_sigs);

  auto* defend = app.add_subcommand("defend", "apply a defense to a set of inputs");
  defend->fallthrough();
  defend->add_option("--defense", fo.defense)
      ->check(CLI::IsMember(
          {"none", "squeeze", "signatures", "neighbor", "ensemble", "defgen", "advtrain"}));
  defend->add_option("--vocab", fo.vocab)->required();
  defend->add_option("--model", fo.model, "classifier checkpoint");
  defend->add_option("--data", fo.data, "inputs to judge")->required();
  defend->add_option("--out", fo.out, "JSONL decisions; stdout when omitted");
  defend->add_option("--squeeze", fo.squeeze, "squeeze detector file");
  defend->add_option("--sigs", fo.sigs, "signature file");
  defend->add_option("--train", fo.train, "training JSONL for the neighbor index");
  defend->add_option("--ensemble-dir", fo.ensemble_dir, "saved ensemble directory");
  defend->add_option("--benign-gen", fo.benign_gen, "benign generator file");
  defend->add_option("--malicious-gen", fo.malicious_gen, "malicious generator file");
  defend->add_option("--m-generated", fo.m_generated, "defgen pool size per class");
  bind_text(defend, "--defense", fo.defense);
  bind_text(defend, "--vocab", fo.vocab);
  bind_text(defend, "--model", fo.model);
  bind_text(defend, "--data", fo.data);
  bind_text(defend, "--out", fo.out);
  bind_text(defend, "--squeeze", fo.squeeze);
  bind_text(defend, "--sigs", fo.sigs);
  bind_text(defend, "--train", fo.train);
  bind_text(defend, "--ensemble-dir", fo.ensemble_dir);
  bind_text(defend, "--benign-gen", fo.benign_gen);
  bind_text(defend, "--malicious-gen", fo.malicious_gen);
  bind_int(defend, "--m-generated", fo.m_generated);

  auto* eval = app.add_subcommand("eval", "run the full attack/defense experiment table");
  eval->fallthrough();
  eval->add_option("--plan", vo.plan, "flat key = value plan; omitted keys keep desk defaults");
  eval->add_option("--csv", vo.csv, "output table path");
  bind_text(eval, "--plan", vo.plan);
  bind_text(eval, "--csv", vo.csv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }

  try {
    if (!g.config.empty()) config.apply(resolve(g, g.config));
    const bool seed_given = app.count("--seed") > 0 || config_seed;
    if (app.got_subcommand(synth)) run_synth(g, so, g.seed);
    else if (app.got_subcommand(train)) run_train(g, to, g.seed);
    else if (app.got_subcommand(embed)) run_embed(g, eo, g.seed);
    else if (app.got_subcommand(squeeze)) run_squeeze(g, qo, g.seed);
    else if (app.got_subcommand(attack)) run_attack(g, ao, g.seed);
    else if (app.got_subcommand(signatures)) run_signatures(g, go, g.seed);
    else if (app.got_subcommand(defend)) run_defend(g, fo, g.seed);
    else if (app.got_subcommand(eval)) run_eval(g, vo, seed_given, g.seed);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace seqdef
