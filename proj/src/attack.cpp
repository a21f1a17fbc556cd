#include "seqdef/attack.hpp"

#include <algorithm>
#include <limits>
#include <set>
#include <stdexcept>
#include <utility>

#include "seqdef/rng.hpp"
#include "seqdef/signatures.hpp"
#include "seqdef/squeeze.hpp"

namespace seqdef {

namespace {

int sign_of(double x) { return x > 0.0 ? 1 : (x < 0.0 ? -1 : 0); }

int64_t window_count(size_t len, int32_t n) {
  return len == 0 ? 0 : static_cast<int64_t>((len + static_cast<size_t>(n) - 1) /
                                             static_cast<size_t>(n));
}

// Sorted, deduplicated, validated insertion alphabet; empty input means the
// whole vocabulary.
std::vector<int32_t> resolve_candidates(const std::vector<int32_t>& candidates, int32_t vocab) {
  std::vector<int32_t> out;
  if (candidates.empty()) {
    out.resize(static_cast<size_t>(vocab));
    for (int32_t t = 1; t <= vocab; ++t) out[static_cast<size_t>(t) - 1] = t;
    return out;
  }
  out = candidates;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  for (int32_t t : out) {
    if (t < 1 || t > vocab) {
      throw std::invalid_argument("attack candidates must be non-padding vocabulary tokens");
    }
  }
  return out;
}

void validate_attack_shapes(const RnnClassifier& target, const RnnClassifier* gradient_source,
                            const AttackConfig& config) {
  if (config.n < 1) throw std::invalid_argument("attack window length must be >= 1");
  if (target.config().window != config.n) {
    throw std::invalid_argument("attack window length must equal the target model window");
  }
  if (gradient_source != nullptr &&
      (gradient_source->config().window != config.n ||
       gradient_source->config().vocab_width != target.config().vocab_width)) {
    throw std::invalid_argument("gradient source must share the target's window and vocabulary");
  }
  const int32_t budget = config.budget();
  if (budget < 0 || budget >= config.n) {
    throw std::invalid_argument("insertion budget must lie in [0, n)");
  }
}

// Shared Algorithm 2 loop. gradient_source == nullptr selects uniform random
// token choice (the random variant); otherwise the token comes from the
// Jacobian argmin recomputed at the current window state.
AttackResult attack_core(const RnnClassifier& target, const RnnClassifier* gradient_source,
                         const TokenSeq& seq, const AttackConfig& config) {
  validate_attack_shapes(target, gradient_source, config);
  if (seq.tokens.empty()) throw std::invalid_argument("cannot attack an empty sequence");
  const int32_t n = config.n;
  const int32_t vocab = target.config().vocab_width - 1;
  const int32_t budget = config.budget();
  const std::vector<int32_t> cands = resolve_candidates(config.candidates, vocab);

  AttackResult result;
  result.original = seq;
  Rng rng(config.seed);

  result.queries += window_count(seq.tokens.size(), n);
  if (target.classify_sequence(seq).label != Label::kMalicious) {
    throw std::invalid_argument("attack requires an input the target classifies as malicious");
  }

  std::vector<int32_t> cur = seq.tokens;
  std::vector<int32_t> window(static_cast<size_t>(n));
  for (int32_t j = 0; static_cast<size_t>(j) * static_cast<size_t>(n) < cur.size(); ++j) {
    const size_t wbase = static_cast<size_t>(j) * static_cast<size_t>(n);
    int32_t inserted = 0;
    while (true) {
      const size_t real = std::min<size_t>(static_cast<size_t>(n), cur.size() - wbase);
      std::fill(window.begin(), window.end(), kPadIndex);
      std::copy(cur.begin() + static_cast<std::ptrdiff_t>(wbase),
                cur.begin() + static_cast<std::ptrdiff_t>(wbase + real), window.begin());
      ++result.queries;
      if (target.window_confidence(window) < 0.5) break;
      if (inserted >= budget) break;
      const auto i = static_cast<int32_t>(rng.below(real));
      int32_t token;
      if (gradient_source != nullptr) {
        const Eigen::MatrixXd jac = gradient_source->input_jacobian(window);
        token = select_insertion(jac, window, i, vocab, cands);
      } else {
        token = cands[rng.below(cands.size())];
      }
      cur.insert(cur.begin() + static_cast<std::ptrdiff_t>(wbase + static_cast<size_t>(i)),
                 token);
      result.insertions.push_back({j, i, token});
      ++inserted;
    }
  }

  result.perturbed = TokenSeq{std::move(cur)};
  result.queries += window_count(result.perturbed.tokens.size(), n);
  result.evaded = target.classify_sequence(result.perturbed).label == Label::kBenign;
  return result;
}

AttackResult adaptive_restart(const DefendedModel& system, const TokenSeq& seq,
                              const AttackConfig& config, uint64_t salt) {
  int64_t queries = 0;
  AttackResult last;
  const int32_t cap = std::max(1, config.adaptive_iteration_cap);
  for (int32_t k = 0; k < cap; ++k) {
    AttackConfig c = config;
    c.variant = AttackVariant::kWhitebox;
    c.seed = mix_seed(config.seed, salt, static_cast<uint64_t>(k));
    AttackResult r = attack_sequence(*system.classifier, *system.classifier, seq, c);
    queries += r.queries;
    r.queries = queries;
    r.evaded = system.defense->decide(r.perturbed).label == Label::kBenign;
    if (r.evaded) return r;
    last = std::move(r);
  }
  return last;
}

AttackResult adaptive_squeeze(const DefendedModel& system, const TokenSeq& seq,
                              const AttackConfig& config) {
  if (system.squeeze == nullptr) {
    throw std::invalid_argument("adaptive squeeze attack needs the squeeze detector handle");
  }
  const RnnClassifier& base = *system.classifier;
  const SqueezeMap& map = system.squeeze->map;
  const std::vector<int32_t> reps = map.representatives();
  const TokenSeq squeezed = apply_squeeze(map, seq);

  int64_t queries = 0;
  AttackResult last;
  const int32_t cap = std::max(1, config.adaptive_iteration_cap);
  for (int32_t k = 0; k < cap; ++k) {
    AttackConfig ca = config;
    ca.variant = AttackVariant::kWhitebox;
    ca.candidates = reps;
    ca.seed = mix_seed(config.seed, 0x53, static_cast<uint64_t>(2 * k));
    AttackResult ra = attack_sequence(base, base, seq, ca);
    queries += ra.queries;
    if (system.defense->decide(ra.perturbed).label == Label::kBenign) {
      ra.queries = queries;
      ra.evaded = true;
      return ra;
    }

    // Second prong: attack the squeezed sequence and replay its insertions
    // onto the original (inserted tokens are representatives, so squeezing
    // the replayed result reproduces the attacked squeezed sequence).
    queries += window_count(squeezed.tokens.size(), config.n);
    if (base.classify_sequence(squeezed).label == Label::kMalicious) {
      AttackConfig cb = ca;
      cb.seed = mix_seed(config.seed, 0x53, static_cast<uint64_t>(2 * k + 1));
      AttackResult rb = attack_sequence(base, base, squeezed, cb);
      queries += rb.queries;
      TokenSeq replayed = replay_insertions(seq, rb.insertions, config.n);
      if (system.defense->decide(replayed).label == Label::kBenign) {
        AttackResult out;
        out.original = seq;
        out.perturbed = std::move(replayed);
        out.insertions = std::move(rb.insertions);
        out.evaded = true;
        out.queries = queries;
        return out;
      }
    }
    ra.queries = queries;
    ra.evaded = false;
    last = std::move(ra);
  }
  return last;
}

AttackResult adaptive_signatures(const DefendedModel& system, const TokenSeq& seq,
                                 const AttackConfig& config) {
  if (system.signatures == nullptr) {
    throw std::invalid_argument("adaptive signature attack needs the signature set handle");
  }
  const RnnClassifier& base = *system.classifier;
  const SignatureSet& sigs = *system.signatures;
  validate_attack_shapes(base, &base, config);
  if (seq.tokens.empty()) throw std::invalid_argument("cannot attack an empty sequence");
  const int32_t n = config.n;
  const int32_t vocab = base.config().vocab_width - 1;
  const int32_t budget = config.budget();
  const std::vector<int32_t> cands = resolve_candidates(config.candidates, vocab);

  AttackResult result;
  result.original = seq;
  Rng rng(config.seed);
  result.queries += window_count(seq.tokens.size(), n);
  if (base.classify_sequence(seq).label != Label::kMalicious) {
    throw std::invalid_argument("attack requires an input the target classifies as malicious");
  }

  auto matched_set = [&sigs](const std::vector<int32_t>& tokens) {
    const auto verdict = detect(sigs, TokenSeq{tokens});
    return std::set<Ngram>(verdict.matched.begin(), verdict.matched.end());
  };

  std::vector<int32_t> cur = seq.tokens;
  // Signatures the input already matched; insertions may not add to these.
  std::set<Ngram> allowed = matched_set(cur);
  const int32_t retry_cap = 4 * n;

  std::vector<int32_t> window(static_cast<size_t>(n));
  for (int32_t j = 0; static_cast<size_t>(j) * static_cast<size_t>(n) < cur.size(); ++j) {
    const size_t wbase = static_cast<size_t>(j) * static_cast<size_t>(n);
    int32_t inserted = 0;
    while (true) {
      const size_t real = std::min<size_t>(static_cast<size_t>(n), cur.size() - wbase);
      std::fill(window.begin(), window.end(), kPadIndex);
      std::copy(cur.begin() + static_cast<std::ptrdiff_t>(wbase),
                cur.begin() + static_cast<std::ptrdiff_t>(wbase + real), window.begin());
      ++result.queries;
      if (base.window_confidence(window) < 0.5) break;
      if (inserted >= budget) break;
      // A vetoed attempt restores the exact window state, so one Jacobian
      // serves every retry of this insertion slot.
      const Eigen::MatrixXd jac = base.input_jacobian(window);
      bool accepted = false;
      for (int32_t attempt = 0; attempt < retry_cap; ++attempt) {
        const auto i = static_cast<int32_t>(rng.below(real));
        const int32_t token = select_insertion(jac, window, i, vocab, cands);
        const auto at = cur.begin() + static_cast<std::ptrdiff_t>(wbase + static_cast<size_t>(i));
        cur.insert(at, token);
        std::set<Ngram> now = matched_set(cur);
        if (std::includes(allowed.begin(), allowed.end(), now.begin(), now.end())) {
          allowed = std::move(now);
          result.insertions.push_back({j, i, token});
          ++inserted;
          accepted = true;
          break;
        }
        cur.erase(cur.begin() + static_cast<std::ptrdiff_t>(wbase + static_cast<size_t>(i)));
      }
      if (!accepted) break;  // every retry created a fresh signature
    }
  }

  result.perturbed = TokenSeq{std::move(cur)};
  result.queries += window_count(result.perturbed.tokens.size(), n);
  result.evaded = system.defense->decide(result.perturbed).label == Label::kBenign;
  return result;
}

AttackResult adaptive_ensemble(const DefendedModel& system, const TokenSeq& seq,
                               const AttackConfig& config) {
  if (system.members.empty()) {
    throw std::invalid_argument("adaptive ensemble attack needs the member views");
  }
  // Anchor = index of the original token the insertion lands before
  // (sequence length = append at the end). Sorting by (anchor, member,
  // position inside that member's attacked view) interleaves every member's
  // insertions while preserving both the original order and each member's
  // own insertion layout.
  struct Marker {
    size_t anchor;
    size_t member;
    size_t view_pos;
    int32_t token;
  };
  std::vector<Marker> markers;
  int64_t queries = 0;

  for (size_t k = 0; k < system.members.size(); ++k) {
    const MemberView& mv = system.members[k];
    if (mv.classifier == nullptr) {
      throw std::invalid_argument("adaptive ensemble attack: member classifier missing");
    }
    if (mv.offset < 0) throw std::invalid_argument("ensemble member offset must be >= 0");
    const auto off = static_cast<size_t>(mv.offset);
    if (off >= seq.tokens.size()) continue;  // nothing of the sequence in view
    TokenSeq view{std::vector<int32_t>(seq.tokens.begin() + static_cast<std::ptrdiff_t>(off),
                                       seq.tokens.end())};
    queries += window_count(view.tokens.size(), config.n);
    if (mv.classifier->classify_sequence(view).label == Label::kBenign) continue;

    AttackConfig c = config;
    c.variant = AttackVariant::kWhitebox;
    c.seed = mix_seed(config.seed, 0xe6, static_cast<uint64_t>(k));
    AttackResult r = attack_sequence(*mv.classifier, *mv.classifier, view, c);
    queries += r.queries;

    // Replay with provenance to find each inserted token's anchor.
    struct Slot {
      int32_t token;
      int64_t origin;  // index into the original sequence, -1 for inserted
    };
    std::vector<Slot> evolved;
    evolved.reserve(view.tokens.size() + r.insertions.size());
    for (size_t v = 0; v < view.tokens.size(); ++v) {
      evolved.push_back({view.tokens[v], static_cast<int64_t>(off + v)});
    }
    for (const Insertion& ins : r.insertions) {
      const size_t abs = static_cast<size_t>(ins.window) * static_cast<size_t>(config.n) +
                         static_cast<size_t>(ins.position);
      evolved.insert(evolved.begin() + static_cast<std::ptrdiff_t>(abs), {ins.token, -1});
    }
    std::vector<int64_t> next_origin(evolved.size());
    int64_t carry = static_cast<int64_t>(seq.tokens.size());
    for (size_t idx = evolved.size(); idx-- > 0;) {
      if (evolved[idx].origin >= 0) carry = evolved[idx].origin;
      next_origin[idx] = carry;
    }
    for (size_t idx = 0; idx < evolved.size(); ++idx) {
      if (evolved[idx].origin < 0) {
        markers.push_back({static_cast<size_t>(next_origin[idx]), k, idx, evolved[idx].token});
      }
    }
  }

  std::sort(markers.begin(), markers.end(), [](const Marker& a, const Marker& b) {
    return std::tie(a.anchor, a.member, a.view_pos) < std::tie(b.anchor, b.member, b.view_pos);
  });

  AttackResult result;
  result.original = seq;
  std::vector<int32_t> out;
  out.reserve(seq.tokens.size() + markers.size());
  size_t mi = 0;
  for (size_t a = 0; a <= seq.tokens.size(); ++a) {
    while (mi < markers.size() && markers[mi].anchor == a) {
      const size_t q = out.size();
      result.insertions.push_back({static_cast<int32_t>(q / static_cast<size_t>(config.n)),
                                   static_cast<int32_t>(q % static_cast<size_t>(config.n)),
                                   markers[mi].token});
      out.push_back(markers[mi].token);
      ++mi;
    }
    if (a < seq.tokens.size()) out.push_back(seq.tokens[a]);
  }
  result.perturbed = TokenSeq{std::move(out)};
  result.queries = queries;
  result.evaded = system.defense->decide(result.perturbed).label == Label::kBenign;
  return result;
}

}  // namespace

const char* variant_name(AttackVariant variant) {
  switch (variant) {
    case AttackVariant::kWhitebox: return "whitebox";
    case AttackVariant::kBlackbox: return "blackbox";
    case AttackVariant::kRandom: return "random";
  }
  throw std::invalid_argument("unknown attack variant");
}

AttackVariant parse_variant(const std::string& text) {
  if (text == "whitebox") return AttackVariant::kWhitebox;
  if (text == "blackbox") return AttackVariant::kBlackbox;
  if (text == "random") return AttackVariant::kRandom;
  throw std::invalid_argument("unknown attack variant: " + text);
}

int32_t AttackConfig::budget() const {
  if (max_insertions_per_window >= 0) return max_insertions_per_window;
  return (2 * n + 2) / 3 - 1;
}

int32_t select_insertion(const Eigen::MatrixXd& jacobian, std::span<const int32_t> window,
                         int32_t position, int32_t vocab_size,
                         std::span<const int32_t> candidates) {
  const auto n = static_cast<int32_t>(window.size());
  if (n < 1) throw std::invalid_argument("select_insertion: empty window");
  if (vocab_size < 1) throw std::invalid_argument("select_insertion: empty vocabulary");
  if (jacobian.rows() != n || jacobian.cols() != vocab_size + 1) {
    throw std::invalid_argument("select_insertion: jacobian shape does not match window");
  }
  if (position < 0 || position >= n) {
    throw std::invalid_argument("select_insertion: position outside window");
  }
  for (int32_t token : window) {
    if (token < 0 || token > vocab_size) {
      throw std::invalid_argument("select_insertion: window token outside vocabulary");
    }
  }
  const int32_t old_tok = window[static_cast<size_t>(position)];

  // Only the insertion row differs between candidates: every other term of
  // the squared distance is candidate-independent. Replacing token o with
  // candidate c at the row changes the score by (1 - 2 sJ[o]) + (1 + 2 sJ[c])
  // relative to a candidate equal to o, all in exact small-integer
  // arithmetic, so the argmin (ties to the lowest index) is unchanged.
  const int sj_old = sign_of(jacobian(position, old_tok));
  auto row_score = [&](int32_t c) -> int64_t {
    if (c == old_tok) return 0;
    return 2 - 2 * sj_old + 2 * sign_of(jacobian(position, c));
  };

  int64_t best_score = std::numeric_limits<int64_t>::max();
  int32_t best_tok = -1;
  auto consider = [&](int32_t c) {
    const int64_t s = row_score(c);
    if (s < best_score) {
      best_score = s;
      best_tok = c;
    }
  };
  if (candidates.empty()) {
    for (int32_t c = 1; c <= vocab_size; ++c) consider(c);
  } else {
    std::vector<int32_t> sorted(candidates.begin(), candidates.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (int32_t c : sorted) {
      if (c < 1 || c > vocab_size) {
        throw std::invalid_argument("select_insertion: candidate outside vocabulary");
      }
      consider(c);
    }
  }
  return best_tok;
}

TokenSeq replay_insertions(const TokenSeq& original, const std::vector<Insertion>& insertions,
                           int32_t n) {
  if (n < 1) throw std::invalid_argument("replay_insertions: window length must be >= 1");
  std::vector<int32_t> cur = original.tokens;
  for (const Insertion& ins : insertions) {
    if (ins.window < 0 || ins.position < 0 || ins.position >= n) {
      throw std::invalid_argument("replay_insertions: invalid insertion record");
    }
    const size_t abs = static_cast<size_t>(ins.window) * static_cast<size_t>(n) +
                       static_cast<size_t>(ins.position);
    if (abs > cur.size()) {
      throw std::invalid_argument("replay_insertions: insertion beyond sequence end");
    }
    cur.insert(cur.begin() + static_cast<std::ptrdiff_t>(abs), ins.token);
  }
  return TokenSeq{std::move(cur)};
}

AttackResult attack_sequence(const RnnClassifier& target, const RnnClassifier& gradient_source,
                             const TokenSeq& seq, const AttackConfig& config) {
  if (config.variant == AttackVariant::kRandom) return attack_core(target, nullptr, seq, config);
  return attack_core(target, &gradient_source, seq, config);
}

AttackResult attack_random(const RnnClassifier& target, const TokenSeq& seq,
                           const AttackConfig& config) {
  return attack_core(target, nullptr, seq, config);
}

RnnClassifier train_substitute(const RnnClassifier& target, const Dataset& holdout,
                               const SubstituteSpec& spec) {
  if (holdout.samples.empty()) {
    throw std::invalid_argument("train_substitute: empty holdout set");
  }
  Dataset labeled = holdout;
  for (auto& sample : labeled.samples) {
    sample.label = target.classify_sequence(sample.seq).label;
  }
  ModelConfig mc;
  mc.cell = CellKind::kGru;
  mc.hidden_units = spec.hidden_units;
  mc.window = target.config().window;
  mc.vocab_width = target.config().vocab_width;
  mc.dropout = 0.2;
  mc.seed = mix_seed(spec.seed, 0x5b5);
  auto substitute = RnnClassifier::init(mc);
  TrainConfig tc;
  tc.optimizer = Optimizer::kAdadelta;
  tc.epochs = spec.epochs;
  tc.seed = mix_seed(spec.seed, 0x5b6);
  substitute.fit(labeled, tc);
  return substitute;
}

AttackResult adaptive_attack(const std::string& defense_id, const DefendedModel& system,
                             const TokenSeq& seq, const AttackConfig& config) {
  if (system.defense == nullptr || system.classifier == nullptr) {
    throw std::invalid_argument("adaptive_attack: defended system needs defense and classifier");
  }
  if (defense_id == "squeeze") return adaptive_squeeze(system, seq, config);
  if (defense_id == "neighbor") return adaptive_restart(system, seq, config, 0x4e);
  if (defense_id == "defgen") return adaptive_restart(system, seq, config, 0xd6);
  if (defense_id == "ensemble") return adaptive_ensemble(system, seq, config);
  if (defense_id == "signatures") return adaptive_signatures(system, seq, config);
  if (defense_id == "advtrain") {
    AttackConfig c = config;
    c.variant = AttackVariant::kWhitebox;
    // The hardened model may already clear an input the original classifier
    // flagged; there is nothing to perturb then.
    if (system.classifier->classify_sequence(seq).label == Label::kBenign) {
      AttackResult r;
      r.original = seq;
      r.perturbed = seq;
      r.queries = window_count(seq.tokens.size(), c.n);
      r.evaded = system.defense->decide(seq).label == Label::kBenign;
      return r;
    }
    AttackResult r = attack_sequence(*system.classifier, *system.classifier, seq, c);
    r.evaded = system.defense->decide(r.perturbed).label == Label::kBenign;
    return r;
  }
  throw std::invalid_argument("adaptive_attack: unknown defense id: " + defense_id);
}

AttackResult AdversarialExampleSource::perturb(const TokenSeq& seq, uint64_t salt) const {
  if (target == nullptr) throw std::invalid_argument("adversarial source: target not set");
  AttackConfig c = config;
  c.seed = mix_seed(config.seed, salt);
  const bool use_substitute = substitute != nullptr && (salt % 2 == 1);
  c.variant = use_substitute ? AttackVariant::kBlackbox : AttackVariant::kWhitebox;
  return attack_sequence(*target, use_substitute ? *substitute : *target, seq, c);
}

}  // namespace seqdef
