#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "exefuse/kg.hpp"

namespace exefuse {

enum class Provenance { gold, distant, corrupted };

/// Candidate fused triple in unified ids, with its binary label and where
/// it came from.
struct LabeledCandidate {
  Fact triple;
  int label = 0;  // 1 = positive
  std::optional<Fact> source_fact;  // originating GKG fact, unified ids
  Provenance provenance = Provenance::gold;

  bool operator==(const LabeledCandidate&) const = default;
};

enum class SplitScheme { s1, s2 };

constexpr double train_fraction(SplitScheme s) { return s == SplitScheme::s1 ? 0.80 : 0.70; }
const char* scheme_name(SplitScheme s);
SplitScheme parse_scheme(std::string_view name);

struct DatasetSplit {
  std::vector<LabeledCandidate> train, valid, test;
  SplitScheme scheme = SplitScheme::s1;
  std::uint64_t seed = 0;
};

/// Deterministic shuffle-and-cut. Train takes the scheme fraction, the
/// remainder is halved into valid/test, and test is filled label-balanced
/// (|pos - neg| <= 1 whenever the pools allow it).
DatasetSplit split_dataset(std::vector<LabeledCandidate> candidates, SplitScheme scheme,
                           std::uint64_t seed);

struct NegativeSampleStats {
  std::size_t corrupted_tail = 0;
  std::size_t corrupted_head = 0;
  std::size_t corrupted_rel = 0;
  std::size_t skipped_positives = 0;
};

/// Slot-corruption negatives: tail (p=0.4), head (p=0.4), or relation
/// within the DKG relation set (p=0.2). Every negative is a legal fusion
/// candidate and absent from the positive set (and `extra_exclusions`).
/// A positive whose corruptions keep colliding for 100 attempts is skipped.
std::vector<LabeledCandidate> sample_negatives(std::span<const LabeledCandidate> positives,
                                               const UnifiedVocabulary& uv,
                                               const KnowledgeGraph& dkg,
                                               std::size_t ratio, std::uint64_t seed,
                                               NegativeSampleStats* stats = nullptr,
                                               const FactSet* extra_exclusions = nullptr);

/// (GKG fact, DKG fact) pair whose endpoints are alignment-connected,
/// in unified ids. `inverted` marks head<->tail matches.
struct DistantPair {
  Fact gkg_fact;
  Fact dkg_fact;
  bool inverted = false;

  bool operator==(const DistantPair&) const = default;
};

/// Endpoint matching through the alignment links: (f^g, f^d) is emitted
/// when head(f^g) aligns to head(f^d) and tail(f^g) to tail(f^d), or the
/// head<->tail mirror of that (flagged inverted).
std::vector<DistantPair> build_distant_supervision(const KnowledgeGraph& gkg,
                                                   const KnowledgeGraph& dkg,
                                                   const UnifiedVocabulary& uv);

struct SyntheticConfig {
  std::size_t entities_per_graph = 200;
  std::size_t relations_per_graph = 10;
  std::size_t facts_per_graph = 2000;
  std::size_t rule_count = 4;
  double noise_rate = 0.1;
  double alignment_fraction = 0.5;
};

/// Desk-scale benchmark with a hidden relation map the pipeline must
/// recover. `true_rules` and `dropped_positives` let tests replay the
/// gold construction independently of any model.
struct SyntheticBenchmark {
  KnowledgeGraph dkg{GraphTag::domain};
  KnowledgeGraph gkg{GraphTag::general};
  std::vector<AlignmentPair> alignment;
  UnifiedVocabulary unified;
  std::vector<LabeledCandidate> gold;  // positives then balanced negatives
  // Hidden (gkg-local relation, dkg-local relation) map behind the gold set.
  std::vector<std::pair<RelationId, RelationId>> true_rules;
  std::vector<Fact> dropped_positives;  // noise-held-out mapped facts, unified ids
  SyntheticConfig cfg;
  std::uint64_t seed = 0;
};

SyntheticBenchmark generate_synthetic_benchmark(const SyntheticConfig& cfg, std::uint64_t seed);

/// Recomputes the mapped gold-positive set (pre-noise, minus facts already
/// in the domain graph) from the generator's ground truth.
FactSet replay_true_rules(const KnowledgeGraph& gkg, const KnowledgeGraph& dkg,
                          const UnifiedVocabulary& uv,
                          std::span<const std::pair<RelationId, RelationId>> true_rules);

/// Candidate TSV: `head<TAB>rel<TAB>tail<TAB>label(0|1)`, unified names.
void save_distant_pairs(const std::filesystem::path& path, std::span<const DistantPair> pairs,
                        const UnifiedVocabulary& uv);
std::vector<DistantPair> load_distant_pairs(const std::filesystem::path& path,
                                            const UnifiedVocabulary& uv);

void save_candidates_tsv(const std::filesystem::path& path,
                         std::span<const LabeledCandidate> candidates,
                         const UnifiedVocabulary& uv);
std::vector<LabeledCandidate> load_candidates_tsv(const std::filesystem::path& path,
                                                  const UnifiedVocabulary& uv);

/// Writes dkg.tsv, gkg.tsv, alignment.tsv, gold.tsv, rules.tsv, noise.tsv
/// and a key=value manifest into `dir`.
void save_benchmark(const SyntheticBenchmark& bench, const std::filesystem::path& dir);

struct BenchmarkFiles {
  KnowledgeGraph dkg{GraphTag::domain};
  KnowledgeGraph gkg{GraphTag::general};
  std::vector<AlignmentPair> alignment;
  UnifiedVocabulary unified;
  std::vector<LabeledCandidate> gold;
};
BenchmarkFiles load_benchmark(const std::filesystem::path& dir);

}  // namespace exefuse
