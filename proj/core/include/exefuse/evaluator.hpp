#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "exefuse/dataset.hpp"
#include "exefuse/embedding.hpp"
#include "exefuse/kg.hpp"
#include "exefuse/model.hpp"
#include "exefuse/trainer.hpp"

namespace exefuse {

struct Metrics {
  double acc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);

/// Triple classification at threshold delta; a probability exactly at delta
/// counts as a negative prediction.
Metrics classify_triples(const ExeFuseModel& model, const EmbeddingTable& tab,
                         std::span<const LabeledCandidate> labeled, double delta);

/// Per-candidate fusion probabilities in input order.
Vec score_candidates(const ExeFuseModel& model, const EmbeddingTable& tab,
                     std::span<const LabeledCandidate> labeled);

struct SeenUnseenSplit {
  std::vector<LabeledCandidate> seen;
  std::vector<LabeledCandidate> unseen;  // head or tail entity absent from training
};

SeenUnseenSplit split_seen_unseen(std::span<const LabeledCandidate> test,
                                  std::span<const LabeledCandidate> train);

struct EntityCandidate {
  EntityId entity = 0;  // unified general-graph entity
  int label = 0;        // 1 = relevant
};

/// Relevant-entity finding: an entity is predicted relevant when the best
/// fusion probability over candidates generated from its incident general
/// facts exceeds delta. Entities with no incident facts predict negative;
/// their count is reported through `isolated` when non-null.
Metrics evaluate_ref(const ExeFuseModel& model, const EmbeddingTable& tab,
                     std::span<const EntityCandidate> entities, const KnowledgeGraph& gkg,
                     const KnowledgeGraph& dkg, const UnifiedVocabulary& uv, double delta,
                     std::size_t* isolated = nullptr);

struct PipelineConfig {
  PretrainConfig pretrain;
  ModelConfig model;
  DkgEncoderConfig dkg_encoder;
  TrainConfig train;
  SplitScheme scheme = SplitScheme::s1;
  std::uint64_t seed = 0;
};

struct PipelineResult {
  EmbeddingTable table;
  ExeFuseModel model;
  DatasetSplit split;
  std::vector<DistantPair> d_pos;
  TrainReport report;
  Metrics test_metrics;
};

/// Full training pipeline over a benchmark: split, pretrain, domain-encoder
/// fine-tune, prototype fit, joint training, test metrics. Stage seeds are
/// derived from `cfg.seed` at fixed offsets. A caller-supplied split
/// overrides the internal one.
PipelineResult run_pipeline(const SyntheticBenchmark& bench, const PipelineConfig& cfg,
                            const DatasetSplit* fixed_split = nullptr);

/// Trains and evaluates one model variant from scratch; the baseline model
/// and config are never mutated. direct_classification drops the
/// consistency objective along with the executed-state inputs.
Metrics run_ablation(Variant variant, const SyntheticBenchmark& bench, const PipelineConfig& cfg);

struct ScalingPoint {
  std::size_t gkg_facts = 0;
  double mean_seconds = 0.0;
  double median_seconds = 0.0;
  double stddev_seconds = 0.0;
};

/// Times the fuse scoring pass over truncated prefixes of the general fact
/// list. Pure compute, no output collection or I/O inside the timed region.
std::vector<ScalingPoint> measure_scaling(const ExeFuseModel& model, const EmbeddingTable& tab,
                                          const KnowledgeGraph& gkg, const KnowledgeGraph& dkg,
                                          const UnifiedVocabulary& uv,
                                          std::span<const std::size_t> sizes,
                                          std::size_t repetitions);

/// One row per configuration: config, acc, p, r, f1, tp, fp, tn, fn.
void save_metrics_tsv(const std::filesystem::path& path,
                      std::span<const std::pair<std::string, Metrics>> rows);

/// Per-example dump: head, rel, tail, label, prob (names, tab-separated).
void save_predictions(const std::filesystem::path& path, const ExeFuseModel& model,
                      const EmbeddingTable& tab, std::span<const LabeledCandidate> labeled,
                      const UnifiedVocabulary& uv);

}  // namespace exefuse
