#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "exefuse/dataset.hpp"
#include "exefuse/model.hpp"

namespace exefuse {

struct TrainConfig {
  double lambda = 1.0;  // consistency-loss weight
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  std::size_t patience = 10;  // early stop on stalled validation F1
  double delta = 0.5;         // decision threshold
  bool resample_negatives = false;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double j = 0.0;
  double j_main = 0.0;
  double j_rule = 0.0;
  double val_f1 = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 = no epoch ran
  double best_val_f1 = 0.0;
  bool early_stopped = false;
};

/// Per-example binary cross-entropy −[y ln p + (1−y) ln(1−p)]; optionally
/// also yields dL/dp.
double bce_loss(double p, int y, double* dl_dp = nullptr);

/// Consistency objective: Σ ‖qhat(f_g) − domain_encoding(f_d)‖² over the
/// pairs. Targets are detached; gradients (if requested) flow only through
/// the source encoder and rule bank.
double rule_consistency_loss(const ExeFuseModel& model, const EmbeddingTable& tab,
                             std::span<const DistantPair> pairs, Gradients* grad = nullptr);

struct DkgEncoderConfig {
  std::size_t rounds = 3;  // re-cluster cycles
  std::size_t epochs_per_round = 10;
  double lr = 0.003;  // Adam step size
  double margin = 2.0;  // squared-distance hinge; ~2x tau keeps corrupted kernels small
  std::size_t batch_size = 64;
};

/// Contrastive fine-tune of the domain encoder: domain facts are pulled
/// toward their current cluster centroid, slot corruptions pushed outside
/// the margin. Re-clusters between rounds; the encoder is frozen afterward.
/// Returns the mean loss per epoch.
std::vector<double> train_dkg_encoder(ExeFuseModel& model, const EmbeddingTable& tab,
                                      const KnowledgeGraph& dkg, const UnifiedVocabulary& uv,
                                      const DkgEncoderConfig& cfg, std::uint64_t seed);

/// Clusters the domain-encoder images of all domain facts and freezes the
/// log-density statistics computed on the training positives.
PrototypeSet fit_prototypes(const ExeFuseModel& model, const EmbeddingTable& tab,
                            const KnowledgeGraph& dkg, const UnifiedVocabulary& uv,
                            std::span<const LabeledCandidate> train_positives, std::size_t k,
                            double tau, std::uint64_t seed);

/// Scale-invariant first-order optimizer over one flat parameter vector.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1, double beta2, double eps);
  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vec m_, v_;
  std::size_t t_ = 0;
};

using NegativeResampler = std::function<std::vector<LabeledCandidate>(std::uint64_t epoch)>;

/// Joint optimization: classification batches (batch-mean BCE) interleaved
/// 1:1 with consistency batches (λ-weighted pair sums) under one Adam
/// sequence. Tracks validation F1 per epoch, early-stops on patience, and
/// restores the best-F1 parameters into `model`.
TrainReport train(ExeFuseModel& model, const EmbeddingTable& tab, const DatasetSplit& split,
                  std::span<const DistantPair> d_pos, const TrainConfig& cfg,
                  const NegativeResampler& resample = nullptr);

/// Line-oriented report: epoch, J, J_main, J_rule, validation F1.
void save_train_report(const std::filesystem::path& path, const TrainReport& report);
TrainReport load_train_report(const std::filesystem::path& path);

struct FusedFact {
  Fact triple;  // unified ids, relation from the domain set
  double p = 0.0;
  Fact source;  // originating general-graph fact, unified ids
};

/// Generates, scores, and filters fused candidates: per general fact, its
/// aligned (or original) endpoints crossed with every domain relation.
/// Keeps legal candidates with p > delta, at most top_m per source fact
/// (0 = unlimited), ordered by descending probability.
std::vector<FusedFact> fuse(const ExeFuseModel& model, const EmbeddingTable& tab,
                            const KnowledgeGraph& gkg, const KnowledgeGraph& dkg,
                            const UnifiedVocabulary& uv, double delta, std::size_t top_m = 0);

/// One evaluation of J = mean BCE + λ · pair-sum on explicit batches;
/// the gradient variant accumulates into `grad` and returns the same value.
struct JointBatch {
  std::vector<LabeledCandidate> candidates;
  std::vector<DistantPair> pairs;
  double lambda = 1.0;
};

double joint_loss(const ExeFuseModel& model, const EmbeddingTable& tab, const JointBatch& batch);
double joint_loss_grad(const ExeFuseModel& model, const EmbeddingTable& tab,
                       const JointBatch& batch, Gradients& grad);

/// Central-difference audit of the analytic joint-loss gradient over every
/// trainable parameter; returns the max relative error.
double gradcheck_joint(const ExeFuseModel& model, const EmbeddingTable& tab,
                       const JointBatch& batch, double eps = 1e-5);

}  // namespace exefuse
