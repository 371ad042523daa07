#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "exefuse/kg.hpp"
#include "exefuse/numkit.hpp"

namespace exefuse {

/// Joint entity/relation embeddings over the unified vocabulary. The
/// relation matrix carries one extra final row: the reserved alignment
/// relation used only during pretraining.
struct EmbeddingTable {
  Mat entities;   // num unified entities x d_emb
  Mat relations;  // num unified relations + 1 x d_emb
  std::size_t d_emb = 0;

  RelationId alignment_relation() const { return static_cast<RelationId>(relations.rows - 1); }

  bool operator==(const EmbeddingTable&) const = default;
};

struct PretrainConfig {
  std::size_t d_emb = 64;
  std::size_t epochs = 200;
  double margin = 1.0;
  double lr = 0.01;
  std::size_t neg_per_pos = 1;
  std::size_t batch_size = 64;
  bool gkg_only = false;  // drop domain facts and alignment edges from training
};

struct PretrainResult {
  EmbeddingTable table;
  std::vector<double> loss_history;  // mean margin loss per epoch
};

/// Margin-ranking translational pretraining over the joint fact set
/// (domain + general + alignment edges). Entity rows are L2-normalized
/// after every epoch; epochs=0 returns the raw Xavier init.
PretrainResult pretrain_translational(const KnowledgeGraph& dkg, const KnowledgeGraph& gkg,
                                      const UnifiedVocabulary& uv, const PretrainConfig& cfg,
                                      std::uint64_t seed);

/// Translational energy ‖e_h + e_r − e_t‖₂; lower reads as more plausible.
double score_triple(const EmbeddingTable& tab, const Fact& triple);

/// Binary checkpoint: text header (magic, version, dims) then row-major
/// little-endian doubles, entities before relations.
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& tab);
EmbeddingTable load_embeddings(const std::filesystem::path& path);

}  // namespace exefuse
