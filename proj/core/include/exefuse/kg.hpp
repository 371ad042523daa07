#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace exefuse {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

struct Fact {
  EntityId head = 0;
  RelationId rel = 0;
  EntityId tail = 0;

  bool operator==(const Fact&) const = default;
};

struct FactHash {
  std::size_t operator()(const Fact& f) const noexcept {
    std::uint64_t x = (static_cast<std::uint64_t>(f.head) << 32) ^ f.tail;
    x ^= static_cast<std::uint64_t>(f.rel) * 0x9E3779B97F4A7C15ull;
    x ^= x >> 33;
    x *= 0xFF51AFD7ED558CCDull;
    x ^= x >> 33;
    return static_cast<std::size_t>(x);
  }
};

using FactSet = std::unordered_set<Fact, FactHash>;

enum class GraphTag { domain, general };

/// Insertion-ordered name <-> dense-id bimap.
class Interner {
 public:
  std::uint32_t intern(std::string_view name);
  std::optional<std::uint32_t> find(std::string_view name) const;
  const std::string& name(std::uint32_t id) const { return names_[id]; }
  std::size_t size() const { return names_.size(); }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

/// Interned triple store for one graph (domain or general).
/// Immutable once built; all queries are const and thread-safe.
class KnowledgeGraph {
 public:
  explicit KnowledgeGraph(GraphTag tag) : tag_(tag) {}

  GraphTag tag() const { return tag_; }

  EntityId add_entity(std::string_view name) { return entities_.intern(name); }
  RelationId add_relation(std::string_view name) { return relations_.intern(name); }
  /// Returns false when the fact is already present (duplicates are dropped).
  bool add_fact(const Fact& f);

  bool contains_fact(const Fact& f) const { return index_.count(f) > 0; }

  std::size_t num_entities() const { return entities_.size(); }
  std::size_t num_relations() const { return relations_.size(); }
  const std::vector<Fact>& facts() const { return facts_; }

  const std::string& entity_name(EntityId id) const { return entities_.name(id); }
  const std::string& relation_name(RelationId id) const { return relations_.name(id); }
  std::optional<EntityId> entity_id(std::string_view name) const { return entities_.find(name); }
  std::optional<RelationId> relation_id(std::string_view name) const { return relations_.find(name); }

  /// TSV: `head<TAB>relation<TAB>tail`, '#' comment lines skipped.
  static KnowledgeGraph load_tsv(const std::filesystem::path& path, GraphTag tag);
  void save_tsv(const std::filesystem::path& path) const;

 private:
  GraphTag tag_;
  Interner entities_;
  Interner relations_;
  std::vector<Fact> facts_;
  FactSet index_;
};

/// Graph-local alignment pair: a GKG entity linked to its DKG counterpart.
struct AlignmentPair {
  EntityId gkg_entity = 0;
  EntityId dkg_entity = 0;

  bool operator==(const AlignmentPair&) const = default;
};

/// TSV: `gkg_entity<TAB>dkg_entity`; unknown names are rejected with the line number.
std::vector<AlignmentPair> load_alignment_tsv(const std::filesystem::path& path,
                                              const KnowledgeGraph& gkg,
                                              const KnowledgeGraph& dkg);
void save_alignment_tsv(const std::filesystem::path& path,
                        std::span<const AlignmentPair> alignment,
                        const KnowledgeGraph& gkg, const KnowledgeGraph& dkg);

/// Joint id space over both graphs. Entities are never merged by name;
/// cross-graph identity lives only in the alignment link set. Unified
/// entity ids enumerate DKG entities first, then GKG entities; relations
/// likewise. Names that collide across graphs are disambiguated with a
/// "d:" / "g:" prefix.
class UnifiedVocabulary {
 public:
  static UnifiedVocabulary build(const KnowledgeGraph& dkg, const KnowledgeGraph& gkg,
                                 std::span<const AlignmentPair> alignment);

  std::size_t num_entities() const { return entity_names_.size(); }
  std::size_t num_relations() const { return relation_names_.size(); }
  std::size_t num_dkg_entities() const { return dkg_entities_; }
  std::size_t num_dkg_relations() const { return dkg_relations_; }

  EntityId unify_entity(GraphTag g, EntityId local) const;
  RelationId unify_relation(GraphTag g, RelationId local) const;

  GraphTag entity_graph(EntityId unified) const {
    return unified < dkg_entities_ ? GraphTag::domain : GraphTag::general;
  }
  EntityId entity_local(EntityId unified) const {
    return unified < dkg_entities_ ? unified : unified - static_cast<EntityId>(dkg_entities_);
  }
  GraphTag relation_graph(RelationId unified) const {
    return unified < dkg_relations_ ? GraphTag::domain : GraphTag::general;
  }
  RelationId relation_local(RelationId unified) const {
    return unified < dkg_relations_ ? unified : unified - static_cast<RelationId>(dkg_relations_);
  }
  bool is_dkg_relation(RelationId unified) const { return unified < dkg_relations_; }

  const std::string& entity_name(EntityId unified) const { return entity_names_[unified]; }
  const std::string& relation_name(RelationId unified) const { return relation_names_[unified]; }
  std::optional<EntityId> find_entity(std::string_view name) const;
  std::optional<RelationId> find_relation(std::string_view name) const;

  /// Alignment links in unified ids: (gkg entity, dkg entity).
  const std::vector<std::pair<EntityId, EntityId>>& alignment_links() const { return links_; }
  /// DKG images of a unified GKG entity (empty when unaligned).
  std::span<const EntityId> aligned_images(EntityId unified_gkg) const;
  /// GKG sources of a unified DKG entity (empty when unaligned).
  std::span<const EntityId> aligned_sources(EntityId unified_dkg) const;

  /// Eq.-style legality of a candidate fused triple: endpoints anywhere in
  /// the unified entity set, relation from the DKG, and the triple not
  /// already a DKG fact.
  bool candidate_is_fusable(const Fact& unified_triple, const KnowledgeGraph& dkg) const;

 private:
  std::size_t dkg_entities_ = 0;
  std::size_t dkg_relations_ = 0;
  std::vector<std::string> entity_names_;
  std::vector<std::string> relation_names_;
  std::unordered_map<std::string, EntityId> entity_index_;
  std::unordered_map<std::string, RelationId> relation_index_;
  std::vector<std::pair<EntityId, EntityId>> links_;
  std::unordered_map<EntityId, std::vector<EntityId>> images_;   // gkg -> dkg
  std::unordered_map<EntityId, std::vector<EntityId>> sources_;  // dkg -> gkg
};

/// Writes via a ".tmp" sibling and renames on success so readers never see
/// partial files.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace exefuse
