#include "exefuse/kg.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace exefuse {

std::uint32_t Interner::intern(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it != index_.end()) return it->second;
  auto id = static_cast<std::uint32_t>(names_.size());
  names_.emplace_back(name);
  index_.emplace(names_.back(), id);
  return id;
}

std::optional<std::uint32_t> Interner::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool KnowledgeGraph::add_fact(const Fact& f) {
  if (f.head >= entities_.size() || f.tail >= entities_.size() || f.rel >= relations_.size())
    throw std::invalid_argument("add_fact: id out of range");
  if (index_.count(f)) return false;
  facts_.push_back(f);
  index_.insert(f);
  return true;
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace

KnowledgeGraph KnowledgeGraph::load_tsv(const std::filesystem::path& path, GraphTag tag) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open triple file: " + path.string());
  KnowledgeGraph g(tag);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view sv = strip_cr(line);
    if (sv.empty() || sv.front() == '#') continue;
    auto fields = split_tabs(sv);
    if (fields.size() != 3)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected head<TAB>relation<TAB>tail");
    Fact f;
    f.head = g.add_entity(fields[0]);
    f.rel = g.add_relation(fields[1]);
    f.tail = g.add_entity(fields[2]);
    g.add_fact(f);
  }
  return g;
}

void KnowledgeGraph::save_tsv(const std::filesystem::path& path) const {
  std::ostringstream out;
  for (const Fact& f : facts_)
    out << entity_name(f.head) << '\t' << relation_name(f.rel) << '\t'
        << entity_name(f.tail) << '\n';
  write_file_atomic(path, out.str());
}

std::vector<AlignmentPair> load_alignment_tsv(const std::filesystem::path& path,
                                              const KnowledgeGraph& gkg,
                                              const KnowledgeGraph& dkg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open alignment file: " + path.string());
  std::vector<AlignmentPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view sv = strip_cr(line);
    if (sv.empty() || sv.front() == '#') continue;
    auto fields = split_tabs(sv);
    if (fields.size() != 2)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected gkg_entity<TAB>dkg_entity");
    auto g = gkg.entity_id(fields[0]);
    if (!g)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": unknown GKG entity \"" + std::string(fields[0]) + "\"");
    auto d = dkg.entity_id(fields[1]);
    if (!d)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": unknown DKG entity \"" + std::string(fields[1]) + "\"");
    out.push_back({*g, *d});
  }
  return out;
}

void save_alignment_tsv(const std::filesystem::path& path,
                        std::span<const AlignmentPair> alignment,
                        const KnowledgeGraph& gkg, const KnowledgeGraph& dkg) {
  std::ostringstream out;
  for (const AlignmentPair& p : alignment)
    out << gkg.entity_name(p.gkg_entity) << '\t' << dkg.entity_name(p.dkg_entity) << '\n';
  write_file_atomic(path, out.str());
}

UnifiedVocabulary UnifiedVocabulary::build(const KnowledgeGraph& dkg,
                                           const KnowledgeGraph& gkg,
                                           std::span<const AlignmentPair> alignment) {
  UnifiedVocabulary uv;
  uv.dkg_entities_ = dkg.num_entities();
  uv.dkg_relations_ = dkg.num_relations();

  auto collides_entity = [&](const std::string& name) {
    return dkg.entity_id(name).has_value() && gkg.entity_id(name).has_value();
  };
  auto collides_relation = [&](const std::string& name) {
    return dkg.relation_id(name).has_value() && gkg.relation_id(name).has_value();
  };

  uv.entity_names_.reserve(dkg.num_entities() + gkg.num_entities());
  for (std::size_t i = 0; i < dkg.num_entities(); ++i) {
    const std::string& n = dkg.entity_name(static_cast<EntityId>(i));
    uv.entity_names_.push_back(collides_entity(n) ? "d:" + n : n);
  }
  for (std::size_t i = 0; i < gkg.num_entities(); ++i) {
    const std::string& n = gkg.entity_name(static_cast<EntityId>(i));
    uv.entity_names_.push_back(collides_entity(n) ? "g:" + n : n);
  }
  uv.relation_names_.reserve(dkg.num_relations() + gkg.num_relations());
  for (std::size_t i = 0; i < dkg.num_relations(); ++i) {
    const std::string& n = dkg.relation_name(static_cast<RelationId>(i));
    uv.relation_names_.push_back(collides_relation(n) ? "d:" + n : n);
  }
  for (std::size_t i = 0; i < gkg.num_relations(); ++i) {
    const std::string& n = gkg.relation_name(static_cast<RelationId>(i));
    uv.relation_names_.push_back(collides_relation(n) ? "g:" + n : n);
  }
  for (std::size_t i = 0; i < uv.entity_names_.size(); ++i)
    uv.entity_index_.emplace(uv.entity_names_[i], static_cast<EntityId>(i));
  for (std::size_t i = 0; i < uv.relation_names_.size(); ++i)
    uv.relation_index_.emplace(uv.relation_names_[i], static_cast<RelationId>(i));

  for (const AlignmentPair& p : alignment) {
    if (p.gkg_entity >= gkg.num_entities() || p.dkg_entity >= dkg.num_entities())
      throw std::invalid_argument("UnifiedVocabulary::build: alignment id out of range");
    EntityId gu = uv.unify_entity(GraphTag::general, p.gkg_entity);
    EntityId du = uv.unify_entity(GraphTag::domain, p.dkg_entity);
    uv.links_.emplace_back(gu, du);
    uv.images_[gu].push_back(du);
    uv.sources_[du].push_back(gu);
  }
  return uv;
}

EntityId UnifiedVocabulary::unify_entity(GraphTag g, EntityId local) const {
  if (g == GraphTag::domain) {
    if (local >= dkg_entities_) throw std::out_of_range("unify_entity: bad DKG id");
    return local;
  }
  EntityId u = static_cast<EntityId>(dkg_entities_) + local;
  if (u >= entity_names_.size()) throw std::out_of_range("unify_entity: bad GKG id");
  return u;
}

RelationId UnifiedVocabulary::unify_relation(GraphTag g, RelationId local) const {
  if (g == GraphTag::domain) {
    if (local >= dkg_relations_) throw std::out_of_range("unify_relation: bad DKG id");
    return local;
  }
  RelationId u = static_cast<RelationId>(dkg_relations_) + local;
  if (u >= relation_names_.size()) throw std::out_of_range("unify_relation: bad GKG id");
  return u;
}

std::optional<EntityId> UnifiedVocabulary::find_entity(std::string_view name) const {
  auto it = entity_index_.find(std::string(name));
  if (it == entity_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> UnifiedVocabulary::find_relation(std::string_view name) const {
  auto it = relation_index_.find(std::string(name));
  if (it == relation_index_.end()) return std::nullopt;
  return it->second;
}

std::span<const EntityId> UnifiedVocabulary::aligned_images(EntityId unified_gkg) const {
  auto it = images_.find(unified_gkg);
  if (it == images_.end()) return {};
  return it->second;
}

std::span<const EntityId> UnifiedVocabulary::aligned_sources(EntityId unified_dkg) const {
  auto it = sources_.find(unified_dkg);
  if (it == sources_.end()) return {};
  return it->second;
}

bool UnifiedVocabulary::candidate_is_fusable(const Fact& t, const KnowledgeGraph& dkg) const {
  if (t.head >= num_entities() || t.tail >= num_entities() || t.rel >= num_relations())
    return false;
  if (!is_dkg_relation(t.rel)) return false;
  if (entity_graph(t.head) == GraphTag::domain && entity_graph(t.tail) == GraphTag::domain) {
    Fact local{entity_local(t.head), relation_local(t.rel), entity_local(t.tail)};
    if (dkg.contains_fact(local)) return false;
  }
  return true;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace exefuse
