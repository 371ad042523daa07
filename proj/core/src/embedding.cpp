#include "exefuse/embedding.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace exefuse {

namespace {

double energy(std::span<const double> h, std::span<const double> r, std::span<const double> t) {
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    double d = h[i] + r[i] - t[i];
    s += d * d;
  }
  return std::sqrt(s);
}

struct SparseGrad {
  std::unordered_map<std::uint64_t, Vec> rows;  // key: (is_relation<<32)|id
  std::vector<std::uint64_t> order;             // first-touch order, for determinism

  Vec& at(bool is_relation, std::uint32_t id, std::size_t d) {
    std::uint64_t key = (static_cast<std::uint64_t>(is_relation) << 32) | id;
    auto [it, inserted] = rows.try_emplace(key, Vec(d, 0.0));
    if (inserted) order.push_back(key);
    return it->second;
  }
};

// Adds alpha * (h + r - t)/E to the gradient rows of h and r and the
// negation to t. Zero energy has zero subgradient.
void accumulate_margin_grad(const EmbeddingTable& tab, const Fact& f, double alpha,
                            SparseGrad& grad) {
  auto h = tab.entities.row(f.head);
  auto r = tab.relations.row(f.rel);
  auto t = tab.entities.row(f.tail);
  double e = energy(h, r, t);
  if (e == 0.0) return;
  Vec& gh = grad.at(false, f.head, tab.d_emb);
  Vec& gr = grad.at(true, f.rel, tab.d_emb);
  Vec& gt = grad.at(false, f.tail, tab.d_emb);
  for (std::size_t i = 0; i < tab.d_emb; ++i) {
    double u = alpha * (h[i] + r[i] - t[i]) / e;
    gh[i] += u;
    gr[i] += u;
    gt[i] -= u;
  }
}

}  // namespace

PretrainResult pretrain_translational(const KnowledgeGraph& dkg, const KnowledgeGraph& gkg,
                                      const UnifiedVocabulary& uv, const PretrainConfig& cfg,
                                      std::uint64_t seed) {
  if (cfg.d_emb < 8) throw std::invalid_argument("d_emb must be at least 8");
  if (cfg.lr <= 0.0 || cfg.margin <= 0.0)
    throw std::invalid_argument("lr and margin must be positive");
  if (cfg.batch_size == 0 || cfg.neg_per_pos == 0)
    throw std::invalid_argument("batch_size and neg_per_pos must be positive");

  // Training corpus in unified ids: domain facts, general facts, then one
  // alignment-relation fact per aligned pair.
  std::vector<Fact> corpus;
  const auto same_as =
      static_cast<RelationId>(uv.num_relations());  // extra final relation row
  if (!cfg.gkg_only) {
    for (const Fact& f : dkg.facts())
      corpus.push_back({uv.unify_entity(GraphTag::domain, f.head),
                        uv.unify_relation(GraphTag::domain, f.rel),
                        uv.unify_entity(GraphTag::domain, f.tail)});
  }
  for (const Fact& f : gkg.facts())
    corpus.push_back({uv.unify_entity(GraphTag::general, f.head),
                      uv.unify_relation(GraphTag::general, f.rel),
                      uv.unify_entity(GraphTag::general, f.tail)});
  if (!cfg.gkg_only) {
    // Both orientations: the symmetric pair forces the alignment-relation
    // row toward zero, so aligned entities genuinely co-locate instead of
    // settling for a constant offset.
    for (const auto& [g_uni, d_uni] : uv.alignment_links()) {
      corpus.push_back({g_uni, same_as, d_uni});
      corpus.push_back({d_uni, same_as, g_uni});
    }
  }
  if (corpus.empty()) throw std::invalid_argument("no facts to pretrain on");

  Rng master(seed);
  PretrainResult res;
  res.table.d_emb = cfg.d_emb;
  {
    Rng init_rng = master.fork(0);
    res.table.entities = xavier_uniform(uv.num_entities(), cfg.d_emb, cfg.d_emb, cfg.d_emb,
                                        init_rng);
    res.table.relations = xavier_uniform(uv.num_relations() + 1, cfg.d_emb, cfg.d_emb, cfg.d_emb,
                                         init_rng);
  }
  EmbeddingTable& tab = res.table;

  // Negative entities come from the vocabulary actually being trained.
  const std::size_t ent_lo = cfg.gkg_only ? uv.num_dkg_entities() : 0;
  const std::size_t ent_n = uv.num_entities() - ent_lo;
  if (ent_n < 2) throw std::invalid_argument("need at least two entities to corrupt");

  Rng rng = master.fork(1);
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(idx, rng);
    double loss_sum = 0.0;
    std::size_t loss_n = 0;

    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, idx.size());
      SparseGrad grad;
      std::size_t batch_pairs = 0;

      for (std::size_t b = start; b < stop; ++b) {
        const Fact& pos = corpus[idx[b]];
        for (std::size_t k = 0; k < cfg.neg_per_pos; ++k) {
          Fact neg = pos;
          bool corrupt_head = rng.uniform() < 0.5;
          EntityId& slot = corrupt_head ? neg.head : neg.tail;
          const EntityId original = slot;
          int guard = 0;
          do {
            slot = static_cast<EntityId>(ent_lo + rng.below(ent_n));
          } while (slot == original && ++guard < 100);
          if (slot == original) continue;

          double e_pos = energy(tab.entities.row(pos.head), tab.relations.row(pos.rel),
                                tab.entities.row(pos.tail));
          double e_neg = energy(tab.entities.row(neg.head), tab.relations.row(neg.rel),
                                tab.entities.row(neg.tail));
          double loss = cfg.margin + e_pos - e_neg;
          ++batch_pairs;
          ++loss_n;
          if (loss <= 0.0) continue;
          loss_sum += loss;
          accumulate_margin_grad(tab, pos, 1.0, grad);
          accumulate_margin_grad(tab, neg, -1.0, grad);
        }
      }

      if (batch_pairs == 0) continue;
      // Summed batch gradient: lr is the per-pair step, as in classic
      // translational training; epoch-end normalization bounds drift.
      const double step = cfg.lr;
      for (std::uint64_t key : grad.order) {
        const Vec& g = grad.rows.at(key);
        auto id = static_cast<std::uint32_t>(key & 0xFFFFFFFFu);
        auto row = (key >> 32) != 0 ? tab.relations.row(id) : tab.entities.row(id);
        for (std::size_t i = 0; i < tab.d_emb; ++i) row[i] -= step * g[i];
      }
    }

    for (std::size_t e = 0; e < tab.entities.rows; ++e) {
      auto row = tab.entities.row(e);
      double n = l2_norm(row);
      if (n > 0.0)
        for (double& v : row) v /= n;
    }
    res.loss_history.push_back(loss_n == 0 ? 0.0 : loss_sum / static_cast<double>(loss_n));
  }
  return res;
}

double score_triple(const EmbeddingTable& tab, const Fact& triple) {
  if (triple.head >= tab.entities.rows || triple.tail >= tab.entities.rows ||
      triple.rel >= tab.relations.rows)
    throw std::invalid_argument("triple ids out of range for this table");
  return energy(tab.entities.row(triple.head), tab.relations.row(triple.rel),
                tab.entities.row(triple.tail));
}

namespace {

void append_doubles(std::string& out, const Mat& m) {
  const auto* bytes = reinterpret_cast<const char*>(m.data.data());
  out.append(bytes, m.data.size() * sizeof(double));
}

}  // namespace

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& tab) {
  std::ostringstream header;
  header << "EXEFUSE-EMB 1\n"
         << "d_emb " << tab.d_emb << '\n'
         << "entities " << tab.entities.rows << '\n'
         << "relations " << tab.relations.rows << '\n';
  std::string blob = header.str();
  append_doubles(blob, tab.entities);
  append_doubles(blob, tab.relations);
  write_file_atomic(path, blob);
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto fail = [&](const std::string& why) {
    throw std::runtime_error(path.string() + ": " + why);
  };

  std::string magic;
  if (!std::getline(in, magic) || magic != "EXEFUSE-EMB 1") fail("bad magic line");
  auto read_field = [&](const char* name) -> std::size_t {
    std::string line;
    if (!std::getline(in, line)) fail("truncated header");
    std::istringstream ls(line);
    std::string key;
    std::size_t value = 0;
    if (!(ls >> key >> value) || key != name)
      fail(std::string("expected header field '") + name + "'");
    return value;
  };
  EmbeddingTable tab;
  tab.d_emb = read_field("d_emb");
  const std::size_t ne = read_field("entities");
  const std::size_t nr = read_field("relations");
  if (tab.d_emb == 0 || ne == 0 || nr == 0) fail("zero dimension in header");

  tab.entities = Mat(ne, tab.d_emb);
  tab.relations = Mat(nr, tab.d_emb);
  auto read_mat = [&](Mat& m) {
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(m.data.size() * sizeof(double)))
      fail("truncated payload");
  };
  read_mat(tab.entities);
  read_mat(tab.relations);
  if (in.peek() != std::char_traits<char>::eof()) fail("trailing bytes after payload");
  return tab;
}

}  // namespace exefuse
