#include "exefuse/evaluator.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace exefuse {

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  const double total = static_cast<double>(tp + fp + tn + fn);
  if (total > 0.0) m.acc = static_cast<double>(tp + tn) / total;
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision + m.recall > 0.0)
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

Metrics classify_triples(const ExeFuseModel& model, const EmbeddingTable& tab,
                         std::span<const LabeledCandidate> labeled, double delta) {
  if (labeled.empty()) throw std::invalid_argument("cannot evaluate an empty candidate set");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (const LabeledCandidate& c : labeled) {
    const bool predicted = forward(model, tab, c.triple).p > delta;
    if (c.label == 1)
      predicted ? ++tp : ++fn;
    else
      predicted ? ++fp : ++tn;
  }
  return metrics_from_counts(tp, fp, tn, fn);
}

Vec score_candidates(const ExeFuseModel& model, const EmbeddingTable& tab,
                     std::span<const LabeledCandidate> labeled) {
  Vec probs;
  probs.reserve(labeled.size());
  for (const LabeledCandidate& c : labeled) probs.push_back(forward(model, tab, c.triple).p);
  return probs;
}

SeenUnseenSplit split_seen_unseen(std::span<const LabeledCandidate> test,
                                  std::span<const LabeledCandidate> train) {
  std::unordered_set<EntityId> known;
  for (const LabeledCandidate& c : train) {
    known.insert(c.triple.head);
    known.insert(c.triple.tail);
  }
  SeenUnseenSplit out;
  for (const LabeledCandidate& c : test) {
    if (known.count(c.triple.head) != 0 && known.count(c.triple.tail) != 0)
      out.seen.push_back(c);
    else
      out.unseen.push_back(c);
  }
  return out;
}

namespace {

// Candidate endpoints for one general fact, following the fuse rules:
// aligned domain images where they exist, the entity itself otherwise.
void fuse_endpoints(const UnifiedVocabulary& uv, EntityId unified_gkg,
                    std::vector<EntityId>& out) {
  auto images = uv.aligned_images(unified_gkg);
  out.assign(images.begin(), images.end());
  if (out.empty()) out.push_back(unified_gkg);
}

// Best fusion probability over every legal candidate derived from one
// general fact; negative when no candidate is legal.
double best_candidate_prob(const ExeFuseModel& model, const EmbeddingTable& tab,
                           const KnowledgeGraph& dkg, const UnifiedVocabulary& uv,
                           const Fact& unified_src, std::vector<EntityId>& heads,
                           std::vector<EntityId>& tails) {
  fuse_endpoints(uv, unified_src.head, heads);
  fuse_endpoints(uv, unified_src.tail, tails);
  double best = -1.0;
  for (EntityId h : heads)
    for (EntityId t : tails)
      for (std::size_t r = 0; r < uv.num_dkg_relations(); ++r) {
        Fact cand{h, static_cast<RelationId>(r), t};
        if (!uv.candidate_is_fusable(cand, dkg)) continue;
        best = std::max(best, forward(model, tab, cand).p);
      }
  return best;
}

}  // namespace

Metrics evaluate_ref(const ExeFuseModel& model, const EmbeddingTable& tab,
                     std::span<const EntityCandidate> entities, const KnowledgeGraph& gkg,
                     const KnowledgeGraph& dkg, const UnifiedVocabulary& uv, double delta,
                     std::size_t* isolated) {
  if (entities.empty()) throw std::invalid_argument("cannot evaluate an empty entity set");

  std::unordered_map<EntityId, std::vector<Fact>> incident;  // unified entity -> unified facts
  for (const Fact& f : gkg.facts()) {
    Fact u{uv.unify_entity(GraphTag::general, f.head), uv.unify_relation(GraphTag::general, f.rel),
           uv.unify_entity(GraphTag::general, f.tail)};
    incident[u.head].push_back(u);
    if (u.tail != u.head) incident[u.tail].push_back(u);
  }

  std::size_t tp = 0, fp = 0, tn = 0, fn = 0, no_facts = 0;
  std::vector<EntityId> heads, tails;
  for (const EntityCandidate& e : entities) {
    auto it = incident.find(e.entity);
    bool predicted = false;
    if (it == incident.end()) {
      ++no_facts;
    } else {
      double best = -1.0;
      for (const Fact& src : it->second)
        best = std::max(best, best_candidate_prob(model, tab, dkg, uv, src, heads, tails));
      predicted = best > delta;
    }
    if (e.label == 1)
      predicted ? ++tp : ++fn;
    else
      predicted ? ++fp : ++tn;
  }
  if (isolated != nullptr) *isolated = no_facts;
  return metrics_from_counts(tp, fp, tn, fn);
}

PipelineResult run_pipeline(const SyntheticBenchmark& bench, const PipelineConfig& cfg,
                            const DatasetSplit* fixed_split) {
  Rng master(cfg.seed);
  PipelineResult out;
  out.split = fixed_split != nullptr
                  ? *fixed_split
                  : split_dataset(bench.gold, cfg.scheme, master.fork(10).seed());
  out.d_pos = build_distant_supervision(bench.gkg, bench.dkg, bench.unified);

  out.table =
      pretrain_translational(bench.dkg, bench.gkg, bench.unified, cfg.pretrain, master.fork(11).seed())
          .table;
  out.model = make_model(cfg.model, cfg.pretrain.d_emb, master.fork(12).seed());
  train_dkg_encoder(out.model, out.table, bench.dkg, bench.unified, cfg.dkg_encoder,
                    master.fork(13).seed());

  std::vector<LabeledCandidate> train_pos;
  for (const LabeledCandidate& c : out.split.train)
    if (c.label == 1) train_pos.push_back(c);
  out.model.protos = fit_prototypes(out.model, out.table, bench.dkg, bench.unified, train_pos,
                                    cfg.model.k, cfg.model.tau, master.fork(14).seed());

  TrainConfig tc = cfg.train;
  tc.seed = master.fork(15).seed();

  NegativeResampler resampler;
  FactSet off_split;
  std::size_t neg_ratio = 1;
  if (tc.resample_negatives) {
    for (const LabeledCandidate& c : out.split.valid)
      if (c.label == 1) off_split.insert(c.triple);
    for (const LabeledCandidate& c : out.split.test)
      if (c.label == 1) off_split.insert(c.triple);
    const std::size_t neg_n = out.split.train.size() - train_pos.size();
    if (!train_pos.empty() && neg_n > train_pos.size())
      neg_ratio = (neg_n + train_pos.size() / 2) / train_pos.size();
    const std::uint64_t rs = master.fork(16).seed();
    resampler = [&bench, &train_pos, &off_split, neg_ratio, rs](std::uint64_t epoch) {
      return sample_negatives(train_pos, bench.unified, bench.dkg, neg_ratio,
                              Rng(rs).fork(epoch).seed(), nullptr, &off_split);
    };
  }
  out.report = train(out.model, out.table, out.split, out.d_pos, tc, resampler);
  if (!out.split.test.empty())
    out.test_metrics = classify_triples(out.model, out.table, out.split.test, tc.delta);
  return out;
}

Metrics run_ablation(Variant variant, const SyntheticBenchmark& bench,
                     const PipelineConfig& cfg) {
  PipelineConfig local = cfg;
  local.model.variant = variant;
  if (variant == Variant::direct_classification) local.train.lambda = 0.0;
  return run_pipeline(bench, local).test_metrics;
}

std::vector<ScalingPoint> measure_scaling(const ExeFuseModel& model, const EmbeddingTable& tab,
                                          const KnowledgeGraph& gkg, const KnowledgeGraph& dkg,
                                          const UnifiedVocabulary& uv,
                                          std::span<const std::size_t> sizes,
                                          std::size_t repetitions) {
  if (sizes.size() < 2) throw std::invalid_argument("need at least two sizes");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1]) throw std::invalid_argument("sizes must strictly increase");
  if (repetitions == 0) throw std::invalid_argument("repetitions must be positive");
  if (sizes.back() > gkg.facts().size())
    throw std::invalid_argument("size exceeds the available general facts");

  std::vector<Fact> sources;  // unified, outside the timed region
  sources.reserve(sizes.back());
  for (std::size_t i = 0; i < sizes.back(); ++i) {
    const Fact& f = gkg.facts()[i];
    sources.push_back({uv.unify_entity(GraphTag::general, f.head),
                       uv.unify_relation(GraphTag::general, f.rel),
                       uv.unify_entity(GraphTag::general, f.tail)});
  }

  volatile double sink = 0.0;
  std::vector<EntityId> heads, tails;
  std::vector<ScalingPoint> out;
  Vec times(repetitions);

  for (std::size_t size : sizes) {
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < size; ++i) {
        fuse_endpoints(uv, sources[i].head, heads);
        fuse_endpoints(uv, sources[i].tail, tails);
        for (EntityId h : heads)
          for (EntityId t : tails)
            for (std::size_t r = 0; r < uv.num_dkg_relations(); ++r) {
              Fact cand{h, static_cast<RelationId>(r), t};
              if (!uv.candidate_is_fusable(cand, dkg)) continue;
              sink = sink + forward(model, tab, cand).p;
            }
      }
      const auto t1 = std::chrono::steady_clock::now();
      times[rep] = std::chrono::duration<double>(t1 - t0).count();
    }

    ScalingPoint pt;
    pt.gkg_facts = size;
    for (double t : times) pt.mean_seconds += t;
    pt.mean_seconds /= static_cast<double>(repetitions);
    for (double t : times)
      pt.stddev_seconds += (t - pt.mean_seconds) * (t - pt.mean_seconds);
    pt.stddev_seconds = std::sqrt(pt.stddev_seconds / static_cast<double>(repetitions));
    Vec sorted = times;
    std::sort(sorted.begin(), sorted.end());
    pt.median_seconds = repetitions % 2 == 1
                            ? sorted[repetitions / 2]
                            : 0.5 * (sorted[repetitions / 2 - 1] + sorted[repetitions / 2]);
    out.push_back(pt);
  }
  return out;
}

namespace {

std::string fmt_metric(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("double formatting failed");
  return std::string(buf, end);
}

}  // namespace

void save_metrics_tsv(const std::filesystem::path& path,
                      std::span<const std::pair<std::string, Metrics>> rows) {
  std::ostringstream os;
  os << "config\tacc\tp\tr\tf1\ttp\tfp\ttn\tfn\n";
  for (const auto& [name, m] : rows)
    os << name << '\t' << fmt_metric(m.acc) << '\t' << fmt_metric(m.precision) << '\t'
       << fmt_metric(m.recall) << '\t' << fmt_metric(m.f1) << '\t' << m.tp << '\t' << m.fp << '\t'
       << m.tn << '\t' << m.fn << '\n';
  write_file_atomic(path, os.str());
}

void save_predictions(const std::filesystem::path& path, const ExeFuseModel& model,
                      const EmbeddingTable& tab, std::span<const LabeledCandidate> labeled,
                      const UnifiedVocabulary& uv) {
  std::ostringstream os;
  os << "head\trel\ttail\tlabel\tprob\n";
  for (const LabeledCandidate& c : labeled)
    os << uv.entity_name(c.triple.head) << '\t' << uv.relation_name(c.triple.rel) << '\t'
       << uv.entity_name(c.triple.tail) << '\t' << c.label << '\t'
       << fmt_metric(forward(model, tab, c.triple).p) << '\n';
  write_file_atomic(path, os.str());
}

}  // namespace exefuse
