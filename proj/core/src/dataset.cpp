#include "exefuse/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "exefuse/numkit.hpp"

namespace exefuse {

namespace {

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("double formatting failed");
  return std::string(buf, end);
}

}  // namespace

const char* scheme_name(SplitScheme s) { return s == SplitScheme::s1 ? "s1" : "s2"; }

SplitScheme parse_scheme(std::string_view name) {
  if (name == "s1") return SplitScheme::s1;
  if (name == "s2") return SplitScheme::s2;
  throw std::invalid_argument("unknown split scheme: " + std::string(name));
}

DatasetSplit split_dataset(std::vector<LabeledCandidate> candidates, SplitScheme scheme,
                           std::uint64_t seed) {
  if (candidates.size() < 10)
    throw std::invalid_argument("split_dataset needs at least 10 candidates, got " +
                                std::to_string(candidates.size()));
  Rng rng(seed);
  shuffle(candidates, rng);

  const std::size_t n = candidates.size();
  const auto n_train =
      static_cast<std::size_t>(std::llround(train_fraction(scheme) * static_cast<double>(n)));
  const std::size_t rem = n - n_train;
  const std::size_t n_test = rem - rem / 2;

  DatasetSplit out;
  out.scheme = scheme;
  out.seed = seed;
  out.train.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n_train));

  // Remainder keeps its shuffled order; test gets a label-balanced draw from
  // it, valid takes what is left.
  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = n_train; i < n; ++i)
    (candidates[i].label == 1 ? pos_idx : neg_idx).push_back(i);

  std::size_t want_pos = pos_idx.size() >= neg_idx.size() ? (n_test + 1) / 2 : n_test / 2;
  want_pos = std::min(want_pos, pos_idx.size());
  std::size_t want_neg = n_test - want_pos;
  if (want_neg > neg_idx.size()) {
    want_neg = neg_idx.size();
    want_pos = n_test - want_neg;
  }

  std::vector<bool> in_test(n, false);
  for (std::size_t i = 0; i < want_pos; ++i) in_test[pos_idx[i]] = true;
  for (std::size_t i = 0; i < want_neg; ++i) in_test[neg_idx[i]] = true;
  for (std::size_t i = n_train; i < n; ++i)
    (in_test[i] ? out.test : out.valid).push_back(candidates[i]);
  return out;
}

std::vector<LabeledCandidate> sample_negatives(std::span<const LabeledCandidate> positives,
                                               const UnifiedVocabulary& uv,
                                               const KnowledgeGraph& dkg,
                                               std::size_t ratio, std::uint64_t seed,
                                               NegativeSampleStats* stats,
                                               const FactSet* extra_exclusions) {
  if (uv.num_entities() < 2)
    throw std::invalid_argument("negative sampling needs at least two entities");
  FactSet taken;
  for (const auto& c : positives) taken.insert(c.triple);
  if (extra_exclusions != nullptr)
    taken.insert(extra_exclusions->begin(), extra_exclusions->end());

  Rng rng(seed);
  NegativeSampleStats local{};
  std::vector<LabeledCandidate> out;
  out.reserve(positives.size() * ratio);

  for (const auto& pos : positives) {
    bool gave_up = false;
    for (std::size_t k = 0; k < ratio && !gave_up; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        Fact cand = pos.triple;
        double u = rng.uniform();
        int slot = u < 0.4 ? 0 : (u < 0.8 ? 1 : 2);
        // Relation corruption is only meaningful with a second domain
        // relation to swap in; fold it into tail corruption otherwise.
        if (slot == 2 && uv.num_dkg_relations() < 2) slot = 0;
        if (slot == 0) {
          cand.tail = static_cast<EntityId>(rng.below(uv.num_entities()));
          if (cand.tail == pos.triple.tail) continue;
        } else if (slot == 1) {
          cand.head = static_cast<EntityId>(rng.below(uv.num_entities()));
          if (cand.head == pos.triple.head) continue;
        } else {
          cand.rel = static_cast<RelationId>(rng.below(uv.num_dkg_relations()));
          if (cand.rel == pos.triple.rel) continue;
        }
        if (!uv.candidate_is_fusable(cand, dkg)) continue;
        if (taken.contains(cand)) continue;
        taken.insert(cand);
        out.push_back({cand, 0, std::nullopt, Provenance::corrupted});
        switch (slot) {
          case 0: ++local.corrupted_tail; break;
          case 1: ++local.corrupted_head; break;
          default: ++local.corrupted_rel; break;
        }
        placed = true;
      }
      if (!placed) {
        ++local.skipped_positives;
        gave_up = true;
      }
    }
  }
  if (stats != nullptr) *stats = local;
  return out;
}

namespace {

std::uint64_t endpoint_key(EntityId h, EntityId t) {
  return (static_cast<std::uint64_t>(h) << 32) | static_cast<std::uint64_t>(t);
}

}  // namespace

std::vector<DistantPair> build_distant_supervision(const KnowledgeGraph& gkg,
                                                   const KnowledgeGraph& dkg,
                                                   const UnifiedVocabulary& uv) {
  // Domain facts bucketed by unified endpoint pair, in insertion order.
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> by_endpoints;
  std::vector<Fact> dkg_unified;
  dkg_unified.reserve(dkg.facts().size());
  for (const Fact& f : dkg.facts()) {
    Fact u{uv.unify_entity(GraphTag::domain, f.head), uv.unify_relation(GraphTag::domain, f.rel),
           uv.unify_entity(GraphTag::domain, f.tail)};
    by_endpoints[endpoint_key(u.head, u.tail)].push_back(dkg_unified.size());
    dkg_unified.push_back(u);
  }

  std::vector<DistantPair> out;
  for (const Fact& f : gkg.facts()) {
    Fact g{uv.unify_entity(GraphTag::general, f.head), uv.unify_relation(GraphTag::general, f.rel),
           uv.unify_entity(GraphTag::general, f.tail)};
    auto head_images = uv.aligned_images(g.head);
    auto tail_images = uv.aligned_images(g.tail);
    if (head_images.empty() || tail_images.empty()) continue;

    std::vector<std::size_t> matched;  // guards the mirror pass on symmetric hits
    for (EntityId hd : head_images) {
      for (EntityId td : tail_images) {
        if (auto it = by_endpoints.find(endpoint_key(hd, td)); it != by_endpoints.end()) {
          for (std::size_t idx : it->second) {
            out.push_back({g, dkg_unified[idx], false});
            matched.push_back(idx);
          }
        }
      }
    }
    for (EntityId td : tail_images) {
      for (EntityId hd : head_images) {
        if (auto it = by_endpoints.find(endpoint_key(td, hd)); it != by_endpoints.end()) {
          for (std::size_t idx : it->second) {
            if (std::ranges::find(matched, idx) != matched.end()) continue;
            out.push_back({g, dkg_unified[idx], true});
          }
        }
      }
    }
  }
  return out;
}

namespace {

// Graphs are drawn from a shared translational world: entities occupy
// distinct sites of a two-dimensional integer grid (plus a small jitter)
// and each relation is a fixed integer step, so head + step lands exactly
// on another entity whenever that site is occupied. Quantization is the
// point: a true tail sits essentially on target while a corrupted endpoint
// is at least one full site away, so distance separates the two cleanly.
// Real knowledge graphs are regular in exactly this sense; a uniformly
// random fact set would leave nothing for embeddings to learn.
//
// A rule source's step is its target's step plus a small nonzero shift:
// rule images land a site or two off the native domain pattern, so mapping
// a general fact onto the domain still needs a per-relation correction.
constexpr double kSpacing = 0.267;      // grid pitch in latent units
constexpr double kEntityJitter = 0.08;  // total norm, well under half a pitch
constexpr double kStepLo = 1.9;         // relation step norms, in sites
constexpr double kStepHi = 2.9;
constexpr double kShiftLo = 0.9;        // rule shift norms, in sites
constexpr double kShiftHi = 1.5;

using Step = std::array<int, 2>;

// Side of the square grid: roughly 9/8 sites per entity, so stepping away
// from an occupied site usually finds another entity.
int grid_side(std::size_t n) {
  return static_cast<int>(std::ceil(std::sqrt(9.0 * static_cast<double>(n) / 8.0)));
}

std::vector<Step> ring_steps(double lo, double hi) {
  std::vector<Step> out;
  const int m = static_cast<int>(std::ceil(hi));
  for (int a = -m; a <= m; ++a)
    for (int b = -m; b <= m; ++b)
      if (const double norm = std::hypot(a, b); norm >= lo && norm <= hi)
        out.push_back({a, b});
  return out;
}

// n distinct steps with norm in [lo, hi], widening the band when it holds
// fewer than n vectors.
std::vector<Step> draw_steps(std::size_t n, double lo, double hi, Rng& rng) {
  auto ring = ring_steps(lo, hi);
  while (ring.size() < n) {
    hi += 1.0;
    ring = ring_steps(lo, hi);
  }
  shuffle(ring, rng);
  ring.resize(n);
  return ring;
}

// n distinct sites of the m x m grid.
std::vector<Step> draw_sites(std::size_t n, int m, Rng& rng) {
  std::vector<Step> all;
  all.reserve(static_cast<std::size_t>(m) * static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) all.push_back({a, b});
  shuffle(all, rng);
  all.resize(n);
  return all;
}

// Aligned entities reuse the domain site; the rest take fresh sites so no
// two general entities coincide.
std::vector<Step> draw_pinned_sites(std::size_t n, int m, std::span<const std::size_t> pinned,
                                    const std::vector<Step>& d_sites, Rng& rng) {
  const auto at = [m](const Step& s) {
    return static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(m) +
           static_cast<std::size_t>(s[1]);
  };
  std::vector<Step> sites(n, {0, 0});
  std::vector<bool> taken(static_cast<std::size_t>(m) * static_cast<std::size_t>(m), false);
  std::vector<bool> is_pinned(n, false);
  for (std::size_t i : pinned) {
    sites[i] = d_sites[i];
    taken[at(d_sites[i])] = true;
    is_pinned[i] = true;
  }
  std::vector<Step> pool;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      if (!taken[at({a, b})]) pool.push_back({a, b});
  shuffle(pool, rng);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!is_pinned[i]) sites[i] = pool[next++];
  return sites;
}

// Rule sources step to their target's image plus a distinct per-rule shift;
// remaining relations draw fresh steps. No step is reused across either
// graph, and no rule image collides with a native domain step, so the only
// way to validate a mapped candidate is to apply that rule's correction.
std::vector<Step> gkg_steps_under_rules(const std::vector<Step>& d_steps,
                                        const std::vector<std::pair<RelationId, RelationId>>& rules,
                                        std::size_t n, Rng& rng) {
  std::vector<Step> g(n, {0, 0});
  std::vector<bool> fixed(n, false);
  std::vector<Step> used = d_steps;
  const auto in = [](const std::vector<Step>& v, const Step& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };

  std::vector<Step> used_shifts;
  double shift_hi = kShiftHi;
  auto shift_pool = ring_steps(kShiftLo, shift_hi);
  shuffle(shift_pool, rng);
  std::size_t si = 0;
  for (const auto& [src, dst] : rules) {
    while (true) {
      if (si == shift_pool.size()) {
        shift_hi += 1.0;
        shift_pool = ring_steps(kShiftLo, shift_hi);
        shuffle(shift_pool, rng);
        si = 0;
      }
      const Step d = shift_pool[si++];
      const Step s{d_steps[dst][0] + d[0], d_steps[dst][1] + d[1]};
      if (in(used_shifts, d) || in(used, s)) continue;
      g[src] = s;
      fixed[src] = true;
      used.push_back(s);
      used_shifts.push_back(d);
      break;
    }
  }

  double hi = kStepHi;
  auto pool = ring_steps(kStepLo, hi);
  shuffle(pool, rng);
  std::size_t next = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (fixed[r]) continue;
    while (true) {
      if (next == pool.size()) {
        hi += 1.0;
        pool = ring_steps(kStepLo, hi);
        shuffle(pool, rng);
        next = 0;
      }
      if (const Step s = pool[next++]; !in(used, s)) {
        g[r] = s;
        used.push_back(s);
        break;
      }
    }
  }
  return g;
}

// Latent coordinates: centered sites in grid units times the pitch, plus a
// fresh per-entity jitter that breaks exact distance ties without moving a
// point meaningfully toward a neighbouring site.
Mat site_coords(const std::vector<Step>& sites, int m, Rng& rng) {
  Mat z(sites.size(), 2);
  const double c = 0.5 * static_cast<double>(m - 1);
  const double sigma = kEntityJitter / std::sqrt(2.0);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    auto row = z.row(i);
    row[0] = (static_cast<double>(sites[i][0]) - c) * kSpacing + sigma * rng.normal();
    row[1] = (static_cast<double>(sites[i][1]) - c) * kSpacing + sigma * rng.normal();
  }
  return z;
}

Mat step_offsets(const std::vector<Step>& steps) {
  Mat w(steps.size(), 2);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    w.row(i)[0] = static_cast<double>(steps[i][0]) * kSpacing;
    w.row(i)[1] = static_cast<double>(steps[i][1]) * kSpacing;
  }
  return w;
}

KnowledgeGraph structured_graph(GraphTag tag, const char* prefix, const SyntheticConfig& cfg,
                                Rng& rng, const Mat& z, const Mat& w) {
  KnowledgeGraph kg(tag);
  for (std::size_t i = 0; i < cfg.entities_per_graph; ++i)
    kg.add_entity(std::string(prefix) + "_e" + std::to_string(i));
  for (std::size_t i = 0; i < cfg.relations_per_graph; ++i)
    kg.add_relation(std::string(prefix) + "_r" + std::to_string(i));

  const std::size_t n = cfg.entities_per_graph;
  const std::size_t rels = cfg.relations_per_graph;

  std::vector<std::pair<double, EntityId>> ranked;
  auto kth_tail = [&](EntityId h, RelationId r, std::size_t k) {
    ranked.clear();
    auto zh = z.row(h);
    auto wr = w.row(r);
    for (std::size_t t = 0; t < n; ++t) {
      if (t == h) continue;
      auto zt = z.row(t);
      double d2 = 0.0;
      for (std::size_t j = 0; j < z.cols; ++j) {
        const double e = zh[j] + wr[j] - zt[j];
        d2 += e * e;
      }
      ranked.emplace_back(d2, static_cast<EntityId>(t));
    }
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k + 1),
                      ranked.end());
    return ranked[k].second;
  };

  // One pair per head first, so every entity heads a fact even when the
  // budget is far below the full pair grid; the remaining pairs follow in
  // random order.
  std::vector<std::pair<EntityId, RelationId>> pairs;
  pairs.reserve(n * rels);
  std::vector<RelationId> lead(n);
  for (std::size_t h = 0; h < n; ++h) {
    lead[h] = static_cast<RelationId>(rng.below(rels));
    pairs.emplace_back(static_cast<EntityId>(h), lead[h]);
  }
  shuffle(pairs, rng);
  std::vector<std::pair<EntityId, RelationId>> rest;
  rest.reserve(n * (rels - 1));
  for (std::size_t h = 0; h < n; ++h)
    for (std::size_t r = 0; r < rels; ++r)
      if (static_cast<RelationId>(r) != lead[h])
        rest.emplace_back(static_cast<EntityId>(h), static_cast<RelationId>(r));
  shuffle(rest, rng);
  pairs.insert(pairs.end(), rest.begin(), rest.end());

  // Tails step outward one rank per sweep: the first sweep matches every
  // pair with its nearest tail, later sweeps only run when more facts are
  // requested than pairs exist.
  for (std::size_t k = 0; kg.facts().size() < cfg.facts_per_graph; ++k) {
    if (k + 1 >= n)
      throw std::runtime_error("facts_per_graph exceeds what the entity grid can express");
    for (const auto& [h, r] : pairs) {
      if (kg.facts().size() >= cfg.facts_per_graph) break;
      Fact f{h, r, kth_tail(h, r, k)};
      if (!kg.contains_fact(f)) kg.add_fact(f);
    }
  }
  return kg;
}

}  // namespace

SyntheticBenchmark generate_synthetic_benchmark(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.entities_per_graph < 50 || cfg.relations_per_graph < 5 || cfg.facts_per_graph < 200)
    throw std::invalid_argument("synthetic benchmark needs >=50 entities, >=5 relations, >=200 facts per graph");
  if (cfg.facts_per_graph < cfg.entities_per_graph)
    throw std::invalid_argument("facts_per_graph must cover entities_per_graph");
  if (cfg.rule_count == 0 || cfg.rule_count > cfg.relations_per_graph)
    throw std::invalid_argument("rule_count must be in [1, relations_per_graph]");
  if (cfg.noise_rate < 0.0 || cfg.noise_rate > 1.0)
    throw std::invalid_argument("noise_rate must be in [0, 1]");
  if (cfg.alignment_fraction <= 0.0 || cfg.alignment_fraction > 1.0)
    throw std::invalid_argument("alignment_fraction must be in (0, 1]");

  Rng master(seed);
  SyntheticBenchmark bench;
  bench.cfg = cfg;
  bench.seed = seed;

  std::vector<std::size_t> aligned_idx;
  {
    Rng r = master.fork(3);
    auto count = static_cast<std::size_t>(
        std::llround(cfg.alignment_fraction * static_cast<double>(cfg.entities_per_graph)));
    count = std::clamp<std::size_t>(count, 1, cfg.entities_per_graph);
    std::vector<std::size_t> idx(cfg.entities_per_graph);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, r);
    idx.resize(count);
    std::ranges::sort(idx);
    aligned_idx = idx;
    for (std::size_t i : idx)
      bench.alignment.push_back(
          {static_cast<EntityId>(i), static_cast<EntityId>(i)});  // g_ei <-> d_ei
  }

  {
    // Many-to-one: distinct source relations, targets drawn independently.
    Rng r = master.fork(4);
    std::vector<RelationId> sources(cfg.relations_per_graph);
    std::iota(sources.begin(), sources.end(), 0);
    shuffle(sources, r);
    for (std::size_t i = 0; i < cfg.rule_count; ++i)
      bench.true_rules.emplace_back(sources[i],
                                    static_cast<RelationId>(r.below(cfg.relations_per_graph)));
    std::ranges::sort(bench.true_rules);
  }

  {
    // Aligned pairs denote the same real-world entity, so they share a latent
    // point; each graph observes its own facts about that shared world.
    Rng lat = master.fork(7);
    const int m = grid_side(cfg.entities_per_graph);
    auto steps_d = draw_steps(cfg.relations_per_graph, kStepLo, kStepHi, lat);
    auto sites_d = draw_sites(cfg.entities_per_graph, m, lat);
    auto steps_g =
        gkg_steps_under_rules(steps_d, bench.true_rules, cfg.relations_per_graph, lat);
    auto sites_g = draw_pinned_sites(cfg.entities_per_graph, m, aligned_idx, sites_d, lat);

    Mat z_d = site_coords(sites_d, m, lat);
    Mat z_g = site_coords(sites_g, m, lat);
    // one jitter per world entity: aligned pairs stay identical points
    for (std::size_t i : aligned_idx)
      std::copy_n(z_d.row(i).data(), z_d.cols, z_g.row(i).begin());
    Mat w_d = step_offsets(steps_d);
    Mat w_g = step_offsets(steps_g);

    Rng r1 = master.fork(1);
    bench.dkg = structured_graph(GraphTag::domain, "d", cfg, r1, z_d, w_d);
    Rng r2 = master.fork(2);
    bench.gkg = structured_graph(GraphTag::general, "g", cfg, r2, z_g, w_g);
  }

  bench.unified = UnifiedVocabulary::build(bench.dkg, bench.gkg, bench.alignment);
  const UnifiedVocabulary& uv = bench.unified;

  // Mapped positives, pre-noise, with the first generating GKG fact kept.
  std::unordered_map<EntityId, EntityId> g2d;
  for (const auto& p : bench.alignment) g2d[p.gkg_entity] = p.dkg_entity;
  std::unordered_map<RelationId, RelationId> rule_of;
  for (const auto& [src, dst] : bench.true_rules) rule_of[src] = dst;

  FactSet mapped_set;
  std::vector<std::pair<Fact, Fact>> mapped;  // (unified triple, unified source)
  for (const Fact& f : bench.gkg.facts()) {
    auto rule = rule_of.find(f.rel);
    if (rule == rule_of.end()) continue;
    auto h = g2d.find(f.head);
    auto t = g2d.find(f.tail);
    if (h == g2d.end() || t == g2d.end()) continue;
    Fact local{h->second, rule->second, t->second};
    if (bench.dkg.contains_fact(local)) continue;
    Fact u{uv.unify_entity(GraphTag::domain, local.head),
           uv.unify_relation(GraphTag::domain, local.rel),
           uv.unify_entity(GraphTag::domain, local.tail)};
    if (!mapped_set.insert(u).second) continue;
    Fact src{uv.unify_entity(GraphTag::general, f.head),
             uv.unify_relation(GraphTag::general, f.rel),
             uv.unify_entity(GraphTag::general, f.tail)};
    mapped.emplace_back(u, src);
  }

  const auto n_drop = static_cast<std::size_t>(
      std::llround(cfg.noise_rate * static_cast<double>(mapped.size())));
  std::vector<std::size_t> drop_idx(mapped.size());
  std::iota(drop_idx.begin(), drop_idx.end(), 0);
  {
    Rng r = master.fork(5);
    shuffle(drop_idx, r);
  }
  drop_idx.resize(n_drop);
  std::ranges::sort(drop_idx);
  std::vector<bool> dropped(mapped.size(), false);
  for (std::size_t i : drop_idx) {
    dropped[i] = true;
    bench.dropped_positives.push_back(mapped[i].first);
  }

  for (std::size_t i = 0; i < mapped.size(); ++i) {
    if (dropped[i]) continue;
    bench.gold.push_back({mapped[i].first, 1, mapped[i].second, Provenance::gold});
  }

  auto negatives = sample_negatives(bench.gold, uv, bench.dkg, 1, master.fork(6).seed(),
                                    nullptr, &mapped_set);
  bench.gold.insert(bench.gold.end(), negatives.begin(), negatives.end());
  return bench;
}

FactSet replay_true_rules(const KnowledgeGraph& gkg, const KnowledgeGraph& dkg,
                          const UnifiedVocabulary& uv,
                          std::span<const std::pair<RelationId, RelationId>> true_rules) {
  std::unordered_map<RelationId, RelationId> rule_of;
  for (const auto& [src, dst] : true_rules) rule_of[src] = dst;
  std::unordered_map<EntityId, EntityId> g2d;
  for (const auto& [g_uni, d_uni] : uv.alignment_links())
    g2d[uv.entity_local(g_uni)] = uv.entity_local(d_uni);

  FactSet out;
  for (const Fact& f : gkg.facts()) {
    auto rule = rule_of.find(f.rel);
    if (rule == rule_of.end()) continue;
    auto h = g2d.find(f.head);
    auto t = g2d.find(f.tail);
    if (h == g2d.end() || t == g2d.end()) continue;
    Fact local{h->second, rule->second, t->second};
    if (dkg.contains_fact(local)) continue;
    out.insert({uv.unify_entity(GraphTag::domain, local.head),
                uv.unify_relation(GraphTag::domain, local.rel),
                uv.unify_entity(GraphTag::domain, local.tail)});
  }
  return out;
}

void save_candidates_tsv(const std::filesystem::path& path,
                         std::span<const LabeledCandidate> candidates,
                         const UnifiedVocabulary& uv) {
  std::ostringstream os;
  for (const auto& c : candidates) {
    os << uv.entity_name(c.triple.head) << '\t' << uv.relation_name(c.triple.rel) << '\t'
       << uv.entity_name(c.triple.tail) << '\t' << c.label << '\n';
  }
  write_file_atomic(path, os.str());
}

std::vector<LabeledCandidate> load_candidates_tsv(const std::filesystem::path& path,
                                                  const UnifiedVocabulary& uv) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<LabeledCandidate> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_tabs(line);
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    if (fields.size() != 4) fail("expected 4 tab-separated fields");
    auto head = uv.find_entity(fields[0]);
    if (!head) fail("unknown entity '" + fields[0] + "'");
    auto rel = uv.find_relation(fields[1]);
    if (!rel) fail("unknown relation '" + fields[1] + "'");
    auto tail = uv.find_entity(fields[2]);
    if (!tail) fail("unknown entity '" + fields[2] + "'");
    int label;
    if (fields[3] == "0")
      label = 0;
    else if (fields[3] == "1")
      label = 1;
    else
      fail("label must be 0 or 1, got '" + fields[3] + "'");
    out.push_back({{*head, *rel, *tail}, label, std::nullopt,
                   label == 1 ? Provenance::gold : Provenance::corrupted});
  }
  return out;
}

void save_distant_pairs(const std::filesystem::path& path, std::span<const DistantPair> pairs,
                        const UnifiedVocabulary& uv) {
  std::ostringstream os;
  for (const DistantPair& p : pairs)
    os << uv.entity_name(p.gkg_fact.head) << '\t' << uv.relation_name(p.gkg_fact.rel) << '\t'
       << uv.entity_name(p.gkg_fact.tail) << '\t' << uv.entity_name(p.dkg_fact.head) << '\t'
       << uv.relation_name(p.dkg_fact.rel) << '\t' << uv.entity_name(p.dkg_fact.tail) << '\t'
       << (p.inverted ? 1 : 0) << '\n';
  write_file_atomic(path, os.str());
}

std::vector<DistantPair> load_distant_pairs(const std::filesystem::path& path,
                                            const UnifiedVocabulary& uv) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<DistantPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_tabs(line);
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    if (fields.size() != 7) fail("expected 7 tab-separated fields");
    auto resolve_entity = [&](const std::string& name) {
      auto id = uv.find_entity(name);
      if (!id) fail("unknown entity '" + name + "'");
      return *id;
    };
    auto resolve_relation = [&](const std::string& name) {
      auto id = uv.find_relation(name);
      if (!id) fail("unknown relation '" + name + "'");
      return *id;
    };
    DistantPair p;
    p.gkg_fact = {resolve_entity(fields[0]), resolve_relation(fields[1]),
                  resolve_entity(fields[2])};
    p.dkg_fact = {resolve_entity(fields[3]), resolve_relation(fields[4]),
                  resolve_entity(fields[5])};
    if (fields[6] == "1")
      p.inverted = true;
    else if (fields[6] != "0")
      fail("inverted flag must be 0 or 1, got '" + fields[6] + "'");
    out.push_back(p);
  }
  return out;
}

void save_benchmark(const SyntheticBenchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  bench.dkg.save_tsv(dir / "dkg.tsv");
  bench.gkg.save_tsv(dir / "gkg.tsv");
  save_alignment_tsv(dir / "alignment.tsv", bench.alignment, bench.gkg, bench.dkg);
  save_candidates_tsv(dir / "gold.tsv", bench.gold, bench.unified);

  {
    std::ostringstream os;
    for (const auto& [src, dst] : bench.true_rules)
      os << bench.gkg.relation_name(src) << '\t' << bench.dkg.relation_name(dst) << '\n';
    write_file_atomic(dir / "rules.tsv", os.str());
  }
  {
    std::ostringstream os;
    for (const Fact& f : bench.dropped_positives)
      os << bench.unified.entity_name(f.head) << '\t' << bench.unified.relation_name(f.rel)
         << '\t' << bench.unified.entity_name(f.tail) << '\n';
    write_file_atomic(dir / "noise.tsv", os.str());
  }

  std::size_t n_pos = 0;
  for (const auto& c : bench.gold) n_pos += c.label == 1 ? 1 : 0;
  std::ostringstream os;
  os << "format=exefuse-synth-1\n"
     << "seed=" << bench.seed << '\n'
     << "entities_per_graph=" << bench.cfg.entities_per_graph << '\n'
     << "relations_per_graph=" << bench.cfg.relations_per_graph << '\n'
     << "facts_per_graph=" << bench.cfg.facts_per_graph << '\n'
     << "rule_count=" << bench.cfg.rule_count << '\n'
     << "noise_rate=" << fmt_double(bench.cfg.noise_rate) << '\n'
     << "alignment_fraction=" << fmt_double(bench.cfg.alignment_fraction) << '\n'
     << "dkg_facts=" << bench.dkg.facts().size() << '\n'
     << "gkg_facts=" << bench.gkg.facts().size() << '\n'
     << "alignment_pairs=" << bench.alignment.size() << '\n'
     << "gold_positives=" << n_pos << '\n'
     << "gold_negatives=" << bench.gold.size() - n_pos << '\n'
     << "dropped_positives=" << bench.dropped_positives.size() << '\n';
  write_file_atomic(dir / "manifest", os.str());
}

BenchmarkFiles load_benchmark(const std::filesystem::path& dir) {
  BenchmarkFiles files;
  files.dkg = KnowledgeGraph::load_tsv(dir / "dkg.tsv", GraphTag::domain);
  files.gkg = KnowledgeGraph::load_tsv(dir / "gkg.tsv", GraphTag::general);
  files.alignment = load_alignment_tsv(dir / "alignment.tsv", files.gkg, files.dkg);
  files.unified = UnifiedVocabulary::build(files.dkg, files.gkg, files.alignment);
  files.gold = load_candidates_tsv(dir / "gold.tsv", files.unified);
  return files;
}

}  // namespace exefuse
