#include <charconv>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "exefuse/dataset.hpp"
#include "exefuse/embedding.hpp"
#include "exefuse/evaluator.hpp"
#include "exefuse/kg.hpp"
#include "exefuse/kvfile.hpp"
#include "exefuse/model.hpp"
#include "exefuse/numkit.hpp"
#include "exefuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace exefuse;

namespace {

// Every stage draws its seed from the one --seed at a fixed stream offset,
// so reruns of any single command are reproducible in isolation.
constexpr std::uint64_t kStreamSplit = 10;
constexpr std::uint64_t kStreamPretrain = 11;
constexpr std::uint64_t kStreamModel = 12;
constexpr std::uint64_t kStreamEncoder = 13;
constexpr std::uint64_t kStreamProtos = 14;
constexpr std::uint64_t kStreamTrain = 15;
constexpr std::uint64_t kStreamResample = 16;
constexpr std::uint64_t kStreamGradcheck = 20;
constexpr std::uint64_t kStreamAblate = 300;

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stream) {
  return Rng(seed).fork(stream).seed();
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("double formatting failed");
  return std::string(buf, end);
}

struct GraphBundle {
  KnowledgeGraph dkg{GraphTag::domain};
  KnowledgeGraph gkg{GraphTag::general};
  std::vector<AlignmentPair> alignment;
  UnifiedVocabulary uv;
};

GraphBundle load_graphs(const fs::path& dkg_path, const fs::path& gkg_path,
                        const fs::path& align_path) {
  GraphBundle b;
  b.dkg = KnowledgeGraph::load_tsv(dkg_path, GraphTag::domain);
  b.gkg = KnowledgeGraph::load_tsv(gkg_path, GraphTag::general);
  b.alignment = load_alignment_tsv(align_path, b.gkg, b.dkg);
  b.uv = UnifiedVocabulary::build(b.dkg, b.gkg, b.alignment);
  return b;
}

std::string kv_need(const KvPairs& kv, std::string_view key, const fs::path& origin) {
  auto v = kv_get(kv, key);
  if (!v) throw std::runtime_error(origin.string() + ": missing key '" + std::string(key) + "'");
  return *v;
}

// ---------------------------------------------------------------- synth

struct SynthOpts {
  fs::path out;
  std::uint64_t seed = 0;
  SyntheticConfig cfg;
};

void run_synth(const SynthOpts& o) {
  SyntheticBenchmark bench = generate_synthetic_benchmark(o.cfg, o.seed);
  save_benchmark(bench, o.out);
  std::cout << "synth: " << bench.dkg.facts().size() << " domain facts, "
            << bench.gkg.facts().size() << " general facts, " << bench.gold.size()
            << " gold candidates -> " << o.out.string() << "\n";
}

// -------------------------------------------------------------- prepare

struct PrepareOpts {
  fs::path dkg, gkg, alignment, gold, out;
  std::string scheme = "s1";
  std::uint64_t seed = 0;
};

void run_prepare(const PrepareOpts& o) {
  GraphBundle b = load_graphs(o.dkg, o.gkg, o.alignment);
  auto gold = load_candidates_tsv(o.gold, b.uv);
  DatasetSplit split = split_dataset(gold, parse_scheme(o.scheme), stage_seed(o.seed, kStreamSplit));
  auto d_pos = build_distant_supervision(b.gkg, b.dkg, b.uv);

  fs::create_directories(o.out);
  save_candidates_tsv(o.out / "train.tsv", split.train, b.uv);
  save_candidates_tsv(o.out / "valid.tsv", split.valid, b.uv);
  save_candidates_tsv(o.out / "test.tsv", split.test, b.uv);
  save_distant_pairs(o.out / "dpos.tsv", d_pos, b.uv);

  KvPairs kv{{"command", "prepare"},
             {"dkg", o.dkg.string()},
             {"gkg", o.gkg.string()},
             {"alignment", o.alignment.string()},
             {"gold", o.gold.string()},
             {"scheme", o.scheme},
             {"seed", std::to_string(o.seed)},
             {"train", std::to_string(split.train.size())},
             {"valid", std::to_string(split.valid.size())},
             {"test", std::to_string(split.test.size())},
             {"distant_pairs", std::to_string(d_pos.size())}};
  save_kv_file(o.out / "manifest", kv);
  std::cout << "prepare: " << split.train.size() << "/" << split.valid.size() << "/"
            << split.test.size() << " train/valid/test, " << d_pos.size()
            << " distant pairs -> " << o.out.string() << "\n";
}

// ------------------------------------------------------------- pretrain

struct PretrainOpts {
  fs::path dkg, gkg, alignment, out;
  PretrainConfig cfg;
  std::uint64_t seed = 0;
};

void run_pretrain(const PretrainOpts& o) {
  GraphBundle b = load_graphs(o.dkg, o.gkg, o.alignment);
  PretrainResult res =
      pretrain_translational(b.dkg, b.gkg, b.uv, o.cfg, stage_seed(o.seed, kStreamPretrain));

  fs::create_directories(o.out);
  save_embeddings(o.out / "embeddings.bin", res.table);
  {
    std::ostringstream os;
    os << "epoch\tloss\n";
    for (std::size_t i = 0; i < res.loss_history.size(); ++i)
      os << i + 1 << '\t' << fmt_double(res.loss_history[i]) << '\n';
    write_file_atomic(o.out / "loss.tsv", os.str());
  }
  KvPairs kv{{"command", "pretrain"},
             {"dkg", o.dkg.string()},
             {"gkg", o.gkg.string()},
             {"alignment", o.alignment.string()},
             {"dim", std::to_string(o.cfg.d_emb)},
             {"epochs", std::to_string(o.cfg.epochs)},
             {"margin", fmt_double(o.cfg.margin)},
             {"lr", fmt_double(o.cfg.lr)},
             {"neg_per_pos", std::to_string(o.cfg.neg_per_pos)},
             {"batch", std::to_string(o.cfg.batch_size)},
             {"gkg_only", o.cfg.gkg_only ? "1" : "0"},
             {"seed", std::to_string(o.seed)},
             {"entities", std::to_string(res.table.entities.rows)},
             {"relations", std::to_string(res.table.relations.rows)}};
  save_kv_file(o.out / "manifest", kv);
  const double last = res.loss_history.empty() ? 0.0 : res.loss_history.back();
  std::cout << "pretrain: " << res.table.entities.rows << " entity rows, final loss "
            << fmt_double(last) << " -> " << o.out.string() << "\n";
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  fs::path dkg, gkg, alignment, prep, embeddings, out;
  ModelConfig model;
  TrainConfig train;
  DkgEncoderConfig encoder;
  std::string variant = "full";
  std::uint64_t seed = 0;
};

void run_train(const TrainOpts& o) {
  GraphBundle b = load_graphs(o.dkg, o.gkg, o.alignment);
  EmbeddingTable table = load_embeddings(o.embeddings);

  DatasetSplit split;
  split.train = load_candidates_tsv(o.prep / "train.tsv", b.uv);
  split.valid = load_candidates_tsv(o.prep / "valid.tsv", b.uv);
  auto d_pos = load_distant_pairs(o.prep / "dpos.tsv", b.uv);

  ModelConfig mc = o.model;
  mc.variant = parse_variant(o.variant);
  ExeFuseModel model = make_model(mc, table.d_emb, stage_seed(o.seed, kStreamModel));
  train_dkg_encoder(model, table, b.dkg, b.uv, o.encoder, stage_seed(o.seed, kStreamEncoder));

  std::vector<LabeledCandidate> train_pos;
  for (const auto& c : split.train)
    if (c.label == 1) train_pos.push_back(c);
  model.protos = fit_prototypes(model, table, b.dkg, b.uv, train_pos, mc.k, mc.tau,
                                stage_seed(o.seed, kStreamProtos));

  TrainConfig tc = o.train;
  tc.seed = stage_seed(o.seed, kStreamTrain);

  NegativeResampler resampler;
  FactSet off_split;
  std::size_t neg_ratio = 1;
  if (tc.resample_negatives) {
    // Fresh corruptions each epoch must not collide with positives the other
    // splits hold, or resampling would relabel evaluation facts.
    for (const auto& c : split.valid)
      if (c.label == 1) off_split.insert(c.triple);
    for (const auto& c : load_candidates_tsv(o.prep / "test.tsv", b.uv))
      if (c.label == 1) off_split.insert(c.triple);
    const std::size_t neg_n = split.train.size() - train_pos.size();
    if (!train_pos.empty() && neg_n > train_pos.size())
      neg_ratio = (neg_n + train_pos.size() / 2) / train_pos.size();
    const std::uint64_t rs = stage_seed(o.seed, kStreamResample);
    resampler = [&b, &train_pos, &off_split, neg_ratio, rs](std::uint64_t epoch) {
      return sample_negatives(train_pos, b.uv, b.dkg, neg_ratio, Rng(rs).fork(epoch).seed(),
                              nullptr, &off_split);
    };
  }
  TrainReport report = train(model, table, split, d_pos, tc, resampler);

  fs::create_directories(o.out);
  save_model(o.out / "model.bin", model);
  save_train_report(o.out / "report.tsv", report);
  KvPairs kv{{"command", "train"},
             {"dkg", o.dkg.string()},
             {"gkg", o.gkg.string()},
             {"alignment", o.alignment.string()},
             {"prep", o.prep.string()},
             {"embeddings", o.embeddings.string()},
             {"d", std::to_string(mc.d)},
             {"rules", std::to_string(mc.rules)},
             {"protos", std::to_string(mc.k)},
             {"tau", fmt_double(mc.tau)},
             {"hidden", std::to_string(mc.hidden)},
             {"variant", variant_name(mc.variant)},
             {"lambda", fmt_double(tc.lambda)},
             {"lr", fmt_double(tc.lr)},
             {"batch", std::to_string(tc.batch_size)},
             {"epochs", std::to_string(tc.epochs)},
             {"patience", std::to_string(tc.patience)},
             {"delta", fmt_double(tc.delta)},
             {"resample", tc.resample_negatives ? "1" : "0"},
             {"enc_rounds", std::to_string(o.encoder.rounds)},
             {"enc_epochs", std::to_string(o.encoder.epochs_per_round)},
             {"enc_lr", fmt_double(o.encoder.lr)},
             {"enc_margin", fmt_double(o.encoder.margin)},
             {"seed", std::to_string(o.seed)},
             {"epochs_run", std::to_string(report.epochs.size())},
             {"best_epoch", std::to_string(report.best_epoch)},
             {"best_val_f1", fmt_double(report.best_val_f1)},
             {"early_stopped", report.early_stopped ? "1" : "0"}};
  save_kv_file(o.out / "manifest", kv);
  std::cout << "train: " << report.epochs.size() << " epochs, best val F1 "
            << fmt_double(report.best_val_f1) << " at epoch " << report.best_epoch << " -> "
            << o.out.string() << "\n";
}

// ------------------------------------------------------------- evaluate

struct EvaluateOpts {
  fs::path dkg, gkg, alignment, prep, embeddings, model, out;
  double delta = 0.5;
  std::string label;
  std::uint64_t seed = 0;
};

void run_evaluate(const EvaluateOpts& o) {
  GraphBundle b = load_graphs(o.dkg, o.gkg, o.alignment);
  EmbeddingTable table = load_embeddings(o.embeddings);
  ExeFuseModel model = load_model(o.model);
  auto train_set = load_candidates_tsv(o.prep / "train.tsv", b.uv);
  auto test_set = load_candidates_tsv(o.prep / "test.tsv", b.uv);

  const std::string label = o.label.empty() ? variant_name(model.cfg.variant) : o.label;
  std::vector<std::pair<std::string, Metrics>> rows;
  Metrics overall = classify_triples(model, table, test_set, o.delta);
  rows.emplace_back(label, overall);
  SeenUnseenSplit parts = split_seen_unseen(test_set, train_set);
  if (!parts.seen.empty())
    rows.emplace_back(label + "-seen", classify_triples(model, table, parts.seen, o.delta));
  if (!parts.unseen.empty())
    rows.emplace_back(label + "-unseen", classify_triples(model, table, parts.unseen, o.delta));

  fs::create_directories(o.out);
  save_metrics_tsv(o.out / "metrics.tsv", rows);
  save_predictions(o.out / "predictions.tsv", model, table, test_set, b.uv);
  KvPairs kv{{"command", "evaluate"},
             {"dkg", o.dkg.string()},
             {"gkg", o.gkg.string()},
             {"alignment", o.alignment.string()},
             {"prep", o.prep.string()},
             {"embeddings", o.embeddings.string()},
             {"model", o.model.string()},
             {"delta", fmt_double(o.delta)},
             {"label", label},
             {"seed", std::to_string(o.seed)},
             {"test", std::to_string(test_set.size())},
             {"unseen", std::to_string(parts.unseen.size())}};
  save_kv_file(o.out / "manifest", kv);
  std::cout << "evaluate: acc " << fmt_double(overall.acc) << ", F1 " << fmt_double(overall.f1)
            << " over " << test_set.size() << " test candidates -> " << o.out.string() << "\n";
}

// ----------------------------------------------------------------- fuse

struct FuseOpts {
  fs::path dkg, gkg, alignment, embeddings, model, out;
  double delta = 0.5;
  std::size_t top_m = 0;
};

void run_fuse(const FuseOpts& o) {
  GraphBundle b = load_graphs(o.dkg, o.gkg, o.alignment);
  EmbeddingTable table = load_embeddings(o.embeddings);
  ExeFuseModel model = load_model(o.model);
  auto fused = fuse(model, table, b.gkg, b.dkg, b.uv, o.delta, o.top_m);

  fs::create_directories(o.out);
  std::ostringstream os;
  os << "head\trel\ttail\tprob\tsrc_head\tsrc_rel\tsrc_tail\n";
  for (const FusedFact& f : fused)
    os << b.uv.entity_name(f.triple.head) << '\t' << b.uv.relation_name(f.triple.rel) << '\t'
       << b.uv.entity_name(f.triple.tail) << '\t' << fmt_double(f.p) << '\t'
       << b.uv.entity_name(f.source.head) << '\t' << b.uv.relation_name(f.source.rel) << '\t'
       << b.uv.entity_name(f.source.tail) << '\n';
  write_file_atomic(o.out / "fused.tsv", os.str());
  KvPairs kv{{"command", "fuse"},
             {"dkg", o.dkg.string()},
             {"gkg", o.gkg.string()},
             {"alignment", o.alignment.string()},
             {"embeddings", o.embeddings.string()},
             {"model", o.model.string()},
             {"delta", fmt_double(o.delta)},
             {"top_m", std::to_string(o.top_m)},
             {"fused", std::to_string(fused.size())}};
  save_kv_file(o.out / "manifest", kv);
  std::cout << "fuse: " << fused.size() << " facts above " << fmt_double(o.delta) << " -> "
            << o.out.string() << "\n";
}

// --------------------------------------------------------------- ablate

struct AblateOpts {
  fs::path bench, out;
  std::vector<std::string> variants;
  std::size_t seeds = 3;
  PipelineConfig cfg;
  std::string scheme = "s1";
  std::uint64_t seed = 0;
};

SyntheticBenchmark regenerate_benchmark(const fs::path& dir) {
  KvPairs kv = load_kv_file(dir / "manifest");
  if (kv_need(kv, "format", dir / "manifest") != "exefuse-synth-1")
    throw std::runtime_error(dir.string() + ": not a synthetic benchmark directory");
  SyntheticConfig cfg;
  cfg.entities_per_graph = std::stoull(kv_need(kv, "entities_per_graph", dir));
  cfg.relations_per_graph = std::stoull(kv_need(kv, "relations_per_graph", dir));
  cfg.facts_per_graph = std::stoull(kv_need(kv, "facts_per_graph", dir));
  cfg.rule_count = std::stoull(kv_need(kv, "rule_count", dir));
  cfg.noise_rate = std::stod(kv_need(kv, "noise_rate", dir));
  cfg.alignment_fraction = std::stod(kv_need(kv, "alignment_fraction", dir));
  return generate_synthetic_benchmark(cfg, std::stoull(kv_need(kv, "seed", dir)));
}

void run_ablate(const AblateOpts& o) {
  SyntheticBenchmark bench = regenerate_benchmark(o.bench);
  std::vector<Variant> variants;
  for (const std::string& name : o.variants) variants.push_back(parse_variant(name));
  if (o.seeds == 0) throw std::invalid_argument("--seeds must be positive");

  std::vector<std::pair<std::string, Metrics>> rows;
  for (Variant v : variants) {
    double acc = 0.0, prec = 0.0, rec = 0.0, f1 = 0.0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t s = 0; s < o.seeds; ++s) {
      PipelineConfig cfg = o.cfg;
      cfg.scheme = parse_scheme(o.scheme);
      cfg.seed = stage_seed(o.seed, kStreamAblate + s);
      Metrics m = run_ablation(v, bench, cfg);
      rows.emplace_back(std::string(variant_name(v)) + "@" + std::to_string(s), m);
      acc += m.acc;
      prec += m.precision;
      rec += m.recall;
      f1 += m.f1;
      tp += m.tp;
      fp += m.fp;
      tn += m.tn;
      fn += m.fn;
      std::cout << "ablate: " << variant_name(v) << " seed " << s << " F1 " << fmt_double(m.f1)
                << "\n";
    }
    const double inv = 1.0 / static_cast<double>(o.seeds);
    Metrics mean;
    mean.acc = acc * inv;
    mean.precision = prec * inv;
    mean.recall = rec * inv;
    mean.f1 = f1 * inv;
    mean.tp = tp;
    mean.fp = fp;
    mean.tn = tn;
    mean.fn = fn;
    rows.emplace_back(std::string(variant_name(v)) + "-mean", mean);
  }

  fs::create_directories(o.out);
  save_metrics_tsv(o.out / "metrics.tsv", rows);
  std::ostringstream names;
  for (std::size_t i = 0; i < o.variants.size(); ++i)
    names << (i != 0 ? "," : "") << o.variants[i];
  KvPairs kv{{"command", "ablate"},
             {"bench", o.bench.string()},
             {"variants", names.str()},
             {"seeds", std::to_string(o.seeds)},
             {"scheme", o.scheme},
             {"dim", std::to_string(o.cfg.pretrain.d_emb)},
             {"pretrain_epochs", std::to_string(o.cfg.pretrain.epochs)},
             {"d", std::to_string(o.cfg.model.d)},
             {"rules", std::to_string(o.cfg.model.rules)},
             {"protos", std::to_string(o.cfg.model.k)},
             {"tau", fmt_double(o.cfg.model.tau)},
             {"hidden", std::to_string(o.cfg.model.hidden)},
             {"lambda", fmt_double(o.cfg.train.lambda)},
             {"lr", fmt_double(o.cfg.train.lr)},
             {"epochs", std::to_string(o.cfg.train.epochs)},
             {"delta", fmt_double(o.cfg.train.delta)},
             {"seed", std::to_string(o.seed)}};
  save_kv_file(o.out / "manifest", kv);
  std::cout << "ablate: " << rows.size() << " rows -> " << o.out.string() << "\n";
}

// ---------------------------------------------------------------- scale

struct ScaleOpts {
  fs::path dkg, gkg, alignment, embeddings, model, out;
  std::vector<std::size_t> sizes{10000, 20000, 40000};
  std::size_t reps = 5;
};

void run_scale(const ScaleOpts& o) {
  GraphBundle b = load_graphs(o.dkg, o.gkg, o.alignment);
  EmbeddingTable table = load_embeddings(o.embeddings);
  ExeFuseModel model = load_model(o.model);
  auto points = measure_scaling(model, table, b.gkg, b.dkg, b.uv, o.sizes, o.reps);

  fs::create_directories(o.out);
  std::ostringstream os;
  os << "facts\tmean_s\tmedian_s\tstddev_s\tratio\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double ratio = i == 0 ? 0.0 : points[i].median_seconds / points[i - 1].median_seconds;
    os << points[i].gkg_facts << '\t' << fmt_double(points[i].mean_seconds) << '\t'
       << fmt_double(points[i].median_seconds) << '\t' << fmt_double(points[i].stddev_seconds)
       << '\t' << fmt_double(ratio) << '\n';
    std::cout << "scale: " << points[i].gkg_facts << " facts, median "
              << fmt_double(points[i].median_seconds) << " s\n";
  }
  write_file_atomic(o.out / "scaling.tsv", os.str());
  std::ostringstream sizes;
  for (std::size_t i = 0; i < o.sizes.size(); ++i)
    sizes << (i != 0 ? "," : "") << o.sizes[i];
  KvPairs kv{{"command", "scale"},
             {"dkg", o.dkg.string()},
             {"gkg", o.gkg.string()},
             {"alignment", o.alignment.string()},
             {"embeddings", o.embeddings.string()},
             {"model", o.model.string()},
             {"sizes", sizes.str()},
             {"reps", std::to_string(o.reps)}};
  save_kv_file(o.out / "manifest", kv);
  std::cout << "scale: " << points.size() << " sizes -> " << o.out.string() << "\n";
}

// ------------------------------------------------------------ gradcheck

struct GradcheckOpts {
  std::uint64_t seed = 1;
  double eps = 1e-5;
  std::size_t steps = 10;
};

int run_gradcheck(const GradcheckOpts& o) {
  SyntheticConfig tiny;
  tiny.entities_per_graph = 60;
  tiny.relations_per_graph = 5;
  tiny.facts_per_graph = 300;
  tiny.rule_count = 2;
  tiny.noise_rate = 0.0;
  SyntheticBenchmark bench =
      generate_synthetic_benchmark(tiny, stage_seed(o.seed, kStreamGradcheck));

  PretrainConfig pc;
  pc.d_emb = 8;
  pc.epochs = 3;
  EmbeddingTable table =
      pretrain_translational(bench.dkg, bench.gkg, bench.unified, pc, stage_seed(o.seed, kStreamPretrain))
          .table;

  ModelConfig mc;
  mc.d = 6;
  mc.rules = 3;
  mc.k = 4;
  mc.hidden = 8;
  ExeFuseModel model = make_model(mc, pc.d_emb, stage_seed(o.seed, kStreamModel));

  std::vector<LabeledCandidate> positives;
  for (const auto& c : bench.gold)
    if (c.label == 1) positives.push_back(c);
  model.protos = fit_prototypes(model, table, bench.dkg, bench.unified, positives, mc.k, mc.tau,
                                stage_seed(o.seed, kStreamProtos));

  JointBatch batch;
  for (std::size_t i = 0; i < bench.gold.size() && batch.candidates.size() < 8; ++i)
    batch.candidates.push_back(bench.gold[i]);
  for (std::size_t i = bench.gold.size(); i-- > 0 && batch.candidates.size() < 16;)
    batch.candidates.push_back(bench.gold[i]);
  auto d_pos = build_distant_supervision(bench.gkg, bench.dkg, bench.unified);
  for (std::size_t i = 0; i < d_pos.size() && batch.pairs.size() < 8; ++i)
    batch.pairs.push_back(d_pos[i]);

  const double err_init = gradcheck_joint(model, table, batch, o.eps);

  const std::size_t n = trainable_parameter_count(model);
  Adam adam(n, 1e-3, 0.9, 0.999, 1e-8);
  Vec params(n), flat(n);
  Gradients grads = make_gradients(model);
  for (std::size_t s = 0; s < o.steps; ++s) {
    clear_gradients(grads);
    joint_loss_grad(model, table, batch, grads);
    flatten_gradients(model, grads, flat);
    copy_trainable(model, params);
    adam.step(params, flat);
    load_trainable(model, params);
  }
  const double err_after = gradcheck_joint(model, table, batch, o.eps);

  const double worst = std::max(err_init, err_after);
  std::cout << "gradcheck: max relative error " << fmt_double(err_init) << " at init, "
            << fmt_double(err_after) << " after " << o.steps << " steps\n";
  if (worst < 1e-4) {
    std::cout << "gradcheck: PASS\n";
    return 0;
  }
  std::cout << "gradcheck: FAIL (tolerance 1e-4)\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ExeFuse: executability-scored knowledge graph fusion"};
  app.require_subcommand(1);
  int exit_code = 0;

  auto add_config = [](CLI::App* sub) {
    sub->set_config("--config", "", "Flat key = value config file; command-line flags win");
  };

  SynthOpts synth;
  {
    CLI::App* s = app.add_subcommand("synth", "Generate a synthetic benchmark directory");
    add_config(s);
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--seed", synth.seed, "Master seed");
    s->add_option("--entities", synth.cfg.entities_per_graph, "Entities per graph");
    s->add_option("--relations", synth.cfg.relations_per_graph, "Relations per graph");
    s->add_option("--facts", synth.cfg.facts_per_graph, "Facts per graph");
    s->add_option("--hidden-rules", synth.cfg.rule_count, "Hidden relation-map rules");
    s->add_option("--noise", synth.cfg.noise_rate, "Fraction of mapped positives dropped");
    s->add_option("--align-frac", synth.cfg.alignment_fraction, "Fraction of entities aligned");
    s->callback([&] { run_synth(synth); });
  }

  PrepareOpts prepare;
  {
    CLI::App* s = app.add_subcommand("prepare", "Ingest graphs, split candidates, derive distant pairs");
    add_config(s);
    s->add_option("--dkg", prepare.dkg, "Domain graph TSV")->required();
    s->add_option("--gkg", prepare.gkg, "General graph TSV")->required();
    s->add_option("--alignment", prepare.alignment, "Entity alignment TSV")->required();
    s->add_option("--gold", prepare.gold, "Labeled candidate TSV")->required();
    s->add_option("--out", prepare.out, "Output directory")->required();
    s->add_option("--scheme", prepare.scheme, "Split scheme: s1 or s2");
    s->add_option("--seed", prepare.seed, "Master seed");
    s->callback([&] { run_prepare(prepare); });
  }

  PretrainOpts pretrain;
  {
    CLI::App* s = app.add_subcommand("pretrain", "Train translational embeddings");
    add_config(s);
    s->add_option("--dkg", pretrain.dkg, "Domain graph TSV")->required();
    s->add_option("--gkg", pretrain.gkg, "General graph TSV")->required();
    s->add_option("--alignment", pretrain.alignment, "Entity alignment TSV")->required();
    s->add_option("--out", pretrain.out, "Output directory")->required();
    s->add_option("--dim", pretrain.cfg.d_emb, "Embedding dimension (>= 8)");
    s->add_option("--epochs", pretrain.cfg.epochs, "Training epochs");
    s->add_option("--margin", pretrain.cfg.margin, "Ranking margin");
    s->add_option("--lr", pretrain.cfg.lr, "Learning rate");
    s->add_option("--neg-per-pos", pretrain.cfg.neg_per_pos, "Negatives per positive");
    s->add_option("--batch", pretrain.cfg.batch_size, "Minibatch size");
    s->add_flag("--gkg-only", pretrain.cfg.gkg_only, "Train on general facts only");
    s->add_option("--seed", pretrain.seed, "Master seed");
    s->callback([&] { run_pretrain(pretrain); });
  }

  TrainOpts train;
  {
    CLI::App* s = app.add_subcommand("train", "Train the fusion model");
    add_config(s);
    s->add_option("--dkg", train.dkg, "Domain graph TSV")->required();
    s->add_option("--gkg", train.gkg, "General graph TSV")->required();
    s->add_option("--alignment", train.alignment, "Entity alignment TSV")->required();
    s->add_option("--prep", train.prep, "prepare output directory")->required();
    s->add_option("--embeddings", train.embeddings, "Pretrained embeddings file")->required();
    s->add_option("--out", train.out, "Output directory")->required();
    s->add_option("--d", train.model.d, "Latent dimension");
    s->add_option("--rules", train.model.rules, "Rule bank size");
    s->add_option("--protos", train.model.k, "Prototype count");
    s->add_option("--tau", train.model.tau, "Kernel bandwidth");
    s->add_option("--hidden", train.model.hidden, "Fusion head hidden width");
    s->add_option("--variant", train.variant,
                  "full, single_affine, direct_classification, no_structure_encoder, "
                  "uniform_selector, no_exec_score, mlp_rules, min_distance");
    s->add_option("--lambda", train.train.lambda, "Consistency loss weight");
    s->add_option("--lr", train.train.lr, "Adam learning rate");
    s->add_option("--batch", train.train.batch_size, "Minibatch size");
    s->add_option("--epochs", train.train.epochs, "Max epochs");
    s->add_option("--patience", train.train.patience, "Early-stop patience");
    s->add_option("--delta", train.train.delta, "Decision threshold");
    s->add_option("--enc-rounds", train.encoder.rounds, "Domain-encoder recluster rounds");
    s->add_option("--enc-epochs", train.encoder.epochs_per_round, "Epochs per round");
    s->add_option("--enc-lr", train.encoder.lr, "Domain-encoder learning rate");
    s->add_option("--enc-margin", train.encoder.margin, "Domain-encoder margin");
    s->add_flag("--resample", train.train.resample_negatives,
                "Redraw training negatives every epoch");
    s->add_option("--seed", train.seed, "Master seed");
    s->callback([&] { run_train(train); });
  }

  EvaluateOpts evaluate;
  {
    CLI::App* s = app.add_subcommand("evaluate", "Score a trained model on the test split");
    add_config(s);
    s->add_option("--dkg", evaluate.dkg, "Domain graph TSV")->required();
    s->add_option("--gkg", evaluate.gkg, "General graph TSV")->required();
    s->add_option("--alignment", evaluate.alignment, "Entity alignment TSV")->required();
    s->add_option("--prep", evaluate.prep, "prepare output directory")->required();
    s->add_option("--embeddings", evaluate.embeddings, "Pretrained embeddings file")->required();
    s->add_option("--model", evaluate.model, "Trained model file")->required();
    s->add_option("--out", evaluate.out, "Output directory")->required();
    s->add_option("--delta", evaluate.delta, "Decision threshold");
    s->add_option("--label", evaluate.label, "Config label for the metrics row");
    s->add_option("--seed", evaluate.seed, "Recorded in the manifest");
    s->callback([&] { run_evaluate(evaluate); });
  }

  FuseOpts fuse_opts;
  {
    CLI::App* s = app.add_subcommand("fuse", "Emit fused facts above the threshold");
    add_config(s);
    s->add_option("--dkg", fuse_opts.dkg, "Domain graph TSV")->required();
    s->add_option("--gkg", fuse_opts.gkg, "General graph TSV")->required();
    s->add_option("--alignment", fuse_opts.alignment, "Entity alignment TSV")->required();
    s->add_option("--embeddings", fuse_opts.embeddings, "Pretrained embeddings file")->required();
    s->add_option("--model", fuse_opts.model, "Trained model file")->required();
    s->add_option("--out", fuse_opts.out, "Output directory")->required();
    s->add_option("--delta", fuse_opts.delta, "Acceptance threshold");
    s->add_option("--top-m", fuse_opts.top_m, "Keep at most m facts per source (0 = all)");
    s->callback([&] { run_fuse(fuse_opts); });
  }

  AblateOpts ablate;
  ablate.variants = {"full",
                     "single_affine",
                     "direct_classification",
                     "no_structure_encoder",
                     "uniform_selector",
                     "no_exec_score",
                     "mlp_rules",
                     "min_distance"};
  {
    CLI::App* s = app.add_subcommand("ablate", "Train and compare model variants on a benchmark");
    add_config(s);
    s->add_option("--bench", ablate.bench, "synth output directory")->required();
    s->add_option("--out", ablate.out, "Output directory")->required();
    s->add_option("--variants", ablate.variants, "Comma-separated variant list")->delimiter(',');
    s->add_option("--seeds", ablate.seeds, "Independent runs per variant");
    s->add_option("--scheme", ablate.scheme, "Split scheme: s1 or s2");
    s->add_option("--dim", ablate.cfg.pretrain.d_emb, "Embedding dimension");
    s->add_option("--pretrain-epochs", ablate.cfg.pretrain.epochs, "Embedding epochs");
    s->add_option("--d", ablate.cfg.model.d, "Latent dimension");
    s->add_option("--rules", ablate.cfg.model.rules, "Rule bank size");
    s->add_option("--protos", ablate.cfg.model.k, "Prototype count");
    s->add_option("--tau", ablate.cfg.model.tau, "Kernel bandwidth");
    s->add_option("--hidden", ablate.cfg.model.hidden, "Fusion head hidden width");
    s->add_option("--lambda", ablate.cfg.train.lambda, "Consistency loss weight");
    s->add_option("--lr", ablate.cfg.train.lr, "Adam learning rate");
    s->add_option("--batch", ablate.cfg.train.batch_size, "Minibatch size");
    s->add_option("--epochs", ablate.cfg.train.epochs, "Max epochs");
    s->add_option("--patience", ablate.cfg.train.patience, "Early-stop patience");
    s->add_option("--delta", ablate.cfg.train.delta, "Decision threshold");
    s->add_flag("--resample", ablate.cfg.train.resample_negatives,
                "Redraw training negatives every epoch");
    s->add_option("--enc-rounds", ablate.cfg.dkg_encoder.rounds, "Domain encoder tuning rounds");
    s->add_option("--enc-epochs", ablate.cfg.dkg_encoder.epochs_per_round,
                  "Epochs per tuning round");
    s->add_option("--enc-lr", ablate.cfg.dkg_encoder.lr, "Domain encoder learning rate");
    s->add_option("--enc-margin", ablate.cfg.dkg_encoder.margin, "Contrastive margin");
    s->add_option("--pretrain-margin", ablate.cfg.pretrain.margin, "Embedding ranking margin");
    s->add_option("--seed", ablate.seed, "Master seed");
    s->callback([&] { run_ablate(ablate); });
  }

  ScaleOpts scale;
  {
    CLI::App* s = app.add_subcommand("scale", "Time the fuse scoring pass over graph prefixes");
    add_config(s);
    s->add_option("--dkg", scale.dkg, "Domain graph TSV")->required();
    s->add_option("--gkg", scale.gkg, "General graph TSV")->required();
    s->add_option("--alignment", scale.alignment, "Entity alignment TSV")->required();
    s->add_option("--embeddings", scale.embeddings, "Pretrained embeddings file")->required();
    s->add_option("--model", scale.model, "Trained model file")->required();
    s->add_option("--out", scale.out, "Output directory")->required();
    s->add_option("--sizes", scale.sizes, "Comma-separated fact counts")->delimiter(',');
    s->add_option("--reps", scale.reps, "Repetitions per size");
    s->callback([&] { run_scale(scale); });
  }

  GradcheckOpts gradcheck;
  {
    CLI::App* s = app.add_subcommand("gradcheck", "Audit analytic gradients of the joint objective");
    add_config(s);
    s->add_option("--seed", gradcheck.seed, "Master seed");
    s->add_option("--eps", gradcheck.eps, "Central-difference step");
    s->add_option("--steps", gradcheck.steps, "Optimizer steps before the second check");
    s->callback([&] { exit_code = run_gradcheck(gradcheck); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "exefuse: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
