#include <benchmark/benchmark.h>

#include "exefuse/dataset.hpp"
#include "exefuse/evaluator.hpp"
#include "exefuse/model.hpp"
#include "exefuse/numkit.hpp"
#include "exefuse/trainer.hpp"

namespace {

using namespace exefuse;

struct Fixture {
  SyntheticBenchmark bench;
  EmbeddingTable table;
  ExeFuseModel model;

  Fixture() {
    SyntheticConfig cfg;
    cfg.entities_per_graph = 100;
    cfg.relations_per_graph = 6;
    cfg.facts_per_graph = 600;
    cfg.rule_count = 2;
    cfg.noise_rate = 0.0;
    bench = generate_synthetic_benchmark(cfg, 7);

    PretrainConfig pc;
    pc.d_emb = 16;
    pc.epochs = 5;
    table = pretrain_translational(bench.dkg, bench.gkg, bench.unified, pc, 7).table;

    ModelConfig mc;
    mc.d = 16;
    mc.rules = 4;
    mc.k = 8;
    mc.hidden = 16;
    model = make_model(mc, pc.d_emb, 7);

    std::vector<LabeledCandidate> positives;
    for (const auto& c : bench.gold)
      if (c.label == 1) positives.push_back(c);
    model.protos =
        fit_prototypes(model, table, bench.dkg, bench.unified, positives, mc.k, mc.tau, 7);
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_forward(benchmark::State& state) {
  const Fixture& f = fixture();
  const Fact& triple = f.bench.gold.front().triple;
  for (auto _ : state) benchmark::DoNotOptimize(forward(f.model, f.table, triple).p);
}
BENCHMARK(BM_forward);

void BM_backward(benchmark::State& state) {
  const Fixture& f = fixture();
  const Fact& triple = f.bench.gold.front().triple;
  Gradients grads = make_gradients(f.model);
  for (auto _ : state) {
    ForwardTrace trace = forward(f.model, f.table, triple);
    clear_gradients(grads);
    backward(f.model, f.table, trace, 1.0, {}, grads);
    benchmark::DoNotOptimize(grads.head.b_out);
  }
}
BENCHMARK(BM_backward);

void BM_fuse_scoring(benchmark::State& state) {
  const Fixture& f = fixture();
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(
        fuse(f.model, f.table, f.bench.gkg, f.bench.dkg, f.bench.unified, 0.5, 0).size());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_fuse_scoring)->Arg(600);

void BM_kmeans(benchmark::State& state) {
  Rng rng(3);
  Mat points(256, 16);
  for (double& v : points.data) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(kmeans(points, 8, 3).iterations);
}
BENCHMARK(BM_kmeans);

void BM_pretrain_epoch(benchmark::State& state) {
  const Fixture& f = fixture();
  PretrainConfig pc;
  pc.d_emb = 16;
  pc.epochs = 1;
  for (auto _ : state)
    benchmark::DoNotOptimize(
        pretrain_translational(f.bench.dkg, f.bench.gkg, f.bench.unified, pc, 11).table.d_emb);
}
BENCHMARK(BM_pretrain_epoch);

}  // namespace

BENCHMARK_MAIN();
