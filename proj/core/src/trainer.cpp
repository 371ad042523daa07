#include "exefuse/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "exefuse/evaluator.hpp"

namespace exefuse {

double bce_loss(double p, int y, double* dl_dp) {
  if (!(p > 0.0) || !(p < 1.0))
    throw std::invalid_argument("probability must lie strictly inside (0, 1)");
  if (y != 0 && y != 1) throw std::invalid_argument("label must be 0 or 1");
  if (dl_dp != nullptr) *dl_dp = y == 1 ? -1.0 / p : 1.0 / (1.0 - p);
  return y == 1 ? -std::log(p) : -std::log1p(-p);
}

namespace {

// Shared by the public op (weight 1) and the λ-scaled training step.
double consistency_loss_impl(const ExeFuseModel& model, const EmbeddingTable& tab,
                             std::span<const DistantPair> pairs, double weight,
                             Gradients* grad) {
  const std::size_t d = model.cfg.d;
  double total = 0.0;
  Vec diff(d);
  for (const DistantPair& pair : pairs) {
    EncodeTrace enc = encode_traced(model.enc, tab, pair.gkg_fact);
    ExecuteTrace ex = execute_traced(model.bank, enc.q);
    Vec target = encode(model.enc_dkg, tab, pair.dkg_fact);  // detached
    double loss = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      diff[i] = ex.qhat[i] - target[i];
      loss += diff[i] * diff[i];
    }
    total += loss;
    if (grad != nullptr) {
      Vec dqhat(d);
      for (std::size_t i = 0; i < d; ++i) dqhat[i] = weight * 2.0 * diff[i];
      Vec dq = execute_backward(model.bank, ex, dqhat, grad->bank);
      encode_backward(model.enc, enc, dq, grad->enc);
    }
  }
  return total;
}

}  // namespace

double rule_consistency_loss(const ExeFuseModel& model, const EmbeddingTable& tab,
                             std::span<const DistantPair> pairs, Gradients* grad) {
  return consistency_loss_impl(model, tab, pairs, 1.0, grad);
}

namespace {

struct EncoderGrad {
  EncoderParams g;

  explicit EncoderGrad(const EncoderParams& like) {
    g.w1 = Mat(like.w1.rows, like.w1.cols);
    g.b1 = Vec(like.b1.size(), 0.0);
    g.w2 = Mat(like.w2.rows, like.w2.cols);
    g.structure_aware = like.structure_aware;
  }
  void clear() {
    g.w1.fill(0.0);
    g.b1.assign(g.b1.size(), 0.0);
    g.w2.fill(0.0);
  }
  std::size_t size() const { return g.w1.data.size() + g.b1.size() + g.w2.data.size(); }
  void flatten(Vec& out) const {
    out.clear();
    out.insert(out.end(), g.w1.data.begin(), g.w1.data.end());
    out.insert(out.end(), g.b1.begin(), g.b1.end());
    out.insert(out.end(), g.w2.data.begin(), g.w2.data.end());
  }
  static void gather(const EncoderParams& params, Vec& out) {
    out.clear();
    out.insert(out.end(), params.w1.data.begin(), params.w1.data.end());
    out.insert(out.end(), params.b1.begin(), params.b1.end());
    out.insert(out.end(), params.w2.data.begin(), params.w2.data.end());
  }
  static void scatter(std::span<const double> in, EncoderParams& params) {
    auto it = in.begin();
    std::copy_n(it, params.w1.data.size(), params.w1.data.begin());
    it += static_cast<std::ptrdiff_t>(params.w1.data.size());
    std::copy_n(it, params.b1.size(), params.b1.begin());
    it += static_cast<std::ptrdiff_t>(params.b1.size());
    std::copy_n(it, params.w2.data.size(), params.w2.data.begin());
  }
};

}  // namespace

std::vector<double> train_dkg_encoder(ExeFuseModel& model, const EmbeddingTable& tab,
                                      const KnowledgeGraph& dkg, const UnifiedVocabulary& uv,
                                      const DkgEncoderConfig& cfg, std::uint64_t seed) {
  if (dkg.facts().empty()) throw std::invalid_argument("domain graph has no facts");
  if (cfg.batch_size == 0 || cfg.lr <= 0.0)
    throw std::invalid_argument("batch_size and lr must be positive");

  std::vector<Fact> facts;
  facts.reserve(dkg.facts().size());
  for (const Fact& f : dkg.facts())
    facts.push_back({uv.unify_entity(GraphTag::domain, f.head),
                     uv.unify_relation(GraphTag::domain, f.rel),
                     uv.unify_entity(GraphTag::domain, f.tail)});

  const std::size_t n = facts.size();
  const std::size_t d = model.cfg.d;
  const std::size_t k = std::min(model.cfg.k, n);
  const std::size_t dkg_entities = uv.num_dkg_entities();
  const std::size_t dkg_relations = uv.num_dkg_relations();
  if (dkg_entities < 2) throw std::invalid_argument("need at least two domain entities");

  Rng master(seed);
  Rng rng = master.fork(1);
  std::vector<double> history;
  EncoderGrad grad(model.enc_dkg);
  Adam adam(grad.size(), cfg.lr, 0.9, 0.999, 1e-8);
  Vec flat, params;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    Mat points(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      Vec q = encode(model.enc_dkg, tab, facts[i]);
      std::copy(q.begin(), q.end(), points.row(i).begin());
    }
    KMeansResult km = kmeans(points, k, master.fork(100 + round).seed());

    for (std::size_t epoch = 0; epoch < cfg.epochs_per_round; ++epoch) {
      shuffle(order, rng);
      double loss_sum = 0.0;

      for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        const std::size_t stop = std::min(start + cfg.batch_size, n);
        grad.clear();

        for (std::size_t b = start; b < stop; ++b) {
          const std::size_t i = order[b];
          const Fact& pos = facts[i];
          auto c = km.centroids.row(km.assignment[i]);

          EncodeTrace tr = encode_traced(model.enc_dkg, tab, pos);
          Vec dq(d);
          double l_pos = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            double df = tr.q[j] - c[j];
            l_pos += df * df;
            dq[j] = 2.0 * df;
          }
          encode_backward(model.enc_dkg, tr, dq, grad.g);

          // Corrupt one slot with the same mix the candidate sampler uses, so
          // low density lines up with the negatives the head will score.
          Fact neg = pos;
          bool moved = false;
          const double coin = rng.uniform();
          if (coin < 0.2 && dkg_relations >= 2) {
            const RelationId orig_rel = neg.rel;
            int guard = 0;
            do {
              neg.rel = static_cast<RelationId>(rng.below(dkg_relations));
            } while (neg.rel == orig_rel && ++guard < 100);
            moved = neg.rel != orig_rel;
          } else {
            EntityId& slot = coin < 0.6 ? neg.head : neg.tail;
            const EntityId original = slot;
            int guard = 0;
            do {
              slot = static_cast<EntityId>(rng.below(dkg_entities));
            } while (slot == original && ++guard < 100);
            moved = slot != original;
          }

          double l_neg = 0.0;
          if (moved) {
            EncodeTrace trn = encode_traced(model.enc_dkg, tab, neg);
            // Hinge against the nearest centroid: low kernel density everywhere
            // is what the executability score needs, not distance from one
            // arbitrary cluster.
            std::size_t near = 0;
            double d2 = squared_distance(trn.q, km.centroids.row(0));
            for (std::size_t ci = 1; ci < k; ++ci) {
              double cd = squared_distance(trn.q, km.centroids.row(ci));
              if (cd < d2) {
                d2 = cd;
                near = ci;
              }
            }
            if (d2 < cfg.margin) {
              l_neg = cfg.margin - d2;
              auto cn = km.centroids.row(near);
              for (std::size_t j = 0; j < d; ++j) dq[j] = -2.0 * (trn.q[j] - cn[j]);
              encode_backward(model.enc_dkg, trn, dq, grad.g);
            }
          }
          loss_sum += l_pos + l_neg;
        }
        grad.flatten(flat);
        const double inv = 1.0 / static_cast<double>(stop - start);
        for (double& v : flat) v *= inv;
        EncoderGrad::gather(model.enc_dkg, params);
        adam.step(params, flat);
        EncoderGrad::scatter(params, model.enc_dkg);
      }
      history.push_back(loss_sum / static_cast<double>(n));
    }
  }
  return history;
}

PrototypeSet fit_prototypes(const ExeFuseModel& model, const EmbeddingTable& tab,
                            const KnowledgeGraph& dkg, const UnifiedVocabulary& uv,
                            std::span<const LabeledCandidate> train_positives, std::size_t k,
                            double tau, std::uint64_t seed) {
  if (k == 0 || tau <= 0.0) throw std::invalid_argument("need k >= 1 and tau > 0");
  if (dkg.facts().size() < k)
    throw std::invalid_argument("fewer domain facts than requested prototypes");
  if (train_positives.empty())
    throw std::invalid_argument("score statistics need at least one training positive");

  const std::size_t d = model.cfg.d;
  Mat points(dkg.facts().size(), d);
  for (std::size_t i = 0; i < dkg.facts().size(); ++i) {
    const Fact& f = dkg.facts()[i];
    Vec q = encode(model.enc_dkg, tab,
                   {uv.unify_entity(GraphTag::domain, f.head),
                    uv.unify_relation(GraphTag::domain, f.rel),
                    uv.unify_entity(GraphTag::domain, f.tail)});
    std::copy(q.begin(), q.end(), points.row(i).begin());
  }

  PrototypeSet protos;
  protos.centroids = kmeans(points, k, seed).centroids;
  protos.tau = tau;
  protos.min_distance = model.protos.min_distance;

  protos.collapsed = true;
  for (std::size_t j = 1; j < k && protos.collapsed; ++j)
    for (std::size_t i = 0; i < d; ++i)
      if (std::abs(protos.centroids(j, i) - protos.centroids(0, i)) > 1e-12) {
        protos.collapsed = false;
        break;
      }

  Vec log_scores;
  log_scores.reserve(train_positives.size());
  for (const LabeledCandidate& c : train_positives) {
    Vec q = encode(model.enc, tab, c.triple);
    Vec qhat = execute(model.bank, q);
    log_scores.push_back(std::log(executability_score(protos, qhat)));
  }
  double mean = 0.0;
  for (double v : log_scores) mean += v;
  mean /= static_cast<double>(log_scores.size());
  double var = 0.0;
  for (double v : log_scores) var += (v - mean) * (v - mean);
  var /= static_cast<double>(log_scores.size());

  protos.log_mean = mean;
  protos.log_std = std::max(std::sqrt(var), 1e-8);
  protos.fitted = true;
  return protos;
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {
  if (lr <= 0.0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || eps <= 0.0)
    throw std::invalid_argument("invalid optimizer hyperparameters");
}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("optimizer state size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

TrainReport train(ExeFuseModel& model, const EmbeddingTable& tab, const DatasetSplit& split,
                  std::span<const DistantPair> d_pos, const TrainConfig& cfg,
                  const NegativeResampler& resample) {
  if (!(cfg.delta > 0.0) || !(cfg.delta < 1.0))
    throw std::invalid_argument("delta must lie in (0, 1)");
  if (cfg.lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
  if (cfg.lr <= 0.0 || cfg.batch_size == 0 || cfg.epochs == 0)
    throw std::invalid_argument("lr, batch_size, and epochs must be positive");
  if (!model.protos.fitted) throw std::logic_error("prototypes must be fitted before training");
  if (split.train.empty()) throw std::invalid_argument("training split is empty");

  const std::size_t n_params = trainable_parameter_count(model);
  Adam adam(n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  Gradients grads = make_gradients(model);
  Vec flat(n_params);
  Vec params(n_params);

  const bool resampling = cfg.resample_negatives && static_cast<bool>(resample);
  std::vector<LabeledCandidate> positives;
  if (resampling) {
    for (const auto& c : split.train)
      if (c.label == 1) positives.push_back(c);
  }

  Rng master(cfg.seed);
  Rng rng = master.fork(0);
  const bool use_pairs = cfg.lambda > 0.0 && !d_pos.empty();
  std::size_t pair_cursor = 0;

  TrainReport report;
  Vec best_params;
  double best_f1 = -1.0;
  std::size_t since_best = 0;

  std::vector<LabeledCandidate> epoch_train = split.train;
  std::vector<DistantPair> pair_batch;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (resampling) {
      epoch_train = positives;
      auto negs = resample(epoch);
      epoch_train.insert(epoch_train.end(), negs.begin(), negs.end());
    }
    shuffle(epoch_train, rng);

    double main_sum = 0.0;
    std::size_t batch_index = 0;

    for (std::size_t start = 0; start < epoch_train.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, epoch_train.size());
      const double inv_n = 1.0 / static_cast<double>(stop - start);
      clear_gradients(grads);
      double batch_loss = 0.0;

      for (std::size_t i = start; i < stop; ++i) {
        const LabeledCandidate& c = epoch_train[i];
        ForwardTrace trace = forward(model, tab, c.triple);
        double dl_dp = 0.0;
        batch_loss += bce_loss(trace.p, c.label, &dl_dp);
        backward(model, tab, trace, dl_dp * inv_n, {}, grads);
      }
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                 ", classification batch " + std::to_string(batch_index));
      main_sum += batch_loss;
      flatten_gradients(model, grads, flat);
      copy_trainable(model, params);
      adam.step(params, flat);
      load_trainable(model, params);

      if (use_pairs) {
        pair_batch.clear();
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
          pair_batch.push_back(d_pos[pair_cursor]);
          pair_cursor = (pair_cursor + 1) % d_pos.size();
        }
        clear_gradients(grads);
        double pair_loss =
            consistency_loss_impl(model, tab, pair_batch, cfg.lambda, &grads);
        if (!std::isfinite(pair_loss))
          throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                   ", consistency batch " + std::to_string(batch_index));
        flatten_gradients(model, grads, flat);
        copy_trainable(model, params);
        adam.step(params, flat);
        load_trainable(model, params);
      }
      ++batch_index;
    }

    const double j_main = main_sum / static_cast<double>(epoch_train.size());
    const double j_rule = rule_consistency_loss(model, tab, d_pos);
    double val_f1 = 0.0;
    if (!split.valid.empty())
      val_f1 = classify_triples(model, tab, split.valid, cfg.delta).f1;
    report.epochs.push_back({epoch, j_main + cfg.lambda * j_rule, j_main, j_rule, val_f1});

    if (split.valid.empty()) continue;  // no signal to stop or select on
    if (val_f1 > best_f1) {
      best_f1 = val_f1;
      report.best_epoch = epoch;
      best_params.resize(n_params);
      copy_trainable(model, best_params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
  }

  if (!best_params.empty()) load_trainable(model, best_params);
  report.best_val_f1 = std::max(best_f1, 0.0);
  return report;
}

namespace {

std::string fmt_double_short(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("double formatting failed");
  return std::string(buf, end);
}

}  // namespace

void save_train_report(const std::filesystem::path& path, const TrainReport& report) {
  std::ostringstream os;
  os << "epoch\tJ\tJ_main\tJ_rule\tvalF1\n";
  for (const EpochRecord& r : report.epochs)
    os << r.epoch << '\t' << fmt_double_short(r.j) << '\t' << fmt_double_short(r.j_main) << '\t'
       << fmt_double_short(r.j_rule) << '\t' << fmt_double_short(r.val_f1) << '\n';
  os << "#best_epoch=" << report.best_epoch << '\n'
     << "#best_val_f1=" << fmt_double_short(report.best_val_f1) << '\n'
     << "#early_stopped=" << (report.early_stopped ? 1 : 0) << '\n';
  write_file_atomic(path, os.str());
}

TrainReport load_train_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TrainReport report;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      std::string value = line.substr(eq + 1);
      if (key == "best_epoch") report.best_epoch = std::stoull(value);
      else if (key == "best_val_f1") report.best_val_f1 = std::stod(value);
      else if (key == "early_stopped") report.early_stopped = value == "1";
      continue;
    }
    if (line.rfind("epoch\t", 0) == 0) continue;  // header
    std::istringstream ls(line);
    EpochRecord r;
    if (!(ls >> r.epoch >> r.j >> r.j_main >> r.j_rule >> r.val_f1))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": malformed report record");
    report.epochs.push_back(r);
  }
  return report;
}

std::vector<FusedFact> fuse(const ExeFuseModel& model, const EmbeddingTable& tab,
                            const KnowledgeGraph& gkg, const KnowledgeGraph& dkg,
                            const UnifiedVocabulary& uv, double delta, std::size_t top_m) {
  std::vector<FusedFact> out;
  std::vector<EntityId> heads, tails;
  std::vector<FusedFact> per_source;

  for (const Fact& f : gkg.facts()) {
    Fact src{uv.unify_entity(GraphTag::general, f.head),
             uv.unify_relation(GraphTag::general, f.rel),
             uv.unify_entity(GraphTag::general, f.tail)};

    auto head_images = uv.aligned_images(src.head);
    auto tail_images = uv.aligned_images(src.tail);
    heads.assign(head_images.begin(), head_images.end());
    if (heads.empty()) heads.push_back(src.head);
    tails.assign(tail_images.begin(), tail_images.end());
    if (tails.empty()) tails.push_back(src.tail);

    per_source.clear();
    for (EntityId h : heads) {
      for (EntityId t : tails) {
        for (std::size_t r = 0; r < uv.num_dkg_relations(); ++r) {
          Fact cand{h, static_cast<RelationId>(r), t};
          if (!uv.candidate_is_fusable(cand, dkg)) continue;
          ForwardTrace trace = forward(model, tab, cand);
          if (trace.p > delta) per_source.push_back({cand, trace.p, src});
        }
      }
    }
    std::sort(per_source.begin(), per_source.end(), [](const FusedFact& a, const FusedFact& b) {
      if (a.p != b.p) return a.p > b.p;
      return std::tie(a.triple.head, a.triple.rel, a.triple.tail) <
             std::tie(b.triple.head, b.triple.rel, b.triple.tail);
    });
    if (top_m != 0 && per_source.size() > top_m) per_source.resize(top_m);
    out.insert(out.end(), per_source.begin(), per_source.end());
  }
  return out;
}

double joint_loss(const ExeFuseModel& model, const EmbeddingTable& tab, const JointBatch& batch) {
  double main = 0.0;
  for (const LabeledCandidate& c : batch.candidates) {
    ForwardTrace trace = forward(model, tab, c.triple);
    main += bce_loss(trace.p, c.label);
  }
  if (!batch.candidates.empty()) main /= static_cast<double>(batch.candidates.size());
  return main + batch.lambda * rule_consistency_loss(model, tab, batch.pairs);
}

double joint_loss_grad(const ExeFuseModel& model, const EmbeddingTable& tab,
                       const JointBatch& batch, Gradients& grad) {
  double main = 0.0;
  const double inv_n =
      batch.candidates.empty() ? 0.0 : 1.0 / static_cast<double>(batch.candidates.size());
  for (const LabeledCandidate& c : batch.candidates) {
    ForwardTrace trace = forward(model, tab, c.triple);
    double dl_dp = 0.0;
    main += bce_loss(trace.p, c.label, &dl_dp);
    backward(model, tab, trace, dl_dp * inv_n, {}, grad);
  }
  main *= inv_n;
  double rule =
      consistency_loss_impl(model, tab, batch.pairs, batch.lambda, &grad);
  return main + batch.lambda * rule;
}

double gradcheck_joint(const ExeFuseModel& model, const EmbeddingTable& tab,
                       const JointBatch& batch, double eps) {
  const std::size_t n = trainable_parameter_count(model);
  Vec params(n);
  copy_trainable(model, params);

  Gradients grad = make_gradients(model);
  joint_loss_grad(model, tab, batch, grad);
  Vec analytic(n);
  flatten_gradients(model, grad, analytic);

  ExeFuseModel scratch = model;
  auto loss = [&](std::span<const double> p) {
    load_trainable(scratch, p);
    return joint_loss(scratch, tab, batch);
  };
  return finite_difference_check(loss, params, analytic, eps);
}

}  // namespace exefuse
