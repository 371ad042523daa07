#include "exefuse/model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace exefuse {

namespace {

constexpr double kProbFloor = 1e-12;       // keeps BCE inputs in the open interval
constexpr double kScoreFloor = 1e-300;     // keeps ln(S) finite if every kernel underflows

double sigmoid_clamped(double logit) {
  double p = 1.0 / (1.0 + std::exp(-logit));
  return std::clamp(p, kProbFloor, 1.0 - kProbFloor);
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::single_affine: return "single_affine";
    case Variant::direct_classification: return "direct_classification";
    case Variant::no_structure_encoder: return "no_structure_encoder";
    case Variant::uniform_selector: return "uniform_selector";
    case Variant::no_exec_score: return "no_exec_score";
    case Variant::mlp_rules: return "mlp_rules";
    case Variant::min_distance: return "min_distance";
  }
  throw std::invalid_argument("unknown variant value");
}

Variant parse_variant(std::string_view name) {
  for (auto v : {Variant::full, Variant::single_affine, Variant::direct_classification,
                 Variant::no_structure_encoder, Variant::uniform_selector, Variant::no_exec_score,
                 Variant::mlp_rules, Variant::min_distance})
    if (name == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant: " + std::string(name));
}

ExeFuseModel make_model(const ModelConfig& cfg_in, std::size_t d_emb, std::uint64_t seed) {
  ModelConfig cfg = cfg_in;
  if (cfg.variant == Variant::single_affine) cfg.rules = 1;
  if (cfg.d == 0 || cfg.rules == 0 || cfg.k == 0 || cfg.hidden == 0 || d_emb == 0)
    throw std::invalid_argument("model dimensions must be positive");
  if (cfg.tau <= 0.0) throw std::invalid_argument("tau must be positive");

  ExeFuseModel m;
  m.cfg = cfg;
  m.d_emb = d_emb;
  const std::size_t d = cfg.d;

  Rng rng = Rng(seed).fork(0);

  // Xavier assumes unit-variance inputs, but the encoder consumes products of
  // unit-norm embedding rows whose coordinates scale like 1/d_emb. Each input
  // column gets a compensating gain so pre-activations start near unit
  // variance; internal layers then keep |q| near 1, which is the scale the
  // kernel bandwidth tau is calibrated against.
  const double de = static_cast<double>(d_emb);
  const double prod_gain = de;            // (e .. r) coordinates: std 1/d_emb
  const double rel_gain = std::sqrt(de);  // raw embedding coordinates: std 1/sqrt(d_emb)
  const double gelu_ms = 0.425;           // E[gelu(z)^2], z ~ N(0,1)
  const double contract = 1.0 / std::sqrt(gelu_ms * static_cast<double>(d));
  const bool plain_concat = cfg.variant == Variant::no_structure_encoder;

  m.enc.w1 = xavier_uniform(d, 3 * d_emb, 3 * d_emb, d, rng);
  for (std::size_t i = 0; i < d; ++i) {
    auto row = m.enc.w1.row(i);
    for (std::size_t j = 0; j < 3 * d_emb; ++j)
      row[j] *= (j < 2 * d_emb && !plain_concat) ? prod_gain : rel_gain;
  }
  m.enc.b1 = Vec(d, 0.0);
  m.enc.w2 = xavier_uniform(d, d, d, d, rng);
  for (double& v : m.enc.w2.data) v *= contract;

  RuleBank& bank = m.bank;
  bank.rules = cfg.rules;
  bank.d = d;
  if (cfg.variant == Variant::mlp_rules) {
    bank.mlp = true;
    const double expand = std::sqrt(static_cast<double>(d));
    for (std::size_t r = 0; r < bank.rules; ++r) {
      bank.mlp_w1.push_back(xavier_uniform(d, d, d, d, rng));
      for (double& v : bank.mlp_w1.back().data) v *= expand;
      bank.mlp_b1.emplace_back(d, 0.0);
      bank.mlp_w2.push_back(xavier_uniform(d, d, d, d, rng));
      for (double& v : bank.mlp_w2.back().data) v *= contract;
      bank.mlp_b2.emplace_back(d, 0.0);
    }
  } else {
    // Elementwise affine maps start near the identity: symmetry is broken by
    // the spread, and execution preserves the encoder's scale from step one.
    bank.w = Mat(bank.rules, d);
    for (double& v : bank.w.data) v = 1.0 + rng.uniform(-0.3, 0.3);
    bank.b = Mat(bank.rules, d);
  }
  bank.w_sel = xavier_uniform(d, d, d, d, rng);
  for (double& v : bank.w_sel.data) v *= std::sqrt(static_cast<double>(d));
  bank.u = xavier_uniform(bank.rules, d, d, d, rng);

  m.head.w_hidden = xavier_uniform(cfg.hidden, 2 * d + 1, 2 * d + 1, cfg.hidden, rng);
  for (std::size_t i = 0; i < cfg.hidden; ++i) {
    auto row = m.head.w_hidden.row(i);
    for (std::size_t j = 0; j < 2 * d; ++j) row[j] *= std::sqrt(static_cast<double>(d));
  }
  m.head.b_hidden = Vec(cfg.hidden, 0.0);
  m.head.w_out = std::move(xavier_uniform(1, cfg.hidden, cfg.hidden, 1, rng).data);
  m.head.b_out = 0.0;

  m.enc_dkg = m.enc;  // domain encoder starts from the source encoder
  m.enc_dkg.role = EncoderRole::domain;

  m.protos.centroids = Mat(cfg.k, d);
  m.protos.tau = cfg.tau;

  switch (cfg.variant) {
    case Variant::direct_classification:
      m.zero_qhat_input = true;
      m.zero_exec_input = true;
      break;
    case Variant::no_structure_encoder:
      m.enc.structure_aware = false;
      m.enc_dkg.structure_aware = false;
      break;
    case Variant::uniform_selector: bank.uniform_selector = true; break;
    case Variant::no_exec_score: m.zero_exec_input = true; break;
    case Variant::min_distance: m.protos.min_distance = true; break;
    default: break;
  }
  return m;
}

namespace {

void check_encoder(const EncoderParams& p, const EmbeddingTable& tab, const Fact& f) {
  const std::size_t d = p.dim();
  if (p.w1.cols != 3 * tab.d_emb || p.w1.rows != d || p.b1.size() != d || p.w2.cols != d)
    throw std::invalid_argument("encoder dimensions do not match the embedding table");
  if (f.head >= tab.entities.rows || f.tail >= tab.entities.rows || f.rel >= tab.relations.rows)
    throw std::invalid_argument("fact ids out of range for the embedding table");
}

}  // namespace

EncodeTrace encode_traced(const EncoderParams& params, const EmbeddingTable& tab, const Fact& f) {
  check_encoder(params, tab, f);
  const std::size_t de = tab.d_emb, d = params.dim();
  auto eh = tab.entities.row(f.head);
  auto er = tab.relations.row(f.rel);
  auto et = tab.entities.row(f.tail);

  EncodeTrace tr;
  tr.x.resize(3 * de);
  if (params.structure_aware) {
    for (std::size_t i = 0; i < de; ++i) {
      tr.x[i] = eh[i] * er[i];
      tr.x[de + i] = et[i] * er[i];
      tr.x[2 * de + i] = er[i];
    }
  } else {
    for (std::size_t i = 0; i < de; ++i) {
      tr.x[i] = eh[i];
      tr.x[de + i] = et[i];
      tr.x[2 * de + i] = er[i];
    }
  }
  tr.z1 = params.b1;
  matvec(params.w1, tr.x, tr.z1);
  tr.a1.resize(d);
  for (std::size_t i = 0; i < d; ++i) tr.a1[i] = gelu(tr.z1[i]);
  tr.q.assign(d, 0.0);
  matvec(params.w2, tr.a1, tr.q);
  return tr;
}

Vec encode(const EncoderParams& params, const EmbeddingTable& tab, const Fact& f) {
  return encode_traced(params, tab, f).q;
}

void encode_backward(const EncoderParams& params, const EncodeTrace& trace,
                     std::span<const double> dq, EncoderParams& grad) {
  const std::size_t d = params.dim();
  if (dq.size() != d || trace.q.size() != d || trace.x.size() != params.w1.cols)
    throw std::invalid_argument("encoder trace/gradient dimension mismatch");
  add_outer(grad.w2, dq, trace.a1);
  Vec da1(d, 0.0);
  matvec_transposed(params.w2, dq, da1);
  Vec dz1(d);
  for (std::size_t i = 0; i < d; ++i) dz1[i] = da1[i] * gelu_grad(trace.z1[i]);
  add_outer(grad.w1, dz1, trace.x);
  axpy(1.0, dz1, grad.b1);
}

Vec apply_rule(const RuleBank& bank, std::size_t rule, std::span<const double> q) {
  if (rule >= bank.rules || q.size() != bank.d)
    throw std::invalid_argument("rule index or input dimension out of range");
  Vec out(bank.d);
  if (bank.mlp) {
    Vec z = bank.mlp_b1[rule];
    matvec(bank.mlp_w1[rule], q, z);
    Vec a(bank.d);
    for (std::size_t i = 0; i < bank.d; ++i) a[i] = gelu(z[i]);
    out = bank.mlp_b2[rule];
    matvec(bank.mlp_w2[rule], a, out);
  } else {
    for (std::size_t i = 0; i < bank.d; ++i) out[i] = bank.w(rule, i) * q[i] + bank.b(rule, i);
  }
  return out;
}

Vec select_rules(const RuleBank& bank, std::span<const double> q) {
  if (q.size() != bank.d) throw std::invalid_argument("selector input dimension mismatch");
  if (bank.uniform_selector) return Vec(bank.rules, 1.0 / static_cast<double>(bank.rules));
  Vec pre(bank.d, 0.0);
  matvec(bank.w_sel, q, pre);
  Vec s(bank.d);
  for (std::size_t i = 0; i < bank.d; ++i) s[i] = std::tanh(pre[i]);
  Vec logits(bank.rules);
  for (std::size_t r = 0; r < bank.rules; ++r) logits[r] = dot(bank.u.row(r), s);
  return softmax(logits);
}

ExecuteTrace execute_traced(const RuleBank& bank, std::span<const double> q) {
  if (q.size() != bank.d) throw std::invalid_argument("execute input dimension mismatch");
  ExecuteTrace tr;
  tr.q.assign(q.begin(), q.end());

  if (bank.uniform_selector) {
    tr.probs.assign(bank.rules, 1.0 / static_cast<double>(bank.rules));
  } else {
    tr.sel_pre.assign(bank.d, 0.0);
    matvec(bank.w_sel, q, tr.sel_pre);
    tr.sel_tanh.resize(bank.d);
    for (std::size_t i = 0; i < bank.d; ++i) tr.sel_tanh[i] = std::tanh(tr.sel_pre[i]);
    tr.logits.resize(bank.rules);
    for (std::size_t r = 0; r < bank.rules; ++r) tr.logits[r] = dot(bank.u.row(r), tr.sel_tanh);
    tr.probs = softmax(tr.logits);
  }

  tr.rule_out = Mat(bank.rules, bank.d);
  if (bank.mlp) {
    tr.mlp_z1 = Mat(bank.rules, bank.d);
    tr.mlp_a1 = Mat(bank.rules, bank.d);
    for (std::size_t r = 0; r < bank.rules; ++r) {
      auto z = tr.mlp_z1.row(r);
      std::copy(bank.mlp_b1[r].begin(), bank.mlp_b1[r].end(), z.begin());
      matvec(bank.mlp_w1[r], q, z);
      auto a = tr.mlp_a1.row(r);
      for (std::size_t i = 0; i < bank.d; ++i) a[i] = gelu(z[i]);
      auto out = tr.rule_out.row(r);
      std::copy(bank.mlp_b2[r].begin(), bank.mlp_b2[r].end(), out.begin());
      matvec(bank.mlp_w2[r], a, out);
    }
  } else {
    for (std::size_t r = 0; r < bank.rules; ++r) {
      auto out = tr.rule_out.row(r);
      for (std::size_t i = 0; i < bank.d; ++i) out[i] = bank.w(r, i) * q[i] + bank.b(r, i);
    }
  }

  tr.qhat.assign(bank.d, 0.0);
  for (std::size_t r = 0; r < bank.rules; ++r) axpy(tr.probs[r], tr.rule_out.row(r), tr.qhat);
  return tr;
}

Vec execute(const RuleBank& bank, std::span<const double> q) {
  return execute_traced(bank, q).qhat;
}

Vec execute_backward(const RuleBank& bank, const ExecuteTrace& trace,
                     std::span<const double> dqhat, RuleBank& grad) {
  const std::size_t d = bank.d, L = bank.rules;
  if (dqhat.size() != d || trace.probs.size() != L || trace.rule_out.rows != L)
    throw std::invalid_argument("execute trace/gradient dimension mismatch");

  Vec dq(d, 0.0);
  Vec dp(L);
  for (std::size_t r = 0; r < L; ++r) dp[r] = dot(dqhat, trace.rule_out.row(r));

  if (bank.mlp) {
    Vec dt(d), da(d), dz(d);
    for (std::size_t r = 0; r < L; ++r) {
      for (std::size_t i = 0; i < d; ++i) dt[i] = trace.probs[r] * dqhat[i];
      add_outer(grad.mlp_w2[r], dt, trace.mlp_a1.row(r));
      axpy(1.0, dt, grad.mlp_b2[r]);
      da.assign(d, 0.0);
      matvec_transposed(bank.mlp_w2[r], dt, da);
      auto z = trace.mlp_z1.row(r);
      for (std::size_t i = 0; i < d; ++i) dz[i] = da[i] * gelu_grad(z[i]);
      add_outer(grad.mlp_w1[r], dz, trace.q);
      axpy(1.0, dz, grad.mlp_b1[r]);
      matvec_transposed(bank.mlp_w1[r], dz, dq);
    }
  } else {
    for (std::size_t r = 0; r < L; ++r) {
      const double p = trace.probs[r];
      for (std::size_t i = 0; i < d; ++i) {
        grad.w(r, i) += p * dqhat[i] * trace.q[i];
        grad.b(r, i) += p * dqhat[i];
        dq[i] += p * dqhat[i] * bank.w(r, i);
      }
    }
  }

  if (!bank.uniform_selector) {
    double mix = 0.0;
    for (std::size_t r = 0; r < L; ++r) mix += dp[r] * trace.probs[r];
    Vec dlogits(L);
    for (std::size_t r = 0; r < L; ++r) dlogits[r] = trace.probs[r] * (dp[r] - mix);
    Vec ds(d, 0.0);
    for (std::size_t r = 0; r < L; ++r) {
      axpy(dlogits[r], trace.sel_tanh, grad.u.row(r));
      axpy(dlogits[r], bank.u.row(r), ds);
    }
    Vec dpre(d);
    for (std::size_t i = 0; i < d; ++i)
      dpre[i] = ds[i] * (1.0 - trace.sel_tanh[i] * trace.sel_tanh[i]);
    add_outer(grad.w_sel, dpre, trace.q);
    matvec_transposed(bank.w_sel, dpre, dq);
  }
  return dq;
}

double executability_score(const PrototypeSet& protos, std::span<const double> qhat) {
  const std::size_t k = protos.centroids.rows;
  if (k == 0 || protos.tau <= 0.0)
    throw std::invalid_argument("prototype set needs K >= 1 and tau > 0");
  if (qhat.size() != protos.centroids.cols)
    throw std::invalid_argument("state dimension does not match the centroids");
  double s;
  if (protos.min_distance) {
    double best = squared_distance(qhat, protos.centroids.row(0));
    for (std::size_t j = 1; j < k; ++j)
      best = std::min(best, squared_distance(qhat, protos.centroids.row(j)));
    s = std::exp(-best / protos.tau);
  } else {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      sum += std::exp(-squared_distance(qhat, protos.centroids.row(j)) / protos.tau);
    s = sum / static_cast<double>(k);
  }
  return std::max(s, kScoreFloor);
}

double normalize_exec_score(const PrototypeSet& protos, double s_exec) {
  if (!protos.fitted) throw std::logic_error("prototype score statistics not fitted");
  if (!(s_exec > 0.0) || s_exec > 1.0)
    throw std::invalid_argument("executability score must lie in (0, 1]");
  return (std::log(s_exec) - protos.log_mean) / protos.log_std;
}

double fusion_probability(const FusionHead& head, std::span<const double> q,
                          std::span<const double> qhat, double s_norm) {
  if (head.w_hidden.cols != q.size() + qhat.size() + 1)
    throw std::invalid_argument("fusion head input dimension mismatch");
  Vec in(head.w_hidden.cols);
  std::copy(q.begin(), q.end(), in.begin());
  std::copy(qhat.begin(), qhat.end(), in.begin() + static_cast<std::ptrdiff_t>(q.size()));
  in.back() = s_norm;
  Vec z = head.b_hidden;
  matvec(head.w_hidden, in, z);
  double logit = head.b_out;
  for (std::size_t i = 0; i < z.size(); ++i) logit += head.w_out[i] * gelu(z[i]);
  return sigmoid_clamped(logit);
}

ForwardTrace forward(const ExeFuseModel& model, const EmbeddingTable& tab, const Fact& candidate) {
  if (!model.protos.fitted) throw std::logic_error("model incomplete: prototypes not fitted");
  const std::size_t d = model.cfg.d;

  ForwardTrace tr;
  tr.candidate = candidate;
  tr.enc = encode_traced(model.enc, tab, candidate);
  tr.ex = execute_traced(model.bank, tr.enc.q);

  const PrototypeSet& pr = model.protos;
  const std::size_t k = pr.centroids.rows;
  if (pr.min_distance) {
    double best = squared_distance(tr.ex.qhat, pr.centroids.row(0));
    tr.min_index = 0;
    for (std::size_t j = 1; j < k; ++j) {
      double d2 = squared_distance(tr.ex.qhat, pr.centroids.row(j));
      if (d2 < best) {
        best = d2;
        tr.min_index = j;
      }
    }
    tr.s_exec = std::max(std::exp(-best / pr.tau), kScoreFloor);
  } else {
    tr.kde_terms.resize(k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      tr.kde_terms[j] = std::exp(-squared_distance(tr.ex.qhat, pr.centroids.row(j)) / pr.tau);
      sum += tr.kde_terms[j];
    }
    tr.s_exec = std::max(sum / static_cast<double>(k), kScoreFloor);
  }
  tr.s_norm = normalize_exec_score(pr, tr.s_exec);

  tr.head_in.assign(2 * d + 1, 0.0);
  std::copy(tr.enc.q.begin(), tr.enc.q.end(), tr.head_in.begin());
  if (!model.zero_qhat_input)
    std::copy(tr.ex.qhat.begin(), tr.ex.qhat.end(),
              tr.head_in.begin() + static_cast<std::ptrdiff_t>(d));
  tr.head_in.back() = model.zero_exec_input ? 0.0 : tr.s_norm;

  tr.head_z = model.head.b_hidden;
  matvec(model.head.w_hidden, tr.head_in, tr.head_z);
  tr.head_a.resize(tr.head_z.size());
  for (std::size_t i = 0; i < tr.head_z.size(); ++i) tr.head_a[i] = gelu(tr.head_z[i]);
  tr.logit = model.head.b_out + dot(model.head.w_out, tr.head_a);
  tr.p = sigmoid_clamped(tr.logit);
  return tr;
}

Gradients make_gradients(const ExeFuseModel& model) {
  Gradients g;
  g.enc.w1 = Mat(model.enc.w1.rows, model.enc.w1.cols);
  g.enc.b1 = Vec(model.enc.b1.size(), 0.0);
  g.enc.w2 = Mat(model.enc.w2.rows, model.enc.w2.cols);
  g.enc.structure_aware = model.enc.structure_aware;

  const RuleBank& b = model.bank;
  g.bank.rules = b.rules;
  g.bank.d = b.d;
  g.bank.uniform_selector = b.uniform_selector;
  g.bank.mlp = b.mlp;
  if (b.mlp) {
    for (std::size_t r = 0; r < b.rules; ++r) {
      g.bank.mlp_w1.emplace_back(b.d, b.d);
      g.bank.mlp_b1.emplace_back(b.d, 0.0);
      g.bank.mlp_w2.emplace_back(b.d, b.d);
      g.bank.mlp_b2.emplace_back(b.d, 0.0);
    }
  } else {
    g.bank.w = Mat(b.rules, b.d);
    g.bank.b = Mat(b.rules, b.d);
  }
  g.bank.w_sel = Mat(b.w_sel.rows, b.w_sel.cols);
  g.bank.u = Mat(b.u.rows, b.u.cols);

  g.head.w_hidden = Mat(model.head.w_hidden.rows, model.head.w_hidden.cols);
  g.head.b_hidden = Vec(model.head.b_hidden.size(), 0.0);
  g.head.w_out = Vec(model.head.w_out.size(), 0.0);
  g.head.b_out = 0.0;
  return g;
}

void clear_gradients(Gradients& g) {
  g.enc.w1.fill(0.0);
  g.enc.b1.assign(g.enc.b1.size(), 0.0);
  g.enc.w2.fill(0.0);
  if (g.bank.mlp) {
    for (std::size_t r = 0; r < g.bank.rules; ++r) {
      g.bank.mlp_w1[r].fill(0.0);
      g.bank.mlp_b1[r].assign(g.bank.mlp_b1[r].size(), 0.0);
      g.bank.mlp_w2[r].fill(0.0);
      g.bank.mlp_b2[r].assign(g.bank.mlp_b2[r].size(), 0.0);
    }
  } else {
    g.bank.w.fill(0.0);
    g.bank.b.fill(0.0);
  }
  g.bank.w_sel.fill(0.0);
  g.bank.u.fill(0.0);
  g.head.w_hidden.fill(0.0);
  g.head.b_hidden.assign(g.head.b_hidden.size(), 0.0);
  g.head.w_out.assign(g.head.w_out.size(), 0.0);
  g.head.b_out = 0.0;
}

void backward(const ExeFuseModel& model, const EmbeddingTable& tab, const ForwardTrace& trace,
              double dl_dp, std::span<const double> dl_dqhat_ext, Gradients& grad) {
  const std::size_t d = model.cfg.d;
  if (trace.enc.q.size() != d || trace.ex.probs.size() != model.bank.rules ||
      trace.head_in.size() != 2 * d + 1 || trace.enc.x.size() != 3 * tab.d_emb)
    throw std::invalid_argument("trace does not match this model");
  if (!dl_dqhat_ext.empty() && dl_dqhat_ext.size() != d)
    throw std::invalid_argument("external state gradient has wrong dimension");

  const double dlogit = dl_dp * trace.p * (1.0 - trace.p);

  axpy(dlogit, trace.head_a, grad.head.w_out);
  grad.head.b_out += dlogit;
  Vec dhz(trace.head_z.size());
  for (std::size_t i = 0; i < dhz.size(); ++i)
    dhz[i] = dlogit * model.head.w_out[i] * gelu_grad(trace.head_z[i]);
  add_outer(grad.head.w_hidden, dhz, trace.head_in);
  axpy(1.0, dhz, grad.head.b_hidden);
  Vec dhead_in(trace.head_in.size(), 0.0);
  matvec_transposed(model.head.w_hidden, dhz, dhead_in);

  std::span<const double> dq_head(dhead_in.data(), d);
  Vec dqhat(d, 0.0);
  if (!model.zero_qhat_input)
    std::copy(dhead_in.begin() + static_cast<std::ptrdiff_t>(d),
              dhead_in.begin() + static_cast<std::ptrdiff_t>(2 * d), dqhat.begin());
  const double ds_norm = model.zero_exec_input ? 0.0 : dhead_in.back();

  if (ds_norm != 0.0) {
    const PrototypeSet& pr = model.protos;
    const double ds_exec = ds_norm / (trace.s_exec * pr.log_std);
    if (pr.min_distance) {
      auto c = pr.centroids.row(trace.min_index);
      const double coeff = ds_exec * trace.s_exec * (-2.0 / pr.tau);
      for (std::size_t i = 0; i < d; ++i) dqhat[i] += coeff * (trace.ex.qhat[i] - c[i]);
    } else {
      const double scale = ds_exec * (-2.0 / (pr.tau * static_cast<double>(pr.centroids.rows)));
      for (std::size_t j = 0; j < pr.centroids.rows; ++j) {
        auto c = pr.centroids.row(j);
        const double coeff = scale * trace.kde_terms[j];
        for (std::size_t i = 0; i < d; ++i) dqhat[i] += coeff * (trace.ex.qhat[i] - c[i]);
      }
    }
  }
  if (!dl_dqhat_ext.empty()) axpy(1.0, dl_dqhat_ext, dqhat);

  Vec dq = execute_backward(model.bank, trace.ex, dqhat, grad.bank);
  axpy(1.0, dq_head, dq);
  encode_backward(model.enc, trace.enc, dq, grad.enc);
}

namespace {

void collect_views(EncoderParams& enc, RuleBank& bank, FusionHead& head,
                   std::vector<std::span<double>>& out) {
  out.emplace_back(enc.w1.data);
  out.emplace_back(enc.b1);
  out.emplace_back(enc.w2.data);
  if (bank.mlp) {
    for (std::size_t r = 0; r < bank.rules; ++r) {
      out.emplace_back(bank.mlp_w1[r].data);
      out.emplace_back(bank.mlp_b1[r]);
      out.emplace_back(bank.mlp_w2[r].data);
      out.emplace_back(bank.mlp_b2[r]);
    }
  } else {
    out.emplace_back(bank.w.data);
    out.emplace_back(bank.b.data);
  }
  out.emplace_back(bank.w_sel.data);
  out.emplace_back(bank.u.data);
  out.emplace_back(head.w_hidden.data);
  out.emplace_back(head.b_hidden);
  out.emplace_back(head.w_out);
  out.emplace_back(std::span<double>(&head.b_out, 1));
}

std::vector<std::span<double>> trainable_views(ExeFuseModel& m) {
  std::vector<std::span<double>> v;
  collect_views(m.enc, m.bank, m.head, v);
  return v;
}

std::vector<std::span<double>> gradient_views(Gradients& g) {
  std::vector<std::span<double>> v;
  collect_views(g.enc, g.bank, g.head, v);
  return v;
}

}  // namespace

std::size_t trainable_parameter_count(const ExeFuseModel& model) {
  std::size_t n = 0;
  for (auto s : trainable_views(const_cast<ExeFuseModel&>(model))) n += s.size();
  return n;
}

void copy_trainable(const ExeFuseModel& model, std::span<double> out) {
  std::size_t pos = 0;
  for (auto s : trainable_views(const_cast<ExeFuseModel&>(model))) {
    if (pos + s.size() > out.size()) throw std::invalid_argument("parameter buffer too small");
    std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(pos));
    pos += s.size();
  }
  if (pos != out.size()) throw std::invalid_argument("parameter buffer size mismatch");
}

void load_trainable(ExeFuseModel& model, std::span<const double> in) {
  std::size_t pos = 0;
  for (auto s : trainable_views(model)) {
    if (pos + s.size() > in.size()) throw std::invalid_argument("parameter buffer too small");
    std::copy(in.begin() + static_cast<std::ptrdiff_t>(pos),
              in.begin() + static_cast<std::ptrdiff_t>(pos + s.size()), s.begin());
    pos += s.size();
  }
  if (pos != in.size()) throw std::invalid_argument("parameter buffer size mismatch");
}

void flatten_gradients(const ExeFuseModel& model, const Gradients& grad, std::span<double> out) {
  (void)model;
  std::size_t pos = 0;
  for (auto s : gradient_views(const_cast<Gradients&>(grad))) {
    if (pos + s.size() > out.size()) throw std::invalid_argument("gradient buffer too small");
    std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(pos));
    pos += s.size();
  }
  if (pos != out.size()) throw std::invalid_argument("gradient buffer size mismatch");
}

namespace {

std::string fmt_double_exact(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("double formatting failed");
  return std::string(buf, end);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void append_mat(std::string& out, const Mat& m) {
  out.append(reinterpret_cast<const char*>(m.data.data()), m.data.size() * sizeof(double));
}

void append_vec(std::string& out, const Vec& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

void append_blocks(std::string& out, const ExeFuseModel& m) {
  auto enc = [&](const EncoderParams& e) {
    append_mat(out, e.w1);
    append_vec(out, e.b1);
    append_mat(out, e.w2);
  };
  enc(m.enc);
  enc(m.enc_dkg);
  if (m.bank.mlp) {
    for (std::size_t r = 0; r < m.bank.rules; ++r) {
      append_mat(out, m.bank.mlp_w1[r]);
      append_vec(out, m.bank.mlp_b1[r]);
      append_mat(out, m.bank.mlp_w2[r]);
      append_vec(out, m.bank.mlp_b2[r]);
    }
  } else {
    append_mat(out, m.bank.w);
    append_mat(out, m.bank.b);
  }
  append_mat(out, m.bank.w_sel);
  append_mat(out, m.bank.u);
  append_mat(out, m.head.w_hidden);
  append_vec(out, m.head.b_hidden);
  append_vec(out, m.head.w_out);
  out.append(reinterpret_cast<const char*>(&m.head.b_out), sizeof(double));
  append_mat(out, m.protos.centroids);
}

}  // namespace

void save_model(const std::filesystem::path& path, const ExeFuseModel& model) {
  std::ostringstream header;
  header << "EXEFUSE-MODEL 1\n"
         << "d " << model.cfg.d << '\n'
         << "d_emb " << model.d_emb << '\n'
         << "rules " << model.cfg.rules << '\n'
         << "k " << model.cfg.k << '\n'
         << "hidden " << model.cfg.hidden << '\n'
         << "variant " << variant_name(model.cfg.variant) << '\n'
         << "structure_aware " << (model.enc.structure_aware ? 1 : 0) << '\n'
         << "uniform_selector " << (model.bank.uniform_selector ? 1 : 0) << '\n'
         << "mlp_rules " << (model.bank.mlp ? 1 : 0) << '\n'
         << "min_distance " << (model.protos.min_distance ? 1 : 0) << '\n'
         << "zero_qhat " << (model.zero_qhat_input ? 1 : 0) << '\n'
         << "zero_exec " << (model.zero_exec_input ? 1 : 0) << '\n'
         << "tau " << fmt_double_exact(model.protos.tau) << '\n'
         << "fitted " << (model.protos.fitted ? 1 : 0) << '\n'
         << "log_mean " << fmt_double_exact(model.protos.log_mean) << '\n'
         << "log_std " << fmt_double_exact(model.protos.log_std) << '\n'
         << "collapsed " << (model.protos.collapsed ? 1 : 0) << '\n';
  std::string head_text = header.str();
  std::string blob = head_text;
  {
    std::ostringstream h;
    h << "config_hash " << std::hex << fnv1a(head_text) << '\n';
    blob += h.str();
  }
  append_blocks(blob, model);
  write_file_atomic(path, blob);
}

ExeFuseModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto fail = [&](const std::string& why) {
    throw std::runtime_error(path.string() + ": " + why);
  };

  std::string magic;
  if (!std::getline(in, magic) || magic != "EXEFUSE-MODEL 1") fail("bad magic line");

  std::string head_text = magic + "\n";
  auto read_field = [&](const char* name) -> std::string {
    std::string line;
    if (!std::getline(in, line)) fail("truncated header");
    head_text += line + "\n";
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key >> value) || key != name)
      fail(std::string("expected header field '") + name + "'");
    return value;
  };
  auto read_size = [&](const char* name) { return std::stoull(read_field(name)); };
  auto read_flag = [&](const char* name) { return read_field(name) == "1"; };
  auto read_double = [&](const char* name) { return std::stod(read_field(name)); };

  ModelConfig cfg;
  cfg.d = read_size("d");
  const std::size_t d_emb = read_size("d_emb");
  cfg.rules = read_size("rules");
  cfg.k = read_size("k");
  cfg.hidden = read_size("hidden");
  cfg.variant = parse_variant(read_field("variant"));

  const bool structure_aware = read_flag("structure_aware");
  const bool uniform_sel = read_flag("uniform_selector");
  const bool mlp = read_flag("mlp_rules");
  const bool min_dist = read_flag("min_distance");
  const bool zero_qhat = read_flag("zero_qhat");
  const bool zero_exec = read_flag("zero_exec");
  cfg.tau = read_double("tau");
  const bool fitted = read_flag("fitted");
  const double log_mean = read_double("log_mean");
  const double log_std = read_double("log_std");
  const bool collapsed = read_flag("collapsed");

  {
    std::string line;
    if (!std::getline(in, line)) fail("truncated header");
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key >> value) || key != "config_hash") fail("expected config_hash");
    std::ostringstream expect;
    expect << std::hex << fnv1a(head_text);
    if (value != expect.str()) fail("config hash mismatch");
  }

  ExeFuseModel m = make_model(cfg, d_emb, 0);
  m.enc.structure_aware = structure_aware;
  m.enc_dkg.structure_aware = structure_aware;
  m.bank.uniform_selector = uniform_sel;
  m.bank.mlp = mlp;  // make_model already shaped the bank from cfg.variant
  m.protos.min_distance = min_dist;
  m.zero_qhat_input = zero_qhat;
  m.zero_exec_input = zero_exec;
  m.protos.tau = cfg.tau;
  m.protos.fitted = fitted;
  m.protos.log_mean = log_mean;
  m.protos.log_std = log_std;
  m.protos.collapsed = collapsed;

  auto read_mat = [&](Mat& mat) {
    in.read(reinterpret_cast<char*>(mat.data.data()),
            static_cast<std::streamsize>(mat.data.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(mat.data.size() * sizeof(double)))
      fail("truncated payload");
  };
  auto read_vec = [&](Vec& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(double)))
      fail("truncated payload");
  };
  auto read_enc = [&](EncoderParams& e) {
    read_mat(e.w1);
    read_vec(e.b1);
    read_mat(e.w2);
  };
  read_enc(m.enc);
  read_enc(m.enc_dkg);
  if (m.bank.mlp) {
    for (std::size_t r = 0; r < m.bank.rules; ++r) {
      read_mat(m.bank.mlp_w1[r]);
      read_vec(m.bank.mlp_b1[r]);
      read_mat(m.bank.mlp_w2[r]);
      read_vec(m.bank.mlp_b2[r]);
    }
  } else {
    read_mat(m.bank.w);
    read_mat(m.bank.b);
  }
  read_mat(m.bank.w_sel);
  read_mat(m.bank.u);
  read_mat(m.head.w_hidden);
  read_vec(m.head.b_hidden);
  read_vec(m.head.w_out);
  in.read(reinterpret_cast<char*>(&m.head.b_out), sizeof(double));
  if (in.gcount() != sizeof(double)) fail("truncated payload");
  read_mat(m.protos.centroids);
  if (in.peek() != std::char_traits<char>::eof()) fail("trailing bytes after payload");
  return m;
}

}  // namespace exefuse
