#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "exefuse/embedding.hpp"
#include "exefuse/kg.hpp"
#include "exefuse/numkit.hpp"

namespace exefuse {

enum class Variant {
  full,
  single_affine,           // one rule, selector degenerate
  direct_classification,   // head sees [q; 0; 0]
  no_structure_encoder,    // encoder input [e_h; e_t; e_r] without interactions
  uniform_selector,        // rule distribution fixed at 1/|L|
  no_exec_score,           // density score input zeroed
  mlp_rules,               // per-rule two-layer maps instead of affine
  min_distance,            // density replaced by nearest-centroid kernel
};
const char* variant_name(Variant v);
Variant parse_variant(std::string_view name);

enum class EncoderRole { source, domain };

/// Triple encoder: q = W2 GeLU(W1 x + b1) with x the interaction
/// concatenation [(e_h o e_r); (e_t o e_r); e_r] (o = elementwise product).
struct EncoderParams {
  Mat w1;  // d x 3*d_emb
  Vec b1;  // d
  Mat w2;  // d x d
  bool structure_aware = true;  // false: x = [e_h; e_t; e_r]
  EncoderRole role = EncoderRole::source;

  std::size_t dim() const { return w2.rows; }
};

/// Latent rule set: per rule an elementwise affine map w_R o q + b_R
/// (or a small two-layer map in the mlp variant) plus an attention
/// selector softmax_R(u_R . tanh(W_sel q)).
struct RuleBank {
  std::size_t rules = 0;
  std::size_t d = 0;
  bool uniform_selector = false;
  bool mlp = false;
  Mat w, b;                       // rules x d each; unused when mlp
  std::vector<Mat> mlp_w1, mlp_w2;  // per rule d x d; unused unless mlp
  std::vector<Vec> mlp_b1, mlp_b2;  // per rule d
  Mat w_sel;  // d x d
  Mat u;      // rules x d
};

/// K-Means centroids of encoded domain facts plus the kernel temperature
/// and the frozen log-score statistics used to standardize the density.
struct PrototypeSet {
  Mat centroids;  // K x d
  double tau = 1.0;
  double log_mean = 0.0;
  double log_std = 1.0;
  bool fitted = false;        // log-score stats available
  bool min_distance = false;  // nearest-centroid kernel instead of the mean
  bool collapsed = false;     // all centroids identical (diagnostic only)
};

/// Two-layer scorer over [q; q_hat; s_norm] ending in a sigmoid.
struct FusionHead {
  Mat w_hidden;  // h x (2d+1)
  Vec b_hidden;  // h
  Vec w_out;     // h
  double b_out = 0.0;
};

struct ModelConfig {
  std::size_t d = 64;
  std::size_t rules = 16;
  std::size_t k = 64;
  double tau = 1.0;
  std::size_t hidden = 64;
  Variant variant = Variant::full;
};

struct ExeFuseModel {
  ModelConfig cfg;
  std::size_t d_emb = 0;
  EncoderParams enc;      // trainable source encoder
  EncoderParams enc_dkg;  // domain encoder, frozen during joint training
  RuleBank bank;
  PrototypeSet protos;
  FusionHead head;
  bool zero_qhat_input = false;  // direct_classification
  bool zero_exec_input = false;  // direct_classification, no_exec_score
};

/// Xavier-initialized model (biases zero); the domain encoder starts as a
/// copy of the source encoder. The variant fixes the structural flags.
ExeFuseModel make_model(const ModelConfig& cfg, std::size_t d_emb, std::uint64_t seed);

struct EncodeTrace {
  Vec x;   // 3*d_emb concatenated input
  Vec z1;  // pre-activation
  Vec a1;  // GeLU(z1)
  Vec q;
};

Vec encode(const EncoderParams& params, const EmbeddingTable& tab, const Fact& f);
EncodeTrace encode_traced(const EncoderParams& params, const EmbeddingTable& tab, const Fact& f);
/// Accumulates dL/d{w1,b1,w2} given dL/dq; embedding gradients are dropped.
void encode_backward(const EncoderParams& params, const EncodeTrace& trace,
                     std::span<const double> dq, EncoderParams& grad);

Vec apply_rule(const RuleBank& bank, std::size_t rule, std::span<const double> q);
Vec select_rules(const RuleBank& bank, std::span<const double> q);
Vec execute(const RuleBank& bank, std::span<const double> q);

struct ExecuteTrace {
  Vec q;
  Vec sel_pre, sel_tanh;  // empty under the uniform selector
  Vec logits;
  Vec probs;
  Mat rule_out;           // rules x d
  Mat mlp_z1, mlp_a1;     // rules x d, mlp variant only
  Vec qhat;
};

ExecuteTrace execute_traced(const RuleBank& bank, std::span<const double> q);
/// Accumulates rule and selector gradients given dL/dqhat; returns dL/dq.
Vec execute_backward(const RuleBank& bank, const ExecuteTrace& trace,
                     std::span<const double> dqhat, RuleBank& grad);

double executability_score(const PrototypeSet& protos, std::span<const double> qhat);
double normalize_exec_score(const PrototypeSet& protos, double s_exec);
double fusion_probability(const FusionHead& head, std::span<const double> q,
                          std::span<const double> qhat, double s_norm);

struct ForwardTrace {
  Fact candidate{};
  EncodeTrace enc;        // enc.q is the source encoding
  ExecuteTrace ex;        // ex.qhat is the executed state
  Vec kde_terms;          // per-centroid kernel values (mean-kernel variant)
  std::size_t min_index = 0;  // nearest centroid (min_distance variant)
  double s_exec = 1.0;
  double s_norm = 0.0;
  Vec head_in;            // [q; qhat; s_norm] after variant zeroing
  Vec head_z, head_a;
  double logit = 0.0;
  double p = 0.5;
};

/// Full scoring pass; requires fitted prototypes.
ForwardTrace forward(const ExeFuseModel& model, const EmbeddingTable& tab, const Fact& candidate);

/// Gradient record shaped like the trainable blocks (domain encoder and
/// embeddings are frozen and carry no gradients).
struct Gradients {
  EncoderParams enc;
  RuleBank bank;
  FusionHead head;
};

Gradients make_gradients(const ExeFuseModel& model);
void clear_gradients(Gradients& g);

/// Accumulates dL into `grad` given upstream dL/dp and an optional external
/// dL/dqhat (the consistency-loss contribution entering below the head).
void backward(const ExeFuseModel& model, const EmbeddingTable& tab, const ForwardTrace& trace,
              double dl_dp, std::span<const double> dl_dqhat_ext, Gradients& grad);

/// Flat views over the trainable blocks, in one fixed documented order:
/// enc(w1,b1,w2), bank rules (affine w,b or per-rule mlp w1,b1,w2,b2),
/// selector (w_sel,u), head (w_hidden,b_hidden,w_out,b_out).
std::size_t trainable_parameter_count(const ExeFuseModel& model);
void copy_trainable(const ExeFuseModel& model, std::span<double> out);
void load_trainable(ExeFuseModel& model, std::span<const double> in);
void flatten_gradients(const ExeFuseModel& model, const Gradients& grad, std::span<double> out);

/// Checkpoint: text header (config, flags, prototype stats, config hash)
/// followed by every parameter block as row-major little-endian doubles.
void save_model(const std::filesystem::path& path, const ExeFuseModel& model);
ExeFuseModel load_model(const std::filesystem::path& path);

}  // namespace exefuse
