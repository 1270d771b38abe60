#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "least/ops.hpp"
#include "least/rng.hpp"
#include "least/tensor.hpp"

namespace least {

enum class PrototypeMode { kPerSample, kBatchLevel };

struct ModelConfig {
  int64_t lead_count = 12;
  int64_t input_len = 1000;
  int64_t embed_dim = 256;
  int64_t patch_count = 125;
  int64_t encoder_blocks = 12;
  int64_t decoder_blocks = 8;
  int64_t decoder_dim = 192;
  int64_t heads_attn = 8;
  int64_t filter_heads = 8;
  double mask_ratio = 0.75;
  int64_t proto_dim = 128;
  int64_t ffn_ratio = 4;
  std::vector<std::pair<int, int>> pairing;  // filled from default_pairing when empty
  PrototypeMode prototype_mode = PrototypeMode::kPerSample;
  bool tff_enabled = true;
  bool mgpr_enabled = true;
  bool per_block_projections = false;

  int64_t patch_span() const { return input_len / patch_count; }
  void validate() const;

  static ModelConfig paper_default();
  static ModelConfig tiny();       // desk-scale training preset
  static ModelConfig miniature();  // gradient-check scale
};

struct MaskIndices {
  std::vector<int64_t> masked;
  std::vector<int64_t> visible;  // both sorted ascending
};

// round(ratio*n) masked indices, deterministic in seed. Mix the base seed with
// the sample index for per-sample masks.
MaskIndices random_mask(int64_t n, double ratio, uint64_t seed);

std::vector<std::pair<int, int>> default_pairing(int enc_blocks, int dec_blocks);

struct NormParams {
  Tensor g, b;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

// Learnable frequency filters: wq [1 x C] maps the channel axis of Re(Z) to a
// per-bin query row; k_re/k_im [H x patch_count] hold one complex filter per
// head at full-length resolution (nearest-bin lookup for shorter transforms).
struct FilterParams {
  Tensor wq;
  Tensor k_re, k_im;
};

struct AttnBlockParams {
  NormParams ln1;
  AttentionParams attn;
  NormParams ln2;
  FfnParams ffn;
};

struct TffBlockParams {
  AttnBlockParams base;
  FilterParams filter;
  Tensor fuse_raw;  // sigmoid(fuse_raw) = fusion weight
};

struct ConvStage {
  Tensor w, b;        // kernel 5, stride 2
  Tensor sc_w, sc_b;  // kernel 1 shortcut, stride 2
};

struct EmbedParams {
  std::vector<ConvStage> stages;
  Tensor stem_w, stem_b;  // used instead of stages when patch_span == 1
  NormParams norm;
  Tensor pos;  // [patch_count x embed_dim]
};

struct DecoderParams {
  Tensor proj_w, proj_b;  // embed_dim -> decoder_dim
  Tensor mask_token;      // [decoder_dim]
  Tensor pos;             // [patch_count x decoder_dim]
  std::vector<AttnBlockParams> blocks;
  Tensor head_w, head_b;  // decoder_dim -> lead_count * patch_span
};

class LeastModel {
public:
  LeastModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  Tensor param(const std::string& name) const;

  EmbedParams embed;
  std::vector<TffBlockParams> encoder;
  DecoderParams decoder;
  std::vector<Tensor> proj_enc;  // one shared entry, or one per pairing entry
  std::vector<Tensor> proj_dec;

private:
  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;

  Tensor add_param(const std::string& name, Shape shape, Rng& rng, const std::string& init);
};

// Token layout: samples stacked along rows, [B*tokens x dim]; linear algebra
// runs batched while attention scores and spectral filtering stay per sample.

// x [B x L x T] -> [B*patch_count x C] with positional embedding added.
Tensor patch_embed(const LeastModel& m, const Tensor& x);

// z [tokens x C] for one sample; DFT over the token axis, per-head complex
// modulation, inverse DFT. query_override substitutes the per-bin query row.
Tensor tff_frequency_branch(const Tensor& z, const FilterParams& f, int64_t filter_heads,
                            const Tensor* query_override = nullptr);

struct TffIntermediates {
  Tensor z_hat;   // frequency branch output (pre fusion), stacked
  Tensor z_t;     // temporal branch output, stacked
  Tensor fused;   // w*z_hat + (1-w)*z_t
  Tensor output;  // block output after residual + FFN
};

Tensor attn_block_forward(const Tensor& tokens, int64_t batch, const AttnBlockParams& p,
                          int64_t heads);

Tensor tff_block_forward(const Tensor& tokens, int64_t batch, const TffBlockParams& p,
                         int64_t heads, int64_t filter_heads, TffIntermediates* inter = nullptr,
                         const double* fuse_override = nullptr,
                         const Tensor* query_override = nullptr);

struct EncoderOut {
  Tensor tokens;                  // [B*n_tok x C]
  std::vector<Tensor> per_block;  // encoder_blocks entries, same shape
};

EncoderOut encoder_forward(const LeastModel& m, const Tensor& tokens, int64_t batch);

struct DecoderOut {
  Tensor recon;                   // [B*patch_count x L*p]
  std::vector<Tensor> per_block;  // decoder_blocks entries [B*patch_count x dec_dim]
  Tensor assembled;               // decoder input before positional add
};

// visible_tokens [B*n_vis x C]; masks holds one MaskIndices per sample.
DecoderOut decoder_forward(const LeastModel& m, const Tensor& visible_tokens,
                           const std::vector<MaskIndices>& masks, int64_t batch);

// Stacked activations of one block -> prototypes; per_sample yields B
// vectors, batch_level a single one.
std::vector<Tensor> compute_prototypes(const Tensor& block_tokens, int64_t batch,
                                       int64_t tokens_per_sample, PrototypeMode mode);

// proto [dim] through a bias-free linear map w [dim x proto_dim].
Tensor project_prototype(const Tensor& proto, const Tensor& w);

Tensor loss_multi_from_pairs(const std::vector<std::pair<Tensor, Tensor>>& pairs);

// x [B x L x T] -> patch-reshaped targets [B*n x L*p], constant (no grad).
Tensor patch_targets(const Tensor& x, int64_t patch_count);

Tensor loss_ssl(const Tensor& recon, const Tensor& target, const std::vector<MaskIndices>& masks,
                int64_t patch_count);

Tensor loss_total(const Tensor& l_ssl, const Tensor& l_multi, bool mgpr_enabled);

struct PretrainLosses {
  Tensor total, ssl, multi;  // multi undefined when mgpr disabled
};

// Full pretraining forward pass: embed, mask, encode visibles, decode,
// reconstruction + prototype losses. Masks are deterministic per
// (mask_seed, sample_index_base + i).
PretrainLosses pretrain_forward(const LeastModel& m, const Tensor& x, uint64_t mask_seed,
                                uint64_t sample_index_base);

// Encoder over all patches, no masking (fine-tuning path). Returns final
// tokens [B*n x C].
Tensor encode_all(const LeastModel& m, const Tensor& x);

// Gradient of the target logit wrt the patch-embedding activations,
// channel-averaged, ReLU-clipped, upsampled to T, min-max scaled.
Tensor attribution_map(const LeastModel& m, const Tensor& head_w, const Tensor& head_b,
                       const Tensor& x_single, int64_t target_index);

void save_checkpoint(const LeastModel& m, const std::string& stem);
LeastModel load_checkpoint(const std::string& stem);

}  // namespace least
