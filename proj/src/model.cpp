#include "least/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "least/error.hpp"

namespace least {

namespace {

using nlohmann::json;

int downsample_stages(int64_t span) {
  int stages = 0;
  for (int64_t q = span; q > 1; q >>= 1) ++stages;
  return stages;
}

bool power_of_two(int64_t v) { return v >= 1 && (v & (v - 1)) == 0; }

}  // namespace

void ModelConfig::validate() const {
  auto bad = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (lead_count < 1) bad("lead_count must be >= 1");
  if (input_len < 1 || patch_count < 1) bad("input_len and patch_count must be >= 1");
  if (input_len % patch_count != 0) {
    bad("input_len " + std::to_string(input_len) + " not divisible by patch_count " +
        std::to_string(patch_count));
  }
  const int64_t span = patch_span();
  if (!power_of_two(span)) bad("patch span " + std::to_string(span) + " must be a power of two");
  if (embed_dim < 1 || decoder_dim < 1) bad("embed_dim and decoder_dim must be >= 1");
  if (heads_attn < 1) bad("heads_attn must be >= 1");
  if (embed_dim % heads_attn != 0) bad("embed_dim not divisible by heads_attn");
  if (decoder_dim % heads_attn != 0) bad("decoder_dim not divisible by heads_attn");
  const int stages = downsample_stages(span);
  if (stages > 0 && embed_dim % (int64_t{1} << (stages - 1)) != 0) {
    bad("embed_dim must be divisible by 2^" + std::to_string(stages - 1) +
        " for the convolution stage widths");
  }
  if (filter_heads < 1) bad("filter_heads must be >= 1");
  if (proto_dim < 1) bad("proto_dim must be >= 1");
  if (ffn_ratio < 1) bad("ffn_ratio must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) bad("mask_ratio must lie in [0, 1)");
  if (encoder_blocks < 1 || decoder_blocks < 1) bad("block counts must be >= 1");
  if (mgpr_enabled && pairing.empty()) bad("mgpr enabled but pairing is empty");
  if (mgpr_enabled && static_cast<int64_t>(pairing.size()) != decoder_blocks) {
    bad("pairing must cover every decoder block (" + std::to_string(pairing.size()) + " vs " +
        std::to_string(decoder_blocks) + ")");
  }
  for (size_t k = 0; k < pairing.size(); ++k) {
    const auto [e, d] = pairing[k];
    if (e < 0 || e >= encoder_blocks || d < 0 || d >= decoder_blocks) {
      bad("pairing entry (" + std::to_string(e) + ", " + std::to_string(d) + ") out of range");
    }
    if (k > 0 && (e <= pairing[k - 1].first || d <= pairing[k - 1].second)) {
      bad("pairing must be strictly increasing in both coordinates");
    }
  }
}

ModelConfig ModelConfig::paper_default() {
  ModelConfig cfg;
  cfg.pairing = default_pairing(12, 8);
  return cfg;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.embed_dim = 64;
  cfg.encoder_blocks = 4;
  cfg.decoder_blocks = 2;
  cfg.decoder_dim = 64;
  cfg.heads_attn = 4;
  cfg.filter_heads = 4;
  cfg.proto_dim = 32;
  cfg.ffn_ratio = 2;
  cfg.pairing = default_pairing(4, 2);
  return cfg;
}

ModelConfig ModelConfig::miniature() {
  ModelConfig cfg;
  cfg.lead_count = 2;
  cfg.input_len = 32;
  cfg.embed_dim = 8;
  cfg.patch_count = 8;
  cfg.encoder_blocks = 2;
  cfg.decoder_blocks = 1;
  cfg.decoder_dim = 8;
  cfg.heads_attn = 2;
  cfg.filter_heads = 2;
  cfg.mask_ratio = 0.5;
  cfg.proto_dim = 4;
  cfg.ffn_ratio = 2;
  cfg.pairing = default_pairing(2, 1);
  return cfg;
}

MaskIndices random_mask(int64_t n, double ratio, uint64_t seed) {
  if (n < 1) throw ConfigError("random_mask: n must be >= 1");
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("random_mask: ratio must lie in [0, 1)");
  const int64_t count = llround(ratio * static_cast<double>(n));
  if (n - count < 1) throw ConfigError("random_mask: no visible patches left");
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  MaskIndices out;
  out.masked.assign(perm.begin(), perm.begin() + count);
  out.visible.assign(perm.begin() + count, perm.end());
  std::sort(out.masked.begin(), out.masked.end());
  std::sort(out.visible.begin(), out.visible.end());
  return out;
}

std::vector<std::pair<int, int>> default_pairing(int enc_blocks, int dec_blocks) {
  if (enc_blocks < 1 || dec_blocks < 1) throw ConfigError("default_pairing: block counts >= 1");
  if (dec_blocks > enc_blocks) {
    throw ConfigError("default_pairing: decoder deeper than encoder (" +
                      std::to_string(dec_blocks) + " > " + std::to_string(enc_blocks) + ")");
  }
  std::vector<int> enc_idx;
  if (enc_blocks == 12 && dec_blocks == 8) {
    enc_idx = {0, 2, 3, 5, 7, 8, 10, 11};
  } else if (dec_blocks == 1) {
    enc_idx = {enc_blocks - 1};
  } else {
    for (int k = 0; k < dec_blocks; ++k) {
      int e = static_cast<int>(
          llround(static_cast<double>(k) * (enc_blocks - 1) / (dec_blocks - 1)));
      if (!enc_idx.empty() && e <= enc_idx.back()) e = enc_idx.back() + 1;
      enc_idx.push_back(e);
    }
  }
  std::vector<std::pair<int, int>> pairs;
  for (int k = 0; k < dec_blocks; ++k) pairs.emplace_back(enc_idx[static_cast<size_t>(k)], k);
  return pairs;
}

Tensor LeastModel::add_param(const std::string& name, Shape shape, Rng& rng,
                             const std::string& init) {
  Tensor t = Tensor::zeros(shape, true);
  double* d = t.raw_data().data();
  const int64_t total = shape_numel(shape);
  if (init == "ones") {
    std::fill(d, d + total, 1.0);
  } else if (init != "zeros") {
    const double sd = std::stod(init);
    for (int64_t i = 0; i < total; ++i) d[i] = rng.normal() * sd;
  }
  params_.emplace_back(name, t);
  return t;
}

LeastModel::LeastModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.pairing.empty() && cfg_.mgpr_enabled) {
    cfg_.pairing = default_pairing(static_cast<int>(cfg_.encoder_blocks),
                                   static_cast<int>(cfg_.decoder_blocks));
  }
  cfg_.validate();
  Rng rng(seed);
  const int64_t L = cfg_.lead_count;
  const int64_t C = cfg_.embed_dim;
  const int64_t D = cfg_.decoder_dim;
  const int64_t n = cfg_.patch_count;
  const int64_t span = cfg_.patch_span();
  const int stages = downsample_stages(span);

  auto he = [](int64_t fan_in) { return std::to_string(std::sqrt(2.0 / fan_in)); };
  auto xavier = [](int64_t fan_in, int64_t fan_out) {
    return std::to_string(std::sqrt(2.0 / (fan_in + fan_out)));
  };

  if (stages == 0) {
    embed.stem_w = add_param("embed.stem.w", {C, L, 5}, rng, he(L * 5));
    embed.stem_b = add_param("embed.stem.b", {C}, rng, "zeros");
  } else {
    int64_t cin = L;
    for (int s = 0; s < stages; ++s) {
      const int64_t cout = C >> (stages - 1 - s);
      const std::string pre = "embed.stage" + std::to_string(s) + ".";
      ConvStage st;
      st.w = add_param(pre + "w", {cout, cin, 5}, rng, he(cin * 5));
      st.b = add_param(pre + "b", {cout}, rng, "zeros");
      st.sc_w = add_param(pre + "sc_w", {cout, cin, 1}, rng, he(cin));
      st.sc_b = add_param(pre + "sc_b", {cout}, rng, "zeros");
      embed.stages.push_back(st);
      cin = cout;
    }
  }
  embed.norm.g = add_param("embed.norm.g", {C}, rng, "ones");
  embed.norm.b = add_param("embed.norm.b", {C}, rng, "zeros");
  embed.pos = add_param("embed.pos", {n, C}, rng, "0.02");

  auto add_attn = [&](const std::string& pre, int64_t dim) {
    AttentionParams a;
    a.wq = add_param(pre + "attn.wq", {dim, dim}, rng, xavier(dim, dim));
    a.bq = add_param(pre + "attn.bq", {dim}, rng, "zeros");
    a.wk = add_param(pre + "attn.wk", {dim, dim}, rng, xavier(dim, dim));
    a.bk = add_param(pre + "attn.bk", {dim}, rng, "zeros");
    a.wv = add_param(pre + "attn.wv", {dim, dim}, rng, xavier(dim, dim));
    a.bv = add_param(pre + "attn.bv", {dim}, rng, "zeros");
    a.wo = add_param(pre + "attn.wo", {dim, dim}, rng, xavier(dim, dim));
    a.bo = add_param(pre + "attn.bo", {dim}, rng, "zeros");
    return a;
  };
  auto add_norm = [&](const std::string& name, int64_t dim) {
    NormParams nm;
    nm.g = add_param(name + ".g", {dim}, rng, "ones");
    nm.b = add_param(name + ".b", {dim}, rng, "zeros");
    return nm;
  };
  auto add_ffn = [&](const std::string& pre, int64_t dim) {
    FfnParams f;
    const int64_t hidden = dim * cfg_.ffn_ratio;
    f.w1 = add_param(pre + "ffn.w1", {dim, hidden}, rng, xavier(dim, hidden));
    f.b1 = add_param(pre + "ffn.b1", {hidden}, rng, "zeros");
    f.w2 = add_param(pre + "ffn.w2", {hidden, dim}, rng, xavier(hidden, dim));
    f.b2 = add_param(pre + "ffn.b2", {dim}, rng, "zeros");
    return f;
  };

  for (int64_t i = 0; i < cfg_.encoder_blocks; ++i) {
    const std::string pre = "enc" + std::to_string(i) + ".";
    TffBlockParams blk;
    blk.base.ln1 = add_norm(pre + "ln1", C);
    blk.base.attn = add_attn(pre, C);
    blk.filter.wq = add_param(pre + "filter.wq", {1, C}, rng,
                              std::to_string(1.0 / std::sqrt(static_cast<double>(C))));
    blk.filter.k_re = add_param(pre + "filter.k_re", {cfg_.filter_heads, n}, rng, "ones");
    blk.filter.k_im = add_param(pre + "filter.k_im", {cfg_.filter_heads, n}, rng, "zeros");
    blk.fuse_raw = add_param(pre + "fuse", {1}, rng, "zeros");
    blk.base.ln2 = add_norm(pre + "ln2", C);
    blk.base.ffn = add_ffn(pre, C);
    encoder.push_back(blk);
  }

  decoder.proj_w = add_param("dec.proj.w", {C, D}, rng, xavier(C, D));
  decoder.proj_b = add_param("dec.proj.b", {D}, rng, "zeros");
  decoder.mask_token = add_param("dec.mask_token", {D}, rng, "0.02");
  decoder.pos = add_param("dec.pos", {n, D}, rng, "0.02");
  for (int64_t j = 0; j < cfg_.decoder_blocks; ++j) {
    const std::string pre = "dec" + std::to_string(j) + ".";
    AttnBlockParams blk;
    blk.ln1 = add_norm(pre + "ln1", D);
    blk.attn = add_attn(pre, D);
    blk.ln2 = add_norm(pre + "ln2", D);
    blk.ffn = add_ffn(pre, D);
    decoder.blocks.push_back(blk);
  }
  decoder.head_w = add_param("dec.head.w", {D, L * span}, rng, xavier(D, L * span));
  decoder.head_b = add_param("dec.head.b", {L * span}, rng, "zeros");

  const int64_t P = cfg_.proto_dim;
  if (cfg_.per_block_projections) {
    for (size_t k = 0; k < cfg_.pairing.size(); ++k) {
      proj_enc.push_back(
          add_param("proj_enc.p" + std::to_string(k) + ".w", {C, P}, rng, xavier(C, P)));
      proj_dec.push_back(
          add_param("proj_dec.p" + std::to_string(k) + ".w", {D, P}, rng, xavier(D, P)));
    }
  } else {
    proj_enc.push_back(add_param("proj_enc.w", {C, P}, rng, xavier(C, P)));
    proj_dec.push_back(add_param("proj_dec.w", {D, P}, rng, xavier(D, P)));
  }
}

Tensor LeastModel::param(const std::string& name) const {
  for (const auto& [pname, t] : params_) {
    if (pname == name) return t;
  }
  throw UsageError("unknown parameter: " + name);
}

Tensor patch_embed(const LeastModel& m, const Tensor& x) {
  const ModelConfig& cfg = m.config();
  if (x.rank() != 3 || x.dim(1) != cfg.lead_count || x.dim(2) != cfg.input_len) {
    throw DimensionError("patch_embed: want [B x " + std::to_string(cfg.lead_count) + " x " +
                         std::to_string(cfg.input_len) + "], got " + shape_str(x.shape()));
  }
  const int64_t batch = x.dim(0);
  Tensor h = x;
  if (m.embed.stages.empty()) {
    h = conv1d(h, m.embed.stem_w, m.embed.stem_b, 1, 2);
  } else {
    for (const ConvStage& st : m.embed.stages) {
      Tensor main = conv1d(h, st.w, st.b, 2, 2);
      Tensor sc = conv1d(h, st.sc_w, st.sc_b, 2, 0);
      h = gelu(add(main, sc));
    }
  }
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) rows.push_back(transpose2d(select_batch(h, b)));
  Tensor stacked = batch == 1 ? rows[0] : concat_rows(rows);
  Tensor normed = layer_norm(stacked, m.embed.norm.g, m.embed.norm.b);
  std::vector<Tensor> pos_tiles(static_cast<size_t>(batch), m.embed.pos);
  Tensor pos = batch == 1 ? m.embed.pos : concat_rows(pos_tiles);
  return add(normed, pos);
}

Tensor tff_frequency_branch(const Tensor& z, const FilterParams& f, int64_t filter_heads,
                            const Tensor* query_override) {
  if (z.rank() != 2) throw DimensionError("tff_frequency_branch: want 2-D tokens");
  const int64_t n = z.dim(0);
  Tensor zt = transpose2d(z);  // [C x n]
  ComplexTensor Z = dft_forward(zt);

  Tensor q;
  if (query_override != nullptr) {
    q = *query_override;
    if (shape_numel(q.shape()) != n) {
      throw DimensionError("query override length " + shape_str(q.shape()) + " vs bins " +
                           std::to_string(n));
    }
    if (q.rank() != 1) q = reshape(q, {n});
  } else {
    q = reshape(matmul(f.wq, Z.re), {n});
  }

  Tensor kre = f.k_re;
  Tensor kim = f.k_im;
  const int64_t bank_n = kre.dim(1);
  if (bank_n != n) {
    // nearest-bin lookup keeps one full-length bank usable on shorter
    // transforms (identity when lengths match)
    std::vector<int64_t> idx(static_cast<size_t>(n), 0);
    if (n > 1) {
      for (int64_t k = 0; k < n; ++k) {
        idx[static_cast<size_t>(k)] =
            llround(static_cast<double>(k) * (bank_n - 1) / static_cast<double>(n - 1));
      }
    }
    kre = transpose2d(gather_rows(transpose2d(kre), idx));
    kim = transpose2d(gather_rows(transpose2d(kim), idx));
  }
  (void)filter_heads;
  Tensor mre = mul(q, mean_axis0(kre));
  Tensor mim = mul(q, mean_axis0(kim));

  ComplexTensor zmod;
  zmod.re = sub(mul_rowvec(Z.re, mre), mul_rowvec(Z.im, mim));
  zmod.im = add(mul_rowvec(Z.re, mim), mul_rowvec(Z.im, mre));
  Tensor back = dft_inverse(zmod);
  return transpose2d(back);
}

namespace {

Tensor per_sample_attention(const Tensor& u, int64_t batch, const AttentionParams& attn,
                            int64_t heads) {
  const int64_t tokens = u.dim(0) / batch;
  if (batch == 1) return self_attention(u, attn, heads);
  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(batch));
  for (int64_t s = 0; s < batch; ++s) {
    parts.push_back(self_attention(slice_rows(u, s * tokens, (s + 1) * tokens), attn, heads));
  }
  return concat_rows(parts);
}

Tensor ffn_forward(const Tensor& v, const FfnParams& f) {
  return linear(gelu(linear(v, f.w1, f.b1)), f.w2, f.b2);
}

}  // namespace

Tensor attn_block_forward(const Tensor& tokens, int64_t batch, const AttnBlockParams& p,
                          int64_t heads) {
  Tensor u = layer_norm(tokens, p.ln1.g, p.ln1.b);
  Tensor h = add(tokens, per_sample_attention(u, batch, p.attn, heads));
  Tensor v = layer_norm(h, p.ln2.g, p.ln2.b);
  return add(h, ffn_forward(v, p.ffn));
}

Tensor tff_block_forward(const Tensor& tokens, int64_t batch, const TffBlockParams& p,
                         int64_t heads, int64_t filter_heads, TffIntermediates* inter,
                         const double* fuse_override, const Tensor* query_override) {
  const int64_t per = tokens.dim(0) / batch;
  Tensor u = layer_norm(tokens, p.base.ln1.g, p.base.ln1.b);
  Tensor z_t = per_sample_attention(u, batch, p.base.attn, heads);
  std::vector<Tensor> freq_parts;
  freq_parts.reserve(static_cast<size_t>(batch));
  for (int64_t s = 0; s < batch; ++s) {
    Tensor us = batch == 1 ? u : slice_rows(u, s * per, (s + 1) * per);
    freq_parts.push_back(tff_frequency_branch(us, p.filter, filter_heads, query_override));
  }
  Tensor z_hat = batch == 1 ? freq_parts[0] : concat_rows(freq_parts);

  Tensor fused;
  if (fuse_override != nullptr) {
    fused = add(mul_scalar(z_hat, *fuse_override), mul_scalar(z_t, 1.0 - *fuse_override));
  } else {
    Tensor w = sigmoid(p.fuse_raw);
    Tensor one_minus = add_scalar(neg(w), 1.0);
    fused = add(scale(z_hat, w), scale(z_t, one_minus));
  }
  Tensor h = add(tokens, fused);
  Tensor v = layer_norm(h, p.base.ln2.g, p.base.ln2.b);
  Tensor out = add(h, ffn_forward(v, p.base.ffn));
  if (inter != nullptr) {
    inter->z_hat = z_hat;
    inter->z_t = z_t;
    inter->fused = fused;
    inter->output = out;
  }
  return out;
}

EncoderOut encoder_forward(const LeastModel& m, const Tensor& tokens, int64_t batch) {
  const ModelConfig& cfg = m.config();
  EncoderOut out;
  Tensor h = tokens;
  for (int64_t i = 0; i < cfg.encoder_blocks; ++i) {
    const TffBlockParams& blk = m.encoder[static_cast<size_t>(i)];
    h = cfg.tff_enabled
            ? tff_block_forward(h, batch, blk, cfg.heads_attn, cfg.filter_heads)
            : attn_block_forward(h, batch, blk.base, cfg.heads_attn);
    out.per_block.push_back(h);
  }
  out.tokens = h;
  return out;
}

DecoderOut decoder_forward(const LeastModel& m, const Tensor& visible_tokens,
                           const std::vector<MaskIndices>& masks, int64_t batch) {
  const ModelConfig& cfg = m.config();
  const int64_t n = cfg.patch_count;
  const int64_t D = cfg.decoder_dim;
  if (static_cast<int64_t>(masks.size()) != batch) {
    throw UsageError("decoder_forward: one mask per sample required");
  }
  Tensor proj = linear(visible_tokens, m.decoder.proj_w, m.decoder.proj_b);
  Tensor mask_row = reshape(m.decoder.mask_token, {1, D});

  std::vector<Tensor> sample_tokens;
  sample_tokens.reserve(static_cast<size_t>(batch));
  int64_t offset = 0;
  for (int64_t s = 0; s < batch; ++s) {
    const MaskIndices& mi = masks[static_cast<size_t>(s)];
    const int64_t nv = static_cast<int64_t>(mi.visible.size());
    if (static_cast<int64_t>(mi.masked.size()) + nv != n) {
      throw UsageError("decoder_forward: mask does not cover all patches");
    }
    Tensor base = concat_rows({slice_rows(proj, offset, offset + nv), mask_row});
    std::vector<int64_t> pick(static_cast<size_t>(n), nv);
    for (int64_t r = 0; r < nv; ++r) pick[static_cast<size_t>(mi.visible[static_cast<size_t>(r)])] = r;
    sample_tokens.push_back(gather_rows(base, pick));
    offset += nv;
  }
  if (offset != visible_tokens.dim(0)) {
    throw UsageError("decoder_forward: visible token count mismatch");
  }
  Tensor assembled = batch == 1 ? sample_tokens[0] : concat_rows(sample_tokens);
  std::vector<Tensor> pos_tiles(static_cast<size_t>(batch), m.decoder.pos);
  Tensor pos = batch == 1 ? m.decoder.pos : concat_rows(pos_tiles);
  Tensor h = add(assembled, pos);

  DecoderOut out;
  out.assembled = assembled;
  for (const AttnBlockParams& blk : m.decoder.blocks) {
    h = attn_block_forward(h, batch, blk, cfg.heads_attn);
    out.per_block.push_back(h);
  }
  out.recon = linear(h, m.decoder.head_w, m.decoder.head_b);
  return out;
}

std::vector<Tensor> compute_prototypes(const Tensor& block_tokens, int64_t batch,
                                       int64_t tokens_per_sample, PrototypeMode mode) {
  std::vector<Tensor> per_sample;
  per_sample.reserve(static_cast<size_t>(batch));
  for (int64_t s = 0; s < batch; ++s) {
    Tensor slab = batch == 1 ? block_tokens
                             : slice_rows(block_tokens, s * tokens_per_sample,
                                          (s + 1) * tokens_per_sample);
    per_sample.push_back(mean_axis0(slab));
  }
  if (mode == PrototypeMode::kPerSample) return per_sample;
  if (batch == 1) return per_sample;
  std::vector<Tensor> rows;
  rows.reserve(per_sample.size());
  for (const Tensor& t : per_sample) rows.push_back(reshape(t, {1, t.dim(0)}));
  return {mean_axis0(concat_rows(rows))};
}

Tensor project_prototype(const Tensor& proto, const Tensor& w) {
  Tensor row = proto.rank() == 1 ? reshape(proto, {1, proto.dim(0)}) : proto;
  return reshape(matmul(row, w), {w.dim(1)});
}

Tensor loss_multi_from_pairs(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  if (pairs.empty()) throw UsageError("loss_multi_from_pairs: no pairs");
  Tensor acc;
  for (const auto& [a, b] : pairs) {
    Tensor d = sub(a, b);
    Tensor sq = sum_all(mul(d, d));
    acc = acc.defined() ? add(acc, sq) : sq;
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(pairs.size()));
}

Tensor patch_targets(const Tensor& x, int64_t patch_count) {
  if (x.rank() != 3) throw DimensionError("patch_targets: want [B x L x T]");
  const int64_t batch = x.dim(0), leads = x.dim(1), total = x.dim(2);
  if (total % patch_count != 0) throw DimensionError("patch_targets: length not divisible");
  const int64_t span = total / patch_count;
  std::vector<double> out(static_cast<size_t>(batch * patch_count * leads * span));
  const double* src = x.data().data();
  int64_t w = 0;
  for (int64_t s = 0; s < batch; ++s) {
    for (int64_t j = 0; j < patch_count; ++j) {
      for (int64_t l = 0; l < leads; ++l) {
        const double* lead = src + (s * leads + l) * total + j * span;
        for (int64_t q = 0; q < span; ++q) out[static_cast<size_t>(w++)] = lead[q];
      }
    }
  }
  return Tensor::from({batch * patch_count, leads * span}, out);
}

Tensor loss_ssl(const Tensor& recon, const Tensor& target, const std::vector<MaskIndices>& masks,
                int64_t patch_count) {
  std::vector<int64_t> rows;
  for (size_t s = 0; s < masks.size(); ++s) {
    for (int64_t j : masks[s].masked) rows.push_back(static_cast<int64_t>(s) * patch_count + j);
  }
  if (rows.empty()) throw ConfigError("loss_ssl: no masked patches");
  Tensor d = sub(gather_rows(recon, rows), gather_rows(target, rows));
  return mean_all(mul(d, d));
}

Tensor loss_total(const Tensor& l_ssl, const Tensor& l_multi, bool mgpr_enabled) {
  if (!mgpr_enabled) return l_ssl;
  return add(l_ssl, l_multi);
}

PretrainLosses pretrain_forward(const LeastModel& m, const Tensor& x, uint64_t mask_seed,
                                uint64_t sample_index_base) {
  const ModelConfig& cfg = m.config();
  if (cfg.mask_ratio <= 0.0) throw ConfigError("pretraining requires mask_ratio > 0");
  const int64_t batch = x.dim(0);
  const int64_t n = cfg.patch_count;
  Tensor emb = patch_embed(m, x);

  std::vector<MaskIndices> masks;
  std::vector<int64_t> vis_rows;
  masks.reserve(static_cast<size_t>(batch));
  for (int64_t s = 0; s < batch; ++s) {
    masks.push_back(random_mask(n, cfg.mask_ratio,
                                Rng::mix(mask_seed, sample_index_base + static_cast<uint64_t>(s))));
    for (int64_t j : masks.back().visible) vis_rows.push_back(s * n + j);
  }
  const int64_t n_vis = static_cast<int64_t>(masks[0].visible.size());
  Tensor visible = gather_rows(emb, vis_rows);

  EncoderOut enc = encoder_forward(m, visible, batch);
  DecoderOut dec = decoder_forward(m, enc.tokens, masks, batch);

  PretrainLosses out;
  out.ssl = loss_ssl(dec.recon, patch_targets(x, n), masks, n);
  if (!cfg.mgpr_enabled) {
    out.multi = Tensor::scalar(0.0);
    out.total = out.ssl;
    return out;
  }
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (size_t k = 0; k < cfg.pairing.size(); ++k) {
    const auto [e, dblk] = cfg.pairing[k];
    const Tensor& we = cfg.per_block_projections ? m.proj_enc[k] : m.proj_enc[0];
    const Tensor& wd = cfg.per_block_projections ? m.proj_dec[k] : m.proj_dec[0];
    std::vector<Tensor> pe = compute_prototypes(enc.per_block[static_cast<size_t>(e)], batch,
                                                n_vis, cfg.prototype_mode);
    std::vector<Tensor> pd = compute_prototypes(dec.per_block[static_cast<size_t>(dblk)], batch,
                                                n, cfg.prototype_mode);
    for (size_t s = 0; s < pe.size(); ++s) {
      pairs.emplace_back(project_prototype(pe[s], we), project_prototype(pd[s], wd));
    }
  }
  out.multi = loss_multi_from_pairs(pairs);
  out.total = loss_total(out.ssl, out.multi, true);
  return out;
}

Tensor encode_all(const LeastModel& m, const Tensor& x) {
  return encoder_forward(m, patch_embed(m, x), x.dim(0)).tokens;
}

Tensor attribution_map(const LeastModel& m, const Tensor& head_w, const Tensor& head_b,
                       const Tensor& x_single, int64_t target_index) {
  const ModelConfig& cfg = m.config();
  Tensor x3 = x_single;
  if (x3.rank() == 2) x3 = reshape(x3, {1, x3.dim(0), x3.dim(1)});
  if (x3.dim(0) != 1) throw UsageError("attribution_map: single record only");
  if (target_index < 0 || target_index >= head_w.dim(1)) {
    throw UsageError("attribution_map: target index out of range");
  }
  const int64_t n = cfg.patch_count;
  const int64_t C = cfg.embed_dim;
  const int64_t span = cfg.patch_span();

  Tape tape;
  Tape::Scope scope(tape);
  Tensor emb = patch_embed(m, x3);
  EncoderOut enc = encoder_forward(m, emb, 1);
  Tensor pooled = reshape(mean_axis0(enc.tokens), {1, C});
  Tensor logits = linear(pooled, head_w, head_b);
  Tensor target = reshape(slice_cols(logits, target_index, target_index + 1), {1});
  tape.backward(target);

  const std::vector<double>& g = emb.impl()->grad;
  std::vector<double> per_patch(static_cast<size_t>(n), 0.0);
  for (int64_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int64_t c = 0; c < C; ++c) acc += g[static_cast<size_t>(j * C + c)];
    per_patch[static_cast<size_t>(j)] = std::max(0.0, acc / static_cast<double>(C));
  }
  std::vector<double> up(static_cast<size_t>(n * span));
  for (int64_t t = 0; t < n * span; ++t) up[static_cast<size_t>(t)] = per_patch[static_cast<size_t>(t / span)];
  const auto [lo_it, hi_it] = std::minmax_element(up.begin(), up.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo < 1e-12) {
    std::fill(up.begin(), up.end(), 0.5);
  } else {
    for (double& v : up) v = (v - lo) / (hi - lo);
  }
  return Tensor::from({n * span}, up);
}

// ---- checkpoints ----

namespace {

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["lead_count"] = cfg.lead_count;
  j["input_len"] = cfg.input_len;
  j["embed_dim"] = cfg.embed_dim;
  j["patch_count"] = cfg.patch_count;
  j["encoder_blocks"] = cfg.encoder_blocks;
  j["decoder_blocks"] = cfg.decoder_blocks;
  j["decoder_dim"] = cfg.decoder_dim;
  j["heads_attn"] = cfg.heads_attn;
  j["filter_heads"] = cfg.filter_heads;
  j["mask_ratio"] = cfg.mask_ratio;
  j["proto_dim"] = cfg.proto_dim;
  j["ffn_ratio"] = cfg.ffn_ratio;
  json pairs = json::array();
  for (const auto& [e, d] : cfg.pairing) pairs.push_back({e, d});
  j["pairing"] = pairs;
  j["prototype_mode"] = cfg.prototype_mode == PrototypeMode::kPerSample ? "per_sample"
                                                                        : "batch_level";
  j["tff_enabled"] = cfg.tff_enabled;
  j["mgpr_enabled"] = cfg.mgpr_enabled;
  j["per_block_projections"] = cfg.per_block_projections;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.lead_count = j.at("lead_count").get<int64_t>();
  cfg.input_len = j.at("input_len").get<int64_t>();
  cfg.embed_dim = j.at("embed_dim").get<int64_t>();
  cfg.patch_count = j.at("patch_count").get<int64_t>();
  cfg.encoder_blocks = j.at("encoder_blocks").get<int64_t>();
  cfg.decoder_blocks = j.at("decoder_blocks").get<int64_t>();
  cfg.decoder_dim = j.at("decoder_dim").get<int64_t>();
  cfg.heads_attn = j.at("heads_attn").get<int64_t>();
  cfg.filter_heads = j.at("filter_heads").get<int64_t>();
  cfg.mask_ratio = j.at("mask_ratio").get<double>();
  cfg.proto_dim = j.at("proto_dim").get<int64_t>();
  cfg.ffn_ratio = j.at("ffn_ratio").get<int64_t>();
  cfg.pairing.clear();
  for (const auto& pr : j.at("pairing")) {
    cfg.pairing.emplace_back(pr.at(0).get<int>(), pr.at(1).get<int>());
  }
  cfg.prototype_mode = j.at("prototype_mode").get<std::string>() == "batch_level"
                           ? PrototypeMode::kBatchLevel
                           : PrototypeMode::kPerSample;
  cfg.tff_enabled = j.at("tff_enabled").get<bool>();
  cfg.mgpr_enabled = j.at("mgpr_enabled").get<bool>();
  cfg.per_block_projections = j.at("per_block_projections").get<bool>();
  return cfg;
}

void append_f64_le(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_f64_le(const unsigned char* p) {
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const LeastModel& m, const std::string& stem) {
  json manifest;
  manifest["format"] = "least-checkpoint-v1";
  manifest["config"] = config_to_json(m.config());
  json plist = json::array();
  std::string blob;
  for (const auto& [name, t] : m.parameters()) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    plist.push_back(entry);
    for (double v : t.data()) append_f64_le(blob, v);
  }
  manifest["params"] = plist;

  std::ofstream jf(stem + ".json", std::ios::binary);
  if (!jf) throw IoError("cannot write " + stem + ".json");
  jf << manifest.dump(2) << "\n";
  jf.close();
  std::ofstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot write " + stem + ".bin");
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bf) throw IoError("short write to " + stem + ".bin");
}

LeastModel load_checkpoint(const std::string& stem) {
  std::ifstream jf(stem + ".json", std::ios::binary);
  if (!jf) throw IoError("cannot open " + stem + ".json");
  json manifest;
  try {
    jf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("bad checkpoint manifest " + stem + ".json: " + e.what());
  }
  ModelConfig cfg;
  try {
    if (manifest.at("format").get<std::string>() != "least-checkpoint-v1") {
      throw IoError("unknown checkpoint format in " + stem + ".json");
    }
    cfg = config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw IoError("bad checkpoint manifest " + stem + ".json: " + e.what());
  }
  LeastModel model(cfg, 0);

  const json& plist = manifest.at("params");
  if (plist.size() != model.parameters().size()) {
    throw IoError("checkpoint parameter count mismatch in " + stem + ".json");
  }
  std::ifstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot open " + stem + ".bin");
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  size_t cursor = 0;
  for (size_t i = 0; i < model.parameters().size(); ++i) {
    auto& [name, t] = model.parameters()[i];
    const json& entry = plist[i];
    if (entry.at("name").get<std::string>() != name) {
      throw IoError("checkpoint parameter order mismatch at " + name);
    }
    Shape want = entry.at("shape").get<Shape>();
    if (want != t.shape()) throw IoError("checkpoint shape mismatch for " + name);
    const int64_t count = shape_numel(want);
    if (cursor + static_cast<size_t>(count) * 8 > blob.size()) {
      throw IoError("checkpoint blob truncated at " + name);
    }
    double* dst = t.raw_data().data();
    for (int64_t k = 0; k < count; ++k) {
      dst[k] = read_f64_le(reinterpret_cast<const unsigned char*>(blob.data()) + cursor);
      cursor += 8;
    }
  }
  if (cursor != blob.size()) throw IoError("checkpoint blob has trailing bytes");
  return model;
}

}  // namespace least
