#include "keycap/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "keycap/error.hpp"
#include "keycap/text.hpp"

namespace keycap {

void EncoderConfig::validate() const {
  if (vocab_size == 0 || embed_size == 0 || hidden_size == 0 || num_blocks == 0 || num_heads == 0 ||
      ffn_size == 0 || output_size == 0 || reinforce_layers == 0 || max_keyword_len == 0) {
    throw ConfigError("encoder: all sizes must be >= 1");
  }
  if (hidden_size % num_heads != 0) {
    throw ConfigError("encoder: hidden_size " + std::to_string(hidden_size) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (residual && embed_size != hidden_size) {
    throw ConfigError("encoder: residual blocks need embed_size == hidden_size");
  }
  if (eps < 0) throw ConfigError("encoder: eps must be non-negative");
}

std::string encoder_token_table() { return "embed.tokens"; }
std::string encoder_positional_table() { return "encoder.positional"; }
std::string block_prefix(std::size_t block) { return "encoder.block" + std::to_string(block) + "."; }

namespace {

std::string reinforce_prefix(std::size_t layer) { return "encoder.reinforce" + std::to_string(layer) + "."; }

std::vector<bool> non_pad(std::span<const std::size_t> ids) {
  std::vector<bool> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != kPad;
  return valid;
}

}  // namespace

void init_encoder_parameters(const EncoderConfig& cfg, Parameters& params, SeededRng& rng) {
  cfg.validate();
  const std::size_t e = cfg.embed_size, h = cfg.hidden_size;
  if (!params.contains(encoder_token_table())) {
    params.add(encoder_token_table(), xavier_uniform(cfg.vocab_size, e, rng));
  }
  if (cfg.positional) params.add(encoder_positional_table(), Tensor::zeros({cfg.max_keyword_len, e}));
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string pre = block_prefix(b);
    const std::size_t in = b == 0 ? e : h;
    for (const char* proj : {"q", "k", "v"}) {
      params.add(pre + "w" + proj, xavier_uniform(h, in, rng));
      params.add(pre + "b" + proj, Tensor::zeros({h}));
    }
    params.add(pre + "ln_gain", Tensor::filled({h}, 1.0));
    params.add(pre + "ln_bias", Tensor::zeros({h}));
    params.add(pre + "w1", xavier_uniform(cfg.ffn_size, h, rng));
    params.add(pre + "b1", Tensor::zeros({cfg.ffn_size}));
    params.add(pre + "w2", xavier_uniform(h, cfg.ffn_size, rng));
    params.add(pre + "b2", Tensor::zeros({h}));
    if (cfg.residual) {
      params.add(pre + "ln2_gain", Tensor::filled({h}, 1.0));
      params.add(pre + "ln2_bias", Tensor::zeros({h}));
    }
  }
  for (std::size_t l = 0; l < cfg.reinforce_layers; ++l) {
    const std::size_t out = l + 1 == cfg.reinforce_layers ? cfg.output_size : h;
    params.add(reinforce_prefix(l) + "weight", xavier_uniform(out, h, rng));
    params.add(reinforce_prefix(l) + "bias", Tensor::zeros({out}));
  }
}

BlockParams bind_block(ParamBinding& bind, std::size_t block, bool residual) {
  const std::string pre = block_prefix(block);
  BlockParams p;
  p.wq = bind(pre + "wq");
  p.bq = bind(pre + "bq");
  p.wk = bind(pre + "wk");
  p.bk = bind(pre + "bk");
  p.wv = bind(pre + "wv");
  p.bv = bind(pre + "bv");
  p.ln_gain = bind(pre + "ln_gain");
  p.ln_bias = bind(pre + "ln_bias");
  p.w1 = bind(pre + "w1");
  p.b1 = bind(pre + "b1");
  p.w2 = bind(pre + "w2");
  p.b2 = bind(pre + "b2");
  if (residual) {
    p.ln2_gain = bind(pre + "ln2_gain");
    p.ln2_bias = bind(pre + "ln2_bias");
  }
  return p;
}

Var embed_tokens(Var token_table, Var positional, std::span<const std::size_t> ids) {
  if (ids.empty()) throw ShapeError("embed_tokens: empty token sequence");
  Var x = embedding_lookup(token_table, ids);
  if (!positional.valid()) return x;
  if (ids.size() > positional.value().dim(0)) {
    throw ShapeError("embed_tokens: sequence of length " + std::to_string(ids.size()) +
                     " exceeds positional table " + shape_str(positional.shape()));
  }
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return add(x, embedding_lookup(positional, positions));
}

Var masked_self_attention(Var x, const BlockParams& p, std::size_t num_heads, const Mask& key_valid) {
  Var q = linear(x, p.wq, p.bq);
  Var k = linear(x, p.wk, p.bk);
  Var v = linear(x, p.wv, p.bv);
  const std::size_t hidden = q.value().dim(1);
  if (num_heads == 0 || hidden % num_heads != 0) {
    throw ShapeError("masked_self_attention: hidden size " + std::to_string(hidden) + " not divisible into " +
                     std::to_string(num_heads) + " heads");
  }
  const std::size_t dk = hidden / num_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Var qh = slice_lastdim(q, h * dk, dk);
    Var kh = slice_lastdim(k, h * dk, dk);
    Var vh = slice_lastdim(v, h * dk, dk);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    Var weights = softmax_lastdim(masked_fill(scores, key_valid));
    heads.push_back(matmul(weights, vh));
  }
  return num_heads == 1 ? heads[0] : concat_lastdim(heads);
}

Var block_forward(Var x, const BlockParams& p, const EncoderConfig& cfg, const Mask& key_valid) {
  auto ffn = [&](Var z) { return linear(activate(linear(z, p.w1, p.b1), cfg.activation), p.w2, p.b2); };
  if (!cfg.residual) {
    Var z = layer_norm(masked_self_attention(x, p, cfg.num_heads, key_valid), p.ln_gain, p.ln_bias, cfg.eps);
    return ffn(z);
  }
  Var h = add(x, masked_self_attention(layer_norm(x, p.ln_gain, p.ln_bias, cfg.eps), p, cfg.num_heads, key_valid));
  return add(h, ffn(layer_norm(h, p.ln2_gain, p.ln2_bias, cfg.eps)));
}

Var encode_sequence(const EncoderConfig& cfg, ParamBinding& bind, std::span<const std::size_t> ids) {
  const Mask valid = non_pad(ids);
  if (std::find(valid.begin(), valid.end(), true) == valid.end()) {
    throw InputError("encode_keywords: keyword sequence is empty (all padding)");
  }
  Var positional = cfg.positional ? bind(encoder_positional_table()) : Var{};
  Var x = embed_tokens(bind(encoder_token_table()), positional, ids);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    x = block_forward(x, bind_block(bind, b, cfg.residual), cfg, valid);
  }
  return x;
}

Var encode_keywords(const EncoderConfig& cfg, ParamBinding& bind, std::span<const std::size_t> ids) {
  Var seq = encode_sequence(cfg, bind, ids);
  const Mask valid = non_pad(ids);
  Var pooled;
  if (cfg.pooling == Pooling::mean) {
    pooled = mean_rows(seq, valid);
  } else {
    std::size_t last = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (valid[i]) last = i;
    }
    pooled = row(seq, last);
  }
  for (std::size_t l = 0; l < cfg.reinforce_layers; ++l) {
    pooled = linear(pooled, bind(reinforce_prefix(l) + "weight"), bind(reinforce_prefix(l) + "bias"));
    if (l + 1 < cfg.reinforce_layers) pooled = activate(pooled, cfg.activation);
  }
  return pooled;
}

}  // namespace keycap
