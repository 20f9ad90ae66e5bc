#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "keycap/params.hpp"
#include "keycap/tensor.hpp"

namespace keycap {

enum class Pooling { mean, last };

// Contextualized keyword encoder: token + positional embedding, a stack of
// masked self-attention blocks, pooling, then the reinforcement stack of
// fully-connected layers.
struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_size = 64;   // E_s
  std::size_t hidden_size = 64;  // H_s
  std::size_t num_blocks = 2;
  std::size_t num_heads = 2;
  std::size_t ffn_size = 128;
  std::size_t output_size = 64;  // F_k, size of the keyword representation
  std::size_t reinforce_layers = 2;
  std::size_t max_keyword_len = 16;
  double eps = 1e-5;
  Activation activation = Activation::gelu;
  Pooling pooling = Pooling::mean;
  // Pre-norm residual blocks instead of the literal attention → norm → FFN.
  bool residual = false;
  bool positional = true;

  void validate() const;
  std::size_t head_size() const { return hidden_size / num_heads; }
};

// Parameter views of one decoder block. ln2_* exist only in residual mode.
struct BlockParams {
  Var wq, bq, wk, bk, wv, bv;
  Var ln_gain, ln_bias;
  Var w1, b1, w2, b2;
  Var ln2_gain, ln2_bias;
};

void init_encoder_parameters(const EncoderConfig& cfg, Parameters& params, SeededRng& rng);

// Names used by init_encoder_parameters.
std::string encoder_token_table();
std::string encoder_positional_table();
std::string block_prefix(std::size_t block);

BlockParams bind_block(ParamBinding& bind, std::size_t block, bool residual);

// Row n = table[ids[n]] (+ positional[n]). positional may be an invalid Var.
Var embed_tokens(Var token_table, Var positional, std::span<const std::size_t> ids);

// Multi-head causal attention. key_valid additionally hides keys (PAD).
Var masked_self_attention(Var x, const BlockParams& p, std::size_t num_heads, const Mask& key_valid = {});

Var block_forward(Var x, const BlockParams& p, const EncoderConfig& cfg, const Mask& key_valid = {});

// Output of the last block, [L×H_s], before pooling.
Var encode_sequence(const EncoderConfig& cfg, ParamBinding& bind, std::span<const std::size_t> ids);

// Full encoder: [1×F_k] contextualized keyword representation.
Var encode_keywords(const EncoderConfig& cfg, ParamBinding& bind, std::span<const std::size_t> ids);

}  // namespace keycap
