#include "keycap/model.hpp"

#include <algorithm>
#include <cmath>

#include "keycap/error.hpp"

namespace keycap {

void ModelConfig::finalize(std::size_t vocab_size) {
  encoder.vocab_size = vocab_size;
  generator.vocab_size = vocab_size;
  generator.keyword_size = encoder.output_size;
  encoder.validate();
  generator.validate();
  if (generator.share_embeddings && generator.word_embed_size != encoder.embed_size) {
    throw ConfigError("shared embeddings need word_embed_size (" + std::to_string(generator.word_embed_size) +
                      ") == embed_size (" + std::to_string(encoder.embed_size) + ")");
  }
}

namespace {

Parameters fresh_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  SeededRng rng(seed);
  Parameters params;
  init_encoder_parameters(cfg.encoder, params, rng);
  init_generator_parameters(cfg.generator, params, rng);
  return params;
}

}  // namespace

CaptionModel::CaptionModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  params_ = fresh_parameters(cfg_, seed);
}

CaptionModel::CaptionModel(ModelConfig cfg, Parameters params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  const Parameters layout = fresh_parameters(cfg_, 0);
  for (const auto& e : layout.entries()) {
    if (!params_.contains(e.name)) throw ConfigError("parameter '" + e.name + "' missing from checkpoint");
    const Tensor& got = params_.at(e.name);
    if (got.shape() != e.value.shape()) {
      throw ConfigError("parameter '" + e.name + "': config expects " + shape_str(e.value.shape()) +
                        ", checkpoint has " + shape_str(got.shape()));
    }
  }
  if (layout.size() != params_.size()) {
    throw ConfigError("checkpoint has " + std::to_string(params_.size()) + " parameters, config expects " +
                      std::to_string(layout.size()));
  }
}

CaptionModel::Forward CaptionModel::forward(ParamBinding& bind, const Example& ex) const {
  Graph& g = bind.graph();
  Forward out;
  out.keyword_repr = encode_keywords(cfg_.encoder, bind, ex.keywords.ids);
  out.phi = image_features(cfg_.generator, bind, g.constant(ex.image));
  Var e = project_image(bind("decoder.image_proj"), out.phi);
  Var k_fused = fuse(out.keyword_repr, out.phi);
  out.tf = teacher_forced_forward(cfg_.generator, bind, e, k_fused, ex.caption.used());
  return out;
}

double CaptionModel::loss(const Example& ex) const {
  Graph g(false);
  ParamBinding bind(g, params_);
  return forward(bind, ex).tf.loss.value().item();
}

Tensor CaptionModel::keyword_representation(std::span<const std::size_t> keyword_ids) const {
  Graph g(false);
  ParamBinding bind(g, params_);
  const Tensor& v = encode_keywords(cfg_.encoder, bind, keyword_ids).value();
  return v.reshaped({v.size()});
}

Tensor CaptionModel::image_feature(const Tensor& image) const {
  Graph g(false);
  ParamBinding bind(g, params_);
  const Tensor& v = image_features(cfg_.generator, bind, g.constant(image)).value();
  return v.reshaped({v.size()});
}

StepOutput CaptionModel::decode_step(const LstmState& state, const Tensor& e, const Tensor& k_fused,
                                     std::size_t prev_token) const {
  Graph g(false);
  ParamBinding bind(g, params_);
  auto as_row = [](const Tensor& t) { return t.rank() == 2 ? t : t.reshaped({1, t.size()}); };
  StepVars s = keycap::decode_step(cfg_.generator, bind, g.constant(state.h), g.constant(state.c),
                                   g.constant(as_row(e)), g.constant(as_row(k_fused)), prev_token);
  StepOutput out;
  out.probs = s.probs.value();
  out.state = {s.state.h.value(), s.state.c.value()};
  const Tensor& z = s.logits.value();
  const double mx = *std::max_element(z.data().begin(), z.data().end());
  double acc = 0.0;
  for (double v : z.data()) acc += std::exp(v - mx);
  const double lse = mx + std::log(acc);
  out.log_probs.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out.log_probs[i] = z[i] - lse;
  return out;
}

SearchOptions CaptionModel::search_options(std::size_t beams) const {
  SearchOptions opts;
  opts.beams = beams;
  opts.max_len = cfg_.generator.max_gen_len;
  opts.start_token = kStart;
  opts.end_token = kEnd;
  opts.length_normalized = cfg_.generator.length_normalized;
  return opts;
}

BeamHypothesis CaptionModel::greedy_decode(const Tensor& phi, const Tensor& keyword_repr) const {
  return greedy_search(Stepper(*this, phi, keyword_repr), search_options(1));
}

BeamHypothesis CaptionModel::beam_search(const Tensor& phi, const Tensor& keyword_repr, std::size_t beams) const {
  return keycap::beam_search(Stepper(*this, phi, keyword_repr), search_options(beams));
}

CaptionModel::Stepper::Stepper(const CaptionModel& model, const Tensor& phi, const Tensor& keyword_repr)
    : model_(model) {
  Graph g(false);
  ParamBinding bind(g, model.params_);
  Var phi_row = g.constant(phi.reshaped({1, phi.size()}));
  e_ = project_image(bind("decoder.image_proj"), phi_row).value();
  k_fused_ = fuse(g.constant(keyword_repr.reshaped({1, keyword_repr.size()})), phi_row).value();
}

CaptionModel::Stepper::State CaptionModel::Stepper::initial() const { return zero_state(model_.cfg_.generator); }

std::pair<std::vector<double>, CaptionModel::Stepper::State> CaptionModel::Stepper::step(const State& state,
                                                                                         std::size_t token) const {
  StepOutput out = model_.decode_step(state, e_, k_fused_, token);
  return {std::move(out.log_probs), std::move(out.state)};
}

std::vector<std::string> caption_tokens(const Vocabulary& vocab, const BeamHypothesis& hyp) {
  return decode(vocab, hyp.tokens);
}

}  // namespace keycap
