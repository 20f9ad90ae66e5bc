#include "keycap/training.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include <json.hpp>
#include <zlib.h>

#include "keycap/error.hpp"

namespace keycap {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw ConfigError("train: betas must lie in (0, 1)");
  if (!(eps > 0)) throw ConfigError("train: eps must be > 0");
  if (epochs == 0 || batch_size == 0) throw ConfigError("train: epochs and batch_size must be >= 1");
  if (grad_clip < 0) throw ConfigError("train: grad_clip must be >= 0");
}

AdamState AdamState::like(const Parameters& params) { return {params.zeros_like(), params.zeros_like(), 0}; }

void adam_step(Parameters& params, const Parameters& grads, AdamState& state, const TrainConfig& cfg) {
  auto& entries = params.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const Tensor& g = grads.entries()[k].value;
    if (g.shape() != entries[k].value.shape()) {
      throw ShapeError("adam_step: gradient for '" + entries[k].name + "' has shape " + shape_str(g.shape()));
    }
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient for parameter '" + entries[k].name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor& p = entries[k].value;
    const Tensor& g = grads.entries()[k].value;
    Tensor& m = state.m.entries()[k].value;
    Tensor& v = state.v.entries()[k].value;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

double clip_gradients(Parameters& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& e : grads.entries()) {
    for (double g : e.value.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& e : grads.entries()) {
      for (double& g : e.value.data()) g *= s;
    }
  }
  return norm;
}

namespace {

std::size_t predictions(const Example& ex) {
  if (ex.caption.true_length < 2) throw InputError("example '" + ex.id + "': caption shorter than 2 tokens");
  return ex.caption.true_length - 1;
}

}  // namespace

double dataset_loss(const CaptionModel& model, std::span<const Example> examples) {
  if (examples.empty()) throw InputError("dataset_loss: no examples");
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    const std::size_t t = predictions(ex);
    weighted += model.loss(ex) * static_cast<double>(t);
    tokens += t;
  }
  return weighted / static_cast<double>(tokens);
}

double batch_gradients(const CaptionModel& model, std::span<const Example* const> batch, Parameters& grads) {
  std::size_t tokens = 0;
  for (const Example* ex : batch) tokens += predictions(*ex);
  double loss = 0.0;
  for (const Example* ex : batch) {
    Graph g;
    ParamBinding bind(g, model.parameters());
    auto fwd = model.forward(bind, *ex);
    g.backward(fwd.tf.loss);
    const double w = static_cast<double>(fwd.tf.predictions) / static_cast<double>(tokens);
    bind.accumulate_gradients(grads, w);
    loss += w * fwd.tf.loss.value().item();
  }
  return loss;
}

// ---- checkpoint ----

namespace {

constexpr char kMagic[4] = {'K', 'C', 'A', 'P'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
  return v;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

struct Group {
  const char* name;
  const Parameters* params;
};

}  // namespace

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  nlohmann::ordered_json manifest;
  manifest["step"] = adam.step;
  manifest["vocab_fingerprint"] = vocab_fingerprint;
  manifest["config"] = config;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::vector<std::uint8_t> payload;
  const Group groups[] = {{"param", &params}, {"adam_m", &adam.m}, {"adam_v", &adam.v}};
  for (const auto& group : groups) {
    for (const auto& e : group.params->entries()) {
      nlohmann::ordered_json t;
      t["group"] = group.name;
      t["name"] = e.name;
      t["shape"] = e.value.shape();
      t["offset"] = payload.size();
      tensors.push_back(t);
      for (double d : e.value.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        put_u64(payload, bits);
      }
    }
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc_of(out));
  return out;
}

Checkpoint Checkpoint::from_bytes(std::span<const std::uint8_t> bytes) {
  auto need = [&](std::size_t offset, std::size_t n, const char* what) {
    if (bytes.size() < offset + n) throw FormatError(std::string("truncated checkpoint: missing ") + what, offset);
  };
  need(0, 4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  need(4, 4, "version");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")", 4);
  }
  need(8, 8, "manifest length");
  const std::uint64_t manifest_len = get_le(bytes, 8, 8);
  const std::size_t manifest_at = 16;
  if (manifest_len > bytes.size()) throw FormatError("manifest length exceeds file size", 8);
  need(manifest_at, manifest_len, "manifest");
  const std::size_t payload_len_at = manifest_at + manifest_len;
  need(payload_len_at, 8, "payload length");
  const std::uint64_t payload_len = get_le(bytes, payload_len_at, 8);
  const std::size_t payload_at = payload_len_at + 8;
  if (payload_len > bytes.size()) throw FormatError("payload length exceeds file size", payload_len_at);
  need(payload_at, payload_len, "payload");
  const std::size_t crc_at = payload_at + payload_len;
  need(crc_at, 4, "checksum");
  if (bytes.size() != crc_at + 4) throw FormatError("trailing bytes after checksum", crc_at + 4);
  const auto stored = static_cast<std::uint32_t>(get_le(bytes, crc_at, 4));
  if (stored != crc_of(bytes.first(crc_at))) throw FormatError("checksum mismatch", crc_at);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + manifest_at, bytes.begin() + payload_len_at);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what(), manifest_at);
  }
  Checkpoint c;
  try {
    c.adam.step = manifest.at("step").get<std::uint64_t>();
    c.vocab_fingerprint = manifest.at("vocab_fingerprint").get<std::uint32_t>();
    c.config = manifest.at("config").get<std::string>();
    for (const auto& t : manifest.at("tensors")) {
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      std::size_t count = 1;
      for (std::size_t d : shape) count *= d;
      if (offset + count * 8 > payload_len) throw FormatError("tensor extends past payload", payload_at + offset);
      std::vector<double> data(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t bits = get_le(bytes, payload_at + offset + 8 * i, 8);
        std::memcpy(&data[i], &bits, sizeof bits);
      }
      const std::string group = t.at("group").get<std::string>();
      Parameters* dst = group == "param" ? &c.params : group == "adam_m" ? &c.adam.m : group == "adam_v" ? &c.adam.v : nullptr;
      if (!dst) throw FormatError("unknown tensor group '" + group + "'", manifest_at);
      dst->add(t.at("name").get<std::string>(), Tensor(shape, std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what(), manifest_at);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("bad tensor shape: ") + e.what(), manifest_at);
  } catch (const InputError& e) {
    throw FormatError(e.what(), manifest_at);
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const auto bytes = c.to_bytes();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint to " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return Checkpoint::from_bytes(bytes);
}

// ---- loop ----

std::string LogRecord::format() const {
  char buf[160];
  if (val_loss) {
    std::snprintf(buf, sizeof buf, "epoch=%zu train_loss=%.17g val_loss=%.17g", epoch, loss, *val_loss);
  } else {
    std::snprintf(buf, sizeof buf, "epoch=%zu batch=%zu loss=%.17g", epoch, batch, loss);
  }
  return buf;
}

TrainResult train(CaptionModel& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& cfg, const std::function<void(const LogRecord&)>& on_record) {
  cfg.validate();
  if (train_set.empty()) throw InputError("train: empty training split");
  if (val_set.empty()) throw InputError("train: empty validation split");

  Parameters& params = model.parameters();
  AdamState adam = AdamState::like(params);
  SeededRng rng(cfg.seed);
  const std::size_t batch_size = std::min(cfg.batch_size, train_set.size());
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  auto emit = [&](LogRecord r) {
    if (on_record) on_record(r);
    result.log.push_back(std::move(r));
  };

  Parameters grads = params.zeros_like();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(start + batch_size, order.size());
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set[order[i]]);
      for (auto& e : grads.entries()) std::fill(e.value.data().begin(), e.value.data().end(), 0.0);
      const double loss = batch_gradients(model, batch, grads);
      if (!std::isfinite(loss)) throw NumericError("train: non-finite loss in epoch " + std::to_string(epoch));
      if (cfg.grad_clip > 0) clip_gradients(grads, cfg.grad_clip);
      adam_step(params, grads, adam, cfg);
      epoch_loss += loss * static_cast<double>(batch.size());
      emit({epoch, ++batch_no, loss, std::nullopt});
    }
    const double val = dataset_loss(model, val_set);
    emit({epoch, 0, epoch_loss / static_cast<double>(order.size()), val});
    if (val < result.best_val_loss) {
      result.best_val_loss = val;
      result.best_epoch = epoch;
      result.best.params = params;
      result.best.adam = adam;
    }
  }
  return result;
}

}  // namespace keycap
