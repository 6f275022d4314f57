#include "fedcpc/cpc_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fedcpc/errors.hpp"

namespace fedcpc::cpc {

namespace {

std::string enc_name(std::size_t layer, const char* what) {
  return "enc." + std::to_string(layer) + "." + what;
}
std::string ar_name(std::size_t layer, const char* what) {
  return "ar." + std::to_string(layer) + "." + what;
}
std::string head_name(std::size_t k, const char* what) {
  return "head." + std::to_string(k) + "." + what;
}

ad::Var broadcast_rows(ad::Tape& tape, ad::Var row, std::size_t count) {
  return ad::matmul(tape.constant(ad::Tensor::ones({count, 1})), row);
}

}  // namespace

// ---------------------------------------------------------------------------
// CpcConfig

CpcConfig CpcConfig::paper(std::size_t future_steps) {
  CpcConfig c;
  c.future_steps = future_steps;
  c.preset = Preset::paper;
  return c;
}

CpcConfig CpcConfig::desk() {
  CpcConfig c;
  c.enc_layers = 2;
  c.enc_units = 64;
  c.ctx_layers = 1;
  c.ctx_units = 128;
  c.future_steps = 4;
  c.num_negatives = 7;
  c.preset = Preset::desk;
  return c;
}

std::size_t CpcConfig::min_frames() const noexcept { return std::max(future_steps + 1, candidates()); }

void CpcConfig::validate() const {
  if (input_dim == 0 || enc_layers == 0 || enc_units == 0 || ctx_layers == 0 || ctx_units == 0) {
    throw ConfigError("cpc: layer counts and widths must be >= 1");
  }
  if (future_steps < 1) throw ConfigError("cpc: future_steps must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("cpc: temperature must be > 0");
  if (num_negatives < 1) throw ConfigError("cpc: num_negatives must be >= 1");
  if (preset == Preset::paper) {
    if (input_dim != 768 || enc_layers != 3 || enc_units != 512 || ctx_layers != 6 || ctx_units != 1024) {
      throw ConfigError("cpc: paper preset requires 768 -> 3x512 encoder -> 6x1024 LSTM");
    }
  }
}

bool CpcConfig::same_architecture(const CpcConfig& o) const noexcept {
  return input_dim == o.input_dim && enc_layers == o.enc_layers && enc_units == o.enc_units &&
         ctx_layers == o.ctx_layers && ctx_units == o.ctx_units && future_steps == o.future_steps;
}

std::vector<ParamSpec> parameter_layout(const CpcConfig& config) {
  std::vector<ParamSpec> layout;
  std::size_t in = config.input_dim;
  for (std::size_t l = 0; l < config.enc_layers; ++l) {
    layout.push_back({enc_name(l, "weight"), {in, config.enc_units}});
    layout.push_back({enc_name(l, "bias"), {1, config.enc_units}});
    in = config.enc_units;
  }
  std::size_t h = config.ctx_units;
  for (std::size_t l = 0; l < config.ctx_layers; ++l) {
    layout.push_back({ar_name(l, "input_weight"), {in, 4 * h}});
    layout.push_back({ar_name(l, "recurrent_weight"), {h, 4 * h}});
    layout.push_back({ar_name(l, "bias"), {1, 4 * h}});
    in = h;
  }
  for (std::size_t k = 1; k <= config.future_steps; ++k) {
    layout.push_back({head_name(k, "weight"), {config.ctx_units, config.enc_units}});
    layout.push_back({head_name(k, "bias"), {1, config.enc_units}});
  }
  return layout;
}

std::size_t parameter_count(const CpcConfig& config) {
  std::size_t n = 0;
  for (const auto& spec : parameter_layout(config)) n += ad::shape_size(spec.shape);
  return n;
}

// ---------------------------------------------------------------------------
// ModelParams

ModelParams::ModelParams(std::vector<ParamSpec> layout, std::vector<ad::Tensor> tensors)
    : layout_(std::move(layout)), tensors_(std::move(tensors)) {
  if (layout_.size() != tensors_.size()) throw DimensionError("ModelParams: layout/tensor count mismatch");
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].shape != tensors_[i].shape()) {
      throw DimensionError("ModelParams: " + layout_[i].name + " expects " + ad::shape_to_string(layout_[i].shape) +
                           ", got " + ad::shape_to_string(tensors_[i].shape()));
    }
  }
}

ModelParams ModelParams::zeros(const CpcConfig& config) {
  auto layout = parameter_layout(config);
  std::vector<ad::Tensor> tensors;
  tensors.reserve(layout.size());
  for (const auto& spec : layout) tensors.push_back(ad::Tensor::zeros(spec.shape));
  return ModelParams(std::move(layout), std::move(tensors));
}

ModelParams ModelParams::unflatten(std::vector<ParamSpec> layout, std::span<const double> flat) {
  std::vector<ad::Tensor> tensors;
  std::size_t offset = 0;
  for (const auto& spec : layout) {
    std::size_t n = ad::shape_size(spec.shape);
    if (offset + n > flat.size()) throw DimensionError("unflatten: vector too short");
    tensors.emplace_back(spec.shape, std::vector<double>(flat.begin() + offset, flat.begin() + offset + n));
    offset += n;
  }
  if (offset != flat.size()) throw DimensionError("unflatten: vector too long");
  return ModelParams(std::move(layout), std::move(tensors));
}

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].name == name) return i;
  throw ConfigError("no parameter named '" + name + "'");
}

const ad::Tensor& ModelParams::get(const std::string& name) const { return tensors_[index_of(name)]; }
ad::Tensor& ModelParams::get(const std::string& name) { return tensors_[index_of(name)]; }

std::size_t ModelParams::flat_size() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(flat_size());
  for (const auto& t : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

void ModelParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != flat_size()) {
    throw DimensionError("assign_flat: expected " + std::to_string(flat_size()) + " values, got " +
                         std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& t : tensors_) {
    std::copy_n(flat.begin() + offset, t.size(), t.mutable_values().begin());
    offset += t.size();
  }
}

CpcConfig ModelParams::infer_config(const CpcConfig& base) const {
  CpcConfig c = base;
  std::size_t enc = 0;
  std::size_t ar = 0;
  std::size_t heads = 0;
  for (const auto& spec : layout_) {
    if (spec.name.ends_with(".weight") && spec.name.starts_with("enc.")) ++enc;
    if (spec.name.ends_with(".recurrent_weight")) ++ar;
    if (spec.name.ends_with(".weight") && spec.name.starts_with("head.")) ++heads;
  }
  if (enc == 0 || ar == 0 || heads == 0) throw ConfigError("parameters do not describe a CPC model");
  const auto& enc0 = get(enc_name(0, "weight")).shape();
  c.input_dim = enc0[0];
  c.enc_units = enc0[1];
  c.enc_layers = enc;
  c.ctx_units = get(ar_name(0, "recurrent_weight")).shape()[0];
  c.ctx_layers = ar;
  c.future_steps = heads;
  if (parameter_layout(c) != layout_) throw ConfigError("parameter layout is not a CPC layout");
  return c;
}

bool ModelParams::operator==(const ModelParams& other) const {
  return layout_ == other.layout_ && tensors_ == other.tensors_;
}

ModelParams init_params(const CpcConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params = ModelParams::zeros(config);
  Rng rng(derive_seed({seed, 0x1417}));
  for (std::size_t i = 0; i < params.layout().size(); ++i) {
    const auto& spec = params.layout()[i];
    double fan_in;
    if (spec.name.starts_with("enc.")) {
      fan_in = static_cast<double>(spec.name.ends_with("weight") ? spec.shape[0]
                                                                : params.layout()[i - 1].shape[0]);
    } else if (spec.name.starts_with("ar.")) {
      fan_in = static_cast<double>(config.ctx_units);
    } else {
      fan_in = static_cast<double>(config.ctx_units);
    }
    double a = std::sqrt(1.0 / fan_in);
    std::uniform_real_distribution<double> dist(-a, a);
    auto values = params.tensors()[i].mutable_values();
    for (double& v : values) v = dist(rng);
    if (spec.name.starts_with("ar.") && spec.name.ends_with(".bias")) {
      std::size_t h = config.ctx_units;
      std::fill(values.begin() + h, values.begin() + 2 * h, 1.0);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Graph-level forward

BoundParams bind_params(ad::Tape& tape, const ModelParams& params, bool trainable) {
  CpcConfig c = params.infer_config();
  BoundParams b;
  for (const auto& t : params.tensors()) {
    ad::Tensor copy = t;
    copy.set_requires_grad(trainable);
    b.all.push_back(tape.leaf(std::move(copy)));
  }
  std::size_t i = 0;
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    b.enc_weight.push_back(b.all[i++]);
    b.enc_bias.push_back(b.all[i++]);
  }
  for (std::size_t l = 0; l < c.ctx_layers; ++l) {
    ad::LstmWeights w;
    w.input = b.all[i++];
    w.recurrent = b.all[i++];
    w.bias = b.all[i++];
    b.ar.push_back(w);
  }
  for (std::size_t k = 0; k < c.future_steps; ++k) {
    b.head_weight.push_back(b.all[i++]);
    b.head_bias.push_back(b.all[i++]);
  }
  return b;
}

ad::Var encode(const BoundParams& params, ad::Var x) {
  const ad::Tensor& xv = x.value();
  std::size_t expected = params.enc_weight.front().value().rows();
  if (xv.rank() != 2 || xv.cols() != expected) {
    throw ConfigError("encode: input has shape " + ad::shape_to_string(xv.shape()) + ", expected T x " +
                      std::to_string(expected));
  }
  ad::Tape& tape = x.tape();
  std::size_t frames = xv.rows();
  ad::Var h = x;
  for (std::size_t l = 0; l < params.enc_weight.size(); ++l) {
    h = ad::relu(ad::add(ad::matmul(h, params.enc_weight[l]), broadcast_rows(tape, params.enc_bias[l], frames)));
  }
  return h;
}

ad::Var contextualize(const BoundParams& params, ad::Var z) {
  const ad::Tensor& zv = z.value();
  std::size_t expected = params.ar.front().input.value().rows();
  if (zv.rank() != 2 || zv.cols() != expected) {
    throw ConfigError("contextualize: latents have shape " + ad::shape_to_string(zv.shape()) + ", expected T x " +
                      std::to_string(expected));
  }
  ad::Tape& tape = z.tape();
  std::size_t frames = zv.rows();
  ad::Var layer_input = z;
  for (const auto& w : params.ar) {
    std::size_t hidden = w.recurrent.value().rows();
    ad::Var projected = ad::matmul(layer_input, w.input);
    ad::LstmState state{tape.constant(ad::Tensor::zeros({1, hidden})), tape.constant(ad::Tensor::zeros({1, hidden}))};
    std::vector<ad::Var> outputs;
    outputs.reserve(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      state = ad::lstm_cell_projected(ad::slice_rows(projected, t, t + 1), state, w);
      outputs.push_back(state.h);
    }
    layer_input = ad::concat_rows(outputs);
  }
  return layer_input;
}

std::vector<std::size_t> sample_negatives(std::size_t target, std::size_t length, std::size_t count, Rng& rng) {
  if (length < count + 1) {
    throw TooShortError("utterance of " + std::to_string(length) + " frames cannot supply " + std::to_string(count) +
                        " negatives");
  }
  if (target >= length) throw ContractError("sample_negatives: target outside the sequence");
  std::vector<std::size_t> pool;
  pool.reserve(length - 1);
  for (std::size_t i = 0; i < length; ++i)
    if (i != target) pool.push_back(i);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

ad::Var contrastive_nll(ad::Var candidate_scores) {
  const ad::Tensor& s = candidate_scores.value();
  std::size_t rows = s.rows();
  std::size_t cols = s.cols();
  ad::Var log_probs = ad::log_softmax(candidate_scores);
  std::vector<std::size_t> first(rows);
  for (std::size_t r = 0; r < rows; ++r) first[r] = r * cols;
  ad::Var picked = ad::gather(log_probs, std::move(first), {rows});
  return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(rows));
}

ad::Var infonce_loss(const BoundParams& params, ad::Var z, ad::Var c, const CpcConfig& config, Rng& rng) {
  const ad::Tensor& zv = z.value();
  const ad::Tensor& cv = c.value();
  std::size_t frames = zv.rows();
  if (cv.rows() != frames) throw DimensionError("infonce_loss: latent and context lengths differ");
  if (params.head_weight.size() != config.future_steps) {
    throw ConfigError("infonce_loss: model has " + std::to_string(params.head_weight.size()) + " heads, config wants " +
                      std::to_string(config.future_steps));
  }
  if (frames <= config.future_steps) {
    throw TooShortError("sequence of " + std::to_string(frames) + " frames is too short for " +
                        std::to_string(config.future_steps) + " prediction steps");
  }
  if (frames < config.candidates()) {
    throw TooShortError("sequence of " + std::to_string(frames) + " frames cannot supply " +
                        std::to_string(config.num_negatives) + " negatives");
  }
  ad::Tape& tape = z.tape();
  std::size_t n = config.candidates();
  ad::Var latents_t = ad::transpose(z);
  ad::Var total;
  for (std::size_t k = 1; k <= config.future_steps; ++k) {
    std::size_t rows = frames - k;
    ad::Var ctx = ad::slice_rows(c, 0, rows);
    ad::Var prediction = ad::add(ad::matmul(ctx, params.head_weight[k - 1]),
                                 broadcast_rows(tape, params.head_bias[k - 1], rows));
    // scores[t][j] = z_j . (W_k c_t + b_k) / kappa
    ad::Var scores = ad::scale(ad::matmul(prediction, latents_t), 1.0 / config.temperature);
    std::vector<std::size_t> picks;
    picks.reserve(rows * n);
    for (std::size_t t = 0; t < rows; ++t) {
      std::size_t target = t + k;
      picks.push_back(t * frames + target);
      for (std::size_t j : sample_negatives(target, frames, config.num_negatives, rng)) picks.push_back(t * frames + j);
    }
    ad::Var term = contrastive_nll(ad::gather(scores, std::move(picks), {rows, n}));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Value-level helpers

LatentSequence encode(const ModelParams& params, const ad::Tensor& x) {
  ad::Tape tape;
  BoundParams b = bind_params(tape, params, false);
  return {encode(b, tape.constant(x)).value()};
}

ContextSequence contextualize(const ModelParams& params, const LatentSequence& z) {
  ad::Tape tape;
  BoundParams b = bind_params(tape, params, false);
  return {contextualize(b, tape.constant(z.z)).value()};
}

double infonce_value(const ModelParams& params, const ad::Tensor& x, const CpcConfig& config,
                     std::uint64_t negative_seed) {
  ad::Tape tape;
  BoundParams b = bind_params(tape, params, false);
  ad::Var z = encode(b, tape.constant(x));
  ad::Var c = contextualize(b, z);
  Rng rng(negative_seed);
  return infonce_loss(b, z, c, config, rng).value().item();
}

LossAndGrad weighted_loss_and_grad(const ModelParams& params, std::span<const Sample> samples,
                                   const CpcConfig& config) {
  LossAndGrad out;
  out.grad.assign(params.flat_size(), 0.0);
  for (const Sample& s : samples) {
    if (s.features == nullptr) throw ContractError("weighted_loss_and_grad: sample without features");
    ad::Tape tape;
    BoundParams b = bind_params(tape, params, true);
    ad::Var z = encode(b, tape.constant(*s.features));
    ad::Var c = contextualize(b, z);
    Rng rng(s.negative_seed);
    ad::Var loss = infonce_loss(b, z, c, config, rng);
    tape.backward(loss);
    out.loss += s.weight * loss.value().item();
    std::size_t offset = 0;
    for (ad::Var p : b.all) {
      ad::Tensor g = tape.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) out.grad[offset + i] += s.weight * g[i];
      offset += g.size();
    }
  }
  return out;
}

}  // namespace fedcpc::cpc
