/*
 * Copyright 2026 The kcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "kcaps/models.hpp"

#include <algorithm>
#include <cmath>

#include "kcaps/ops.hpp"

namespace kcaps {

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kCapsNet: return "capsnet";
    case ModelKind::kKcn: return "kcn";
    case ModelKind::kKcnGp: return "kcn-gp";
    case ModelKind::kSurrogate: return "surrogate";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  for (ModelKind k : {ModelKind::kCapsNet, ModelKind::kKcn, ModelKind::kKcnGp, ModelKind::kSurrogate}) {
    if (model_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown model kind '" + name + "' (expected capsnet, kcn, kcn-gp or surrogate)");
}

std::string attack_loss_name(AttackLoss loss) {
  return loss == AttackLoss::kClassification ? "classification" : "classification+reconstruction";
}

AttackLoss parse_attack_loss(const std::string& name) {
  if (name == "classification") return AttackLoss::kClassification;
  if (name == "classification+reconstruction") return AttackLoss::kClassificationRecon;
  throw ConfigError("unknown attack loss '" + name +
                    "' (expected classification or classification+reconstruction)");
}

AttackLoss default_attack_loss(ModelKind kind) {
  return kind == ModelKind::kCapsNet ? AttackLoss::kClassificationRecon : AttackLoss::kClassification;
}

ModelConfig ModelConfig::for_dataset(ModelKind kind, const DatasetSpec& data) {
  ModelConfig c;
  c.kind = kind;
  c.capsnet = data.channels == 1 ? CapsNetConfig::mnist() : CapsNetConfig::rgb32();
  c.capsnet.in_channels = data.channels;
  c.capsnet.height = data.height;
  c.capsnet.width = data.width;
  c.capsnet.num_classes = data.num_classes;
  return c;
}

void ModelConfig::validate() const {
  if (kind != ModelKind::kSurrogate) capsnet.validate();
  if (recon_weight < 0.0) throw ConfigError("recon_weight must be >= 0");
  if (uses_gp()) {
    if (num_inducing == 0) throw ConfigError("num_inducing must be >= 1");
    if (mc_train == 0 || mc_eval == 0) throw ConfigError("mc sample counts must be >= 1");
    if (!(gamma_init >= 0.0)) throw ConfigError("gamma_init must be >= 0 (0 selects 1 / feature_dim)");
  }
  if (uses_decoder()) {
    for (std::size_t h : decoder_hidden) {
      if (h == 0) throw ConfigError("decoder hidden sizes must be positive");
    }
  }
}

SurrogateCnn::SurrogateCnn(const DatasetSpec& data, std::size_t num_classes, ParameterStore& store,
                           Rng& rng, const std::string& prefix) {
  // Same-padded 5x5 convs, each followed by 2x2 pooling.
  const std::size_t c = data.channels, h = data.height / 2 / 2, w = data.width / 2 / 2;
  if (h == 0 || w == 0) throw ConfigError("surrogate: image too small for two 2x2 pools");
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  w1_ = &store.add(prefix + ".conv1.w", rng.normal_tensor({32, c, 5, 5}, he(c * 25)));
  b1_ = &store.add(prefix + ".conv1.b", Tensor({32}));
  w2_ = &store.add(prefix + ".conv2.w", rng.normal_tensor({64, 32, 5, 5}, he(32 * 25)));
  b2_ = &store.add(prefix + ".conv2.b", Tensor({64}));
  const std::size_t flat = 64 * h * w;
  fc_w_ = &store.add(prefix + ".fc.w", rng.normal_tensor({num_classes, flat}, std::sqrt(1.0 / flat)));
  fc_b_ = &store.add(prefix + ".fc.b", Tensor({num_classes}));
}

Var SurrogateCnn::forward(Graph& g, const Var& x) const {
  Var h = op::relu(op::conv2d(x, g.param(*w1_), g.param(*b1_), {1, 2}));
  h = op::maxpool2d(h, 2);
  h = op::relu(op::conv2d(h, g.param(*w2_), g.param(*b2_), {1, 2}));
  h = op::maxpool2d(h, 2);
  const Shape s = h.shape();
  return op::linear(op::reshape(h, {s[0], s[1] * s[2] * s[3]}), g.param(*fc_w_), g.param(*fc_b_));
}

namespace {

Var sum_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  Tensor onehot({s[0], s[1]});
  for (std::size_t i = 0; i < s[0]; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= s[1]) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    }
    onehot[i * s[1] + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Var ll = op::mul(op::log_softmax(logits, 1), logits.graph().constant(std::move(onehot)));
  return op::neg(op::sum(ll));
}

Var flatten_capsules(const Var& caps) {
  const Shape s = caps.shape();
  return op::reshape(caps, {s[0], s[1] * s[2]});
}

void check_batch(const Var& x, std::span<const int> labels, const DatasetSpec& data) {
  const Shape s = x.shape();
  if (s.size() != 4 || s[1] != data.channels || s[2] != data.height || s[3] != data.width) {
    throw ShapeError("model: expected [N," + std::to_string(data.channels) + "," +
                     std::to_string(data.height) + "," + std::to_string(data.width) + "], got " +
                     shape_str(s));
  }
  if (labels.size() != s[0]) throw ShapeError("model: label count does not match batch");
}

}  // namespace

Model::Model(ModelConfig config, const DatasetSpec& data, Rng& rng)
    : config_(std::move(config)), data_(data) {
  config_.validate();
  data_.validate();
  if (config_.kind == ModelKind::kSurrogate) {
    cnn_ = std::make_unique<SurrogateCnn>(data_, data_.num_classes, store_, rng);
    return;
  }
  const CapsNetConfig& cc = config_.capsnet;
  if (cc.in_channels != data_.channels || cc.height != data_.height || cc.width != data_.width) {
    throw ConfigError("capsnet input geometry does not match dataset " + data_.name);
  }
  capsnet_ = std::make_unique<CapsNet>(cc, store_, rng);
  if (config_.uses_decoder()) {
    DecoderSpec ds;
    ds.num_classes = cc.num_classes;
    ds.capsule_dim = cc.capsule_dim;
    ds.hidden = config_.decoder_hidden;
    ds.channels = data_.channels;
    ds.height = data_.height;
    ds.width = data_.width;
    decoder_ = std::make_unique<Decoder>(ds, store_, rng, config_.decoder_init_std);
  }
  if (config_.uses_gp()) {
    gp_ = std::make_unique<SvgpHead>(cc.num_classes * cc.capsule_dim, config_.num_inducing,
                                     cc.num_classes, store_, rng, config_.inducing_init_std, "gp",
                                     config_.gamma_init);
  }
  // The decoder-free ablation must never carry reconstruction parameters.
  if (config_.kind == ModelKind::kKcnGp && decoder_) throw std::logic_error("kcn-gp built a decoder");
}

SvgpHead& Model::gp() {
  if (!gp_) throw ConfigError(model_kind_name(kind()) + " has no GP head");
  return *gp_;
}

Var Model::capsules(Graph& g, const Var& x) const {
  if (!capsnet_) throw ConfigError(model_kind_name(kind()) + " has no capsules");
  return capsnet_->forward(g, x);
}

Var Model::loss(Graph& g, const Var& x, std::span<const int> labels, std::size_t dataset_size,
                Rng& rng, LossParts* parts) const {
  check_batch(x, labels, data_);
  LossParts p;
  Var total;
  if (cnn_) {
    total = sum_cross_entropy(cnn_->forward(g, x), labels);
    p.classification = total.value().item();
  } else {
    Var caps = capsules(g, x);
    if (gp_) {
      const SvgpState q = gp_->state(g);
      const GaussianMarginals f = posterior_marginals(flatten_capsules(caps), q, gp_->jitter);
      const Shape fs = f.mean.shape();
      Tensor eps = rng.normal_tensor({config_.mc_train, fs[0], fs[1]});
      Var ell = expected_log_likelihood(f, labels, eps);
      Var kl = kl_to_prior(q, gp_->jitter);
      const double frac = static_cast<double>(labels.size()) / static_cast<double>(dataset_size);
      total = op::add(op::neg(ell), op::scale(kl, frac));
      p.classification = -ell.value().item();
      p.kl = kl.value().item();
    } else {
      total = margin_loss(caps, labels);
      p.classification = total.value().item();
    }
    if (decoder_) {
      Var recon = recon_error(x, decoder_->decode(g, mask_capsules(caps, labels)));
      p.recon = recon.value().item();
      total = op::add(total, op::scale(recon, config_.recon_weight));
    }
  }
  p.total = total.value().item();
  if (parts) *parts = p;
  return total;
}

Var Model::attack_loss(Graph& g, const Var& x, std::span<const int> labels, AttackLoss variant,
                       Rng& rng) const {
  check_batch(x, labels, data_);
  if (variant == AttackLoss::kClassificationRecon && !decoder_) {
    throw ConfigError(model_kind_name(kind()) + " has no decoder for a reconstruction attack loss");
  }
  if (cnn_) return sum_cross_entropy(cnn_->forward(g, x), labels);
  Var caps = capsules(g, x);
  Var total;
  if (gp_) {
    const SvgpState q = gp_->state(g);
    const GaussianMarginals f = posterior_marginals(flatten_capsules(caps), q, gp_->jitter);
    const Shape fs = f.mean.shape();
    total = op::neg(expected_log_likelihood(f, labels, rng.normal_tensor({config_.mc_train, fs[0], fs[1]})));
  } else {
    total = margin_loss(caps, labels);
  }
  if (variant == AttackLoss::kClassificationRecon) {
    Var recon = recon_error(x, decoder_->decode(g, mask_capsules(caps, labels)));
    total = op::add(total, op::scale(recon, config_.recon_weight));
  }
  return total;
}

Tensor Model::input_gradient(const Tensor& x, std::span<const int> labels, AttackLoss variant,
                             Rng& rng) const {
  Graph g;
  g.set_frozen_parameters(true);
  Var xv = g.input("x", x, true);
  g.backward(attack_loss(g, xv, labels, variant, rng));
  return xv.grad();
}

ModelOutput Model::predict(const Tensor& x, Rng& rng, std::size_t batch) const {
  if (x.rank() != 4) throw ShapeError("predict: expected [N,C,H,W], got " + shape_str(x.shape()));
  if (batch == 0) throw std::invalid_argument("predict: batch must be >= 1");
  const std::size_t n = x.dim(0), nc = data_.num_classes;
  const std::size_t per = x.numel() / std::max<std::size_t>(n, 1);
  ModelOutput out;
  out.predicted.resize(n);
  if (cnn_ || gp_) out.probs = Tensor({n, nc});
  if (capsnet_) out.capsules = Tensor({n, nc, config_.capsnet.capsule_dim});
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch), b = hi - lo;
    Shape bs = x.shape();
    bs[0] = b;
    Tensor xb(bs, std::vector<double>(x.data() + lo * per, x.data() + hi * per));
    Graph g;
    g.set_frozen_parameters(true);
    Var xv = g.constant(std::move(xb));
    Tensor probs;
    if (cnn_) {
      probs = op::softmax(cnn_->forward(g, xv), 1).value();
    } else {
      Var caps = capsules(g, xv);
      const Tensor& cv = caps.value();
      std::copy(cv.data(), cv.data() + cv.numel(), out.capsules.data() + lo * cv.numel() / b);
      if (gp_) {
        const GaussianMarginals f = posterior_marginals(flatten_capsules(caps), gp_->state(g), gp_->jitter);
        probs = predict_probs(f.mean.value(), f.var.value(), config_.mc_eval, rng);
      } else {
        for (std::size_t i = 0; i < b; ++i) {
          const std::vector<double> norms = CapsuleSet::from_batch(cv, i).norms();
          out.predicted[lo + i] = predict_class(norms);
        }
      }
    }
    if (!probs.empty()) {
      std::copy(probs.data(), probs.data() + probs.numel(), out.probs.data() + lo * nc);
      for (std::size_t i = 0; i < b; ++i) {
        out.predicted[lo + i] = predict_class(std::span<const double>(probs.data() + i * nc, nc));
      }
    }
  }
  return out;
}

Tensor Model::reconstruct(const Tensor& caps, std::span<const int> classes) const {
  if (!decoder_) throw ConfigError(model_kind_name(kind()) + " has no decoder");
  Graph g;
  g.set_frozen_parameters(true);
  return decoder_->decode(g, mask_capsules(g.constant(caps), classes)).value();
}

void Model::init_inducing_from(const Tensor& x) {
  if (!gp_) throw ConfigError(model_kind_name(kind()) + " has no GP head");
  if (x.rank() != 4 || x.dim(0) != gp_->num_inducing()) {
    throw ShapeError("init_inducing_from: expected " + std::to_string(gp_->num_inducing()) +
                     " images, got " + shape_str(x.shape()));
  }
  Graph g;
  g.set_frozen_parameters(true);
  gp_->set_inducing(flatten_capsules(capsules(g, g.constant(x))).value());
}

double accuracy(const Model& model, const Tensor& x, std::span<const int> labels,
                std::uint64_t eval_seed, std::size_t batch) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) throw ShapeError("accuracy: images and labels differ");
  if (labels.empty()) throw std::invalid_argument("accuracy: empty evaluation set");
  Rng rng(eval_seed);
  const ModelOutput out = model.predict(x, rng, batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += out.predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace kcaps
