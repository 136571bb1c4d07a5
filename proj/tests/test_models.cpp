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

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "kcaps/decoder.hpp"
#include "kcaps/ops.hpp"
#include "kcaps/svgp.hpp"
#include "tiny_models.hpp"

using namespace kcaps;

namespace {

const ModelKind kAllKinds[] = {ModelKind::kCapsNet, ModelKind::kKcn, ModelKind::kKcnGp, ModelKind::kSurrogate};

bool has_prefix(const ParameterStore& store, const std::string& prefix) {
  for (const Parameter* p : store.all()) {
    if (p->name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("model kind and attack loss names round-trip") {
  for (ModelKind k : kAllKinds) CHECK(parse_model_kind(model_kind_name(k)) == k);
  CHECK(model_kind_name(ModelKind::kKcnGp) == "kcn-gp");
  CHECK_THROWS_AS(parse_model_kind("resnet"), ConfigError);
  for (AttackLoss l : {AttackLoss::kClassification, AttackLoss::kClassificationRecon}) {
    CHECK(parse_attack_loss(attack_loss_name(l)) == l);
  }
  CHECK(default_attack_loss(ModelKind::kCapsNet) == AttackLoss::kClassificationRecon);
  CHECK(default_attack_loss(ModelKind::kKcn) == AttackLoss::kClassification);
}

TEST_CASE("each kind owns exactly its components") {
  for (ModelKind k : kAllKinds) {
    auto m = build_model(testing::tiny_config(k), 1);
    const ParameterStore& p = m->parameters();
    INFO(model_kind_name(k));
    CHECK(m->has_decoder() == (k == ModelKind::kKcn || k == ModelKind::kCapsNet));
    CHECK(m->has_gp() == (k == ModelKind::kKcn || k == ModelKind::kKcnGp));
    CHECK(has_prefix(p, "decoder.") == m->has_decoder());
    CHECK(has_prefix(p, "gp.") == m->has_gp());
    CHECK(has_prefix(p, "cnn.") == (k == ModelKind::kSurrogate));
  }
}

TEST_CASE("same seed builds identical parameters") {
  for (ModelKind k : kAllKinds) {
    auto a = build_model(testing::tiny_config(k), 9);
    auto b = build_model(testing::tiny_config(k), 9);
    auto c = build_model(testing::tiny_config(k), 10);
    CHECK(a->parameters().checksum() == b->parameters().checksum());
    CHECK(a->parameters().checksum() != c->parameters().checksum());
  }
}

TEST_CASE("training loss composition matches its parts") {
  const Splits d = testing::tiny_splits(1);
  const Tensor x = eval_images(d.test);
  const std::size_t n = d.test.size();
  for (ModelKind k : {ModelKind::kKcn, ModelKind::kKcnGp, ModelKind::kCapsNet}) {
    const ExperimentConfig cfg = testing::tiny_config(k);
    auto m = build_model(cfg, 2);
    Graph g;
    g.set_frozen_parameters(true);
    Rng rng(5);
    LossParts parts;
    const double total = m->loss(g, g.constant(x), d.test.labels, 100, rng, &parts).value().item();
    INFO(model_kind_name(k));
    CHECK(total == parts.total);
    const double w = m->has_decoder() ? cfg.model.recon_weight : 0.0;
    const double kl_w = m->has_gp() ? static_cast<double>(n) / 100.0 : 0.0;
    CHECK(total == doctest::Approx(parts.classification + kl_w * parts.kl + w * parts.recon).epsilon(1e-12));
    if (!m->has_decoder()) CHECK(parts.recon == 0.0);
    if (!m->has_gp()) CHECK(parts.kl == 0.0);

    // The recon term is the decoder error on the true-class mask.
    if (m->has_decoder()) {
      Graph g2;
      g2.set_frozen_parameters(true);
      const Tensor caps = m->capsules(g2, g2.constant(x)).value();
      const auto per = recon_error_per_example(x, m->reconstruct(caps, d.test.labels));
      double mean = 0.0;
      for (double v : per) mean += v / static_cast<double>(per.size());
      CHECK(parts.recon == doctest::Approx(mean).epsilon(1e-12));
    }
  }
}

TEST_CASE("kcn-gp loss is the negative elbo on the capsule features") {
  const Splits d = testing::tiny_splits(1);
  const Tensor x = eval_images(d.test);
  auto m = build_model(testing::tiny_config(ModelKind::kKcnGp), 3);
  Graph g;
  g.set_frozen_parameters(true);
  Rng r1(8), r2(8);
  const double loss = m->loss(g, g.constant(x), d.test.labels, 50, r1).value().item();
  Var caps = m->capsules(g, g.constant(x));
  Var feats = op::reshape(caps, {x.dim(0), caps.shape()[1] * caps.shape()[2]});
  const double bound =
      elbo(feats, d.test.labels, m->gp().state(g), m->config().mc_train, 50, r2).value().item();
  CHECK(loss == doctest::Approx(-bound).epsilon(1e-12));
}

TEST_CASE("surrogate with zero weights gives uniform cross-entropy") {
  auto m = build_model(testing::tiny_config(ModelKind::kSurrogate), 4);
  for (Parameter* p : m->parameters().all()) p->value.fill(0.0);
  const Splits d = testing::tiny_splits(1);
  const Tensor x = eval_images(d.test);
  Graph g;
  Rng rng(0);
  const double loss = m->loss(g, g.constant(x), d.test.labels, 10, rng).value().item();
  CHECK(loss == doctest::Approx(static_cast<double>(d.test.size()) * std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("predictions are distributions and batching is transparent") {
  const Splits d = testing::tiny_splits(2);
  const Tensor x = eval_images(d.test);
  for (ModelKind k : kAllKinds) {
    auto m = build_model(testing::tiny_config(k), 6);
    Rng r1(3), r2(3);
    const ModelOutput full = m->predict(x, r1);
    INFO(model_kind_name(k));
    CHECK(full.predicted.size() == d.test.size());
    if (k != ModelKind::kCapsNet) {
      REQUIRE(full.probs.shape() == Shape{d.test.size(), 10});
      for (std::size_t i = 0; i < d.test.size(); ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < 10; ++c) s += full.probs[i * 10 + c];
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
    if (k != ModelKind::kSurrogate) CHECK(full.capsules.shape() == Shape{d.test.size(), 10, 4});
    // Deterministic kinds do not depend on chunking.
    if (!m->has_gp()) CHECK(m->predict(x, r2, 7).predicted == full.predicted);
  }
}

TEST_CASE("checkpoint round trip reproduces predictions") {
  const auto dir = testing::scratch_dir("model_ckpt");
  const Splits d = testing::tiny_splits(1);
  const Tensor x = eval_images(d.test);
  for (ModelKind k : kAllKinds) {
    auto m = build_model(testing::tiny_config(k), 7);
    Checkpoint ck;
    m->save_parameters(ck);
    ck.save(dir / "m.kcaps");
    auto fresh = build_model(testing::tiny_config(k), 8);
    fresh->load_parameters(Checkpoint::load(dir / "m.kcaps"));
    CHECK(fresh->parameters().checksum() == m->parameters().checksum());
    Rng r1(1), r2(1);
    const ModelOutput a = m->predict(x, r1), b = fresh->predict(x, r2);
    CHECK(a.predicted == b.predicted);
    CHECK(a.probs.storage() == b.probs.storage());
    CHECK(a.capsules.storage() == b.capsules.storage());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("inducing points come from capsule features") {
  const Splits d = testing::tiny_splits(1);
  auto m = build_model(testing::tiny_config(ModelKind::kKcn), 2);
  const std::size_t mz = m->gp().num_inducing();
  std::vector<std::size_t> idx(mz);
  for (std::size_t i = 0; i < mz; ++i) idx[i] = i;
  const Tensor x = make_batch(d.train, idx, BatchMode::kEval, 0, nullptr);
  m->init_inducing_from(x);
  Graph g;
  g.set_frozen_parameters(true);
  const Tensor caps = m->capsules(g, g.constant(x)).value();
  CHECK(m->parameters().get("gp.inducing").value.storage() == caps.storage());
  CHECK_THROWS_AS(m->init_inducing_from(Tensor({mz + 1, 1, 28, 28})), ShapeError);
  auto caps_only = build_model(testing::tiny_config(ModelKind::kCapsNet), 2);
  CHECK_THROWS_AS(caps_only->init_inducing_from(x), ConfigError);
}

TEST_CASE("model config validation") {
  ModelConfig c = ModelConfig::for_dataset(ModelKind::kKcn, DatasetSpec::mnist());
  CHECK_NOTHROW(c.validate());
  c.num_inducing = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::for_dataset(ModelKind::kKcn, DatasetSpec::mnist());
  c.recon_weight = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::for_dataset(ModelKind::kKcn, DatasetSpec::mnist());
  c.gamma_init = -0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
