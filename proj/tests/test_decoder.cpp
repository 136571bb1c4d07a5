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
#include <fstream>
#include <vector>

#include "doctest.h"
#include "kcaps/decoder.hpp"
#include "kcaps/gradcheck.hpp"
#include "kcaps/ops.hpp"

using namespace kcaps;

namespace {

Tensor uniform_tensor(Rng& rng, const Shape& shape, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

DecoderSpec tiny_spec() {
  DecoderSpec s;
  s.num_classes = 3;
  s.capsule_dim = 2;
  s.hidden = {5, 4};
  s.channels = 1;
  s.height = 2;
  s.width = 3;
  return s;
}

}  // namespace

TEST_CASE("mask keeps exactly one capsule") {
  CapsuleSet caps{Tensor({2, 2}, {1, 2, 3, 4})};
  CHECK(mask_capsules(caps, 0).storage() == std::vector<double>{1, 2, 0, 0});
  CHECK(mask_capsules(caps, 1).storage() == std::vector<double>{0, 0, 3, 4});
  CHECK_THROWS_AS(mask_capsules(caps, 2), std::out_of_range);
  CHECK_THROWS_AS(mask_capsules(caps, -1), std::out_of_range);
}

TEST_CASE("masks over all classes partition the flattened capsules") {
  Rng rng(1);
  CapsuleSet caps{uniform_tensor(rng, {4, 3})};
  std::vector<double> total(12, 0.0);
  for (int j = 0; j < 4; ++j) {
    const Tensor m = mask_capsules(caps, j);
    for (std::size_t i = 0; i < 12; ++i) total[i] += m[i];
    // Idempotent on an already-masked vector.
    CapsuleSet again{m.reshaped({4, 3})};
    CHECK(mask_capsules(again, j).storage() == m.storage());
  }
  CHECK(total == caps.vectors.storage());
}

TEST_CASE("batched mask agrees with the single-example mask") {
  Rng rng(2);
  const Tensor batch = uniform_tensor(rng, {3, 4, 2});
  const std::vector<int> cls{2, 0, 3};
  Graph g;
  const Tensor m = mask_capsules(g.constant(batch), cls).value();
  CHECK(m.shape() == Shape{3, 8});
  for (std::size_t n = 0; n < 3; ++n) {
    const Tensor one = mask_capsules(CapsuleSet::from_batch(batch, n), cls[n]);
    for (std::size_t i = 0; i < 8; ++i) CHECK(m[n * 8 + i] == one[i]);
  }
  const std::vector<int> bad{0, 4, 0};
  CHECK_THROWS_AS(mask_capsules(g.constant(batch), bad), std::out_of_range);
}

TEST_CASE("mnist decoder emits 784 pixels and zero input gives zero image") {
  ParameterStore store;
  Rng rng(3);
  Decoder dec(DecoderSpec{}, store, rng);
  CHECK(dec.spec().input_size() == 160);
  CHECK(dec.spec().output_size() == 784);
  Graph g;
  Var out = dec.decode(g, g.constant(Tensor({2, 160})));
  CHECK(out.shape() == Shape{2, 1, 28, 28});
  for (double v : out.value().values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(dec.decode(g, g.constant(Tensor({2, 159}))), ShapeError);
}

TEST_CASE("recon_error examples") {
  Rng rng(4);
  const Tensor a = uniform_tensor(rng, {2, 1, 3, 3}), b = uniform_tensor(rng, {2, 1, 3, 3});
  CHECK(recon_error(a, a) == 0.0);
  CHECK(recon_error(Tensor({5, 7}, 0.0), Tensor({5, 7}, 1.0)) == 1.0);
  CHECK(recon_error(a, b) == recon_error(b, a));
  CHECK(recon_error(a, b) > 0.0);
  CHECK_THROWS_AS(recon_error(a, Tensor({2, 9})), ShapeError);

  const auto per = recon_error_per_example(a, b);
  CHECK((per[0] + per[1]) / 2.0 == doctest::Approx(recon_error(a, b)).epsilon(1e-14));
  Graph g;
  CHECK(recon_error(g.constant(a), g.constant(b)).value().item() ==
        doctest::Approx(recon_error(a, b)).epsilon(1e-14));
}

TEST_CASE("decoder reconstruction loss matches finite differences") {
  ParameterStore store;
  Rng rng(5);
  Decoder dec(tiny_spec(), store, rng, 0.5);
  for (Parameter* p : store.all()) {
    if (p->name.ends_with(".b")) p->value = uniform_tensor(rng, p->value.shape(), 0.3);
  }
  const Tensor caps = uniform_tensor(rng, {2, 3, 2});
  const Tensor target = uniform_tensor(rng, {2, 1, 2, 3});
  const std::vector<int> cls{1, 2};
  auto loss = [&](Graph& g) {
    Var masked = mask_capsules(g.constant(caps), cls);
    return recon_error(g.constant(target), dec.decode(g, masked));
  };
  GradCheckResult r = finite_diff_check_all(store, loss, 1e-4);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("total loss composes margin or elbo with 100x reconstruction") {
  // Frozen parameters: the composed value equals the parts recombined.
  ParameterStore store;
  Rng rng(6);
  Decoder dec(tiny_spec(), store, rng, 0.5);
  const Tensor caps = uniform_tensor(rng, {2, 3, 2}, 0.5);
  const Tensor target = uniform_tensor(rng, {2, 1, 2, 3});
  const std::vector<int> cls{0, 1};
  Graph g;
  g.set_frozen_parameters(true);
  Var c = g.constant(caps);
  Var recon = recon_error(g.constant(target), dec.decode(g, mask_capsules(c, cls)));
  Var margin = margin_loss(c, cls);
  Var total = op::add(margin, op::scale(recon, 100.0));
  CHECK(total.value().item() ==
        doctest::Approx(margin.value().item() + 100.0 * recon.value().item()).epsilon(1e-15));
}

TEST_CASE("image grid export writes a PGM header and payload") {
  const auto path = std::filesystem::temp_directory_path() / "kcaps_grid_test.pgm";
  Rng rng(7);
  write_image_grid(path, uniform_tensor(rng, {5, 1, 4, 3}), 2);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  CHECK(magic == "P5");
  CHECK(w == 6);
  CHECK(h == 12);
  CHECK(maxv == 255);
  in.get();
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(payload.size() == 72);
  std::filesystem::remove(path);
}
