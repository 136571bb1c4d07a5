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

#include "kcaps/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "kcaps/ops.hpp"

namespace kcaps {

void DecoderSpec::validate() const {
  if (input_size() == 0 || output_size() == 0) throw ConfigError("decoder: empty input or output");
  for (std::size_t h : hidden) {
    if (h == 0) throw ConfigError("decoder: hidden layer sizes must be positive");
  }
}

Tensor mask_capsules(const CapsuleSet& caps, int cls) {
  const std::size_t nc = caps.num_classes(), k = caps.dim();
  if (cls < 0 || static_cast<std::size_t>(cls) >= nc) {
    throw std::out_of_range("mask_capsules: class " + std::to_string(cls) + " out of range");
  }
  Tensor out({nc * k});
  const std::size_t off = static_cast<std::size_t>(cls) * k;
  for (std::size_t d = 0; d < k; ++d) out[off + d] = caps.vectors[off + d];
  return out;
}

Var mask_capsules(const Var& caps, std::span<const int> classes) {
  const Shape& s = caps.shape();
  if (s.size() != 3 || s[0] != classes.size()) {
    throw ShapeError("mask_capsules: capsules " + shape_str(s) + " vs " +
                     std::to_string(classes.size()) + " classes");
  }
  const std::size_t n = s[0], nc = s[1], k = s[2];
  Tensor m({n, nc, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= nc) {
      throw std::out_of_range("mask_capsules: class " + std::to_string(classes[i]) + " out of range");
    }
    m[i * nc + static_cast<std::size_t>(classes[i])] = 1.0;
  }
  return op::reshape(op::mul(caps, caps.graph().constant(std::move(m))), {n, nc * k});
}

Decoder::Decoder(DecoderSpec spec, ParameterStore& store, Rng& rng, double init_std,
                 const std::string& prefix)
    : spec_(std::move(spec)) {
  spec_.validate();
  if (!(init_std >= 0.0)) throw ConfigError("decoder: init_std must be >= 0");
  std::vector<std::size_t> sizes{spec_.input_size()};
  sizes.insert(sizes.end(), spec_.hidden.begin(), spec_.hidden.end());
  sizes.push_back(spec_.output_size());
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::string base = prefix + ".fc" + std::to_string(l + 1);
    const double sd = init_std > 0.0 ? init_std : std::sqrt(2.0 / static_cast<double>(sizes[l]));
    weights_.push_back(&store.add(base + ".w", rng.normal_tensor({sizes[l + 1], sizes[l]}, sd)));
    biases_.push_back(&store.add(base + ".b", Tensor({sizes[l + 1]})));
  }
}

Var Decoder::decode(Graph& g, const Var& masked) const {
  const Shape s = masked.shape();
  if (s.size() != 2 || s[1] != spec_.input_size()) {
    throw ShapeError("decode: expected [N," + std::to_string(spec_.input_size()) + "], got " +
                     shape_str(s));
  }
  Var x = masked;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    x = op::linear(x, g.param(*weights_[l]), g.param(*biases_[l]));
    if (l + 1 < weights_.size()) x = op::relu(x);
  }
  return op::reshape(x, {s[0], spec_.channels, spec_.height, spec_.width});
}

double recon_error(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("recon_error: " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  }
  if (x.numel() == 0) throw ShapeError("recon_error: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += (x[i] - x_hat[i]) * (x[i] - x_hat[i]);
  return s / static_cast<double>(x.numel());
}

Var recon_error(const Var& x, const Var& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("recon_error: " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  }
  return op::mean(op::square(op::sub(x, x_hat)));
}

std::vector<double> recon_error_per_example(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape() || x.rank() < 2) {
    throw ShapeError("recon_error_per_example: " + shape_str(x.shape()) + " vs " +
                     shape_str(x_hat.shape()));
  }
  const std::size_t n = x.dim(0), per = x.numel() / n;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t q = 0; q < per; ++q) {
      const double d = x[i * per + q] - x_hat[i * per + q];
      s += d * d;
    }
    out[i] = s / static_cast<double>(per);
  }
  return out;
}

void write_image_grid(const std::filesystem::path& path, const Tensor& images, std::size_t columns) {
  if (images.rank() != 4 || (images.dim(1) != 1 && images.dim(1) != 3) || columns == 0) {
    throw ShapeError("write_image_grid: expected [N,1|3,H,W], got " + shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t cols = std::min(columns, std::max<std::size_t>(n, 1));
  const std::size_t rows = (n + cols - 1) / cols;
  double lo = 0.0, hi = 1.0;
  if (images.numel() > 0) {
    const auto [mn, mx] = std::minmax_element(images.data(), images.data() + images.numel());
    lo = *mn;
    hi = *mx > *mn ? *mx : *mn + 1.0;
  }
  const std::size_t gw = cols * w, gh = std::max<std::size_t>(rows, 1) * h;
  std::vector<unsigned char> pix(gw * gh * c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r0 = (i / cols) * h, c0 = (i % cols) * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double v = (images[((i * c + ch) * h + y) * w + x] - lo) / (hi - lo);
          pix[((r0 + y) * gw + c0 + x) * c + ch] =
              static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_image_grid: cannot open " + path.string());
  out << (c == 1 ? "P5\n" : "P6\n") << gw << ' ' << gh << "\n255\n";
  out.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
}

}  // namespace kcaps
