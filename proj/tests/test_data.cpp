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

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#ifdef KCAPS_HAS_ZLIB
#include <zlib.h>
#endif

#include "doctest.h"
#include "kcaps/data.hpp"

using namespace kcaps;
namespace fs = std::filesystem;

namespace {

using Bytes = std::vector<std::uint8_t>;

fs::path temp_file(const std::string& name, const Bytes& bytes) {
  const fs::path dir = fs::temp_directory_path() / "kcaps_test_data";
  fs::create_directories(dir);
  const fs::path p = dir / name;
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return p;
}

void put_be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

Bytes idx(std::uint8_t ndim, const std::vector<std::uint32_t>& dims, const Bytes& payload) {
  Bytes b{0, 0, 0x08, ndim};
  for (auto d : dims) put_be32(b, d);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

Dataset toy_dataset(std::size_t n, std::size_t h, std::size_t w) {
  Dataset d;
  d.spec = DatasetSpec::mnist();
  d.spec.height = h;
  d.spec.width = w;
  d.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < d.images.numel(); ++i) d.images[i] = static_cast<double>(i % 17) / 16.0;
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 3));
  return d;
}

#ifdef KCAPS_HAS_ZLIB
void put_le32(Bytes& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void pad8(Bytes& b) {
  while (b.size() % 8) b.push_back(0);
}

// One miMATRIX element holding a named numeric array.
Bytes mat_matrix(const std::string& name, const std::vector<std::uint32_t>& dims, std::uint32_t mx_class,
                 std::uint32_t data_type, const Bytes& data) {
  Bytes body;
  put_le32(body, 6);  // miUINT32 array flags
  put_le32(body, 8);
  put_le32(body, mx_class);
  put_le32(body, 0);
  put_le32(body, 5);  // miINT32 dims
  put_le32(body, static_cast<std::uint32_t>(4 * dims.size()));
  for (auto d : dims) put_le32(body, d);
  pad8(body);
  if (name.size() <= 4) {
    // Small data element form.
    put_le32(body, (static_cast<std::uint32_t>(name.size()) << 16) | 1);
    for (std::size_t i = 0; i < 4; ++i) body.push_back(i < name.size() ? static_cast<std::uint8_t>(name[i]) : 0);
  } else {
    put_le32(body, 1);
    put_le32(body, static_cast<std::uint32_t>(name.size()));
    body.insert(body.end(), name.begin(), name.end());
    pad8(body);
  }
  put_le32(body, data_type);
  put_le32(body, static_cast<std::uint32_t>(data.size()));
  body.insert(body.end(), data.begin(), data.end());
  pad8(body);
  Bytes el;
  put_le32(el, 14);
  put_le32(el, static_cast<std::uint32_t>(body.size()));
  el.insert(el.end(), body.begin(), body.end());
  return el;
}

Bytes compressed(const Bytes& element) {
  uLongf len = compressBound(element.size());
  Bytes z(len);
  REQUIRE(compress(z.data(), &len, element.data(), element.size()) == Z_OK);
  z.resize(len);
  Bytes el;
  put_le32(el, 15);
  put_le32(el, static_cast<std::uint32_t>(z.size()));
  el.insert(el.end(), z.begin(), z.end());
  return el;
}

Bytes mat_header() {
  Bytes h(128, ' ');
  const std::string text = "MATLAB 5.0 MAT-file, kcaps test";
  std::memcpy(h.data(), text.data(), text.size());
  std::fill(h.begin() + 116, h.begin() + 124, 0);
  h[124] = 0x00;
  h[125] = 0x01;
  h[126] = 'I';
  h[127] = 'M';
  return h;
}
#endif

}  // namespace

TEST_CASE("hand-crafted 1x2x2 idx image file") {
  const auto p = temp_file("one.idx3", idx(3, {1, 2, 2}, {0, 128, 255, 64}));
  const Tensor t = load_idx_images(p);
  CHECK(t.shape() == Shape{1, 1, 2, 2});
  CHECK(t[0] == 0.0);
  CHECK(t[1] == 128.0 / 255.0);
  CHECK(t[2] == 1.0);
  CHECK(t[3] == 64.0 / 255.0);
}

TEST_CASE("idx header declaring zero items is an empty dataset") {
  const auto p = temp_file("empty.idx3", idx(3, {0, 28, 28}, {}));
  CHECK(load_idx_images(p).numel() == 0);
  const auto l = temp_file("empty.idx1", idx(1, {0}, {}));
  CHECK(load_idx_labels(l).empty());
}

TEST_CASE("idx errors are descriptive") {
  Bytes bad = idx(3, {1, 2, 2}, {0, 1, 2, 3});
  bad[2] = 0x0D;  // float payload type
  const auto p = temp_file("badmagic.idx3", bad);
  try {
    load_idx_images(p);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("0x00000d03") != std::string::npos);
  }
  CHECK_THROWS_AS(load_idx_images(temp_file("trunc.idx3", idx(3, {2, 2, 2}, {1, 2, 3}))), DataError);
  CHECK_THROWS_AS(load_idx_images(temp_file("trailing.idx3", idx(3, {1, 1, 1}, {1, 2}))), DataError);
  CHECK_THROWS_AS(load_idx_images(temp_file("twodim.idx3", idx(2, {2, 2}, {1, 2, 3, 4}))), DataError);
  CHECK_THROWS_AS(load_idx_labels(temp_file("labels3.idx", idx(3, {1, 1, 1}, {1}))), DataError);
  CHECK_THROWS_AS(load_idx_images(temp_file("short.idx3", {0, 0})), DataError);
  CHECK_THROWS_AS(load_idx_images("/nonexistent/kcaps.idx"), DataError);

  // Image and label counts must agree.
  const fs::path dir = fs::temp_directory_path() / "kcaps_mnist_mismatch";
  fs::create_directories(dir);
  fs::copy_file(temp_file("a", idx(3, {1, 28, 28}, Bytes(784, 3))), dir / "train-images-idx3-ubyte",
                fs::copy_options::overwrite_existing);
  fs::copy_file(temp_file("b", idx(1, {2}, {1, 2})), dir / "train-labels-idx1-ubyte",
                fs::copy_options::overwrite_existing);
  CHECK_THROWS_AS(load_mnist(dir, true), DataError);
}

TEST_CASE("bundled mnist subset loads with balanced classes in [0, 1]") {
  const fs::path root = fs::path(KCAPS_DATA_DIR) / "mnist-subset";
  for (bool train : {true, false}) {
    const Dataset d = load_mnist(root, train);
    CHECK(d.images.shape() == Shape{2500, 1, 28, 28});
    std::vector<int> counts(10, 0);
    for (int l : d.labels) ++counts[static_cast<std::size_t>(l)];
    for (int c : counts) CHECK(c == 250);
    const auto [lo, hi] = std::minmax_element(d.images.data(), d.images.data() + d.images.numel());
    CHECK(*lo >= 0.0);
    CHECK(*hi <= 1.0);
    const Dataset s = subset_per_class(d, 200);
    CHECK(s.size() == 2000);
    std::vector<int> sc(10, 0);
    for (int l : s.labels) ++sc[static_cast<std::size_t>(l)];
    for (int c : sc) CHECK(c == 200);
  }
}

TEST_CASE("subset_per_class keeps the first examples in file order") {
  const Dataset d = toy_dataset(10, 2, 2);
  const Dataset s = subset_per_class(d, 2);
  CHECK(s.labels == std::vector<int>{0, 1, 2, 0, 1, 2});
  CHECK(s.images[4 * 4] == d.images[4 * 4]);
  CHECK(subset_per_class(d, 0).size() == 0);
}

TEST_CASE("shift examples") {
  Tensor img({1, 28, 28});
  for (std::size_t y = 0; y < 28; ++y) img[y * 28] = 1.0;  // column 0
  CHECK(max_abs_diff(shift_image(img, 0, 0), img) == 0.0);
  const Tensor right = shift_image(img, 4, 0);
  for (std::size_t y = 0; y < 28; ++y) {
    CHECK(right[y * 28 + 4] == 1.0);
    CHECK(right[y * 28] == 0.0);
  }
  const Tensor down = shift_image(img, 0, 3);
  for (std::size_t y = 0; y < 3; ++y) CHECK(down[y * 28] == 0.0);
  CHECK(down[3 * 28] == 1.0);

  // Content that stays in frame conserves the nonzero count.
  Tensor blob({1, 28, 28});
  for (std::size_t y = 10; y < 18; ++y)
    for (std::size_t x = 9; x < 15; ++x) blob[y * 28 + x] = 0.5;
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Tensor s = random_shift(blob, 4, rng);
    std::size_t nz = 0;
    for (double v : s.values()) nz += v != 0.0;
    CHECK(nz == 48);
  }
  CHECK_THROWS_AS(random_shift(Tensor({1, 4, 4}), 4, rng), std::invalid_argument);
}

TEST_CASE("random shifts cover [-max, max] on both axes") {
  Rng rng(2);
  Tensor dot({1, 11, 11});
  dot[5 * 11 + 5] = 1.0;
  std::vector<int> seen_x(9, 0), seen_y(9, 0);
  for (int t = 0; t < 2000; ++t) {
    const Tensor s = random_shift(dot, 4, rng);
    for (std::size_t i = 0; i < s.numel(); ++i) {
      if (s[i] != 0.0) {
        ++seen_y[i / 11 - 1];
        ++seen_x[i % 11 - 1];
      }
    }
  }
  for (int c : seen_x) CHECK(c > 100);
  for (int c : seen_y) CHECK(c > 100);
}

TEST_CASE("normalization constants and round trip") {
  const DatasetSpec m = DatasetSpec::mnist();
  CHECK(normalize(Tensor({1, 1, 1}, {0.1307}), m)[0] == doctest::Approx(0.0));
  const Tensor zeros = normalize(Tensor({1, 28, 28}), m);
  for (double v : zeros.values()) CHECK(v == doctest::Approx(-0.1307 / 0.3081));
  CHECK(-0.1307 / 0.3081 == doctest::Approx(-0.4242).epsilon(1e-4));

  Rng rng(3);
  for (const DatasetSpec& s : {DatasetSpec::mnist(), DatasetSpec::cifar10(), DatasetSpec::svhn()}) {
    Tensor x({2, s.channels, 5, 4});
    for (double& v : x.values()) v = rng.uniform();
    CHECK(max_abs_diff(denormalize(normalize(x, s), s), x) < 1e-12);
  }
  CHECK_THROWS_AS(normalize(Tensor({2, 3, 4, 4}), m), ShapeError);
  DatasetSpec bad = DatasetSpec::cifar10();
  bad.stddev[1] = 0.0;
  CHECK_THROWS_AS(bad.validate(), DataError);
  CHECK_THROWS_AS(DatasetSpec::by_name("imagenet"), DataError);
  CHECK(DatasetSpec::by_name("svhn").mean[0] == 0.5);
}

TEST_CASE("eval batches skip augmentation and leave the rng untouched") {
  const Dataset d = toy_dataset(6, 12, 12);
  const std::vector<std::size_t> idx{4, 1, 5};
  Rng rng(4);
  const std::string before = rng.state();
  const Tensor eval = make_batch(d, idx, BatchMode::kEval, 4, &rng);
  CHECK(rng.state() == before);
  CHECK(max_abs_diff(eval, normalize(d.gather_images(idx), d.spec)) == 0.0);
  CHECK_NOTHROW(make_batch(d, idx, BatchMode::kEval, 4, nullptr));

  const Tensor train = make_batch(d, idx, BatchMode::kTrain, 4, &rng);
  CHECK(rng.state() != before);
  CHECK(train.shape() == eval.shape());
  CHECK_THROWS_AS(make_batch(d, idx, BatchMode::kTrain, 4, nullptr), std::invalid_argument);
  const Tensor plain = make_batch(d, idx, BatchMode::kTrain, 0, nullptr);
  CHECK(max_abs_diff(plain, eval) == 0.0);
}

TEST_CASE("cifar10 binary records") {
  Bytes rec;
  for (int r = 0; r < 2; ++r) {
    rec.push_back(static_cast<std::uint8_t>(r == 0 ? 7 : 2));
    for (int i = 0; i < 3072; ++i) rec.push_back(static_cast<std::uint8_t>((i + r) % 256));
  }
  const Dataset d = load_cifar10({temp_file("cifar.bin", rec)});
  CHECK(d.labels == std::vector<int>{7, 2});
  CHECK(d.images.shape() == Shape{2, 3, 32, 32});
  CHECK(d.images[1024] == 0.0);  // green plane starts at byte 1024 -> value 0
  CHECK(d.images[3072 + 5] == 6.0 / 255.0);
  rec.pop_back();
  CHECK_THROWS_AS(load_cifar10({temp_file("cifar_bad.bin", rec)}), DataError);
}

#ifdef KCAPS_HAS_ZLIB
TEST_CASE("svhn mat v5 loader reads X and y, plain and compressed") {
  // X is [H=2, W=3, C=3, N=2] column-major uint8; y is double with 10 -> 0.
  const std::size_t h = 2, w = 3, n = 2;
  Bytes x(h * w * 3 * n);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<std::uint8_t>(i * 3);
  Bytes y(16);
  const double labels[2] = {10.0, 4.0};
  std::memcpy(y.data(), labels, 16);
  const Bytes xm = mat_matrix("X", {2, 3, 3, 2}, 9, 2, x);
  const Bytes ym = mat_matrix("y", {2, 1}, 6, 9, y);
  for (bool zip : {false, true}) {
    Bytes file = mat_header();
    const Bytes a = zip ? compressed(xm) : xm, b = zip ? compressed(ym) : ym;
    file.insert(file.end(), a.begin(), a.end());
    file.insert(file.end(), b.begin(), b.end());
    const Dataset d = load_svhn(temp_file(zip ? "svhn_z.mat" : "svhn.mat", file));
    CHECK(d.labels == std::vector<int>{0, 4});
    CHECK(d.images.shape() == Shape{2, 3, 2, 3});
    // X(r=1, c=2, ch=1, i=1) sits at 1 + 2*(2 + 3*(1 + 3*1)) = 29.
    CHECK(d.images[((1 * 3 + 1) * h + 1) * w + 2] == 29.0 * 3.0 / 255.0);
  }
  Bytes not_mat(200, 0);
  CHECK_THROWS_AS(load_svhn(temp_file("bad.mat", not_mat)), DataError);
}
#endif
