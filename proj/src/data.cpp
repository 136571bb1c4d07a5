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

#include "kcaps/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#ifdef KCAPS_HAS_ZLIB
#include <zlib.h>
#endif

namespace kcaps {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// DatasetSpec

DatasetSpec DatasetSpec::mnist() {
  return {"mnist", 1, 28, 28, 10, {0.1307}, {0.3081}};
}

DatasetSpec DatasetSpec::cifar10() {
  return {"cifar10", 3, 32, 32, 10, {0.5071, 0.4867, 0.4408}, {0.2675, 0.2565, 0.2761}};
}

DatasetSpec DatasetSpec::svhn() {
  return {"svhn", 3, 32, 32, 10, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
}

DatasetSpec DatasetSpec::by_name(const std::string& name) {
  if (name == "mnist") return mnist();
  if (name == "cifar10") return cifar10();
  if (name == "svhn") return svhn();
  throw DataError("unknown dataset '" + name + "' (expected mnist, cifar10 or svhn)");
}

void DatasetSpec::validate() const {
  if (mean.size() != channels || stddev.size() != channels) {
    throw DataError("dataset '" + name + "': normalization needs " +
                    std::to_string(channels) + " mean/std values");
  }
  for (double s : stddev) {
    if (!(s > 0.0)) throw DataError("dataset '" + name + "': std must be positive");
  }
}

// ---------------------------------------------------------------------------
// Dataset

Tensor Dataset::gather_images(std::span<const std::size_t> indices) const {
  const std::size_t per = spec.image_size();
  Tensor out({indices.size(), spec.channels, spec.height, spec.width});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw std::out_of_range("Dataset: index out of range");
    std::copy_n(images.data() + indices[k] * per, per, out.data() + k * per);
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return {spec, gather_images(indices), gather_labels(indices)};
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
         (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

IdxArray read_idx(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 4) throw DataError(path.string() + ": truncated IDX header");
  const std::uint32_t magic = be32(bytes.data());
  IdxArray out;
  out.type_code = bytes[2];
  const std::size_t ndim = bytes[3];
  if (bytes[0] != 0 || bytes[1] != 0 || out.type_code != 0x08 || ndim == 0) {
    throw DataError(path.string() + ": bad IDX magic " + hex32(magic) +
                    " (expected 0x000008NN for unsigned-byte data)");
  }
  if (bytes.size() < 4 + 4 * ndim) throw DataError(path.string() + ": truncated IDX header");
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    out.dims.push_back(be32(bytes.data() + 4 + 4 * d));
    count *= out.dims.back();
  }
  const std::size_t header = 4 + 4 * ndim;
  if (bytes.size() - header < count) {
    throw DataError(path.string() + ": truncated payload (header declares " +
                    std::to_string(count) + " bytes, file has " +
                    std::to_string(bytes.size() - header) + ")");
  }
  if (bytes.size() - header > count) {
    throw DataError(path.string() + ": " + std::to_string(bytes.size() - header - count) +
                    " trailing bytes after IDX payload");
  }
  out.bytes.assign(bytes.begin() + static_cast<long>(header), bytes.end());
  return out;
}

Tensor load_idx_images(const fs::path& path) {
  const IdxArray a = read_idx(path);
  if (a.dims.size() != 3) {
    throw DataError(path.string() + ": image file must have 3 dims, found " +
                    std::to_string(a.dims.size()));
  }
  Tensor t({a.dims[0], 1, a.dims[1], a.dims[2]});
  for (std::size_t i = 0; i < a.bytes.size(); ++i) t[i] = a.bytes[i] / 255.0;
  return t;
}

std::vector<int> load_idx_labels(const fs::path& path) {
  const IdxArray a = read_idx(path);
  if (a.dims.size() != 1) {
    throw DataError(path.string() + ": label file must have 1 dim, found " +
                    std::to_string(a.dims.size()));
  }
  return {a.bytes.begin(), a.bytes.end()};
}

Dataset load_mnist(const fs::path& root, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  Dataset d;
  d.spec = DatasetSpec::mnist();
  d.images = load_idx_images(root / (prefix + "-images-idx3-ubyte"));
  d.labels = load_idx_labels(root / (prefix + "-labels-idx1-ubyte"));
  if (d.images.dim(0) != d.labels.size()) {
    throw DataError("mnist: " + std::to_string(d.images.dim(0)) + " images but " +
                    std::to_string(d.labels.size()) + " labels");
  }
  if (d.images.dim(0) > 0 && (d.images.dim(2) != 28 || d.images.dim(3) != 28)) {
    throw DataError("mnist: expected 28x28 images, found " + shape_str(d.images.shape()));
  }
  for (int l : d.labels) {
    if (l < 0 || l >= 10) throw DataError("mnist: label " + std::to_string(l) + " out of range");
  }
  return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10

Dataset load_cifar10(const std::vector<fs::path>& batches) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  std::vector<std::uint8_t> all;
  for (const auto& b : batches) {
    const auto bytes = read_file(b);
    if (bytes.size() % kRecord != 0) {
      throw DataError(b.string() + ": size is not a multiple of the 3073-byte record");
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const std::size_t n = all.size() / kRecord;
  Dataset d;
  d.spec = DatasetSpec::cifar10();
  d.images = Tensor({n, 3, 32, 32});
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = all.data() + i * kRecord;
    if (rec[0] > 9) throw DataError("cifar10: label " + std::to_string(rec[0]) + " out of range");
    d.labels.push_back(rec[0]);
    for (std::size_t k = 0; k < kRecord - 1; ++k) d.images[i * (kRecord - 1) + k] = rec[1 + k] / 255.0;
  }
  return d;
}

Dataset load_cifar10_split(const fs::path& root, bool train) {
  std::vector<fs::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(root / "test_batch.bin");
  }
  return load_cifar10(files);
}

// ---------------------------------------------------------------------------
// SVHN (.mat v5)

namespace {

#ifdef KCAPS_HAS_ZLIB

enum MatType : std::uint32_t {
  miINT8 = 1, miUINT8 = 2, miINT16 = 3, miUINT16 = 4, miINT32 = 5, miUINT32 = 6,
  miSINGLE = 7, miDOUBLE = 9, miINT64 = 12, miUINT64 = 13, miMATRIX = 14,
  miCOMPRESSED = 15,
};

struct MatElement {
  std::uint32_t type = 0;
  const std::uint8_t* data = nullptr;
  std::size_t size = 0;
};

struct MatReader {
  const std::uint8_t* p;
  const std::uint8_t* end;

  std::uint32_t u32() {
    if (end - p < 4) throw DataError("svhn: truncated .mat element");
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  }

  bool done() const { return p >= end; }

  MatElement next() {
    MatElement e;
    const std::uint32_t first = u32();
    if (first >> 16) {
      // Small data element: type and size packed into one word.
      e.type = first & 0xffff;
      e.size = first >> 16;
      e.data = p;
      p += 4;
      return e;
    }
    e.type = first;
    e.size = u32();
    if (static_cast<std::size_t>(end - p) < e.size) throw DataError("svhn: truncated .mat element");
    e.data = p;
    p += e.size;
    if (e.type != miCOMPRESSED) {
      const std::size_t pad = (8 - e.size % 8) % 8;
      p += std::min<std::size_t>(pad, static_cast<std::size_t>(end - p));
    }
    return e;
  }
};

std::vector<double> mat_numeric(const MatElement& e) {
  std::vector<double> out;
  auto read = [&](auto tag) {
    using T = decltype(tag);
    const std::size_t n = e.size / sizeof(T);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, e.data + i * sizeof(T), sizeof(T));
      out[i] = static_cast<double>(v);
    }
  };
  switch (e.type) {
    case miINT8: read(std::int8_t{}); break;
    case miUINT8: read(std::uint8_t{}); break;
    case miINT16: read(std::int16_t{}); break;
    case miUINT16: read(std::uint16_t{}); break;
    case miINT32: read(std::int32_t{}); break;
    case miUINT32: read(std::uint32_t{}); break;
    case miSINGLE: read(float{}); break;
    case miDOUBLE: read(double{}); break;
    case miINT64: read(std::int64_t{}); break;
    case miUINT64: read(std::uint64_t{}); break;
    default: throw DataError("svhn: unsupported .mat numeric type " + std::to_string(e.type));
  }
  return out;
}

struct MatVariable {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

MatVariable parse_matrix(const MatElement& m) {
  MatReader r{m.data, m.data + m.size};
  MatVariable v;
  r.next();  // array flags
  const MatElement dims = r.next();
  for (double d : mat_numeric(dims)) v.dims.push_back(static_cast<std::size_t>(d));
  const MatElement name = r.next();
  v.name.assign(reinterpret_cast<const char*>(name.data), name.size);
  v.values = mat_numeric(r.next());
  return v;
}

std::vector<std::uint8_t> inflate_all(const MatElement& e) {
  std::vector<std::uint8_t> out(std::max<std::size_t>(e.size * 4, 1024));
  z_stream zs{};
  zs.next_in = const_cast<Bytef*>(e.data);
  zs.avail_in = static_cast<uInt>(e.size);
  if (inflateInit(&zs) != Z_OK) throw DataError("svhn: zlib init failed");
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (zs.total_out == out.size()) out.resize(out.size() * 2);
    zs.next_out = out.data() + zs.total_out;
    zs.avail_out = static_cast<uInt>(out.size() - zs.total_out);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataError("svhn: corrupt compressed .mat element");
    }
  }
  out.resize(zs.total_out);
  inflateEnd(&zs);
  return out;
}

#endif  // KCAPS_HAS_ZLIB

}  // namespace

Dataset load_svhn(const fs::path& mat_file) {
#ifndef KCAPS_HAS_ZLIB
  throw DataError("svhn: built without zlib support (" + mat_file.string() + ")");
#else
  const auto bytes = read_file(mat_file);
  if (bytes.size() < 128 || bytes[126] != 'I' || bytes[127] != 'M') {
    throw DataError(mat_file.string() + ": not a little-endian MATLAB v5 file");
  }
  MatReader top{bytes.data() + 128, bytes.data() + bytes.size()};
  MatVariable x, y;
  std::vector<std::vector<std::uint8_t>> inflated;
  while (!top.done()) {
    MatElement e = top.next();
    if (e.type == miCOMPRESSED) {
      inflated.push_back(inflate_all(e));
      MatReader inner{inflated.back().data(), inflated.back().data() + inflated.back().size()};
      e = inner.next();
    }
    if (e.type != miMATRIX) continue;
    MatVariable v = parse_matrix(e);
    if (v.name == "X") x = std::move(v);
    if (v.name == "y") y = std::move(v);
  }
  if (x.dims.size() != 4 || x.dims[2] != 3) {
    throw DataError(mat_file.string() + ": expected X with dims [H, W, 3, N]");
  }
  const std::size_t h = x.dims[0], w = x.dims[1], n = x.dims[3];
  if (y.values.size() != n) {
    throw DataError(mat_file.string() + ": " + std::to_string(n) + " images but " +
                    std::to_string(y.values.size()) + " labels");
  }
  Dataset d;
  d.spec = DatasetSpec::svhn();
  d.spec.height = h;
  d.spec.width = w;
  d.images = Tensor({n, 3, h, w});
  // Column-major source: X(r, c, ch, i) at r + h*(c + w*(ch + 3*i)).
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
          d.images[((i * 3 + ch) * h + r) * w + c] =
              x.values[r + h * (c + w * (ch + 3 * i))] / 255.0;
  for (double lab : y.values) {
    int l = static_cast<int>(lab);
    if (l == 10) l = 0;
    if (l < 0 || l > 9) throw DataError("svhn: label " + std::to_string(l) + " out of range");
    d.labels.push_back(l);
  }
  return d;
#endif
}

Dataset load_dataset(const std::string& name, const fs::path& root, bool train) {
  if (name == "mnist") return load_mnist(root, train);
  if (name == "cifar10") return load_cifar10_split(root, train);
  if (name == "svhn") return load_svhn(root / (train ? "train_32x32.mat" : "test_32x32.mat"));
  throw DataError("unknown dataset '" + name + "'");
}

Dataset subset_per_class(const Dataset& data, std::size_t per_class) {
  std::vector<std::size_t> taken(data.spec.num_classes, 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = static_cast<std::size_t>(data.labels[i]);
    if (c < taken.size() && taken[c] < per_class) {
      ++taken[c];
      keep.push_back(i);
    }
  }
  return data.subset(keep);
}

// ---------------------------------------------------------------------------
// Preprocessing

Tensor shift_image(const Tensor& image, int dx, int dy) {
  if (image.rank() != 3) throw ShapeError("shift_image: expected [C,H,W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y) - dy;
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x) - dx;
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        out[(ch * h + y) * w + x] =
            image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
    }
  }
  return out;
}

Tensor random_shift(const Tensor& image, int max_shift, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("random_shift: expected [C,H,W]");
  if (max_shift < 0 || static_cast<std::size_t>(max_shift) >= std::min(image.dim(1), image.dim(2))) {
    throw std::invalid_argument("random_shift: max_shift must be in [0, min(h, w))");
  }
  const int dx = rng.uniform_int(-max_shift, max_shift);
  const int dy = rng.uniform_int(-max_shift, max_shift);
  return shift_image(image, dx, dy);
}

namespace {

Tensor affine_channels(const Tensor& images, const DatasetSpec& spec, bool forward) {
  spec.validate();
  if (images.rank() != 3 && images.rank() != 4) {
    throw ShapeError("normalize: expected [C,H,W] or [N,C,H,W], got " + shape_str(images.shape()));
  }
  const std::size_t caxis = images.rank() - 3;
  const std::size_t c = images.dim(caxis);
  if (c != spec.channels) {
    throw ShapeError("normalize: image has " + std::to_string(c) + " channels, dataset '" +
                     spec.name + "' has " + std::to_string(spec.channels));
  }
  const std::size_t plane = images.dim(caxis + 1) * images.dim(caxis + 2);
  const std::size_t n = images.numel() / (c * plane);
  Tensor out(images.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mu = spec.mean[ch], sd = spec.stddev[ch];
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        out[base + k] = forward ? (images[base + k] - mu) / sd : images[base + k] * sd + mu;
      }
    }
  }
  return out;
}

}  // namespace

Tensor normalize(const Tensor& images, const DatasetSpec& spec) {
  return affine_channels(images, spec, true);
}

Tensor denormalize(const Tensor& images, const DatasetSpec& spec) {
  return affine_channels(images, spec, false);
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices,
                  BatchMode mode, int max_shift, Rng* rng) {
  Tensor raw = data.gather_images(indices);
  if (mode == BatchMode::kTrain && max_shift > 0) {
    if (!rng) throw std::invalid_argument("make_batch: augmentation needs an Rng");
    const std::size_t per = data.spec.image_size();
    const Shape one{data.spec.channels, data.spec.height, data.spec.width};
    for (std::size_t k = 0; k < indices.size(); ++k) {
      Tensor img(one, std::vector<double>(raw.data() + k * per, raw.data() + (k + 1) * per));
      Tensor s = random_shift(img, max_shift, *rng);
      std::copy_n(s.data(), per, raw.data() + k * per);
    }
  }
  return normalize(raw, data.spec);
}

}  // namespace kcaps
