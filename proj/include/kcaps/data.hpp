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

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kcaps/rng.hpp"
#include "kcaps/tensor.hpp"

namespace kcaps {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string name;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t num_classes = 10;
  std::vector<double> mean;
  std::vector<double> stddev;

  static DatasetSpec mnist();
  static DatasetSpec cifar10();
  static DatasetSpec svhn();
  static DatasetSpec by_name(const std::string& name);

  std::size_t image_size() const { return channels * height * width; }
  /// Throws DataError unless every std component is positive and the
  /// statistics match the channel count.
  void validate() const;
};

/// Images in [0, 1] as [N, C, H, W] plus integer labels.
struct Dataset {
  DatasetSpec spec;
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
  Tensor gather_images(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

// ---------------------------------------------------------------------------
// IDX container (big-endian header: 0x00 0x00 type ndim, then ndim u32 dims).

struct IdxArray {
  std::uint8_t type_code = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

IdxArray read_idx(const std::filesystem::path& path);
/// Unsigned-byte IDX with 3 dims -> [N, 1, H, W] scaled by 1/255.
Tensor load_idx_images(const std::filesystem::path& path);
std::vector<int> load_idx_labels(const std::filesystem::path& path);

/// `train` selects train-*-ubyte over t10k-*-ubyte inside `root`.
Dataset load_mnist(const std::filesystem::path& root, bool train);
/// CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes.
Dataset load_cifar10(const std::vector<std::filesystem::path>& batches);
/// Loads <root>/data_batch_{1..5}.bin or <root>/test_batch.bin.
Dataset load_cifar10_split(const std::filesystem::path& root, bool train);
/// SVHN cropped digits (MATLAB v5 .mat with X [H,W,C,N] uint8 and y [N,1],
/// label 10 meaning digit 0). Throws DataError if built without zlib.
Dataset load_svhn(const std::filesystem::path& mat_file);
Dataset load_dataset(const std::string& name, const std::filesystem::path& root, bool train);

/// First `per_class` examples of each class in file order.
Dataset subset_per_class(const Dataset& data, std::size_t per_class);

// ---------------------------------------------------------------------------
// Preprocessing

/// Integer translation of a [C, H, W] image by (dx, dy) with zero fill:
/// out(y, x) = in(y - dy, x - dx).
Tensor shift_image(const Tensor& image, int dx, int dy);
/// Shift with dx, dy drawn independently from [-max_shift, max_shift].
Tensor random_shift(const Tensor& image, int max_shift, Rng& rng);

/// Per-channel (x - mean) / std for [C,H,W] or [N,C,H,W].
Tensor normalize(const Tensor& images, const DatasetSpec& spec);
Tensor denormalize(const Tensor& images, const DatasetSpec& spec);

enum class BatchMode { kTrain, kEval };

/// Gathers a normalized batch. Shift augmentation runs only in kTrain mode
/// and only when max_shift > 0; kEval never touches `rng`.
Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices,
                  BatchMode mode, int max_shift, Rng* rng);

}  // namespace kcaps
