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
#include <span>
#include <string>
#include <vector>

#include "kcaps/models.hpp"

namespace kcaps {

/// Higher scores are more suspicious for both signals.
enum class Signal { kL2, kEntropy };
std::string signal_name(Signal s);
Signal parse_signal(const std::string& name);
/// Signals a model can produce: l2 needs a decoder, entropy a probabilistic output.
std::vector<Signal> available_signals(const Model& model);

struct ScoreSet {
  std::vector<int> predicted;
  std::vector<double> l2;       // empty without a decoder
  std::vector<double> entropy;  // empty without class probabilities
  const std::vector<double>& get(Signal s) const;
};

/// l2: per-pixel MSE between x and the decoding of capsules masked by the
/// predicted class. entropy: entropy of the MC-averaged class probabilities.
/// Deterministic given `eval_seed`.
ScoreSet score_images(const Model& model, const Tensor& x, std::uint64_t eval_seed,
                      std::size_t batch = 256);
/// One signal; throws ConfigError if the model cannot produce it.
std::vector<double> score_batch(const Model& model, const Tensor& x, Signal signal,
                                std::uint64_t eval_seed, std::size_t batch = 256);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) at +inf to (1,1) at -inf
  double auc = 0.0;
};

/// Flags score > threshold over every distinct score plus the +-inf sentinels;
/// trapezoidal AUC.
RocCurve roc(std::span<const double> neg, std::span<const double> pos);

/// Smallest t with |{neg > t}| <= far * |neg|. far = 1 returns min(neg) - 1.
double threshold_at_far(std::span<const double> neg, double far);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

/// Fixed-width bins over [lo, hi]; the top edge belongs to the last bin and
/// values outside the range are clamped into the end bins.
Histogram histogram(std::span<const double> scores, std::size_t bins, double lo, double hi);
/// Range taken from min and max of `scores`.
Histogram histogram(std::span<const double> scores, std::size_t bins);

}  // namespace kcaps
