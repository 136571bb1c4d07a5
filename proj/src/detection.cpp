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

#include "kcaps/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kcaps {

std::string signal_name(Signal s) { return s == Signal::kL2 ? "l2" : "entropy"; }

Signal parse_signal(const std::string& name) {
  if (name == "l2") return Signal::kL2;
  if (name == "entropy") return Signal::kEntropy;
  throw ConfigError("unknown detection signal '" + name + "' (expected l2 or entropy)");
}

std::vector<Signal> available_signals(const Model& model) {
  std::vector<Signal> out;
  if (model.has_decoder()) out.push_back(Signal::kL2);
  if (model.has_gp()) out.push_back(Signal::kEntropy);
  return out;
}

const std::vector<double>& ScoreSet::get(Signal s) const { return s == Signal::kL2 ? l2 : entropy; }

ScoreSet score_images(const Model& model, const Tensor& x, std::uint64_t eval_seed, std::size_t batch) {
  Rng rng(eval_seed);
  const ModelOutput out = model.predict(x, rng, batch);
  ScoreSet s;
  s.predicted = out.predicted;
  const std::size_t n = out.predicted.size();
  if (model.has_decoder()) {
    s.l2.reserve(n);
    const std::size_t per = n ? x.numel() / n : 0, cper = n ? out.capsules.numel() / n : 0;
    for (std::size_t lo = 0; lo < n; lo += batch) {
      const std::size_t hi = std::min(n, lo + batch);
      Shape cs = out.capsules.shape(), xs = x.shape();
      cs[0] = xs[0] = hi - lo;
      const Tensor caps(cs, std::vector<double>(out.capsules.data() + lo * cper, out.capsules.data() + hi * cper));
      const Tensor xb(xs, std::vector<double>(x.data() + lo * per, x.data() + hi * per));
      const std::span<const int> cls(out.predicted.data() + lo, hi - lo);
      for (double e : recon_error_per_example(xb, model.reconstruct(caps, cls))) s.l2.push_back(e);
    }
  }
  if (!out.probs.empty()) {
    const std::size_t nc = out.probs.dim(1);
    s.entropy.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      s.entropy.push_back(predictive_entropy(std::span<const double>(out.probs.data() + i * nc, nc)));
    }
  }
  return s;
}

std::vector<double> score_batch(const Model& model, const Tensor& x, Signal signal,
                                std::uint64_t eval_seed, std::size_t batch) {
  const auto sig = available_signals(model);
  if (std::find(sig.begin(), sig.end(), signal) == sig.end()) {
    throw ConfigError("signal " + signal_name(signal) + " is not available for " +
                      model_kind_name(model.kind()));
  }
  return score_images(model, x, eval_seed, batch).get(signal);
}

RocCurve roc(std::span<const double> neg, std::span<const double> pos) {
  if (neg.empty() || pos.empty()) throw std::invalid_argument("roc: empty score list");
  std::vector<double> n(neg.begin(), neg.end()), p(pos.begin(), pos.end());
  std::sort(n.begin(), n.end(), std::greater<>());
  std::sort(p.begin(), p.end(), std::greater<>());
  std::vector<double> thresholds(n.begin(), n.end());
  thresholds.insert(thresholds.end(), p.begin(), p.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double inf = std::numeric_limits<double>::infinity();
  const double nn = static_cast<double>(n.size()), np = static_cast<double>(p.size());
  RocCurve c;
  c.points.push_back({inf, 0.0, 0.0});
  // Trapezoids in integer counts keep the area exact up to the final division.
  std::size_t in = 0, ip = 0;  // counts strictly above the current threshold
  double area = 0.0;
  for (std::size_t k = 0; k <= thresholds.size(); ++k) {
    const double t = k < thresholds.size() ? thresholds[k] : -inf;
    const std::size_t in0 = in, ip0 = ip;
    while (in < n.size() && n[in] > t) ++in;
    while (ip < p.size() && p[ip] > t) ++ip;
    area += static_cast<double>(in - in0) * static_cast<double>(ip + ip0) / 2.0;
    c.points.push_back({t, static_cast<double>(in) / nn, static_cast<double>(ip) / np});
  }
  c.auc = area / (nn * np);
  return c;
}

double threshold_at_far(std::span<const double> neg, double far) {
  if (neg.empty()) throw std::invalid_argument("threshold_at_far: empty score list");
  if (!(far > 0.0 && far <= 1.0)) throw std::invalid_argument("threshold_at_far: far must lie in (0, 1]");
  std::vector<double> v(neg.begin(), neg.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const auto allowed = static_cast<std::size_t>(std::floor(far * static_cast<double>(n) + 1e-9));
  if (allowed >= n) return v.front() - 1.0;
  // Count above v[k] is n - upper_bound(v[k]); it falls as k grows.
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t above = n - static_cast<std::size_t>(std::upper_bound(v.begin(), v.end(), v[k]) - v.begin());
    if (above <= allowed) return v[k];
  }
  return v.back();
}

Histogram histogram(std::span<const double> scores, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw std::invalid_argument("histogram: bins must be >= 1");
  if (!(hi >= lo)) throw std::invalid_argument("histogram: hi < lo");
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double s : scores) {
    std::size_t b = 0;
    if (width > 0.0 && s > lo) {
      b = std::min(bins - 1, static_cast<std::size_t>((s - lo) / width));
    }
    ++h.counts[b];
  }
  return h;
}

Histogram histogram(std::span<const double> scores, std::size_t bins) {
  if (scores.empty()) return histogram(scores, bins, 0.0, 0.0);
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  return histogram(scores, bins, *mn, *mx);
}

}  // namespace kcaps
