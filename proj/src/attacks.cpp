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

#include "kcaps/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace kcaps {

std::string attack_mode_name(AttackMode mode) { return mode == AttackMode::kWhite ? "white" : "black"; }

AttackMode parse_attack_mode(const std::string& name) {
  if (name == "white") return AttackMode::kWhite;
  if (name == "black") return AttackMode::kBlack;
  throw ConfigError("unknown attack mode '" + name + "' (expected white or black)");
}

Tensor sign_of(const Tensor& t) {
  Tensor s(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) s[i] = static_cast<double>((t[i] > 0.0) - (t[i] < 0.0));
  return s;
}

Tensor fgsm(const Tensor& grad, const Tensor& x, double eps) {
  if (grad.shape() != x.shape()) {
    throw ShapeError("fgsm: gradient " + shape_str(grad.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (!(eps >= 0.0)) throw std::invalid_argument("fgsm: eps must be >= 0");
  Tensor out = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double s = static_cast<double>((grad[i] > 0.0) - (grad[i] < 0.0));
    if (s == 0.0) continue;
    double v = x[i] + s * eps;
    // Round toward x so that |v - x| <= eps holds in floating point.
    while (std::abs(v - x[i]) > eps) v = std::nextafter(v, x[i]);
    out[i] = v;
  }
  return out;
}

Tensor attack_signs(const Model& source, const Tensor& x, std::span<const int> labels,
                    AttackLoss loss, std::uint64_t grad_seed, std::size_t batch) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) throw ShapeError("attack_signs: images and labels differ");
  if (batch == 0) throw std::invalid_argument("attack_signs: batch must be >= 1");
  const std::uint64_t before = source.parameters().checksum();
  Rng rng(grad_seed);
  const std::size_t n = x.dim(0), per = x.numel() / std::max<std::size_t>(n, 1);
  Tensor out(x.shape());
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    Shape bs = x.shape();
    bs[0] = hi - lo;
    Tensor xb(bs, std::vector<double>(x.data() + lo * per, x.data() + hi * per));
    const Tensor s = sign_of(source.input_gradient(xb, labels.subspan(lo, hi - lo), loss, rng));
    std::copy(s.data(), s.data() + s.numel(), out.data() + lo * per);
  }
  // Attacks read parameters only.
  if (source.parameters().checksum() != before) throw std::logic_error("attack mutated model parameters");
  return out;
}

Tensor white_box_attack(const Model& model, const Tensor& x, std::span<const int> labels, double eps,
                        AttackLoss loss, std::uint64_t grad_seed, std::size_t batch) {
  return fgsm(attack_signs(model, x, labels, loss, grad_seed, batch), x, eps);
}

Tensor black_box_attack(const Model& surrogate, const Tensor& x, std::span<const int> labels,
                        double eps, std::uint64_t grad_seed, std::size_t batch) {
  if (surrogate.kind() != ModelKind::kSurrogate) {
    throw ConfigError("black-box attacks need a surrogate model, got " + model_kind_name(surrogate.kind()));
  }
  return fgsm(attack_signs(surrogate, x, labels, AttackLoss::kClassification, grad_seed, batch), x, eps);
}

void AttackBatch::save(const std::filesystem::path& path, const nlohmann::json& meta) const {
  if (labels.size() != indices.size() || sign.rank() == 0 || sign.dim(0) != labels.size()) {
    throw ShapeError("AttackBatch::save: inconsistent sizes");
  }
  Checkpoint ck;
  ck.meta = meta;
  ck.meta["kind"] = "attack";
  ck.meta["mode"] = attack_mode_name(mode);
  ck.meta["source_model"] = source_model;
  ck.meta["loss"] = attack_loss_name(loss);
  ck.put("sign", sign, Checkpoint::Dtype::kI8);
  Tensor lab({labels.size()}), idx({indices.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    lab[i] = labels[i];
    idx[i] = static_cast<double>(indices[i]);
  }
  ck.put("labels", std::move(lab));
  ck.put("indices", std::move(idx));
  ck.save(path);
}

AttackBatch AttackBatch::load(const std::filesystem::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.meta.value("kind", "") != "attack") {
    throw std::runtime_error(path.string() + " is not an attack artifact");
  }
  AttackBatch a;
  a.mode = parse_attack_mode(ck.meta.at("mode").get<std::string>());
  a.source_model = ck.meta.at("source_model").get<std::string>();
  a.loss = parse_attack_loss(ck.meta.at("loss").get<std::string>());
  a.sign = ck.get("sign");
  for (double v : ck.get("labels").values()) a.labels.push_back(static_cast<int>(v));
  for (double v : ck.get("indices").values()) a.indices.push_back(static_cast<std::size_t>(v));
  if (a.labels.size() != a.indices.size() || a.sign.rank() == 0 || a.sign.dim(0) != a.labels.size()) {
    throw std::runtime_error(path.string() + ": inconsistent attack artifact");
  }
  return a;
}

void validate_epsilon_grid(std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("epsilon grid is empty");
  if (grid.front() != 0.0) throw ConfigError("epsilon grid must start at 0");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw ConfigError("epsilon values must lie in [0, 1]");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw ConfigError("epsilon grid must be strictly ascending");
  }
}

std::vector<SweepRow> epsilon_sweep(const Model& target, const Tensor& x, const AttackBatch& attack,
                                    std::span<const double> grid, std::uint64_t eval_seed) {
  validate_epsilon_grid(grid);
  if (attack.sign.shape() != x.shape()) throw ShapeError("epsilon_sweep: attack does not match images");
  std::vector<SweepRow> rows;
  for (double eps : grid) {
    SweepRow r;
    r.epsilon = eps;
    r.mode = attack.mode;
    r.model = model_kind_name(target.kind());
    r.accuracy = accuracy(target, attack.perturbed(x, eps), attack.labels, eval_seed);
    r.n_examples = attack.labels.size();
    rows.push_back(r);
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows,
                     const std::string& config_hash, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epsilon,mode,model,accuracy,n_examples,config_hash,seed\n";
  out << std::setprecision(10);
  for (const SweepRow& r : rows) {
    out << r.epsilon << ',' << attack_mode_name(r.mode) << ',' << r.model << ',' << r.accuracy << ','
        << r.n_examples << ',' << config_hash << ',' << seed << '\n';
  }
}

}  // namespace kcaps
