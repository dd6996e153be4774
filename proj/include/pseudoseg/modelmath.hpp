#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pseudoseg/error.hpp"

namespace pseudoseg {

inline constexpr double kLogEpsilon = 1e-7;

// Gains of the four loss terms.
struct GainCoefficients {
  double lambda_b = 7.5;    // box IoU
  double lambda_c = 0.5;    // classification BCE
  double lambda_s = 0.468;  // mask BCE
  double lambda_f = 2.0;    // distribution focal

  void validate() const {
    for (double g : {lambda_b, lambda_c, lambda_s, lambda_f}) {
      if (!(g >= 0.0) || !std::isfinite(g)) throw ContractError("loss gains must be finite and >= 0");
    }
  }
};

struct LossComponents {
  double l_c = 0.0;
  double l_f = 0.0;
  double l_s = 0.0;
  double l_b = 0.0;

  void validate() const {
    for (double v : {l_c, l_f, l_s, l_b}) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ContractError("loss components must be finite and >= 0");
    }
  }
};

inline double composite_loss(const LossComponents& c, const GainCoefficients& g) {
  c.validate();
  g.validate();
  return g.lambda_c * c.l_c + g.lambda_f * c.l_f + g.lambda_s * c.l_s + g.lambda_b * c.l_b;
}

inline double clamp_probability(double p) { return std::clamp(p, kLogEpsilon, 1.0 - kLogEpsilon); }

// Binary cross-entropy for one probability and a hard label.
inline double bce(double p, int y) {
  if (y != 0 && y != 1) throw ContractError("bce: label must be 0 or 1");
  p = clamp_probability(p);
  return -(y * std::log(p) + (1 - y) * std::log(1.0 - p));
}

// Mean of element-wise BCE.
inline double bce(std::span<const double> p, std::span<const int> y) {
  if (p.size() != y.size()) throw ContractError("bce: probability and label counts differ");
  if (p.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += bce(p[i], y[i]);
  return sum / static_cast<double>(p.size());
}

// Distribution focal loss: cross-entropy against the two integer bins that
// bracket `target`, weighted by linear interpolation.
inline double dfl(std::span<const double> dist, double target) {
  if (dist.size() < 2) throw ContractError("dfl: distribution needs at least two bins");
  double sum = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ContractError("dfl: probabilities must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ContractError("dfl: distribution must sum to 1");
  const double n = static_cast<double>(dist.size() - 1);
  if (!(target >= 0.0 && target <= n)) throw ContractError("dfl: target outside [0, n]");

  const auto left = static_cast<std::size_t>(std::floor(target));
  const double w_right = target - static_cast<double>(left);
  double loss = -(1.0 - w_right) * std::log(std::max(dist[left], kLogEpsilon));
  if (w_right > 0.0) loss -= w_right * std::log(std::max(dist[left + 1], kLogEpsilon));
  return loss;
}

using BoxXywh = std::array<double, 4>;

// 1 - IoU of two [x, y, w, h] boxes; an empty union counts as no overlap.
inline double iou_loss(const BoxXywh& a, const BoxXywh& b) {
  if (a[2] < 0 || a[3] < 0 || b[2] < 0 || b[3] < 0) {
    throw ContractError("iou_loss: box width and height must be nonnegative");
  }
  const double iw = std::max(0.0, std::min(a[0] + a[2], b[0] + b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[1] + a[3], b[1] + b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  if (!(uni > 0.0)) return 1.0;
  return std::clamp(1.0 - inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ValidationError("tensor shape entries must be >= 0");
    n *= d;
  }
  return n;
}

// Element-wise mean. Each element's values are sorted before summing and
// summed as offsets from the smallest, which makes the result independent
// of argument order and exact when all inputs agree.
inline Checkpoint average_checkpoints(std::span<const Checkpoint> ckpts) {
  if (ckpts.empty()) throw ContractError("average_checkpoints: need at least one checkpoint");
  const Checkpoint& ref = ckpts.front();
  for (std::size_t k = 1; k < ckpts.size(); ++k) {
    const auto& other = ckpts[k].tensors;
    for (const auto& [name, t] : ref.tensors) {
      auto it = other.find(name);
      if (it == other.end()) {
        throw ContractError("average_checkpoints: tensor \"" + name + "\" missing from checkpoint " +
                            std::to_string(k + 1));
      }
      if (it->second.shape != t.shape || it->second.data.size() != t.data.size()) {
        throw ContractError("average_checkpoints: tensor \"" + name + "\" has mismatched shape");
      }
    }
    for (const auto& [name, t] : other) {
      if (!ref.tensors.count(name)) {
        throw ContractError("average_checkpoints: unexpected tensor \"" + name + "\" in checkpoint " +
                            std::to_string(k + 1));
      }
    }
  }

  Checkpoint out;
  std::vector<double> column(ckpts.size());
  const double n = static_cast<double>(ckpts.size());
  for (const auto& [name, t] : ref.tensors) {
    Tensor avg{t.shape, std::vector<double>(t.data.size())};
    for (std::size_t e = 0; e < t.data.size(); ++e) {
      for (std::size_t k = 0; k < ckpts.size(); ++k) column[k] = ckpts[k].tensors.at(name).data[e];
      std::sort(column.begin(), column.end());
      double offset = 0.0;
      for (double v : column) offset += v - column.front();
      avg.data[e] = column.front() + offset / n;
    }
    out.tensors.emplace(name, std::move(avg));
  }
  return out;
}

// {"provenance": {...}, "tensors": {"<name>": {"data": [...], "shape": [...]}}},
// names sorted, numbers in shortest round-trip form. Provenance is optional
// and ignored by parse_checkpoint.
inline std::string write_checkpoint(const Checkpoint& c,
                                    const nlohmann::json& provenance = nullptr) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : c.tensors) {
    for (double v : t.data) {
      if (!std::isfinite(v)) throw ValidationError("checkpoint tensor \"" + name + "\" has a non-finite value");
    }
    tensors[name] = {{"shape", t.shape}, {"data", t.data}};
  }
  nlohmann::json doc = {{"tensors", tensors}};
  if (!provenance.is_null()) doc["provenance"] = provenance;
  return doc.dump() + "\n";
}

inline Checkpoint parse_checkpoint(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed checkpoint JSON: ") + e.what(), e.byte);
  }
  auto it = doc.find("tensors");
  if (!doc.is_object() || it == doc.end() || !it->is_object()) {
    throw ValidationError("checkpoint needs a \"tensors\" object");
  }
  Checkpoint c;
  for (auto t = it->begin(); t != it->end(); ++t) {
    const std::string& name = t.key();
    const auto& body = t.value();
    Tensor tensor;
    try {
      tensor.shape = body.at("shape").get<std::vector<std::int64_t>>();
      tensor.data = body.at("data").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("checkpoint tensor \"" + name + "\" needs integer \"shape\" and numeric \"data\"");
    }
    if (element_count(tensor.shape) != static_cast<std::int64_t>(tensor.data.size())) {
      throw ValidationError("checkpoint tensor \"" + name + "\": data length does not match shape");
    }
    for (double v : tensor.data) {
      if (!std::isfinite(v)) throw ValidationError("checkpoint tensor \"" + name + "\" has a non-finite value");
    }
    c.tensors.emplace(name, std::move(tensor));
  }
  return c;
}

}  // namespace pseudoseg
