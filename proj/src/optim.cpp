// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/optim.hpp"

#include <cmath>
#include <numbers>

namespace m2rnn {

Index param_list_size(const ParamList& params) {
  Index n = 0;
  for (const NamedParam& p : params) n += p.value.size();
  return n;
}

AdamW::AdamW(const ParamList& params, AdamWConfig config) : config_(config) {
  for (const NamedParam& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void AdamW::step(ParamList& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw DimensionError("adamw: parameter/gradient/state counts differ");
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value.array();
    const auto& g = grads[i].array();
    if (g.size() != p.size()) throw DimensionError("adamw: gradient shape for " + params[i].name);
    m_[i].array() = b1 * m_[i].array() + (1.0 - b1) * g;
    v_[i].array() = b2 * v_[i].array() + (1.0 - b2) * g.square();
    if (params[i].decay && config_.weight_decay != 0.0) p -= (lr * config_.weight_decay) * p;
    p -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

double lr_schedule(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
                   double peak, double floor_fraction) {
  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const std::int64_t decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0 || step >= total_steps) return floor_fraction * peak;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return peak * (floor_fraction + (1.0 - floor_fraction) * cosine);
}

double global_grad_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.values()) sq += v * v;
  return std::sqrt(sq);
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) g.array() *= s;
  }
  return norm;
}

}  // namespace m2rnn
