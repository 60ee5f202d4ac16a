// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "m2rnn/tensor.hpp"

namespace m2rnn {

// A named trainable tensor; parameters with decay == false are exempt from
// weight decay.
struct NamedParam {
  std::string name;
  Tensor value;
  bool decay = true;
};

using ParamList = std::vector<NamedParam>;

Index param_list_size(const ParamList& params);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Decoupled weight decay with bias-corrected moments:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamList& params, AdamWConfig config);

  void step(ParamList& params, const std::vector<Tensor>& grads, double lr);

  std::int64_t steps() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::vector<Tensor> m_, v_;
  std::int64_t step_ = 0;
};

// Linear warmup from 0 to peak over warmup_steps, then cosine decay to
// floor_fraction * peak at total_steps (held there afterwards).
double lr_schedule(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
                   double peak, double floor_fraction = 0.1);

double global_grad_norm(const std::vector<Tensor>& grads);

// Scales grads so the global L2 norm is at most max_norm; returns the norm
// before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace m2rnn
