#pragma once

#include <cmath>
#include <vector>

#include "adsunet/layers.hpp"

namespace adsunet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-7;  // L2 term added to the gradient
};

// Adam over a fixed set of parameters. Moment buffers live here, not in the
// parameters, so a fresh optimizer starts every stage.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Param<T>*> params, AdamConfig config)
      : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, t_);
    const double bc2 = 1.0 - std::pow(config_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g =
            static_cast<double>(p.grad[i]) + config_.weight_decay * p.value[i];
        m[i] = config_.beta1 * m[i] + (1 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1 - config_.beta2) * g * g;
        const double update =
            lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
        p.value[i] = static_cast<T>(p.value[i] - update);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Param<T>*> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

// One-cycle learning rate: cosine warm-up from max_lr / div_factor to max_lr
// over pct_start of the steps, then cosine annealing to
// max_lr / (div_factor * final_div_factor).
class OneCycleSchedule {
 public:
  OneCycleSchedule(double max_lr, long total_steps, double pct_start = 0.3,
                   double div_factor = 25.0, double final_div_factor = 1e4)
      : max_lr_(max_lr),
        total_(std::max(1L, total_steps)),
        pct_start_(pct_start),
        initial_(max_lr / div_factor),
        final_(max_lr / (div_factor * final_div_factor)) {}

  double lr(long step) const {
    const double warm = std::max(1.0, pct_start_ * static_cast<double>(total_ - 1));
    const double s = static_cast<double>(std::min(step, total_ - 1));
    if (s <= warm) return anneal(initial_, max_lr_, s / warm);
    const double rest = std::max(1.0, static_cast<double>(total_ - 1) - warm);
    return anneal(max_lr_, final_, (s - warm) / rest);
  }

  double initial_lr() const { return initial_; }
  double max_lr() const { return max_lr_; }

 private:
  static double anneal(double from, double to, double pct) {
    return to + (from - to) / 2.0 * (std::cos(M_PI * pct) + 1.0);
  }

  double max_lr_;
  long total_;
  double pct_start_;
  double initial_;
  double final_;
};

}  // namespace adsunet
