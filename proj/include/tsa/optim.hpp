#pragma once

#include <vector>

#include "tsa/tensor.hpp"

namespace tsa {

/// Adadelta with per-parameter learning-rate scaling. Running averages follow
/// E[g2] <- rho E[g2] + (1-rho) g2, delta = -sqrt(E[dx2]+eps)/sqrt(E[g2]+eps) g,
/// E[dx2] <- rho E[dx2] + (1-rho) delta2, p <- p + lr * delta.
/// A non-finite gradient rejects the whole step before any state changes.
class Adadelta {
 public:
  explicit Adadelta(real rho = 0.9, real eps = 1e-6);

  void add_param(const Tensor& p, real lr);
  void step();
  void zero_grad();
  size_t num_params() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor p;
    real lr;
    std::vector<real> eg2, edx2;
  };
  std::vector<Slot> slots_;
  real rho_, eps_;
};

/// Plain SGD with momentum and coupled weight decay (g <- g + wd * p).
class SgdMomentum {
 public:
  SgdMomentum(real momentum, real weight_decay);

  void add_param(const Tensor& p);
  void step(real lr);
  void zero_grad();

 private:
  struct Slot {
    Tensor p;
    std::vector<real> v;
  };
  std::vector<Slot> slots_;
  real momentum_, weight_decay_;
};

/// Single-cycle cosine annealing from base_lr to zero over total steps.
real cosine_lr(real base_lr, int step, int total_steps);

}  // namespace tsa
