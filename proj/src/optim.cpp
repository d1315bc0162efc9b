#include "tsa/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tsa {

Adadelta::Adadelta(real rho, real eps) : rho_(rho), eps_(eps) {}

void Adadelta::add_param(const Tensor& p, real lr) {
  if (!p.requires_grad())
    throw std::invalid_argument("Adadelta: parameter without requires_grad");
  Slot s;
  s.p = p;
  s.lr = lr;
  s.eg2.assign(static_cast<size_t>(p.size()), 0);
  s.edx2.assign(static_cast<size_t>(p.size()), 0);
  slots_.push_back(std::move(s));
}

void Adadelta::step() {
  for (const Slot& s : slots_)
    for (real g : s.p.grad())
      if (!std::isfinite(g))
        throw std::runtime_error("Adadelta: non-finite gradient, step rejected");
  for (Slot& s : slots_) {
    auto& w = s.p.data();
    const auto& g = s.p.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      s.eg2[i] = rho_ * s.eg2[i] + (real(1) - rho_) * g[i] * g[i];
      const real delta =
          -std::sqrt(s.edx2[i] + eps_) / std::sqrt(s.eg2[i] + eps_) * g[i];
      s.edx2[i] = rho_ * s.edx2[i] + (real(1) - rho_) * delta * delta;
      w[i] += s.lr * delta;
    }
  }
}

void Adadelta::zero_grad() {
  for (Slot& s : slots_) s.p.zero_grad();
}

SgdMomentum::SgdMomentum(real momentum, real weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {}

void SgdMomentum::add_param(const Tensor& p) {
  if (!p.requires_grad())
    throw std::invalid_argument("SgdMomentum: parameter without requires_grad");
  Slot s;
  s.p = p;
  s.v.assign(static_cast<size_t>(p.size()), 0);
  slots_.push_back(std::move(s));
}

void SgdMomentum::step(real lr) {
  for (const Slot& s : slots_)
    for (real g : s.p.grad())
      if (!std::isfinite(g))
        throw std::runtime_error("SgdMomentum: non-finite gradient, step rejected");
  for (Slot& s : slots_) {
    auto& w = s.p.data();
    const auto& g = s.p.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      const real eff = g[i] + weight_decay_ * w[i];
      s.v[i] = momentum_ * s.v[i] + eff;
      w[i] -= lr * s.v[i];
    }
  }
}

void SgdMomentum::zero_grad() {
  for (Slot& s : slots_) s.p.zero_grad();
}

real cosine_lr(real base_lr, int step, int total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps <= 0");
  if (step < 0) step = 0;
  if (step > total_steps) step = total_steps;
  return base_lr * real(0.5) *
         (real(1) + std::cos(M_PI * static_cast<real>(step) /
                             static_cast<real>(total_steps)));
}

}  // namespace tsa
