#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsa/adapters.hpp"
#include "tsa/classifiers.hpp"
#include "tsa/episodes.hpp"

namespace tsa {

enum class HeadKind { Ncc, Md, Lr, Softmax, Knn, FinetuneNcc };

/// Classifier descriptor, parsed from "ncc" | "md" | "lr" | "softmax" |
/// "knn{k}" | "finetune-ncc".
struct HeadConfig {
  HeadKind kind = HeadKind::Ncc;
  int knn_k = 1;
  static HeadConfig parse(const std::string& s);
  std::string code() const;
};

struct AdaptConfig {
  int iterations = 40;
  real lr_beta = 0.1;
  /// Negative means "half of lr_beta", the default coupling.
  real lr_alpha = -1;
  real rho = 0.9;
  real eps = 1e-6;
  HeadConfig head;
  bool finetune_all = false;
  uint64_t seed = 0;

  real effective_lr_alpha() const {
    return lr_alpha < 0 ? lr_beta / 2 : lr_alpha;
  }
};

/// Per-iteration record of the support optimization. All three vectors have
/// exactly one entry per completed iteration.
struct AdaptTrace {
  std::vector<real> support_loss;
  std::vector<real> support_accuracy;
  std::vector<double> seconds;
};

/// Raised when the support loss or a gradient goes non-finite; carries the
/// trace of the iterations that completed before the failure.
struct AdaptError : std::runtime_error {
  AdaptTrace trace;
  AdaptError(const std::string& what, AdaptTrace t)
      : std::runtime_error(what), trace(std::move(t)) {}
};

struct AdaptOutcome {
  AdaptTrace trace;
  /// Trained {d, way} weight matrix when a linear head was optimized jointly
  /// with the task parameters; undefined otherwise.
  Tensor linear_head;
};

/// Full-batch Adadelta on the support set: cross-entropy of the configured
/// head's logits, recomputed through the adapted backbone every iteration.
/// Adapter tensors move at the alpha rate, beta (and a jointly trained
/// linear head) at the beta rate. With finetune_all, every non-buffer
/// backbone tensor joins at the alpha rate and must already be trainable
/// (see make_finetune_model). The backbone runs in inference mode, so
/// batch-norm buffers and frozen weights stay bitwise intact.
/// on_iteration, when given, runs after each completed iteration with the
/// number of iterations done so far and the outcome accumulated so far.
using IterationHook = std::function<void(int, const AdaptOutcome&)>;
AdaptOutcome adapt(TaskModel& model, const Tensor& support_images,
                   const std::vector<int>& support_labels,
                   const AdaptConfig& cfg,
                   const IterationHook& on_iteration = {});

/// Adapts on the episode's support set, then scores argmax predictions on
/// the query set. `checkpoints` lists iteration counts at which the query
/// accuracy is additionally measured mid-run (so one run can report several
/// iteration budgets).
struct EpisodeResult {
  double query_accuracy = 0;
  std::vector<std::pair<int, double>> checkpoints;
  AdaptTrace trace;
};
EpisodeResult evaluate_episode(TaskModel& model, const Episode& episode,
                               const AdaptConfig& cfg,
                               const std::vector<int>& checkpoints = {});

/// Deep-copies a backbone into a fully trainable task model with no adapters
/// (optionally with the affine alignment map), for the full-finetuning
/// baseline.
TaskModel make_finetune_model(const BackboneWeights& frozen,
                              bool with_beta = true);

/// Runs the full-finetuning baseline on a support set and returns the tuned
/// model. The trace of the underlying run is written to *trace_out when
/// given.
TaskModel finetune_baseline(const BackboneWeights& frozen,
                            const Tensor& support_images,
                            const std::vector<int>& support_labels,
                            AdaptConfig cfg, AdaptTrace* trace_out = nullptr);

}  // namespace tsa
