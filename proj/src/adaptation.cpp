#include "tsa/adaptation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "tsa/optim.hpp"

namespace tsa {

namespace {

int way_of(const std::vector<int>& labels, const char* who) {
  if (labels.empty())
    throw std::invalid_argument(std::string(who) + ": empty support");
  int way = 0;
  for (int y : labels) way = std::max(way, y + 1);
  if (way < 2)
    throw std::invalid_argument(std::string(who) + ": need at least 2 classes");
  std::vector<int> counts(static_cast<size_t>(way), 0);
  for (int y : labels) {
    if (y < 0)
      throw std::invalid_argument(std::string(who) + ": negative label");
    counts[static_cast<size_t>(y)]++;
  }
  for (int k = 0; k < way; ++k)
    if (counts[static_cast<size_t>(k)] == 0)
      throw std::invalid_argument(std::string(who) + ": class " +
                                  std::to_string(k) + " has no support");
  return way;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& want) {
  int hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == want[i]) hits++;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Trainable backbone tensors: conv and norm parameters, not running
/// buffers, not pretraining heads.
std::vector<Tensor> backbone_params(BackboneWeights& w) {
  std::vector<Tensor> out;
  for (auto& [name, t] : w.tensors)
    if (!is_buffer_name(name) && !is_head_name(name)) out.push_back(t);
  return out;
}

Tensor head_logits_for(HeadKind kind, const Tensor& emb,
                       const Tensor& support_emb,
                       const std::vector<int>& support_labels, int way,
                       const Tensor& linear_head) {
  switch (kind) {
    case HeadKind::Ncc:
    case HeadKind::FinetuneNcc:
      return ncc_logits(emb, support_emb, support_labels, way);
    case HeadKind::Md:
      return md_logits(emb, support_emb, support_labels, way);
    case HeadKind::Lr:
      return linear_logits(emb, linear_head,
                           LinearHeadKind::LogisticRegression);
    case HeadKind::Softmax:
      return linear_logits(emb, linear_head, LinearHeadKind::Softmax);
    case HeadKind::Knn:
      break;
  }
  throw std::logic_error("head_logits_for: knn has no logits");
}

}  // namespace

HeadConfig HeadConfig::parse(const std::string& s) {
  HeadConfig h;
  if (s == "ncc") {
    h.kind = HeadKind::Ncc;
  } else if (s == "md") {
    h.kind = HeadKind::Md;
  } else if (s == "lr") {
    h.kind = HeadKind::Lr;
  } else if (s == "softmax") {
    h.kind = HeadKind::Softmax;
  } else if (s == "finetune-ncc") {
    h.kind = HeadKind::FinetuneNcc;
  } else if (s.rfind("knn", 0) == 0) {
    h.kind = HeadKind::Knn;
    const std::string rest = s.substr(3);
    if (rest.empty()) {
      h.knn_k = 1;
    } else {
      if (!std::all_of(rest.begin(), rest.end(),
                       [](char c) { return c >= '0' && c <= '9'; }))
        throw std::invalid_argument("bad head descriptor: " + s);
      h.knn_k = std::stoi(rest);
      if (h.knn_k < 1)
        throw std::invalid_argument("bad head descriptor: " + s);
    }
  } else {
    throw std::invalid_argument("unknown head: " + s);
  }
  return h;
}

std::string HeadConfig::code() const {
  switch (kind) {
    case HeadKind::Ncc: return "ncc";
    case HeadKind::Md: return "md";
    case HeadKind::Lr: return "lr";
    case HeadKind::Softmax: return "softmax";
    case HeadKind::Knn: return "knn" + std::to_string(knn_k);
    case HeadKind::FinetuneNcc: return "finetune-ncc";
  }
  return "?";
}

AdaptOutcome adapt(TaskModel& model, const Tensor& support_images,
                   const std::vector<int>& support_labels,
                   const AdaptConfig& cfg, const IterationHook& on_iteration) {
  const int way = way_of(support_labels, "adapt");
  if (cfg.iterations < 0)
    throw std::invalid_argument("adapt: iterations must be >= 0");
  if (cfg.head.kind == HeadKind::Knn && cfg.iterations > 0)
    throw std::invalid_argument(
        "adapt: the knn head is vote-based and cannot drive the support "
        "loss; use iterations=0");

  std::vector<Tensor> alpha_params =
      cfg.finetune_all ? backbone_params(model.backbone) : model.site_params();
  if (cfg.finetune_all)
    for (const Tensor& t : alpha_params)
      if (!t.requires_grad())
        throw std::invalid_argument(
            "adapt: finetune_all needs a trainable deep-copied backbone; "
            "build one with make_finetune_model");

  const bool has_theta = !alpha_params.empty() || model.beta.defined();
  const bool linear_head =
      cfg.head.kind == HeadKind::Lr || cfg.head.kind == HeadKind::Softmax;
  AdaptOutcome out;
  if (linear_head && cfg.iterations > 0) {
    if (!has_theta)
      throw std::invalid_argument(
          "adapt: a linear head with no task parameters has nothing to "
          "optimize here; train the head with train_linear_head instead");
    out.linear_head =
        Tensor::zeros({model.backbone.spec.feature_dim(), way}, true);
  }

  Adadelta opt(cfg.rho, cfg.eps);
  const real lr_a = cfg.effective_lr_alpha();
  for (Tensor& t : alpha_params) opt.add_param(t, lr_a);
  if (model.beta.defined()) opt.add_param(model.beta, cfg.lr_beta);
  if (out.linear_head.defined()) opt.add_param(out.linear_head, cfg.lr_beta);

  for (int it = 0; it < cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    real loss_value;
    double acc;
    {
      GradTape tape;
      TapeScope scope(tape);
      Tensor emb = model.embed(support_images, /*training=*/false);
      Tensor logits = head_logits_for(cfg.head.kind, emb, emb, support_labels,
                                      way, out.linear_head);
      Tensor loss = softmax_cross_entropy(logits, support_labels);
      loss_value = loss.item();
      acc = accuracy(argmax_rows(logits), support_labels);
      if (!std::isfinite(static_cast<double>(loss_value)))
        throw AdaptError("adapt: non-finite support loss at iteration " +
                             std::to_string(it),
                         std::move(out.trace));
      tape.backward(loss);
    }
    try {
      opt.step();
    } catch (const std::runtime_error& e) {
      throw AdaptError(std::string("adapt: ") + e.what() + " at iteration " +
                           std::to_string(it),
                       std::move(out.trace));
    }
    opt.zero_grad();
    const std::chrono::duration<double> dt =
        std::chrono::steady_clock::now() - t0;
    out.trace.support_loss.push_back(loss_value);
    out.trace.support_accuracy.push_back(static_cast<real>(acc));
    out.trace.seconds.push_back(dt.count());
    if (on_iteration) on_iteration(it + 1, out);
  }
  return out;
}

namespace {

double score_query(TaskModel& model, const Episode& ep,
                   const HeadConfig& head, const Tensor& joint_head) {
  Tensor s_emb = model.embed(ep.support_images, false);
  Tensor q_emb = model.embed(ep.query_images, false);
  std::vector<int> pred;
  switch (head.kind) {
    case HeadKind::Knn:
      pred = knn_predict(q_emb, s_emb, ep.support_labels, head.knn_k);
      break;
    case HeadKind::Lr:
    case HeadKind::Softmax: {
      const LinearHeadKind kind = head.kind == HeadKind::Lr
                                      ? LinearHeadKind::LogisticRegression
                                      : LinearHeadKind::Softmax;
      Tensor w = joint_head;
      if (!w.defined()) {
        LinearHeadConfig hc;
        hc.kind = kind;
        w = train_linear_head(s_emb, ep.support_labels, ep.way, hc);
      }
      pred = argmax_rows(linear_logits(q_emb, w, kind));
      break;
    }
    default:
      pred = argmax_rows(head_logits_for(head.kind, q_emb, s_emb,
                                         ep.support_labels, ep.way, Tensor()));
  }
  return accuracy(pred, ep.query_labels);
}

}  // namespace

EpisodeResult evaluate_episode(TaskModel& model, const Episode& episode,
                               const AdaptConfig& cfg,
                               const std::vector<int>& checkpoints) {
  if (static_cast<int>(episode.support_labels.size()) !=
      episode.support_images.dim(0))
    throw std::invalid_argument("evaluate_episode: malformed episode");

  EpisodeResult res;
  AdaptOutcome outcome = adapt(
      model, episode.support_images, episode.support_labels, cfg,
      [&](int done, const AdaptOutcome& so_far) {
        if (std::find(checkpoints.begin(), checkpoints.end(), done) ==
            checkpoints.end())
          return;
        res.checkpoints.emplace_back(
            done, score_query(model, episode, cfg.head, so_far.linear_head));
      });
  res.trace = std::move(outcome.trace);

  res.query_accuracy =
      (!res.checkpoints.empty() && res.checkpoints.back().first == cfg.iterations)
          ? res.checkpoints.back().second
          : score_query(model, episode, cfg.head, outcome.linear_head);
  return res;
}

TaskModel make_finetune_model(const BackboneWeights& frozen, bool with_beta) {
  BackboneWeights copy;
  copy.spec = frozen.spec;
  for (const auto& [name, t] : frozen.tensors) copy.tensors.emplace(name, t.clone());
  copy.set_trainable(true);

  AdapterConfig cfg;
  cfg.attach_stages = {};
  cfg.include_pa = with_beta;
  return TaskModel::attach(copy, cfg);
}

TaskModel finetune_baseline(const BackboneWeights& frozen,
                            const Tensor& support_images,
                            const std::vector<int>& support_labels,
                            AdaptConfig cfg, AdaptTrace* trace_out) {
  TaskModel model = make_finetune_model(frozen);
  cfg.finetune_all = true;
  cfg.head.kind = HeadKind::FinetuneNcc;
  AdaptOutcome out = adapt(model, support_images, support_labels, cfg);
  if (trace_out) *trace_out = std::move(out.trace);
  return model;
}

}  // namespace tsa
