#include "tsa/backbone.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "tsa/optim.hpp"
#include "tsa/rng.hpp"

namespace tsa {

BackboneSpec BackboneSpec::resnet_s() {
  BackboneSpec s;
  s.name = "resnet_s";
  s.stem = {16, 3, 1, 1, false};
  s.stage_channels = {16, 32, 64, 128};
  return s;
}

BackboneSpec BackboneSpec::resnet18_replica() {
  BackboneSpec s;
  s.name = "resnet18";
  s.stem = {64, 7, 2, 3, true};
  s.stage_channels = {64, 128, 256, 512};
  return s;
}

std::vector<LayerSite> enumerate_sites(const BackboneSpec& spec) {
  std::vector<LayerSite> sites;
  int prev = spec.stem.out_channels;
  for (int st = 1; st <= spec.num_stages(); ++st) {
    const int ch = spec.stage_channels[static_cast<size_t>(st - 1)];
    for (int b = 1; b <= spec.blocks_per_stage; ++b) {
      const int in1 = b == 1 ? prev : ch;
      const int stride1 = (b == 1 && st > 1) ? 2 : 1;
      for (int c = 1; c <= 2; ++c) {
        LayerSite s;
        s.stage = st;
        s.block = b;
        s.conv = c;
        s.in_channels = c == 1 ? in1 : ch;
        s.out_channels = ch;
        s.stride = c == 1 ? stride1 : 1;
        s.tag = "s" + std::to_string(st) + ".b" + std::to_string(b) + ".conv" +
                std::to_string(c);
        sites.push_back(std::move(s));
      }
    }
    prev = ch;
  }
  return sites;
}

int64_t conv_param_count(const BackboneSpec& spec) {
  int64_t total = static_cast<int64_t>(spec.stem.out_channels) *
                  spec.in_channels * spec.stem.kernel * spec.stem.kernel;
  for (const LayerSite& s : enumerate_sites(spec)) {
    total += static_cast<int64_t>(s.out_channels) * s.in_channels * 9;
    const bool transition = s.conv == 1 && (s.stride != 1 || s.in_channels != s.out_channels);
    if (transition) total += static_cast<int64_t>(s.out_channels) * s.in_channels;
  }
  return total;
}

// ---- weights ------------------------------------------------------------------

Tensor& BackboneWeights::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw std::out_of_range("backbone weights: no tensor named " + name);
  return it->second;
}

const Tensor& BackboneWeights::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw std::out_of_range("backbone weights: no tensor named " + name);
  return it->second;
}

bool is_buffer_name(const std::string& name) {
  return name.ends_with(".mean") || name.ends_with(".var");
}

bool is_head_name(const std::string& name) { return name.starts_with("head"); }

void BackboneWeights::set_trainable(bool on) {
  for (auto& [name, t] : tensors)
    if (!is_buffer_name(name)) t.set_requires_grad(on);
}

int64_t BackboneWeights::count_parameters(bool include_heads) const {
  int64_t total = 0;
  for (const auto& [name, t] : tensors) {
    if (is_buffer_name(name)) continue;
    if (!include_heads && is_head_name(name)) continue;
    total += t.size();
  }
  return total;
}

namespace {

Tensor kaiming_conv(Rng& rng, int out, int in, int k) {
  const double std = std::sqrt(2.0 / (static_cast<double>(in) * k * k));
  std::vector<real> v(static_cast<size_t>(out) * in * k * k);
  for (auto& x : v) x = static_cast<real>(rng.normal() * std);
  return Tensor::from({out, in, k, k}, std::move(v));
}

void add_bn(BackboneWeights& w, const std::string& prefix, int ch) {
  w.tensors[prefix + ".gamma"] = Tensor::full({ch}, 1);
  w.tensors[prefix + ".beta"] = Tensor::zeros({ch});
  w.tensors[prefix + ".mean"] = Tensor::zeros({ch});
  w.tensors[prefix + ".var"] = Tensor::full({ch}, 1);
}

}  // namespace

BackboneWeights BackboneWeights::init(const BackboneSpec& spec, uint64_t seed,
                                      int num_heads, int classes_per_head) {
  Rng rng(mix_seed({seed, 0x62636b626f6e65ull}));
  BackboneWeights w;
  w.spec = spec;
  w.tensors["stem.conv.weight"] =
      kaiming_conv(rng, spec.stem.out_channels, spec.in_channels, spec.stem.kernel);
  add_bn(w, "stem.bn", spec.stem.out_channels);
  for (const LayerSite& s : enumerate_sites(spec)) {
    const std::string b = "s" + std::to_string(s.stage) + ".b" + std::to_string(s.block);
    w.tensors[b + ".conv" + std::to_string(s.conv) + ".weight"] =
        kaiming_conv(rng, s.out_channels, s.in_channels, 3);
    add_bn(w, b + ".bn" + std::to_string(s.conv), s.out_channels);
    if (s.conv == 1 && (s.stride != 1 || s.in_channels != s.out_channels)) {
      w.tensors[b + ".down.conv.weight"] =
          kaiming_conv(rng, s.out_channels, s.in_channels, 1);
      add_bn(w, b + ".down.bn", s.out_channels);
    }
  }
  for (int h = 0; h < num_heads; ++h)
    w.tensors["head" + std::to_string(h) + ".weight"] =
        Tensor::zeros({spec.feature_dim(), classes_per_head});
  return w;
}

// ---- forward ------------------------------------------------------------------

namespace {

Tensor apply_bn(BackboneWeights& w, const std::string& prefix, const Tensor& x,
                bool training, real momentum) {
  if (training)
    return batchnorm_training(x, w.at(prefix + ".gamma"), w.at(prefix + ".beta"),
                              w.at(prefix + ".mean"), w.at(prefix + ".var"),
                              momentum);
  return batchnorm_inference(x, w.at(prefix + ".gamma"), w.at(prefix + ".beta"),
                             w.at(prefix + ".mean"), w.at(prefix + ".var"));
}

}  // namespace

Tensor forward_features(BackboneWeights& w, const Tensor& images, bool training,
                        const ConvHook& hook, real bn_momentum) {
  const BackboneSpec& spec = w.spec;
  if (spec.stem.pool)
    throw std::invalid_argument("forward_features: pooled stems are count-only");
  if (images.shape().size() != 4 || images.dim(1) != spec.in_channels)
    throw std::invalid_argument("forward_features: expected [n," +
                                std::to_string(spec.in_channels) +
                                ",h,w], got " + shape_str(images.shape()));
  Tensor h = conv2d(images, w.at("stem.conv.weight"), spec.stem.stride, spec.stem.pad);
  h = apply_bn(w, "stem.bn", h, training, bn_momentum);
  h = relu(h);

  const auto sites = enumerate_sites(spec);
  for (size_t i = 0; i < sites.size(); i += 2) {
    const LayerSite& s1 = sites[i];
    const LayerSite& s2 = sites[i + 1];
    const std::string b = "s" + std::to_string(s1.stage) + ".b" + std::to_string(s1.block);
    Tensor x = h;
    Tensor y = conv2d(x, w.at(b + ".conv1.weight"), s1.stride, 1);
    if (hook) y = hook(s1, x, y);
    y = apply_bn(w, b + ".bn1", y, training, bn_momentum);
    y = relu(y);
    Tensor y2 = conv2d(y, w.at(b + ".conv2.weight"), 1, 1);
    if (hook) y2 = hook(s2, y, y2);
    y2 = apply_bn(w, b + ".bn2", y2, training, bn_momentum);
    Tensor skip = x;
    if (w.has(b + ".down.conv.weight")) {
      skip = conv2d(x, w.at(b + ".down.conv.weight"), s1.stride, 0);
      skip = apply_bn(w, b + ".down.bn", skip, training, bn_momentum);
    }
    h = relu(add(y2, skip));
  }
  return global_avg_pool(h);
}

Tensor head_logits(const BackboneWeights& w, int head, const Tensor& z) {
  return matmul(z, w.at("head" + std::to_string(head) + ".weight"));
}

// ---- pretraining ----------------------------------------------------------------

PretrainStats pretrain_backbone(BackboneWeights& w, const PretrainConfig& cfg,
                                const BatchSource& batches) {
  if (cfg.num_domains < 1)
    throw std::invalid_argument("pretrain: need at least one domain");
  for (int d = 0; d < cfg.num_domains; ++d)
    if (!w.has("head" + std::to_string(d) + ".weight"))
      throw std::invalid_argument("pretrain: missing head for domain " +
                                  std::to_string(d));
  w.set_trainable(true);
  SgdMomentum opt(cfg.momentum, cfg.weight_decay);
  for (auto& [name, t] : w.tensors)
    if (!is_buffer_name(name)) opt.add_param(t);

  PretrainStats stats;
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    GradTape tape;
    TapeScope scope(tape);
    Tensor total;
    for (int d = 0; d < cfg.num_domains; ++d) {
      auto [images, labels] =
          batches(d, mix_seed({cfg.seed, 0x7374657ull, static_cast<uint64_t>(step),
                               static_cast<uint64_t>(d)}));
      Tensor z = forward_features(w, images, true, {}, cfg.bn_momentum);
      Tensor loss = softmax_cross_entropy(head_logits(w, d, z), labels);
      total = total.defined() ? add(total, loss) : loss;
    }
    tape.backward(total);
    opt.step(cosine_lr(cfg.lr, step, cfg.steps));
    stats.loss_history.push_back(total.item());
    if (cfg.verbose && (step % 25 == 0 || step == cfg.steps - 1))
      std::fprintf(stderr, "pretrain step %d/%d loss %.4f\n", step + 1, cfg.steps,
                   static_cast<double>(total.item()));
  }
  stats.final_loss = stats.loss_history.empty() ? 0 : stats.loss_history.back();
  w.set_trainable(false);
  return stats;
}

}  // namespace tsa
