#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tsa/tensor.hpp"

namespace tsa {

struct StemSpec {
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  bool pool = false;  // counted as zero parameters; runtime rejects pooled stems
};

/// Static description of a residual backbone: a stem conv followed by stages
/// of two-conv blocks. The first block of every stage after the first halves
/// the spatial extent and projects the skip path with a strided 1x1 conv.
struct BackboneSpec {
  std::string name;
  int in_channels = 3;
  StemSpec stem;
  std::vector<int> stage_channels;
  int blocks_per_stage = 2;

  int num_stages() const { return static_cast<int>(stage_channels.size()); }
  int feature_dim() const { return stage_channels.back(); }

  /// Small backbone for 32x32 inputs; the model every experiment runs on.
  static BackboneSpec resnet_s();
  /// Standard 18-layer layout. Never run here; it is the reference count the
  /// adapter budget fractions are quoted against.
  static BackboneSpec resnet18_replica();
};

/// One adaptable conv inside a residual block. The stem and the downsample
/// projections are not sites.
struct LayerSite {
  int stage = 0;  // 1-based
  int block = 0;  // 1-based
  int conv = 0;   // 1 or 2
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  std::string tag;  // "s2.b1.conv1"
};

/// Sites in forward order: 2 per block, 2 blocks per stage.
std::vector<LayerSite> enumerate_sites(const BackboneSpec& spec);

/// Total conv kernel elements (stem, block convs, downsample projections).
int64_t conv_param_count(const BackboneSpec& spec);

/// Called after every block conv with the site, the tensor that was fed into
/// the conv and the conv output; returns the (possibly transformed) output.
using ConvHook =
    std::function<Tensor(const LayerSite&, const Tensor& input, const Tensor& conv_out)>;

/// Parameters and batchnorm buffers in a stable-name map, plus one linear
/// head per pretraining domain ("head0.weight", ...).
struct BackboneWeights {
  BackboneSpec spec;
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  /// Flips requires_grad on every parameter. Batchnorm buffers stay frozen.
  void set_trainable(bool on);
  int64_t count_parameters(bool include_heads = false) const;

  /// Kaiming-normal convs, identity batchnorm, zero heads.
  static BackboneWeights init(const BackboneSpec& spec, uint64_t seed,
                              int num_heads = 0, int classes_per_head = 0);
};

/// Batchnorm running statistics; serialized but never trained.
bool is_buffer_name(const std::string& name);
bool is_head_name(const std::string& name);

/// Embeddings [n, feature_dim]. training selects batch statistics and folds
/// them into the running buffers in place; hook may be empty.
Tensor forward_features(BackboneWeights& w, const Tensor& images, bool training,
                        const ConvHook& hook = {}, real bn_momentum = 0.1);

/// Pretraining logits for one domain head: z [n,d] x "headk.weight" [d,c].
Tensor head_logits(const BackboneWeights& w, int head, const Tensor& z);

/// Supplies one batch (images, labels) for a training domain.
using BatchSource =
    std::function<std::pair<Tensor, std::vector<int>>(int domain, uint64_t step_seed)>;

struct PretrainConfig {
  int steps = 500;
  int batch_per_domain = 8;
  int num_domains = 4;
  real lr = 0.05;
  real momentum = 0.9;
  real weight_decay = 5e-4;
  real bn_momentum = 0.1;
  uint64_t seed = 0;
  bool verbose = false;
};

struct PretrainStats {
  std::vector<real> loss_history;  // per step, summed over domains
  real final_loss = 0;
};

/// Multi-domain pretraining. Every step runs one batch per domain through the
/// shared backbone and that domain's head, sums the cross entropies, and takes
/// one SGD step with single-cycle cosine decay. Leaves the weights frozen.
PretrainStats pretrain_backbone(BackboneWeights& w, const PretrainConfig& cfg,
                                const BatchSource& batches);

}  // namespace tsa
