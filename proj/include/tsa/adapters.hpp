#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsa/backbone.hpp"

namespace tsa {

enum class Connection { Serial, Residual };
enum class Form { Matrix, Channelwise, Decomposed };

/// What to bolt onto each backbone conv. Serial adapters transform the conv
/// output (identity-initialized); residual adapters add a transformed copy of
/// the conv input (initialized to init_scale, so the branch starts near
/// silent). The decomposed form factors the residual matrix into
/// [out x B][B x in] with B = ceil(out / group_width) at the listed stages and
/// falls back to the full matrix elsewhere.
struct AdapterConfig {
  Connection connection = Connection::Residual;
  Form form = Form::Matrix;
  int group_width = 32;
  std::vector<int> decompose_stages = {3, 4};
  std::vector<int> attach_stages = {1, 2, 3, 4};
  real init_scale = 1e-4;
  bool include_pa = false;    // trainable alignment map in front of the head
  bool strict_sites = false;  // throw instead of skipping incompatible sites

  /// "Ad-R-M", "Ad-S-C", "Ad-R-DN32-PA", ...
  std::string code() const;
  static AdapterConfig parse(const std::string& code);
};

/// One instantiated adapter. Channelwise residual adapters need the conv to
/// keep channel count and stride; incompatible sites are kept but marked
/// skipped (unless strict_sites asked for an error).
struct AdapterSite {
  LayerSite site;
  Connection connection = Connection::Residual;
  Form form = Form::Matrix;
  bool skipped = false;
  Tensor alpha;      // matrix [out, in_eff] or channelwise [out]
  Tensor v, gamma;   // decomposed factors [out, B], [B, in_eff]
};

/// The transformed conv output for one site.
Tensor apply_adapter(const AdapterSite& s, const Tensor& input,
                     const Tensor& conv_out);

/// The site's adapter collapsed to a dense [out, in_eff] matrix (channelwise
/// sites as a diagonal), mainly for inspection and tests.
Tensor effective_matrix(const AdapterSite& s);

/// Closed-form trainable-parameter count of a configuration on a backbone,
/// skipped sites excluded, plus d*d when the alignment map is on.
int64_t adapter_param_count(const AdapterConfig& cfg, const BackboneSpec& spec);

/// A frozen backbone plus trainable adapters. The backbone map aliases the
/// shared weights (no copy); only the adapter tensors belong to this model.
struct TaskModel {
  BackboneWeights backbone;
  AdapterConfig config;
  std::vector<AdapterSite> sites;
  Tensor beta;  // [d, d] identity-initialized alignment map, when enabled

  static TaskModel attach(const BackboneWeights& backbone,
                          const AdapterConfig& cfg);

  /// Embeddings through the adapted backbone, then z beta^T when enabled.
  Tensor embed(const Tensor& images, bool training = false);

  /// Adapter tensors in forward order (alpha or v,gamma per live site).
  std::vector<Tensor> site_params() const;
  /// site_params plus beta.
  std::vector<Tensor> trainable() const;
  int64_t adapter_parameters() const;

  ConvHook hook() const;
};

}  // namespace tsa
