#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsa/tensor.hpp"

namespace tsa {

enum class Split { Train, Val, Test };

/// Immutable image collection for one domain. Pixels are kept raw (as
/// generated or ingested, roughly [0,1]); standardization by the stored
/// per-channel stats happens when images are materialized into tensors.
/// Class ids are global: no id appears in two datasets, and within a dataset
/// the train/val/test class lists are disjoint.
struct Dataset {
  std::string name;
  int domain_id = 0;
  bool seen = true;
  int channels = 0, height = 0, width = 0;
  std::vector<real> pixels;  // num_images * channels*height*width, row-major
  std::vector<int> labels;   // global class id per image
  std::vector<int> train_classes, val_classes, test_classes;
  std::vector<real> channel_mean, channel_std;

  int image_numel() const { return channels * height * width; }
  int num_images() const {
    return image_numel() == 0
               ? 0
               : static_cast<int>(pixels.size()) / image_numel();
  }
  const std::vector<int>& classes_in(Split s) const {
    return s == Split::Train ? train_classes
                             : (s == Split::Val ? val_classes : test_classes);
  }
  std::vector<int> image_indices_of_class(int class_id) const;
  /// Standardized {k, c, h, w} tensor of the listed images.
  Tensor images_at(const std::vector<int>& idx) const;
};

enum class ShiftFamily { None, ChannelMix, Rotation, Texture, Noise };

/// Recipe for one synthetic domain. Prototypes and instance noise derive
/// from proto_seed only, so two specs sharing a proto_seed (and class/image
/// counts) produce pixel-paired samples that differ purely by the domain
/// transformation.
struct SyntheticDomainSpec {
  std::string name;
  int num_classes = 8;
  int images_per_class = 30;
  bool seen = true;
  uint64_t proto_seed = 1;
  ShiftFamily family = ShiftFamily::None;
  std::vector<real> mix;             // 3x3 row-major, ChannelMix only
  real rot_lo_deg = 0, rot_hi_deg = 0;  // Rotation only
  real texture_amp = 0;              // Texture only
  real noise_sigma = 0;              // Noise only (extra, beyond instance noise)
};

/// Instance noise applied to every synthetic image before the domain
/// transformation, so channel-mixed domains stay exactly linearly related.
inline constexpr double kInstanceNoiseSigma = 0.05;

/// Builds one dataset per spec with globally disjoint class ids. Images are
/// 3x32x32: seeded Gaussian-blob class prototype, plus instance noise, then
/// the domain transformation. Seen domains split classes ~50/20/30 into
/// train/val/test; unseen domains put every class in test.
std::vector<Dataset> gen_synthetic_domains(
    const std::vector<SyntheticDomainSpec>& specs, uint64_t seed);

/// Parses big-endian IDX image/label files (magics 0x00000803/0x00000801)
/// into an unseen dataset with pixels byte/255 and every class in test.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);

/// Replicates a single-channel dataset across `channels` identical channels
/// so grayscale ingested data can feed an RGB backbone.
Dataset expand_channels(const Dataset& ds, int channels);

enum class Protocol { Varying, VaryingWay5Shot, FiveWayOneShot };
Protocol parse_protocol(const std::string& s);
std::string protocol_name(Protocol p);

inline constexpr int kMinWay = 5;
inline constexpr int kMaxWay = 20;
inline constexpr int kMaxShot = 10;
inline constexpr int kQueriesPerClass = 10;

/// One few-shot task. Labels are remapped to [0, way); class_ids maps them
/// back to global ids. Support and query draw disjoint images, and the query
/// set is class-balanced at kQueriesPerClass.
struct Episode {
  Tensor support_images;  // {sum(shots), c, h, w}
  std::vector<int> support_labels;
  Tensor query_images;  // {way * kQueriesPerClass, c, h, w}
  std::vector<int> query_labels;
  std::vector<int> class_ids;  // size way
  std::vector<int> shots;      // size way
  int way = 0;
  int domain_id = 0;
  int episode_index = 0;
};

/// Samples an episode from one split of a dataset. Varying draws
/// way ~ U{5..min(20, classes)} and per-class shots ~ U{1..10};
/// VaryingWay5Shot fixes shots at 5; FiveWayOneShot fixes way=5, shots=1.
/// Fully determined by (dataset, split, protocol, seed, episode_index).
Episode sample_episode(const Dataset& ds, Protocol protocol, uint64_t seed,
                       int episode_index, Split split = Split::Test);

/// Samples an episode and then mixes the channels of every support and query
/// image by the 3x3 matrix `mix` (a per-pixel linear map, so a 1x1
/// convolution can invert the planted shift exactly). Throws if the matrix
/// condition number is not finite and below 100.
Episode make_channel_shift_episode(const Dataset& ds,
                                   const std::vector<real>& mix,
                                   Protocol protocol, uint64_t seed,
                                   int episode_index,
                                   Split split = Split::Test);

/// Condition number (largest over smallest singular value) of a 3x3 matrix.
double condition_number_3x3(const std::vector<real>& m);

/// Standardized batch of `batch` train-split images with labels remapped to
/// the dataset's train-class order, for multi-domain pretraining heads.
std::pair<Tensor, std::vector<int>> sample_train_batch(const Dataset& ds,
                                                       int batch,
                                                       uint64_t step_seed);

}  // namespace tsa
