#include "tsa/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "tsa/rng.hpp"

namespace tsa {

namespace {

constexpr uint64_t kTagProto = 0x70726f746full;      // blob prototypes
constexpr uint64_t kTagNoise = 0x6e6f697365ull;      // instance noise
constexpr uint64_t kTagShift = 0x7368696674ull;      // per-image transform draw
constexpr uint64_t kTagTexture = 0x74657874ull;      // per-domain texture
constexpr uint64_t kTagEpisode = 0x657069ull;        // episode sampling
constexpr uint64_t kTagBatch = 0x626174636880ull;    // pretrain batches

constexpr int kImageSide = 32;
constexpr int kImageChannels = 3;

/// Seeded mixture of 3..6 Gaussian blobs rendered per channel, clamped to
/// [0,1]. Depends only on (proto_seed, local class index).
std::vector<real> blob_prototype(uint64_t proto_seed, int local_class) {
  Rng rng(mix_seed({proto_seed, static_cast<uint64_t>(local_class), kTagProto}));
  const int n_blobs = 3 + static_cast<int>(rng.u64() % 4);
  struct Blob {
    double cx, cy, sigma;
    double amp[kImageChannels];
  };
  std::vector<Blob> blobs(static_cast<size_t>(n_blobs));
  for (auto& b : blobs) {
    b.cx = rng.uniform(4.0, 28.0);
    b.cy = rng.uniform(4.0, 28.0);
    b.sigma = rng.uniform(1.5, 4.0);
    for (double& a : b.amp) a = rng.uniform(0.2, 1.0);
  }
  std::vector<real> img(static_cast<size_t>(kImageChannels) * kImageSide * kImageSide, 0);
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < kImageSide; ++y)
      for (int x = 0; x < kImageSide; ++x) {
        double v = 0;
        for (const auto& b : blobs) {
          const double dx = x - b.cx, dy = y - b.cy;
          v += b.amp[c] * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
        }
        img[(static_cast<size_t>(c) * kImageSide + y) * kImageSide + x] =
            static_cast<real>(std::min(1.0, v));
      }
  return img;
}

void add_instance_noise(std::vector<real>& img, uint64_t proto_seed,
                        int local_class, int instance) {
  Rng rng(mix_seed({proto_seed, static_cast<uint64_t>(local_class),
                    static_cast<uint64_t>(instance), kTagNoise}));
  for (auto& v : img) v += static_cast<real>(rng.normal(0, kInstanceNoiseSigma));
}

void apply_channel_mix(std::vector<real>& img, const std::vector<real>& m) {
  const int hw = kImageSide * kImageSide;
  for (int p = 0; p < hw; ++p) {
    real in[kImageChannels];
    for (int c = 0; c < kImageChannels; ++c) in[c] = img[static_cast<size_t>(c) * hw + p];
    for (int c = 0; c < kImageChannels; ++c) {
      real acc = 0;
      for (int k = 0; k < kImageChannels; ++k)
        acc += m[static_cast<size_t>(c) * kImageChannels + k] * in[k];
      img[static_cast<size_t>(c) * hw + p] = acc;
    }
  }
}

/// Nearest-neighbor rotation about the image center; out-of-frame reads as 0.
void apply_rotation(std::vector<real>& img, double angle_deg) {
  const double a = angle_deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(a), sn = std::sin(a);
  const double ctr = (kImageSide - 1) / 2.0;
  const int hw = kImageSide * kImageSide;
  std::vector<real> out(img.size(), 0);
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x) {
      // Source location under the inverse rotation.
      const double sx = cs * (x - ctr) + sn * (y - ctr) + ctr;
      const double sy = -sn * (x - ctr) + cs * (y - ctr) + ctr;
      const int ix = static_cast<int>(std::lround(sx));
      const int iy = static_cast<int>(std::lround(sy));
      if (ix < 0 || ix >= kImageSide || iy < 0 || iy >= kImageSide) continue;
      for (int c = 0; c < kImageChannels; ++c)
        out[(static_cast<size_t>(c) * kImageSide + y) * kImageSide + x] =
            img[(static_cast<size_t>(c) * kImageSide + iy) * kImageSide + ix];
    }
  img.swap(out);
}

std::vector<real> domain_texture(uint64_t seed, int domain_index) {
  Rng rng(mix_seed({seed, static_cast<uint64_t>(domain_index), kTagTexture}));
  std::vector<real> tex(static_cast<size_t>(kImageChannels) * kImageSide * kImageSide);
  for (int c = 0; c < kImageChannels; ++c) {
    const double fx = rng.uniform(0.2, 1.2), fy = rng.uniform(0.2, 1.2);
    const double px = rng.uniform(0.0, 6.28), py = rng.uniform(0.0, 6.28);
    for (int y = 0; y < kImageSide; ++y)
      for (int x = 0; x < kImageSide; ++x)
        tex[(static_cast<size_t>(c) * kImageSide + y) * kImageSide + x] =
            static_cast<real>(std::sin(fx * x + px) * std::cos(fy * y + py));
  }
  return tex;
}

void compute_channel_stats(Dataset& ds) {
  // Standardization stats come from the train split; datasets without train
  // classes (unseen domains, ingested data) fall back to all images.
  std::vector<int> use;
  if (!ds.train_classes.empty()) {
    for (int i = 0; i < ds.num_images(); ++i)
      if (std::find(ds.train_classes.begin(), ds.train_classes.end(),
                    ds.labels[static_cast<size_t>(i)]) != ds.train_classes.end())
        use.push_back(i);
  }
  if (use.empty()) {
    use.resize(static_cast<size_t>(ds.num_images()));
    std::iota(use.begin(), use.end(), 0);
  }
  const int hw = ds.height * ds.width;
  ds.channel_mean.assign(static_cast<size_t>(ds.channels), 0);
  ds.channel_std.assign(static_cast<size_t>(ds.channels), 0);
  const double count = static_cast<double>(use.size()) * hw;
  for (int c = 0; c < ds.channels; ++c) {
    double s = 0, ss = 0;
    for (int i : use) {
      const size_t base =
          (static_cast<size_t>(i) * ds.channels + c) * static_cast<size_t>(hw);
      for (int p = 0; p < hw; ++p) {
        const double v = ds.pixels[base + static_cast<size_t>(p)];
        s += v;
        ss += v * v;
      }
    }
    const double mean = s / count;
    const double var = std::max(0.0, ss / count - mean * mean);
    ds.channel_mean[static_cast<size_t>(c)] = static_cast<real>(mean);
    const double sd = std::sqrt(var);
    ds.channel_std[static_cast<size_t>(c)] = static_cast<real>(sd < 1e-12 ? 1.0 : sd);
  }
}

uint32_t read_u32_be(std::ifstream& f, const char* what) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(std::string("idx: truncated ") + what);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace

std::vector<int> Dataset::image_indices_of_class(int class_id) const {
  std::vector<int> out;
  for (int i = 0; i < num_images(); ++i)
    if (labels[static_cast<size_t>(i)] == class_id) out.push_back(i);
  return out;
}

Tensor Dataset::images_at(const std::vector<int>& idx) const {
  const int numel = image_numel();
  const int hw = height * width;
  std::vector<real> out(idx.size() * static_cast<size_t>(numel));
  for (size_t j = 0; j < idx.size(); ++j) {
    const int i = idx[j];
    if (i < 0 || i >= num_images())
      throw std::out_of_range("Dataset::images_at: bad image index");
    const size_t src = static_cast<size_t>(i) * numel;
    for (int c = 0; c < channels; ++c) {
      const real mean = channel_mean[static_cast<size_t>(c)];
      const real sd = channel_std[static_cast<size_t>(c)];
      for (int p = 0; p < hw; ++p) {
        const size_t off = static_cast<size_t>(c) * hw + p;
        out[j * numel + off] = (pixels[src + off] - mean) / sd;
      }
    }
  }
  return Tensor::from({static_cast<int>(idx.size()), channels, height, width},
                      std::move(out));
}

std::vector<Dataset> gen_synthetic_domains(
    const std::vector<SyntheticDomainSpec>& specs, uint64_t seed) {
  std::vector<Dataset> out;
  int next_class_id = 0;
  for (size_t di = 0; di < specs.size(); ++di) {
    const auto& sp = specs[di];
    if (sp.num_classes < 2)
      throw std::invalid_argument("gen_synthetic_domains: domain '" + sp.name +
                                  "' needs at least 2 classes");
    if (sp.images_per_class < 1)
      throw std::invalid_argument("gen_synthetic_domains: domain '" + sp.name +
                                  "' needs at least 1 image per class");
    if (sp.family == ShiftFamily::ChannelMix && sp.mix.size() != 9)
      throw std::invalid_argument(
          "gen_synthetic_domains: channel-mix domain needs a 3x3 matrix");

    Dataset ds;
    ds.name = sp.name;
    ds.domain_id = static_cast<int>(di);
    ds.seen = sp.seen;
    ds.channels = kImageChannels;
    ds.height = kImageSide;
    ds.width = kImageSide;

    std::vector<real> texture;
    if (sp.family == ShiftFamily::Texture)
      texture = domain_texture(seed, static_cast<int>(di));

    for (int k = 0; k < sp.num_classes; ++k) {
      const std::vector<real> proto = blob_prototype(sp.proto_seed, k);
      for (int i = 0; i < sp.images_per_class; ++i) {
        std::vector<real> img = proto;
        add_instance_noise(img, sp.proto_seed, k, i);
        switch (sp.family) {
          case ShiftFamily::None:
            break;
          case ShiftFamily::ChannelMix:
            apply_channel_mix(img, sp.mix);
            break;
          case ShiftFamily::Rotation: {
            Rng rng(mix_seed({seed, static_cast<uint64_t>(di),
                              static_cast<uint64_t>(k),
                              static_cast<uint64_t>(i), kTagShift}));
            apply_rotation(img, rng.uniform(sp.rot_lo_deg, sp.rot_hi_deg));
            break;
          }
          case ShiftFamily::Texture:
            for (size_t p = 0; p < img.size(); ++p)
              img[p] += sp.texture_amp * texture[p];
            break;
          case ShiftFamily::Noise: {
            Rng rng(mix_seed({seed, static_cast<uint64_t>(di),
                              static_cast<uint64_t>(k),
                              static_cast<uint64_t>(i), kTagShift}));
            for (auto& v : img) v += static_cast<real>(rng.normal(0, sp.noise_sigma));
            break;
          }
        }
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        ds.labels.push_back(next_class_id + k);
      }
    }

    std::vector<int> ids(static_cast<size_t>(sp.num_classes));
    std::iota(ids.begin(), ids.end(), next_class_id);
    if (sp.seen) {
      const int n = sp.num_classes;
      const int n_val = std::max(1, static_cast<int>(std::lround(0.2 * n)));
      const int n_test = std::max(1, static_cast<int>(std::lround(0.3 * n)));
      const int n_train = n - n_val - n_test;
      if (n_train < 2)
        throw std::invalid_argument("gen_synthetic_domains: seen domain '" +
                                    sp.name +
                                    "' has too few classes to split");
      ds.train_classes.assign(ids.begin(), ids.begin() + n_train);
      ds.val_classes.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
      ds.test_classes.assign(ids.begin() + n_train + n_val, ids.end());
    } else {
      ds.test_classes = ids;
    }
    next_class_id += sp.num_classes;

    compute_channel_stats(ds);
    out.push_back(std::move(ds));
  }
  return out;
}

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("idx: cannot open " + images_path);
  if (read_u32_be(fi, "image magic") != 0x00000803u)
    throw std::runtime_error("idx: bad image magic in " + images_path);
  const uint32_t n = read_u32_be(fi, "image count");
  const uint32_t h = read_u32_be(fi, "image rows");
  const uint32_t w = read_u32_be(fi, "image cols");
  if (n == 0 || h == 0 || w == 0 || h > 4096 || w > 4096)
    throw std::runtime_error("idx: implausible image dimensions");
  std::vector<unsigned char> bytes(static_cast<size_t>(n) * h * w);
  if (!fi.read(reinterpret_cast<char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size())))
    throw std::runtime_error("idx: image payload shorter than header claims");
  if (fi.peek() != std::ifstream::traits_type::eof())
    throw std::runtime_error("idx: trailing bytes after image payload");

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("idx: cannot open " + labels_path);
  if (read_u32_be(fl, "label magic") != 0x00000801u)
    throw std::runtime_error("idx: bad label magic in " + labels_path);
  const uint32_t nl = read_u32_be(fl, "label count");
  if (nl != n)
    throw std::runtime_error("idx: image/label count mismatch (" +
                             std::to_string(n) + " vs " + std::to_string(nl) +
                             ")");
  std::vector<unsigned char> lab(static_cast<size_t>(nl));
  if (!fl.read(reinterpret_cast<char*>(lab.data()),
               static_cast<std::streamsize>(lab.size())))
    throw std::runtime_error("idx: label payload shorter than header claims");
  if (fl.peek() != std::ifstream::traits_type::eof())
    throw std::runtime_error("idx: trailing bytes after label payload");

  Dataset ds;
  ds.name = images_path;
  ds.seen = false;
  ds.channels = 1;
  ds.height = static_cast<int>(h);
  ds.width = static_cast<int>(w);
  ds.pixels.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i)
    ds.pixels[i] = static_cast<real>(bytes[i]) / real(255);
  ds.labels.assign(lab.begin(), lab.end());
  std::vector<int> classes(ds.labels.begin(), ds.labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  ds.test_classes = classes;
  compute_channel_stats(ds);
  return ds;
}

Dataset expand_channels(const Dataset& ds, int channels) {
  if (ds.channels != 1)
    throw std::invalid_argument("expand_channels: source must be single-channel");
  if (channels < 1)
    throw std::invalid_argument("expand_channels: bad channel count");
  Dataset out = ds;
  out.channels = channels;
  const size_t hw = static_cast<size_t>(ds.height) * ds.width;
  out.pixels.resize(ds.pixels.size() * static_cast<size_t>(channels));
  for (int i = 0; i < ds.num_images(); ++i)
    for (int c = 0; c < channels; ++c)
      std::copy(ds.pixels.begin() + static_cast<std::ptrdiff_t>(i * hw),
                ds.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * hw),
                out.pixels.begin() +
                    static_cast<std::ptrdiff_t>((static_cast<size_t>(i) * channels + c) * hw));
  out.channel_mean.assign(static_cast<size_t>(channels), ds.channel_mean[0]);
  out.channel_std.assign(static_cast<size_t>(channels), ds.channel_std[0]);
  return out;
}

Protocol parse_protocol(const std::string& s) {
  if (s == "varying") return Protocol::Varying;
  if (s == "vw5shot") return Protocol::VaryingWay5Shot;
  if (s == "5way1shot") return Protocol::FiveWayOneShot;
  throw std::invalid_argument("unknown protocol: " + s);
}

std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Varying: return "varying";
    case Protocol::VaryingWay5Shot: return "vw5shot";
    case Protocol::FiveWayOneShot: return "5way1shot";
  }
  return "?";
}

Episode sample_episode(const Dataset& ds, Protocol protocol, uint64_t seed,
                       int episode_index, Split split) {
  const std::vector<int>& classes = ds.classes_in(split);
  Rng rng(mix_seed({seed, static_cast<uint64_t>(ds.domain_id),
                    static_cast<uint64_t>(episode_index), kTagEpisode}));

  const int available = static_cast<int>(classes.size());
  int way;
  if (protocol == Protocol::FiveWayOneShot) {
    way = 5;
    if (available < way)
      throw std::runtime_error("sample_episode: split has " +
                               std::to_string(available) +
                               " classes, need 5");
  } else {
    if (available < kMinWay)
      throw std::runtime_error("sample_episode: split has " +
                               std::to_string(available) + " classes, need >= " +
                               std::to_string(kMinWay));
    const int hi = std::min(kMaxWay, available);
    way = kMinWay + static_cast<int>(rng.u64() % static_cast<uint64_t>(hi - kMinWay + 1));
  }

  std::vector<int> pool = classes;
  for (int i = static_cast<int>(pool.size()) - 1; i > 0; --i)
    std::swap(pool[static_cast<size_t>(i)],
              pool[static_cast<size_t>(rng.u64() % static_cast<uint64_t>(i + 1))]);
  pool.resize(static_cast<size_t>(way));

  Episode ep;
  ep.way = way;
  ep.domain_id = ds.domain_id;
  ep.episode_index = episode_index;
  ep.class_ids = pool;

  std::vector<int> support_idx, query_idx;
  for (int k = 0; k < way; ++k) {
    int shots;
    switch (protocol) {
      case Protocol::Varying:
        shots = 1 + static_cast<int>(rng.u64() % kMaxShot);
        break;
      case Protocol::VaryingWay5Shot:
        shots = 5;
        break;
      default:
        shots = 1;
    }
    std::vector<int> imgs = ds.image_indices_of_class(pool[static_cast<size_t>(k)]);
    if (static_cast<int>(imgs.size()) < shots + kQueriesPerClass)
      throw std::runtime_error(
          "sample_episode: class " + std::to_string(pool[static_cast<size_t>(k)]) +
          " has " + std::to_string(imgs.size()) + " images, need " +
          std::to_string(shots + kQueriesPerClass));
    for (int i = static_cast<int>(imgs.size()) - 1; i > 0; --i)
      std::swap(imgs[static_cast<size_t>(i)],
                imgs[static_cast<size_t>(rng.u64() % static_cast<uint64_t>(i + 1))]);
    for (int i = 0; i < shots; ++i) {
      support_idx.push_back(imgs[static_cast<size_t>(i)]);
      ep.support_labels.push_back(k);
    }
    for (int i = 0; i < kQueriesPerClass; ++i) {
      query_idx.push_back(imgs[static_cast<size_t>(shots + i)]);
      ep.query_labels.push_back(k);
    }
    ep.shots.push_back(shots);
  }
  ep.support_images = ds.images_at(support_idx);
  ep.query_images = ds.images_at(query_idx);
  return ep;
}

double condition_number_3x3(const std::vector<real>& m) {
  if (m.size() != 9)
    throw std::invalid_argument("condition_number_3x3: need a 3x3 matrix");
  // Eigenvalues of the symmetric m^T m by cyclic Jacobi; singular values are
  // their square roots.
  double a[3][3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        a[i][j] += static_cast<double>(m[static_cast<size_t>(k) * 3 + i]) *
                   static_cast<double>(m[static_cast<size_t>(k) * 3 + j]);
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = std::fabs(a[0][1]) + std::fabs(a[0][2]) + std::fabs(a[1][2]);
    if (off < 1e-15) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (std::fabs(a[p][q]) < 1e-18) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (int i = 0; i < 3; ++i) {
          const double aip = a[i][p], aiq = a[i][q];
          a[i][p] = c * aip - s * aiq;
          a[i][q] = s * aip + c * aiq;
        }
        for (int i = 0; i < 3; ++i) {
          const double api = a[p][i], aqi = a[q][i];
          a[p][i] = c * api - s * aqi;
          a[q][i] = s * api + c * aqi;
        }
      }
  }
  double lo = a[0][0], hi = a[0][0];
  for (int i = 1; i < 3; ++i) {
    lo = std::min(lo, a[i][i]);
    hi = std::max(hi, a[i][i]);
  }
  if (!(lo > 0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(hi / lo);
}

Episode make_channel_shift_episode(const Dataset& ds,
                                   const std::vector<real>& mix,
                                   Protocol protocol, uint64_t seed,
                                   int episode_index, Split split) {
  if (ds.channels != 3)
    throw std::invalid_argument(
        "make_channel_shift_episode: dataset must have 3 channels");
  const double cond = condition_number_3x3(mix);
  if (!(cond < 100.0))
    throw std::invalid_argument(
        "make_channel_shift_episode: mixing matrix is singular or "
        "ill-conditioned (condition number " +
        std::to_string(cond) + ")");
  Episode ep = sample_episode(ds, protocol, seed, episode_index, split);
  const int hw = ds.height * ds.width;
  for (Tensor* t : {&ep.support_images, &ep.query_images}) {
    auto& v = t->data();
    const int n = t->dim(0);
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < hw; ++p) {
        real in[3];
        for (int c = 0; c < 3; ++c)
          in[c] = v[(static_cast<size_t>(i) * 3 + c) * hw + p];
        for (int c = 0; c < 3; ++c) {
          real acc = 0;
          for (int k = 0; k < 3; ++k)
            acc += mix[static_cast<size_t>(c) * 3 + k] * in[k];
          v[(static_cast<size_t>(i) * 3 + c) * hw + p] = acc;
        }
      }
  }
  return ep;
}

std::pair<Tensor, std::vector<int>> sample_train_batch(const Dataset& ds,
                                                       int batch,
                                                       uint64_t step_seed) {
  if (ds.train_classes.empty())
    throw std::runtime_error("sample_train_batch: dataset '" + ds.name +
                             "' has no train split");
  if (batch < 1)
    throw std::invalid_argument("sample_train_batch: batch must be positive");
  Rng rng(mix_seed({step_seed, static_cast<uint64_t>(ds.domain_id), kTagBatch}));
  std::vector<int> idx, labels;
  for (int b = 0; b < batch; ++b) {
    const int local =
        static_cast<int>(rng.u64() % ds.train_classes.size());
    std::vector<int> imgs =
        ds.image_indices_of_class(ds.train_classes[static_cast<size_t>(local)]);
    idx.push_back(imgs[static_cast<size_t>(rng.u64() % imgs.size())]);
    labels.push_back(local);
  }
  return {ds.images_at(idx), labels};
}

}  // namespace tsa
