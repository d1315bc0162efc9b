#pragma once

#include <vector>

#include "tsa/tensor.hpp"

namespace tsa {

/// Similarity used by the nearest-centroid head. Both variants score
/// L2-normalized embeddings against renormalized centroids; the squared
/// Euclidean logits are an affine remap of the cosine ones (|a-b|^2 = 2-2cos
/// for unit vectors), so the argmax is identical either way.
enum class NccMetric { Cosine, SquaredEuclidean };

struct NccConfig {
  NccMetric metric = NccMetric::Cosine;
  real tau = 10;
};

/// Class centroids plus the per-class support counts they were built from.
struct Prototypes {
  Tensor centroids;               // {way, d}
  std::vector<int> class_counts;  // size way, every entry >= 1
};

/// Mean embedding per class. Pass normalize=true for cosine-based heads so
/// the centroid is the mean of unit vectors.
Prototypes compute_prototypes(const Tensor& emb,
                              const std::vector<int>& labels, int way,
                              bool normalize);

/// Nearest-centroid logits: tau * cos(query_i, centroid_k), centroids taken
/// over normalized support embeddings. Differentiable in query and support.
/// Throws on zero-norm embeddings (nothing to normalize).
Tensor ncc_logits(const Tensor& query, const Tensor& support,
                  const std::vector<int>& labels, int way,
                  const NccConfig& cfg = {});

/// Covariance state of the Mahalanobis head. class_cov[k] is the blended and
/// ridged estimate lambda_k * S_k + (1 - lambda_k) * S_task + eps * tr/d * I
/// with lambda_k = n_k / (n_k + 1); S_task is the scatter of the whole
/// support around the task mean.
struct CovModel {
  Tensor centroids;               // {way, d}, raw class means
  Tensor task_cov;                // {d, d}
  std::vector<Tensor> class_cov;  // way entries of {d, d}
  std::vector<real> lambda;       // size way, each in [0, 1]
  real eps_cov;
};

CovModel build_cov_model(const Tensor& support, const std::vector<int>& labels,
                         int way, real eps_cov = 1e-3);

/// Mahalanobis logits: -1/2 (z - c_k)^T inv(class_cov[k]) (z - c_k).
/// Differentiable; throws if a blended covariance is singular despite the
/// ridge (e.g. an all-zero support set).
Tensor md_logits(const Tensor& query, const Tensor& support,
                 const std::vector<int>& labels, int way, real eps_cov = 1e-3);

enum class LinearHeadKind { LogisticRegression, Softmax };

struct LinearHeadConfig {
  LinearHeadKind kind = LinearHeadKind::LogisticRegression;
  int steps = 200;
  real lr = 1.0;
};

/// Full-batch gradient descent on a zero-initialized {d, way} weight matrix
/// with cross-entropy loss. Logistic regression trains on L2-normalized
/// embeddings, the softmax head on raw ones. Deterministic: zero init plus
/// full batches leaves nothing to seed. steps=0 returns the zero matrix.
Tensor train_linear_head(const Tensor& support, const std::vector<int>& labels,
                         int way, const LinearHeadConfig& cfg = {});

/// Scores embeddings with a trained head, applying the same normalization
/// policy the head was trained under.
Tensor linear_logits(const Tensor& emb, const Tensor& weights,
                     LinearHeadKind kind);

/// Majority vote over the k nearest support points by cosine distance.
/// Vote ties resolve to the smallest class label. Requires 1 <= k <= n.
std::vector<int> knn_predict(const Tensor& query, const Tensor& support,
                             const std::vector<int>& labels, int k);

}  // namespace tsa
