#include "tsa/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace tsa {

namespace {

std::vector<int> validate_support(const Tensor& emb,
                                  const std::vector<int>& labels, int way,
                                  const char* who) {
  const std::string w(who);
  if (emb.shape().size() != 2)
    throw std::invalid_argument(w + ": embeddings must be rank 2");
  const int n = emb.dim(0);
  if (n < 1) throw std::invalid_argument(w + ": empty support");
  if (way < 2) throw std::invalid_argument(w + ": way must be >= 2");
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument(w + ": label count does not match rows");
  std::vector<int> counts(static_cast<size_t>(way), 0);
  for (int y : labels) {
    if (y < 0 || y >= way)
      throw std::invalid_argument(w + ": label " + std::to_string(y) +
                                  " outside [0, way)");
    counts[static_cast<size_t>(y)]++;
  }
  for (int k = 0; k < way; ++k)
    if (counts[static_cast<size_t>(k)] == 0)
      throw std::invalid_argument(w + ": class " + std::to_string(k) +
                                  " has no support samples");
  return counts;
}

void check_query(const Tensor& query, int d, const char* who) {
  if (query.shape().size() != 2 || query.dim(1) != d)
    throw std::invalid_argument(std::string(who) +
                                ": query shape does not match support dim");
}

Tensor centroid_row(const Tensor& centroids, int k) {
  return reshape(select_rows(centroids, {k}), {centroids.dim(1)});
}

}  // namespace

Prototypes compute_prototypes(const Tensor& emb,
                              const std::vector<int>& labels, int way,
                              bool normalize) {
  Prototypes p;
  p.class_counts = validate_support(emb, labels, way, "compute_prototypes");
  p.centroids =
      class_means(normalize ? l2_normalize(emb) : emb, labels, way);
  return p;
}

Tensor ncc_logits(const Tensor& query, const Tensor& support,
                  const std::vector<int>& labels, int way,
                  const NccConfig& cfg) {
  if (!(cfg.tau > 0))
    throw std::invalid_argument("ncc_logits: tau must be positive");
  Prototypes p = compute_prototypes(support, labels, way, true);
  check_query(query, support.dim(1), "ncc_logits");
  Tensor cn = l2_normalize(p.centroids);
  Tensor qn = l2_normalize(query);
  if (cfg.metric == NccMetric::Cosine)
    return scalar_mul(matmul(qn, transpose(cn)), cfg.tau);
  std::vector<Tensor> cols;
  cols.reserve(static_cast<size_t>(way));
  for (int k = 0; k < way; ++k) {
    Tensor diff = sub_row(qn, centroid_row(cn, k));
    cols.push_back(scalar_mul(row_sums(mul(diff, diff)), real(-1)));
  }
  return stack_cols(cols);
}

CovModel build_cov_model(const Tensor& support, const std::vector<int>& labels,
                         int way, real eps_cov) {
  std::vector<int> counts =
      validate_support(support, labels, way, "build_cov_model");
  if (eps_cov < 0)
    throw std::invalid_argument("build_cov_model: eps_cov must be >= 0");
  const int n = support.dim(0);
  const int d = support.dim(1);

  CovModel m;
  m.eps_cov = eps_cov;
  m.centroids = class_means(support, labels, way);

  Tensor task_mean = class_means(support, std::vector<int>(labels.size(), 0), 1);
  Tensor centered = sub_row(support, reshape(task_mean, {d}));
  m.task_cov =
      scalar_mul(matmul(transpose(centered), centered), real(1) / real(n));

  for (int k = 0; k < way; ++k) {
    std::vector<int> rows;
    for (int i = 0; i < n; ++i)
      if (labels[static_cast<size_t>(i)] == k) rows.push_back(i);
    Tensor xk = sub_row(select_rows(support, rows), centroid_row(m.centroids, k));
    Tensor class_scatter = scalar_mul(matmul(transpose(xk), xk),
                                      real(1) / real(counts[static_cast<size_t>(k)]));
    const real lam =
        real(counts[static_cast<size_t>(k)]) / real(counts[static_cast<size_t>(k)] + 1);
    Tensor blend = add(scalar_mul(class_scatter, lam),
                       scalar_mul(m.task_cov, real(1) - lam));
    m.class_cov.push_back(
        add_scaled_identity(blend, trace(blend), eps_cov / real(d)));
    m.lambda.push_back(lam);
  }
  return m;
}

Tensor md_logits(const Tensor& query, const Tensor& support,
                 const std::vector<int>& labels, int way, real eps_cov) {
  CovModel m = build_cov_model(support, labels, way, eps_cov);
  check_query(query, support.dim(1), "md_logits");
  std::vector<Tensor> cols;
  cols.reserve(static_cast<size_t>(way));
  for (int k = 0; k < way; ++k) {
    Tensor inv = mat_inverse(m.class_cov[static_cast<size_t>(k)]);
    Tensor diff = sub_row(query, centroid_row(m.centroids, k));
    cols.push_back(
        scalar_mul(row_sums(mul(matmul(diff, inv), diff)), real(-0.5)));
  }
  return stack_cols(cols);
}

Tensor train_linear_head(const Tensor& support, const std::vector<int>& labels,
                         int way, const LinearHeadConfig& cfg) {
  validate_support(support, labels, way, "train_linear_head");
  if (cfg.steps < 0)
    throw std::invalid_argument("train_linear_head: steps must be >= 0");
  if (!(cfg.lr > 0))
    throw std::invalid_argument("train_linear_head: lr must be positive");
  const int d = support.dim(1);

  Tensor x = Tensor::from(support.shape(), support.data());
  if (cfg.kind == LinearHeadKind::LogisticRegression) x = l2_normalize(x);

  Tensor w = Tensor::zeros({d, way}, true);
  for (int step = 0; step < cfg.steps; ++step) {
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = softmax_cross_entropy(matmul(x, w), labels);
    tape.backward(loss);
    auto& wd = w.data();
    const auto& wg = w.grad();
    for (size_t i = 0; i < wd.size(); ++i) wd[i] -= cfg.lr * wg[i];
    w.zero_grad();
  }
  w.set_requires_grad(false);
  return w;
}

Tensor linear_logits(const Tensor& emb, const Tensor& weights,
                     LinearHeadKind kind) {
  return matmul(
      kind == LinearHeadKind::LogisticRegression ? l2_normalize(emb) : emb,
      weights);
}

std::vector<int> knn_predict(const Tensor& query, const Tensor& support,
                             const std::vector<int>& labels, int k) {
  if (support.shape().size() != 2)
    throw std::invalid_argument("knn_predict: support must be rank 2");
  const int n = support.dim(0);
  const int d = support.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("knn_predict: label count does not match rows");
  if (k < 1 || k > n)
    throw std::invalid_argument("knn_predict: k must be in [1, support size]");
  check_query(query, d, "knn_predict");

  auto normalized_rows = [d](const Tensor& t, const char* who) {
    const int rows = t.dim(0);
    std::vector<real> out(t.data());
    for (int i = 0; i < rows; ++i) {
      real ss = 0;
      for (int j = 0; j < d; ++j) {
        const real v = out[static_cast<size_t>(i) * d + j];
        ss += v * v;
      }
      if (ss <= 0)
        throw std::invalid_argument(std::string(who) +
                                    ": zero-norm embedding");
      const real inv = real(1) / std::sqrt(ss);
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] *= inv;
    }
    return out;
  };
  std::vector<real> qn = normalized_rows(query, "knn_predict");
  std::vector<real> sn = normalized_rows(support, "knn_predict");

  const int m = query.dim(0);
  std::vector<int> pred(static_cast<size_t>(m));
  std::vector<int> order(static_cast<size_t>(n));
  std::vector<real> sim(static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      real dot = 0;
      for (int c = 0; c < d; ++c)
        dot += qn[static_cast<size_t>(i) * d + c] * sn[static_cast<size_t>(j) * d + c];
      sim[static_cast<size_t>(j)] = dot;
    }
    for (int j = 0; j < n; ++j) order[static_cast<size_t>(j)] = j;
    std::stable_sort(order.begin(), order.end(), [&sim](int a, int b) {
      return sim[static_cast<size_t>(a)] > sim[static_cast<size_t>(b)];
    });
    std::map<int, int> votes;
    for (int j = 0; j < k; ++j)
      votes[labels[static_cast<size_t>(order[static_cast<size_t>(j)])]]++;
    int best_label = -1, best_count = 0;
    for (const auto& [label, count] : votes) {
      if (count > best_count) {
        best_label = label;
        best_count = count;
      }
    }
    pred[static_cast<size_t>(i)] = best_label;
  }
  return pred;
}

}  // namespace tsa
