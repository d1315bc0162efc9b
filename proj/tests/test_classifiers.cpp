#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "testutil.hpp"
#include "tsa/classifiers.hpp"
#include "tsa/config.hpp"
#include "tsa/rng.hpp"

using namespace tsa;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

// Independent distance helpers used as brute-force oracles. Plain loops on
// raw doubles, no library ops.
double dot_rows(const std::vector<real>& a, int ra, const std::vector<real>& b,
                int rb, int d) {
  double s = 0;
  for (int c = 0; c < d; ++c)
    s += a[static_cast<size_t>(ra) * d + c] * b[static_cast<size_t>(rb) * d + c];
  return s;
}

std::vector<double> unit_rows(const std::vector<real>& v, int rows, int d) {
  std::vector<double> out(v.begin(), v.end());
  for (int i = 0; i < rows; ++i) {
    double ss = 0;
    for (int c = 0; c < d; ++c) ss += out[static_cast<size_t>(i) * d + c] *
                                      out[static_cast<size_t>(i) * d + c];
    const double inv = 1.0 / std::sqrt(ss);
    for (int c = 0; c < d; ++c) out[static_cast<size_t>(i) * d + c] *= inv;
  }
  return out;
}

int euclid_nearest_mean(const std::vector<double>& q,
                        const std::vector<std::vector<double>>& means) {
  int best = -1;
  double best_d = 0;
  for (size_t k = 0; k < means.size(); ++k) {
    double dist = 0;
    for (size_t c = 0; c < q.size(); ++c) {
      const double t = q[c] - means[k][c];
      dist += t * t;
    }
    if (best < 0 || dist < best_d) {
      best = static_cast<int>(k);
      best_d = dist;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("prototypes: counts, raw and normalized centroids, validation") {
  Tensor emb = Tensor::from({3, 2}, {3, 0, 0, 4, 0, -2});
  std::vector<int> labels = {0, 0, 1};

  Prototypes raw = compute_prototypes(emb, labels, 2, false);
  CHECK(raw.class_counts == std::vector<int>{2, 1});
  CHECK(raw.centroids.data() == std::vector<real>{1.5, 2.0, 0.0, -2.0});

  Prototypes norm = compute_prototypes(emb, labels, 2, true);
  CHECK(norm.centroids.data() == std::vector<real>{0.5, 0.5, 0.0, -1.0});

  CHECK_THROWS_AS(compute_prototypes(emb, labels, 1, false),
                  std::invalid_argument);
  CHECK_THROWS_AS(compute_prototypes(emb, {0, 0, 2}, 2, false),
                  std::invalid_argument);
  CHECK_THROWS_AS(compute_prototypes(emb, {0, 0, 0}, 2, false),
                  std::invalid_argument);
  CHECK_THROWS_AS(compute_prototypes(emb, {0, 1}, 2, false),
                  std::invalid_argument);
}

TEST_CASE("ncc: axis-aligned two-class oracle") {
  Tensor support = Tensor::from({2, 2}, {1, 0, 0, 1});
  std::vector<int> labels = {0, 1};
  Tensor query = Tensor::from({1, 2}, {0.9, 0.1});

  Tensor logits = ncc_logits(query, support, labels, 2);
  REQUIRE(logits.shape() == Shape{1, 2});
  // cos against e0/e1 is 0.9/sqrt(0.82) and 0.1/sqrt(0.82), times tau=10.
  CHECK(logits.data()[0] == doctest::Approx(9.938837346736189).epsilon(1e-12));
  CHECK(logits.data()[1] == doctest::Approx(1.104315260748465).epsilon(1e-12));
  CHECK(argmax_rows(logits) == std::vector<int>{0});

  // A query equal to a singleton class's only embedding scores tau * 1.
  Tensor q2 = Tensor::from({1, 2}, {0, 1});
  Tensor l2 = ncc_logits(q2, support, labels, 2);
  CHECK(l2.data()[1] == doctest::Approx(10.0).epsilon(1e-12));

  CHECK_THROWS_AS(
      ncc_logits(Tensor::from({1, 2}, {0, 0}), support, labels, 2),
      std::runtime_error);
  NccConfig bad;
  bad.tau = 0;
  CHECK_THROWS_AS(ncc_logits(query, support, labels, 2, bad),
                  std::invalid_argument);
}

TEST_CASE("ncc: matches brute-force centroid argmax on random 3-class data") {
  Rng rng(411);
  const int d = 6, way = 3, n = 15, m = 24;
  Tensor support = random_tensor(rng, {n, d});
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(i % way);
  Tensor query = random_tensor(rng, {m, d});

  Tensor logits = ncc_logits(query, support, labels, way);
  std::vector<int> got = argmax_rows(logits);

  std::vector<double> sn = unit_rows(support.data(), n, d);
  std::vector<std::vector<double>> means(way, std::vector<double>(d, 0));
  std::vector<int> counts(way, 0);
  for (int i = 0; i < n; ++i) {
    counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]++;
    for (int c = 0; c < d; ++c)
      means[static_cast<size_t>(labels[static_cast<size_t>(i)])][static_cast<size_t>(c)] +=
          sn[static_cast<size_t>(i) * d + c];
  }
  for (int k = 0; k < way; ++k) {
    double ss = 0;
    for (int c = 0; c < d; ++c) {
      means[static_cast<size_t>(k)][static_cast<size_t>(c)] /= counts[static_cast<size_t>(k)];
      ss += means[static_cast<size_t>(k)][static_cast<size_t>(c)] *
            means[static_cast<size_t>(k)][static_cast<size_t>(c)];
    }
    for (int c = 0; c < d; ++c)
      means[static_cast<size_t>(k)][static_cast<size_t>(c)] /= std::sqrt(ss);
  }
  std::vector<double> qn = unit_rows(query.data(), m, d);
  for (int i = 0; i < m; ++i) {
    int best = -1;
    double best_cos = 0;
    for (int k = 0; k < way; ++k) {
      double cs = 0;
      for (int c = 0; c < d; ++c)
        cs += qn[static_cast<size_t>(i) * d + c] * means[static_cast<size_t>(k)][static_cast<size_t>(c)];
      if (best < 0 || cs > best_cos) {
        best = k;
        best_cos = cs;
      }
    }
    CHECK(got[static_cast<size_t>(i)] == best);
  }
}

TEST_CASE("ncc: squared-euclidean variant is an affine remap of cosine") {
  Rng rng(412);
  Tensor support = random_tensor(rng, {9, 5});
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  Tensor query = random_tensor(rng, {7, 5});

  Tensor cos_l = ncc_logits(query, support, labels, 3);
  NccConfig sq;
  sq.metric = NccMetric::SquaredEuclidean;
  Tensor sq_l = ncc_logits(query, support, labels, 3, sq);

  for (size_t i = 0; i < sq_l.data().size(); ++i)
    CHECK(sq_l.data()[i] ==
          doctest::Approx(2.0 * cos_l.data()[i] / 10.0 - 2.0).epsilon(1e-9));
  CHECK(argmax_rows(sq_l) == argmax_rows(cos_l));
}

TEST_CASE("ncc: invariant to support order, duplication, and positive scale") {
  Rng rng(413);
  const int n = 12, d = 4, way = 3;
  Tensor support = random_tensor(rng, {n, d});
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(i % way);
  Tensor query = random_tensor(rng, {10, d});
  Tensor base = ncc_logits(query, support, labels, way);

  // Reversed support ordering.
  std::vector<int> rev_rows, rev_labels;
  for (int i = n - 1; i >= 0; --i) {
    rev_rows.push_back(i);
    rev_labels.push_back(labels[static_cast<size_t>(i)]);
  }
  Tensor perm = ncc_logits(query, select_rows(support, rev_rows), rev_labels, way);
  for (size_t i = 0; i < base.data().size(); ++i)
    CHECK(perm.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-12));

  // Whole support duplicated.
  std::vector<int> dup_rows, dup_labels;
  for (int r = 0; r < 2; ++r)
    for (int i = 0; i < n; ++i) {
      dup_rows.push_back(i);
      dup_labels.push_back(labels[static_cast<size_t>(i)]);
    }
  Tensor dup = ncc_logits(query, select_rows(support, dup_rows), dup_labels, way);
  for (size_t i = 0; i < base.data().size(); ++i)
    CHECK(dup.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-12));

  // Uniform positive rescale of every embedding.
  Tensor scaled = ncc_logits(scalar_mul(query, 4), scalar_mul(support, 4),
                             labels, way);
  CHECK(argmax_rows(scaled) == argmax_rows(base));
  for (size_t i = 0; i < base.data().size(); ++i)
    CHECK(scaled.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-12));
}

TEST_CASE("md: singleton classes give lambda 1/2 and the hand-built blend") {
  Tensor support = Tensor::from({2, 2}, {0, 0, 2, 0});
  std::vector<int> labels = {0, 1};

  CovModel m = build_cov_model(support, labels, 2);
  REQUIRE(m.lambda.size() == 2);
  CHECK(m.lambda[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.lambda[1] == doctest::Approx(0.5).epsilon(1e-15));
  // Task scatter around the task mean (1,0): diag(1, 0).
  CHECK(m.task_cov.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.task_cov.data()[3] == doctest::Approx(0.0).epsilon(1e-15));
  // Blend = 0.5*zero + 0.5*task; ridge adds 1e-3/2 * trace(0.5) = 2.5e-4.
  for (int k = 0; k < 2; ++k) {
    const auto& cv = m.class_cov[static_cast<size_t>(k)].data();
    CHECK(cv[0] == doctest::Approx(0.50025).epsilon(1e-12));
    CHECK(cv[1] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cv[2] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cv[3] == doctest::Approx(0.00025).epsilon(1e-12));
  }

  // Query equidistant in x from both centroids: identical logits, value
  // -0.5 * (1/0.50025 + 0.01/0.00025).
  Tensor q = Tensor::from({1, 2}, {1, 0.1});
  Tensor logits = md_logits(q, support, labels, 2);
  CHECK(logits.data()[0] == logits.data()[1]);
  CHECK(logits.data()[0] ==
        doctest::Approx(-20.999500249875062).epsilon(1e-9));

  Tensor q2 = Tensor::from({1, 2}, {0.5, 1});
  Tensor l2 = md_logits(q2, support, labels, 2);
  CHECK(l2.data()[0] == doctest::Approx(-2000.2498750624689).epsilon(1e-9));
  CHECK(l2.data()[1] == doctest::Approx(-2002.2488755622189).epsilon(1e-9));
  CHECK(argmax_rows(l2) == std::vector<int>{0});
}

TEST_CASE("md: isotropic scatter reduces to euclidean nearest-centroid") {
  // Three centroids on a circle, each class with the same cross-shaped
  // offsets: every covariance involved is an exact multiple of I, so the
  // Mahalanobis argmax must equal the euclidean one for every query.
  const double r3 = std::sqrt(3.0);
  std::vector<std::vector<double>> cs = {{2, 0}, {-1, r3}, {-1, -r3}};
  std::vector<real> rows;
  std::vector<int> labels;
  for (int k = 0; k < 3; ++k) {
    const std::vector<std::vector<double>> offs = {
        {0.5, 0}, {-0.5, 0}, {0, 0.5}, {0, -0.5}};
    for (const auto& o : offs) {
      rows.push_back(static_cast<real>(cs[static_cast<size_t>(k)][0] + o[0]));
      rows.push_back(static_cast<real>(cs[static_cast<size_t>(k)][1] + o[1]));
      labels.push_back(k);
    }
  }
  Tensor support = Tensor::from({12, 2}, rows);

  CovModel m = build_cov_model(support, labels, 3);
  // lambda = 4/5; blend = 0.8*0.125 I + 0.2*2.125 I = 0.525 I, ridged by
  // 1e-3/2 * 1.05.
  for (int k = 0; k < 3; ++k) {
    const auto& cv = m.class_cov[static_cast<size_t>(k)].data();
    CHECK(cv[0] == doctest::Approx(0.525525).epsilon(1e-12));
    CHECK(cv[3] == doctest::Approx(0.525525).epsilon(1e-12));
    CHECK(cv[1] == doctest::Approx(0.0).epsilon(1e-12));
  }

  Rng rng(414);
  std::vector<real> qv(80);
  for (auto& v : qv) v = static_cast<real>(rng.uniform() * 6.0 - 3.0);
  Tensor query = Tensor::from({40, 2}, qv);
  std::vector<int> got = argmax_rows(md_logits(query, support, labels, 3));
  for (int i = 0; i < 40; ++i) {
    const std::vector<double> q = {qv[static_cast<size_t>(i) * 2],
                                   qv[static_cast<size_t>(i) * 2 + 1]};
    CHECK(got[static_cast<size_t>(i)] == euclid_nearest_mean(q, cs));
  }
}

TEST_CASE("md: anisotropic covariance flips the euclidean decision") {
  // Class 0 stretched along x, class 1 along y. The query sits nearer to
  // centroid 0 in euclidean terms but its offset is cheap under class 1's
  // covariance and dear under class 0's.
  Tensor support = Tensor::from({4, 2}, {-3, 0, -1, 0, 2, -1, 2, 1});
  std::vector<int> labels = {0, 0, 1, 1};
  Tensor q = Tensor::from({1, 2}, {-0.2, 1.2});

  std::vector<int> md = argmax_rows(md_logits(q, support, labels, 2));
  CHECK(md == std::vector<int>{1});
  // Euclidean picks class 0 for the same query.
  CHECK(euclid_nearest_mean({-0.2, 1.2}, {{-2, 0}, {2, 0}}) == 0);

  // Full logits against a closed-form 2x2 oracle over a query batch.
  Rng rng(415);
  std::vector<real> qv(30);
  for (auto& v : qv) v = static_cast<real>(rng.normal() * 2.0);
  Tensor batch = Tensor::from({15, 2}, qv);
  Tensor logits = md_logits(batch, support, labels, 2);

  const auto& sv = support.data();
  const int n = 4, d = 2;
  std::vector<std::vector<double>> mean = {{-2, 0}, {2, 0}};
  std::vector<double> tmean = {0, 0};
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) tmean[static_cast<size_t>(c)] += sv[static_cast<size_t>(i) * d + c] / n;
  std::vector<double> task(4, 0);
  for (int i = 0; i < n; ++i) {
    const double dx = sv[static_cast<size_t>(i) * d] - tmean[0];
    const double dy = sv[static_cast<size_t>(i) * d + 1] - tmean[1];
    task[0] += dx * dx / n;
    task[1] += dx * dy / n;
    task[2] += dx * dy / n;
    task[3] += dy * dy / n;
  }
  for (int k = 0; k < 2; ++k) {
    std::vector<double> cls(4, 0);
    int nk = 0;
    for (int i = 0; i < n; ++i) {
      if (labels[static_cast<size_t>(i)] != k) continue;
      nk++;
      const double dx = sv[static_cast<size_t>(i) * d] - mean[static_cast<size_t>(k)][0];
      const double dy = sv[static_cast<size_t>(i) * d + 1] - mean[static_cast<size_t>(k)][1];
      cls[0] += dx * dx;
      cls[1] += dx * dy;
      cls[2] += dx * dy;
      cls[3] += dy * dy;
    }
    for (auto& v : cls) v /= nk;
    const double lam = double(nk) / (nk + 1);
    std::vector<double> sig(4);
    for (int i = 0; i < 4; ++i) sig[static_cast<size_t>(i)] = lam * cls[static_cast<size_t>(i)] + (1 - lam) * task[static_cast<size_t>(i)];
    const double ridge = 1e-3 / d * (sig[0] + sig[3]);
    sig[0] += ridge;
    sig[3] += ridge;
    const double det = sig[0] * sig[3] - sig[1] * sig[2];
    const std::vector<double> inv = {sig[3] / det, -sig[1] / det,
                                     -sig[2] / det, sig[0] / det};
    for (int i = 0; i < 15; ++i) {
      const double dx = qv[static_cast<size_t>(i) * 2] - mean[static_cast<size_t>(k)][0];
      const double dy = qv[static_cast<size_t>(i) * 2 + 1] - mean[static_cast<size_t>(k)][1];
      const double quad = dx * (inv[0] * dx + inv[1] * dy) +
                          dy * (inv[2] * dx + inv[3] * dy);
      CHECK(logits.data()[static_cast<size_t>(i) * 2 + k] ==
            doctest::Approx(-0.5 * quad).epsilon(1e-9));
    }
  }
}

TEST_CASE("md: singular blend without ridge is rejected") {
  // All-zero support: every scatter is zero, trace is zero, so the ridge
  // vanishes and inversion must fail.
  Tensor support = Tensor::from({4, 2}, {0, 0, 0, 0, 0, 0, 0, 0});
  std::vector<int> labels = {0, 0, 1, 1};
  Tensor q = Tensor::from({1, 2}, {1, 1});
  CHECK_THROWS_AS(md_logits(q, support, labels, 2), std::runtime_error);
  CHECK_THROWS_AS(build_cov_model(support, labels, 2, -1.0),
                  std::invalid_argument);
}

TEST_CASE("md and ncc: gradients match finite differences") {
  Rng rng(416);
  const int d = 3, way = 2;
  Tensor support = random_tensor(rng, {5, d});
  std::vector<int> slabels = {0, 0, 0, 1, 1};
  Tensor query = random_tensor(rng, {4, d});
  std::vector<int> qlabels = {0, 1, 1, 0};

  SUBCASE("mahalanobis head") {
    CHECK(grad_check({&support, &query},
                     [&] {
                       return softmax_cross_entropy(
                           md_logits(query, support, slabels, way), qlabels);
                     }) < grad_check_tolerance());
  }
  SUBCASE("cosine centroid head") {
    CHECK(grad_check({&support, &query},
                     [&] {
                       return softmax_cross_entropy(
                           ncc_logits(query, support, slabels, way), qlabels);
                     }) < grad_check_tolerance());
  }
  SUBCASE("squared-euclidean centroid head") {
    NccConfig sq;
    sq.metric = NccMetric::SquaredEuclidean;
    CHECK(grad_check({&support, &query},
                     [&] {
                       return softmax_cross_entropy(
                           ncc_logits(query, support, slabels, way, sq),
                           qlabels);
                     }) < grad_check_tolerance());
  }
}

TEST_CASE("linear head: zero steps, separable convergence, determinism") {
  Rng rng(417);
  const int d = 4, way = 2, per = 8;
  std::vector<real> rows;
  std::vector<int> labels;
  for (int k = 0; k < way; ++k) {
    const std::vector<double> base =
        k == 0 ? std::vector<double>{1, 0.2, 0, 0}
               : std::vector<double>{0, 0, 1, -0.2};
    for (int i = 0; i < per; ++i) {
      for (int c = 0; c < d; ++c)
        rows.push_back(static_cast<real>(base[static_cast<size_t>(c)] + 0.1 * rng.normal()));
      labels.push_back(k);
    }
  }
  Tensor support = Tensor::from({way * per, d}, rows);

  LinearHeadConfig zero;
  zero.steps = 0;
  Tensor w0 = train_linear_head(support, labels, way, zero);
  REQUIRE(w0.shape() == Shape{d, way});
  for (real v : w0.data()) CHECK(v == 0.0);
  Tensor l0 = linear_logits(support, w0, zero.kind);
  CHECK(softmax_cross_entropy(l0, labels).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  for (LinearHeadKind kind :
       {LinearHeadKind::LogisticRegression, LinearHeadKind::Softmax}) {
    LinearHeadConfig cfg;
    cfg.kind = kind;
    cfg.steps = 300;
    cfg.lr = 1.0;
    Tensor w = train_linear_head(support, labels, way, cfg);
    std::vector<int> pred = argmax_rows(linear_logits(support, w, kind));
    CHECK(pred == labels);

    Tensor again = train_linear_head(support, labels, way, cfg);
    CHECK(again.data() == w.data());
  }

  LinearHeadConfig bad;
  bad.lr = 0;
  CHECK_THROWS_AS(train_linear_head(support, labels, way, bad),
                  std::invalid_argument);
  bad.lr = 1;
  bad.steps = -1;
  CHECK_THROWS_AS(train_linear_head(support, labels, way, bad),
                  std::invalid_argument);
}

TEST_CASE("linear head: logistic regression ignores embedding scale") {
  Rng rng(418);
  Tensor support = random_tensor(rng, {10, 3});
  std::vector<int> labels = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  LinearHeadConfig cfg;
  cfg.steps = 150;

  Tensor w = train_linear_head(support, labels, 2, cfg);
  Tensor ws = train_linear_head(scalar_mul(support, 5), labels, 2, cfg);
  for (size_t i = 0; i < w.data().size(); ++i)
    CHECK(ws.data()[i] == doctest::Approx(w.data()[i]).epsilon(1e-6));

  Tensor queries = random_tensor(rng, {6, 3});
  Tensor lq = linear_logits(queries, w, cfg.kind);
  Tensor lqs = linear_logits(scalar_mul(queries, 5), w, cfg.kind);
  for (size_t i = 0; i < lq.data().size(); ++i)
    CHECK(lqs.data()[i] == doctest::Approx(lq.data()[i]).epsilon(1e-9));
}

TEST_CASE("knn: exact hit, forced tie, cosine metric") {
  Tensor support = Tensor::from({4, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
  std::vector<int> labels = {0, 1, 0, 1};

  // k=1, query equal to a support point.
  Tensor q = Tensor::from({1, 2}, {0, 1});
  CHECK(knn_predict(q, support, labels, 1) == std::vector<int>{1});

  // k = n with balanced classes forces a 2-2 vote tie: smallest label wins.
  CHECK(knn_predict(q, support, labels, 4) == std::vector<int>{0});
  std::vector<int> shifted = {7, 3, 7, 3};
  CHECK(knn_predict(q, support, shifted, 4) == std::vector<int>{3});

  // Cosine, not euclidean: the query points along class 1's direction but
  // is euclidean-closer to class 0's support point.
  Tensor s2 = Tensor::from({2, 2}, {1, 0, 0.09, 0.12});
  Tensor far = Tensor::from({1, 2}, {6, 8});
  CHECK(knn_predict(far, s2, {0, 1}, 1) == std::vector<int>{1});

  CHECK_THROWS_AS(knn_predict(q, support, labels, 0), std::invalid_argument);
  CHECK_THROWS_AS(knn_predict(q, support, labels, 5), std::invalid_argument);
  CHECK_THROWS_AS(knn_predict(q, support, {0, 1}, 1), std::invalid_argument);
  CHECK_THROWS_AS(
      knn_predict(Tensor::from({1, 2}, {0, 0}), support, labels, 1),
      std::invalid_argument);
}

TEST_CASE("knn: matches a brute-force vote oracle") {
  Rng rng(419);
  const int n = 12, d = 5, m = 15, k = 3;
  Tensor support = random_tensor(rng, {n, d});
  std::vector<int> labels = {0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2};
  Tensor query = random_tensor(rng, {m, d});

  std::vector<int> got = knn_predict(query, support, labels, k);

  std::vector<double> sn = unit_rows(support.data(), n, d);
  std::vector<double> qn = unit_rows(query.data(), m, d);
  for (int i = 0; i < m; ++i) {
    // Pick the k best by repeated max extraction instead of a sort.
    std::vector<bool> used(n, false);
    std::vector<int> votes(3, 0);
    for (int pick = 0; pick < k; ++pick) {
      int best = -1;
      double best_s = 0;
      for (int j = 0; j < n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double s = dot_rows(qn, i, sn, j, d);
        if (best < 0 || s > best_s) {
          best = j;
          best_s = s;
        }
      }
      used[static_cast<size_t>(best)] = true;
      votes[static_cast<size_t>(labels[static_cast<size_t>(best)])]++;
    }
    int want = 0;
    for (int c = 1; c < 3; ++c)
      if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(want)]) want = c;
    CHECK(got[static_cast<size_t>(i)] == want);
  }
}

TEST_CASE("md: invariant to support ordering") {
  Rng rng(420);
  const int n = 9, d = 3, way = 3;
  Tensor support = random_tensor(rng, {n, d});
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  Tensor query = random_tensor(rng, {5, d});
  Tensor base = md_logits(query, support, labels, way);

  std::vector<int> rev_rows, rev_labels;
  for (int i = n - 1; i >= 0; --i) {
    rev_rows.push_back(i);
    rev_labels.push_back(labels[static_cast<size_t>(i)]);
  }
  Tensor perm =
      md_logits(query, select_rows(support, rev_rows), rev_labels, way);
  for (size_t i = 0; i < base.data().size(); ++i)
    CHECK(perm.data()[i] == doctest::Approx(base.data()[i]).epsilon(1e-9));
}
