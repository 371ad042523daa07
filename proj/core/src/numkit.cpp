#include "exefuse/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace exefuse {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

std::uint64_t splitmix64(std::uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), base_(splitmix64(seed)) {}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(base_ + kGolden * counter_);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // Lemire multiply-shift; bias is < 2^-64 * n, irrelevant at our ranges.
  return static_cast<std::size_t>(
      (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(splitmix64(base_ ^ (kGolden * (stream + 1))));
}

double gelu(double x) {
  return x * 0.5 * std::erfc(-x * M_SQRT1_2);
}

double gelu_grad(double x) {
  double cdf = 0.5 * std::erfc(-x * M_SQRT1_2);
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

Vec softmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

Vec hadamard(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("hadamard: dimension mismatch");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void matvec(const Mat& m, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) s += row[c] * x[c];
    y[r] += s;
  }
}

void matvec_transposed(const Mat& m, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.data.data() + r * m.cols;
    double xr = x[r];
    for (std::size_t c = 0; c < m.cols; ++c) y[c] += row[c] * xr;
  }
}

void add_outer(Mat& m, std::span<const double> x, std::span<const double> y, double alpha) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double* row = m.data.data() + r * m.cols;
    double xr = alpha * x[r];
    for (std::size_t c = 0; c < m.cols; ++c) row[c] += xr * y[c];
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

namespace {

double sse_of(const Mat& points, const Mat& centroids,
              const std::vector<std::size_t>& assignment) {
  double sse = 0.0;
  for (std::size_t i = 0; i < points.rows; ++i)
    sse += squared_distance(points.row(i), centroids.row(assignment[i]));
  return sse;
}

}  // namespace

KMeansResult kmeans(const Mat& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter) {
  const std::size_t n = points.rows;
  const std::size_t dim = points.cols;
  if (k == 0 || k > n)
    throw std::invalid_argument("kmeans: need 1 <= K <= number of points");

  Rng rng(seed);
  KMeansResult res;
  res.centroids = Mat(k, dim);
  res.assignment.assign(n, 0);

  // k-means++ seeding
  std::vector<double> min_d2(n, std::numeric_limits<double>::max());
  std::size_t first = rng.below(n);
  std::copy_n(points.row(first).data(), dim, res.centroids.row(0).data());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = squared_distance(points.row(i), res.centroids.row(c - 1));
      min_d2[i] = std::min(min_d2[i], d2);
      total += min_d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_d2[i];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);  // all points coincide with chosen centroids
    }
    std::copy_n(points.row(pick).data(), dim, res.centroids.row(c).data());
  }

  std::vector<std::size_t> counts(k);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    // assignment step
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d2 = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < k; ++c) {
        double d2 = squared_distance(points.row(i), res.centroids.row(c));
        if (d2 < best_d2) {
          best_d2 = d2;
          best = c;
        }
      }
      if (res.assignment[i] != best) {
        res.assignment[i] = best;
        changed = true;
      }
    }
    res.sse_history.push_back(sse_of(points, res.centroids, res.assignment));
    res.iterations = iter + 1;
    if (!changed && iter > 0) break;

    // update step
    res.centroids.fill(0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, points.row(i), res.centroids.row(res.assignment[i]));
      ++counts[res.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (double& v : res.centroids.row(c)) v /= static_cast<double>(counts[c]);
      } else {
        // re-seed an empty cluster to the point farthest from its nearest centroid
        std::size_t far_i = 0;
        double far_d2 = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          double d2 = squared_distance(points.row(i), res.centroids.row(res.assignment[i]));
          if (d2 > far_d2) {
            far_d2 = d2;
            far_i = i;
          }
        }
        std::copy_n(points.row(far_i).data(), dim, res.centroids.row(c).data());
      }
    }
  }
  return res;
}

Mat xavier_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out,
                   Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Mat m(rows, cols);
  for (double& v : m.data) v = rng.uniform(-limit, limit);
  return m;
}

double finite_difference_check(const std::function<double(std::span<const double>)>& loss,
                               std::span<const double> params,
                               std::span<const double> analytic_grad,
                               double eps) {
  if (params.size() != analytic_grad.size())
    throw std::invalid_argument("finite_difference_check: size mismatch");
  std::vector<double> x(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double saved = x[i];
    x[i] = saved + eps;
    double fp = loss(x);
    x[i] = saved - eps;
    double fm = loss(x);
    x[i] = saved;
    double gn = (fp - fm) / (2.0 * eps);
    double ga = analytic_grad[i];
    double rel = std::abs(ga - gn) / (std::abs(ga) + std::abs(gn) + 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace exefuse
