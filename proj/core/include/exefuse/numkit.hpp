#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace exefuse {

using Vec = std::vector<double>;

/// Dense row-major matrix of 64-bit floats.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }
  void fill(double v) { data.assign(data.size(), v); }

  bool operator==(const Mat&) const = default;
};

/// Counter-based pseudo-random generator: the n-th draw is a hash of
/// (seed, n), so streams are identical on every platform and substreams
/// can be forked without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();
  /// Uniform integer in [0, n); n must be positive.
  std::size_t below(std::size_t n);
  /// Independent substream addressed by `stream`.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

/// In-place Fisher-Yates shuffle driven by the given Rng.
template <class T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(items[i - 1], items[j]);
  }
}

/// Exact Gaussian-CDF GeLU: x * Phi(x).
double gelu(double x);
/// d/dx gelu(x) = Phi(x) + x * phi(x).
double gelu_grad(double x);

/// Numerically stable softmax; output is a strictly positive probability vector.
Vec softmax(std::span<const double> v);

/// Element-wise product; dimensions must agree.
Vec hadamard(std::span<const double> a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
bool all_finite(std::span<const double> v);

/// y += M x
void matvec(const Mat& m, std::span<const double> x, std::span<double> y);
/// y += M^T x
void matvec_transposed(const Mat& m, std::span<const double> x, std::span<double> y);
/// M += alpha * x y^T
void add_outer(Mat& m, std::span<const double> x, std::span<const double> y, double alpha = 1.0);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

struct KMeansResult {
  Mat centroids;  // K x dim
  std::vector<std::size_t> assignment;
  std::vector<double> sse_history;  // within-cluster SSE per Lloyd iteration
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Runs until the assignment
/// reaches a fixpoint or max_iter; an empty cluster is re-seeded to the
/// point farthest from its nearest centroid.
KMeansResult kmeans(const Mat& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = 100);

/// rows×cols matrix drawn from U(−L, L), L = sqrt(6 / (fan_in + fan_out)),
/// filled in row-major order so the draw sequence is reproducible.
Mat xavier_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out,
                   Rng& rng);

/// Central-difference audit of an analytic gradient. Returns
/// max_i |g_a - g_n| / (|g_a| + |g_n| + 1e-8).
double finite_difference_check(const std::function<double(std::span<const double>)>& loss,
                               std::span<const double> params,
                               std::span<const double> analytic_grad,
                               double eps = 1e-5);

}  // namespace exefuse
