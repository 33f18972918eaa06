#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "core.hpp"
#include "random.hpp"

namespace im2sp {

inline constexpr std::size_t default_speech_units = 200;
inline constexpr std::size_t default_kmeans_iters = 100;
inline constexpr double default_kmeans_tol = 1e-6;

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

inline double squared_distance(std::span<const float> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

struct nearest_centroid {
  unit_id index = 0;
  double distance = 0.0; // squared
};

/// Nearest centroid by squared Euclidean distance; ties go to the lowest id.
inline nearest_centroid nearest(const codebook &cb, std::span<const float> x) {
  nearest_centroid best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t k = 0; k < cb.size(); ++k) {
    const double d = squared_distance(x, cb.centroid(k));
    if (d < best.distance)
      best = {static_cast<unit_id>(k), d};
  }
  return best;
}

/// Sum of squared distances from each row to its nearest centroid.
inline double inertia(const matrix &data, const codebook &cb) {
  detail::require(data.cols == cb.dim(), "inertia: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < data.rows; ++i)
    total += nearest(cb, data.row(i)).distance;
  return total;
}

struct kmeans_result {
  codebook centroids;
  /// Inertia after each assignment step; entry 0 is for the seeded centroids.
  std::vector<double> inertia_trace;
  std::size_t iterations = 0; // centroid updates performed
  bool converged = false;

  double final_inertia() const { return inertia_trace.back(); }
};

namespace detail {

// Double-precision centroid table used while fitting.
struct centroid_table {
  std::size_t k, dim;
  std::vector<double> v;

  std::span<const double> row(std::size_t i) const { return {v.data() + i * dim, dim}; }
  std::span<double> row(std::size_t i) { return {v.data() + i * dim, dim}; }
};

inline void check_fit_input(const matrix &data, std::size_t k) {
  require(k >= 1, "kmeans: K must be >= 1");
  require(data.cols >= 1, "kmeans: dim must be >= 1");
  require(data.rows >= k, "kmeans: need at least K points (N=" + std::to_string(data.rows) +
                              ", K=" + std::to_string(k) + ")");
  require(data.all_finite(), "kmeans: input contains non-finite values");
}

// Greedy k-means++ seeding: the first centre is uniform; each later centre
// is the best of 2 + floor(ln K) candidates drawn with probability
// proportional to squared distance from the nearest chosen centre, scored by
// the resulting total squared distance (ties to the earlier draw).
inline centroid_table kmeanspp_seed(const matrix &data, std::size_t k, std::uint64_t seed) {
  rng gen(seed);
  const std::size_t n = data.rows;
  const std::size_t trials = 2 + static_cast<std::size_t>(std::floor(std::log(static_cast<double>(k))));
  centroid_table c{k, data.cols, std::vector<double>(k * data.cols)};
  std::vector<double> d2(n, std::numeric_limits<double>::infinity()), cand(n), best_d2(n);
  auto take = [&](std::size_t centre, std::size_t point) {
    auto src = data.row(point);
    auto dst = c.row(centre);
    for (std::size_t j = 0; j < data.cols; ++j)
      dst[j] = src[j];
  };
  const std::size_t first = gen.below(n);
  take(0, first);
  for (std::size_t i = 0; i < n; ++i)
    d2[i] = squared_distance(data.row(i), c.row(0));
  for (std::size_t centre = 1; centre < k; ++centre) {
    double total = 0.0;
    for (double d : d2)
      total += d;
    if (total <= 0.0) {
      take(centre, gen.below(n));
      continue; // every point coincides with a chosen centre
    }
    std::size_t best = n;
    double best_pot = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      const double target = gen.uniform() * total;
      std::size_t pick = n;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0) {
          pick = i;
          if (target < acc)
            break;
        }
      }
      double pot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cand[i] = std::min(d2[i], squared_distance(data.row(i), data.row(pick)));
        pot += cand[i];
      }
      if (pot < best_pot) {
        best_pot = pot;
        best = pick;
        best_d2.swap(cand);
      }
    }
    take(centre, best);
    d2.swap(best_d2);
  }
  return c;
}

inline codebook to_codebook(const centroid_table &c) {
  matrix m(c.k, c.dim);
  for (std::size_t i = 0; i < c.v.size(); ++i)
    m.data[i] = static_cast<float>(c.v[i]);
  return codebook(std::move(m));
}

} // namespace detail

/// Lloyd iterations from the given starting centroids.
///
/// Stops after max_iters centroid updates, or once the relative inertia
/// improvement of an iteration falls below tol. Empty clusters are refilled
/// with the point farthest from its assigned centroid.
inline kmeans_result lloyd(const matrix &data, const matrix &initial, std::size_t max_iters = default_kmeans_iters,
                           double tol = default_kmeans_tol) {
  detail::check_fit_input(data, initial.rows);
  detail::require(initial.cols == data.cols, "lloyd: initial centroid dimension mismatch");
  detail::require(tol >= 0.0, "lloyd: tol must be nonnegative");
  const std::size_t n = data.rows, k = initial.rows, dim = data.cols;

  detail::centroid_table c{k, dim, std::vector<double>(initial.data.begin(), initial.data.end())};
  std::vector<std::size_t> label(n);
  std::vector<double> dist(n);
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);

  kmeans_result result{detail::to_codebook(c), {}, 0, false};
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0;; ++it) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = squared_distance(data.row(i), c.row(j));
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      label[i] = best;
      dist[i] = best_d;
      total += best_d;
    }
    result.inertia_trace.push_back(total);
    if (it > 0 && prev - total <= tol * prev) {
      result.converged = true;
      break;
    }
    if (it == max_iters)
      break;

    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i)
      ++counts[label[i]];

    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0)
        continue;
      std::size_t far = n;
      double far_d = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (dist[i] > far_d && counts[label[i]] > 1) {
          far_d = dist[i];
          far = i;
        }
      if (far == n)
        continue; // every point already sits on a centroid
      --counts[label[far]];
      label[far] = j;
      dist[far] = 0.0;
      counts[j] = 1;
    }

    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto x = data.row(i);
      double *s = sums.data() + label[i] * dim;
      for (std::size_t d = 0; d < dim; ++d)
        s[d] += x[d];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0)
        continue;
      auto row = c.row(j);
      for (std::size_t d = 0; d < dim; ++d)
        row[d] = sums[j * dim + d] / static_cast<double>(counts[j]);
    }
    ++result.iterations;
    prev = total;
  }
  result.centroids = detail::to_codebook(c);
  return result;
}

/// Learns a K-entry codebook with k-means++ seeding followed by Lloyd iterations.
inline kmeans_result kmeans_fit(const matrix &data, std::size_t k, std::uint64_t seed,
                                std::size_t max_iters = default_kmeans_iters, double tol = default_kmeans_tol) {
  detail::check_fit_input(data, k);
  const auto seeded = detail::kmeanspp_seed(data, k, seed);
  return lloyd(data, matrix(k, data.cols, std::vector<float>(seeded.v.begin(), seeded.v.end())), max_iters, tol);
}

/// Best of several seeded fits by final inertia (ties to the earlier run).
/// Run 0 uses seed itself, so restarts == 1 equals kmeans_fit.
inline kmeans_result kmeans_fit_best(const matrix &data, std::size_t k, std::uint64_t seed, std::size_t restarts,
                                     std::size_t max_iters = default_kmeans_iters,
                                     double tol = default_kmeans_tol) {
  detail::require(restarts >= 1, "kmeans: restarts must be >= 1");
  auto best = kmeans_fit(data, k, seed, max_iters, tol);
  for (std::size_t r = 1; r < restarts; ++r) {
    auto next = kmeans_fit(data, k, derive_seed(seed, r), max_iters, tol);
    if (next.final_inertia() < best.final_inertia())
      best = std::move(next);
  }
  return best;
}

/// Per-frame nearest-centroid tokens. The result is not deduplicated.
inline unit_sequence assign(const codebook &cb, const feature_sequence &feats) {
  if (feats.length() > 0 && feats.dim() != cb.dim())
    throw invalid_argument("assign: feature dim " + std::to_string(feats.dim()) +
                           " does not match codebook dim " + std::to_string(cb.dim()));
  std::vector<unit_id> tokens(feats.length());
  for (std::size_t t = 0; t < feats.length(); ++t)
    tokens[t] = nearest(cb, feats.frame(t)).index;
  return unit_sequence(std::move(tokens), static_cast<std::uint32_t>(cb.size()), false);
}

/// Speech units: nearest-centroid assignment with repetitions removed.
inline unit_sequence encode_speech(const feature_sequence &feats, const codebook &cb) {
  return dedup(assign(cb, feats));
}

/// Units per second before dedup for a feature extractor that downsamples
/// audio by the given factor.
inline double unit_rate(double sample_rate_hz, std::uint64_t downsample_factor) {
  detail::require(sample_rate_hz > 0.0, "unit_rate: sample rate must be positive");
  detail::require(downsample_factor >= 1, "unit_rate: downsample factor must be >= 1");
  return sample_rate_hz / static_cast<double>(downsample_factor);
}

} // namespace im2sp
