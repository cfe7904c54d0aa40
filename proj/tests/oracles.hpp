// Naive reference implementations used as independent oracles. These stay
// deliberately loop-by-the-definition and share no code with the library
// paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mlens/rng.hpp"
#include "mlens/tensor.hpp"

namespace oracle {

inline mlens::Tensor random_tensor(std::vector<std::size_t> shape, mlens::Rng& rng, double lo = -1.0,
                                   double hi = 1.0) {
    std::size_t n = mlens::Tensor::element_count(shape);
    std::vector<double> d(n);
    for (auto& v : d) v = rng.uniform(lo, hi);
    return mlens::Tensor(std::move(shape), std::move(d));
}

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
            out[i * n + j] = s;
        }
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
    std::vector<double> y(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = std::exp(x[i]);
        s += y[i];
    }
    for (auto& v : y) v /= s;
    return y;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& gamma,
                                      const std::vector<double>& beta, double eps) {
    std::size_t d = x.size();
    double mean = std::accumulate(x.begin(), x.end(), 0.0) / double(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(d);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = gamma[i] * (x[i] - mean) / std::sqrt(var + eps) + beta[i];
    return y;
}

// Single-head attention by the definition; callers loop heads.
inline std::vector<double> attention_head(const std::vector<double>& q, const std::vector<double>& k,
                                          const std::vector<double>& v, std::size_t m, std::size_t n,
                                          std::size_t d) {
    std::vector<double> out(m * d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) s += q[i * d + t] * k[j * d + t];
            scores[j] = s / std::sqrt(double(d));
        }
        std::vector<double> p = softmax(scores);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t t = 0; t < d; ++t) out[i * d + t] += p[j] * v[j * d + t];
    }
    return out;
}

inline double sq_dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

// Greedy maximin selection recomputing every distance from scratch each
// round; tie-break by lexicographic coordinates, then lowest index.
inline std::vector<std::size_t> fps(const std::vector<std::array<double, 3>>& pts, std::size_t m,
                                    bool start_from_centroid) {
    std::size_t n = pts.size();
    auto lex_less = [&](std::size_t a, std::size_t b) {
        if (pts[a][0] != pts[b][0]) return pts[a][0] < pts[b][0];
        if (pts[a][1] != pts[b][1]) return pts[a][1] < pts[b][1];
        if (pts[a][2] != pts[b][2]) return pts[a][2] < pts[b][2];
        return a < b;
    };
    std::vector<std::size_t> picked;
    std::size_t first = 0;
    if (start_from_centroid) {
        std::array<double, 3> c{0, 0, 0};
        for (auto& p : pts)
            for (int t = 0; t < 3; ++t) c[t] += p[t];
        for (int t = 0; t < 3; ++t) c[t] /= double(n);
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = sq_dist(pts[i], c);
            if (d > best || (d == best && lex_less(i, first))) {
                best = d;
                first = i;
            }
        }
    }
    picked.push_back(first);
    while (picked.size() < m) {
        double best = -1.0;
        std::size_t arg = 0;
        bool have = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
            double dmin = std::numeric_limits<double>::infinity();
            for (std::size_t p : picked) dmin = std::min(dmin, sq_dist(pts[i], pts[p]));
            if (!have || dmin > best || (dmin == best && lex_less(i, arg))) {
                best = dmin;
                arg = i;
                have = true;
            }
        }
        picked.push_back(arg);
    }
    return picked;
}

// Full sort per center; k nearest by (distance, index).
inline std::vector<std::size_t> knn(const std::vector<std::array<double, 3>>& pts,
                                    const std::array<double, 3>& center, std::size_t k) {
    std::vector<std::size_t> idx(pts.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        double da = sq_dist(pts[a], center), db = sq_dist(pts[b], center);
        if (da != db) return da < db;
        return a < b;
    });
    idx.resize(k);
    return idx;
}

}  // namespace oracle
