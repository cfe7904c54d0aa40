#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mlens/rng.hpp"
#include "mlens/tensor.hpp"

namespace mlens {

using Vec3 = std::array<double, 3>;

struct PointCloud {
    std::vector<Vec3> points;  // unitless model coordinates
    std::optional<int> label;
    std::string source_id;

    std::size_t size() const { return points.size(); }
};

struct PatchConfig {
    std::size_t n_sample = 256;  // points after uniform resampling
    std::size_t n_groups = 32;   // G: patch centers picked by FPS
    std::size_t group_size = 16; // k: points per sub-cloud
    std::uint64_t seed = 0;

    void validate(std::size_t implied_points = 0) const {
        if (n_groups < 1 || n_groups > n_sample) throw ConfigError("patch: need 1 <= n_groups <= n_sample");
        if (group_size < 1 || group_size > n_sample) throw ConfigError("patch: need 1 <= group_size <= n_sample");
        (void)implied_points;
    }
};

// FPS centers plus KNN-grouped coordinates relative to each center.
struct PointPatchSet {
    std::vector<Vec3> centers;               // G
    std::vector<std::vector<Vec3>> groups;   // G x k, center-subtracted
    std::vector<std::size_t> selection_order;  // FPS picks into the resampled cloud

    std::size_t n_groups() const { return centers.size(); }
    std::size_t group_size() const { return groups.empty() ? 0 : groups[0].size(); }

    // [G x 3]
    Tensor centers_tensor() const {
        std::vector<double> d;
        d.reserve(centers.size() * 3);
        for (const auto& c : centers) d.insert(d.end(), c.begin(), c.end());
        return Tensor({centers.size(), 3}, std::move(d));
    }

    // [(G*k) x 3], groups concatenated in order
    Tensor groups_tensor() const {
        std::vector<double> d;
        d.reserve(centers.size() * group_size() * 3);
        for (const auto& g : groups)
            for (const auto& p : g) d.insert(d.end(), p.begin(), p.end());
        return Tensor({centers.size() * group_size(), 3}, std::move(d));
    }
};

namespace geo {

inline double sq_dist(const Vec3& a, const Vec3& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

inline bool lex_less(const Vec3& a, const Vec3& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[1] != b[1]) return a[1] < b[1];
    return a[2] < b[2];
}

}  // namespace geo

// ---- IO ----

enum class CloudFormat { xyz_text, pclb_binary };

inline void save_xyz(const PointCloud& pc, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.precision(17);
    for (const auto& p : pc.points) f << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
    if (!f) throw DataError("write failed: " + path);
}

// PCLB: magic "PCLB", u32 LE version=1, u32 LE point count, N x 3 f32 LE.
inline void save_pclb(const PointCloud& pc, const std::string& path) {
    std::string buf;
    buf.append("PCLB", 4);
    detail::put_u32(buf, 1);
    detail::put_u32(buf, static_cast<std::uint32_t>(pc.points.size()));
    for (const auto& p : pc.points)
        for (double v : p) detail::put_f32(buf, static_cast<float>(v));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw DataError("write failed: " + path);
}

inline PointCloud load_pointcloud(const std::string& path, CloudFormat format) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    std::string buf = os.str();
    if (buf.empty()) throw DataError("empty point-cloud file: " + path);

    PointCloud pc;
    pc.source_id = path;
    if (format == CloudFormat::xyz_text) {
        std::istringstream in(buf);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            std::istringstream ls(line);
            Vec3 p;
            if (!(ls >> p[0] >> p[1] >> p[2]))
                throw DataError(path + ":" + std::to_string(lineno) + ": expected three floats");
            std::string rest;
            if (ls >> rest) throw DataError(path + ":" + std::to_string(lineno) + ": trailing tokens");
            if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
                throw DataError(path + ":" + std::to_string(lineno) + ": non-finite coordinate");
            pc.points.push_back(p);
        }
    } else {
        detail::ByteReader r(buf);
        if (r.bytes(4, "PCLB magic") != "PCLB")
            throw DataError(path + ": bad PCLB magic at offset 0");
        std::uint32_t version = r.u32("PCLB version");
        if (version != 1) throw DataError(path + ": unsupported PCLB version " + std::to_string(version));
        std::uint32_t n = r.u32("PCLB count");
        for (std::uint32_t i = 0; i < n; ++i) {
            Vec3 p;
            for (auto& v : p) {
                v = static_cast<double>(r.f32("PCLB point"));
                if (!std::isfinite(v)) throw DataError(path + ": non-finite coordinate in point " + std::to_string(i));
            }
            pc.points.push_back(p);
        }
        if (r.remaining() != 0) throw DataError(path + ": trailing bytes after PCLB payload");
    }
    if (pc.points.empty()) throw DataError("point cloud has no points: " + path);
    return pc;
}

// ---- preprocessing ----

// Centroid to origin, max radius to 1. Degenerate clouds (all points
// coincident) are centered only.
inline PointCloud normalize_cloud(const PointCloud& pc) {
    if (pc.points.empty()) throw DataError("normalize_cloud: empty cloud");
    Vec3 c{0.0, 0.0, 0.0};
    for (const auto& p : pc.points)
        for (int t = 0; t < 3; ++t) c[t] += p[t];
    for (int t = 0; t < 3; ++t) c[t] /= static_cast<double>(pc.points.size());
    PointCloud out = pc;
    double r2 = 0.0;
    for (auto& p : out.points) {
        for (int t = 0; t < 3; ++t) p[t] -= c[t];
        r2 = std::max(r2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    }
    if (r2 > 0.0) {
        double inv = 1.0 / std::sqrt(r2);
        for (auto& p : out.points)
            for (int t = 0; t < 3; ++t) p[t] *= inv;
    }
    return out;
}

enum class FpsStart { farthest_from_centroid, index_zero };

// Greedy maximin subset selection. The next pick maximizes the minimum
// distance to the already-selected set; ties break by lexicographic
// coordinates, then lowest index, so the result depends only on geometry
// when coordinates are distinct.
inline std::vector<std::size_t> fps(const std::vector<Vec3>& points, std::size_t m,
                                    FpsStart start_rule = FpsStart::farthest_from_centroid) {
    std::size_t n = points.size();
    if (m < 1 || m > n) throw ConfigError("fps: need 1 <= m <= point count");

    auto prefer = [&](double cand_key, std::size_t cand, double best_key, std::size_t best) {
        if (cand_key != best_key) return cand_key > best_key;
        if (points[cand][0] != points[best][0] || points[cand][1] != points[best][1] ||
            points[cand][2] != points[best][2])
            return geo::lex_less(points[cand], points[best]);
        return false;  // equal coordinates: keep the lower index (scan order)
    };

    std::size_t first = 0;
    if (start_rule == FpsStart::farthest_from_centroid) {
        Vec3 c{0.0, 0.0, 0.0};
        for (const auto& p : points)
            for (int t = 0; t < 3; ++t) c[t] += p[t];
        for (int t = 0; t < 3; ++t) c[t] /= static_cast<double>(n);
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = geo::sq_dist(points[i], c);
            if (i == 0 || prefer(d, i, best, first)) {
                best = d;
                first = i;
            }
        }
    }

    std::vector<std::size_t> picked{first};
    std::vector<char> selected(n, 0);
    selected[first] = 1;
    std::vector<double> min_d(n);
    for (std::size_t i = 0; i < n; ++i) min_d[i] = geo::sq_dist(points[i], points[first]);
    while (picked.size() < m) {
        std::size_t arg = 0;
        double best = -1.0;
        bool have = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (selected[i]) continue;
            if (!have || prefer(min_d[i], i, best, arg)) {
                best = min_d[i];
                arg = i;
                have = true;
            }
        }
        picked.push_back(arg);
        selected[arg] = 1;
        for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], geo::sq_dist(points[i], points[arg]));
    }
    return picked;
}

// k nearest points to each center by Euclidean distance; ties break by
// lower index and each group comes back sorted by (distance, index).
inline std::vector<std::vector<std::size_t>> knn_group(const std::vector<Vec3>& points,
                                                       const std::vector<Vec3>& centers, std::size_t k) {
    if (k < 1 || k > points.size()) throw ConfigError("knn_group: need 1 <= k <= point count");
    std::vector<std::vector<std::size_t>> out(centers.size());
    std::vector<std::pair<double, std::size_t>> order(points.size());
    for (std::size_t ci = 0; ci < centers.size(); ++ci) {
        for (std::size_t i = 0; i < points.size(); ++i) order[i] = {geo::sq_dist(points[i], centers[ci]), i};
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
        out[ci].resize(k);
        for (std::size_t i = 0; i < k; ++i) out[ci][i] = order[i].second;
    }
    return out;
}

// Canonical resample used by make_patches: sort points lexicographically so
// the pipeline depends only on geometry, then draw n_sample points with the
// seeded generator (with replacement only when the cloud is smaller).
inline std::vector<Vec3> canonical_resample(const PointCloud& pc, const PatchConfig& cfg) {
    std::vector<Vec3> sorted = pc.points;
    std::sort(sorted.begin(), sorted.end(), geo::lex_less);
    std::size_t n = sorted.size();
    if (n == cfg.n_sample) return sorted;
    Rng rng(derive_seed(cfg.seed, "patch/resample"));
    std::vector<Vec3> out;
    out.reserve(cfg.n_sample);
    if (n > cfg.n_sample) {
        for (std::size_t i : rng.sample_indices(n, cfg.n_sample)) out.push_back(sorted[i]);
    } else {
        for (std::size_t i = 0; i < cfg.n_sample; ++i) out.push_back(sorted[rng.index(n)]);
    }
    return out;
}

// Resample -> FPS centers -> KNN groups -> center-relative coordinates.
// Expects a normalized cloud.
inline PointPatchSet make_patches(const PointCloud& pc, const PatchConfig& cfg) {
    cfg.validate();
    std::vector<Vec3> pts = canonical_resample(pc, cfg);
    PointPatchSet set;
    set.selection_order = fps(pts, cfg.n_groups, FpsStart::farthest_from_centroid);
    set.centers.reserve(cfg.n_groups);
    for (std::size_t i : set.selection_order) set.centers.push_back(pts[i]);
    auto idx = knn_group(pts, set.centers, cfg.group_size);
    set.groups.resize(cfg.n_groups);
    for (std::size_t g = 0; g < cfg.n_groups; ++g) {
        set.groups[g].reserve(cfg.group_size);
        for (std::size_t i : idx[g]) {
            const Vec3& p = pts[i];
            const Vec3& c = set.centers[g];
            set.groups[g].push_back({p[0] - c[0], p[1] - c[1], p[2] - c[2]});
        }
    }
    return set;
}

// ---- synthetic shapes ----

struct CategorySpec {
    std::string name;
    std::string generator;  // sphere | cube | cylinder | torus
    std::map<std::string, double> params;

    double param(const std::string& key, double fallback) const {
        auto it = params.find(key);
        return it == params.end() ? fallback : it->second;
    }
};

struct SyntheticSpec {
    std::vector<CategorySpec> categories;
    std::size_t points_per_cloud = 256;
    double noise_sigma = 0.01;
    std::size_t clouds_per_category = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (categories.empty()) throw ConfigError("synth: no categories");
        if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
        if (points_per_cloud < 1) throw ConfigError("synth: points_per_cloud must be >= 1");
        if (clouds_per_category < 1) throw ConfigError("synth: clouds_per_category must be >= 1");
        for (std::size_t i = 0; i < categories.size(); ++i)
            for (std::size_t j = i + 1; j < categories.size(); ++j)
                if (categories[i].name == categories[j].name)
                    throw ConfigError("synth: duplicate category name " + categories[i].name);
    }
};

namespace detail {

inline Vec3 sample_surface_point(const CategorySpec& cat, Rng& rng) {
    if (cat.generator == "sphere") {
        double r = cat.param("radius", 1.0);
        double x, y, z, n2;
        do {
            x = rng.normal();
            y = rng.normal();
            z = rng.normal();
            n2 = x * x + y * y + z * z;
        } while (n2 < 1e-12);
        double s = r / std::sqrt(n2);
        return {x * s, y * s, z * s};
    }
    if (cat.generator == "cube") {
        double s = cat.param("side", 1.0);
        std::size_t face = rng.index(6);
        int axis = static_cast<int>(face / 2);
        double sign = (face % 2 == 0) ? 1.0 : -1.0;
        Vec3 p;
        p[axis] = sign * s / 2.0;
        p[(axis + 1) % 3] = rng.uniform(-s / 2.0, s / 2.0);
        p[(axis + 2) % 3] = rng.uniform(-s / 2.0, s / 2.0);
        return p;
    }
    if (cat.generator == "cylinder") {
        double r = cat.param("radius", 0.5);
        double h = cat.param("height", 1.5);
        double lateral_area = h;          // proportional to 2*pi*r*h
        double cap_area = r;              // proportional to 2*pi*r^2 (both caps)
        double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        if (rng.uniform() * (lateral_area + cap_area) < lateral_area) {
            double z = rng.uniform(-h / 2.0, h / 2.0);
            return {r * std::cos(theta), r * std::sin(theta), z};
        }
        double rr = r * std::sqrt(rng.uniform());
        double z = rng.uniform() < 0.5 ? -h / 2.0 : h / 2.0;
        return {rr * std::cos(theta), rr * std::sin(theta), z};
    }
    if (cat.generator == "torus") {
        double R = cat.param("major", 0.8);
        double r = cat.param("minor", 0.3);
        double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        double phi;
        // Rejection keeps the surface density uniform over the minor angle.
        do {
            phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        } while (rng.uniform() * (R + r) > R + r * std::cos(phi));
        double ring = R + r * std::cos(phi);
        return {ring * std::cos(theta), ring * std::sin(theta), r * std::sin(phi)};
    }
    throw ConfigError("synth: unknown generator '" + cat.generator + "'");
}

}  // namespace detail

// Seeded, deterministic surface sampling with per-coordinate Gaussian noise.
// Labels are category indices in spec order.
inline std::vector<PointCloud> synth_generate(const SyntheticSpec& spec) {
    spec.validate();
    std::vector<PointCloud> out;
    out.reserve(spec.categories.size() * spec.clouds_per_category);
    for (std::size_t ci = 0; ci < spec.categories.size(); ++ci) {
        const CategorySpec& cat = spec.categories[ci];
        for (std::size_t k = 0; k < spec.clouds_per_category; ++k) {
            Rng rng(derive_seed(spec.seed, "synth/" + cat.name + "/" + std::to_string(k)));
            PointCloud pc;
            pc.label = static_cast<int>(ci);
            pc.source_id = "synth/" + cat.name + "/" + std::to_string(k);
            pc.points.reserve(spec.points_per_cloud);
            for (std::size_t i = 0; i < spec.points_per_cloud; ++i) {
                Vec3 p = detail::sample_surface_point(cat, rng);
                if (spec.noise_sigma > 0.0)
                    for (auto& v : p) v += rng.normal(0.0, spec.noise_sigma);
                pc.points.push_back(p);
            }
            out.push_back(std::move(pc));
        }
    }
    return out;
}

}  // namespace mlens
