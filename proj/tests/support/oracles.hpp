#pragma once

// Deliberately naive reference implementations. Nothing here calls into the
// library code it is used to check.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lesionseg/types.hpp"

namespace oracle {

using lesionseg::Index3;

inline std::vector<std::uint8_t> random_mask(std::mt19937_64& rng, std::size_t n, double p) {
    std::bernoulli_distribution d(p);
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = d(rng) ? 1 : 0;
    return m;
}

// Labels in order of each component's first voxel in raster order, via BFS.
inline std::vector<std::uint32_t> flood_fill(const std::vector<std::uint8_t>& mask, const Index3& s, int connectivity,
                                             std::vector<std::size_t>* sizes = nullptr) {
    std::vector<std::uint32_t> labels(mask.size(), 0);
    std::uint32_t next = 0;
    auto idx = [&](std::int64_t z, std::int64_t y, std::int64_t x) { return static_cast<std::size_t>((z * s[1] + y) * s[2] + x); };
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                if (!mask[idx(z, y, x)] || labels[idx(z, y, x)]) continue;
                ++next;
                std::size_t count = 0;
                std::deque<std::array<std::int64_t, 3>> q{{z, y, x}};
                labels[idx(z, y, x)] = next;
                while (!q.empty()) {
                    auto [cz, cy, cx] = q.front();
                    q.pop_front();
                    ++count;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int nonzero = (dz != 0) + (dy != 0) + (dx != 0);
                                if (nonzero == 0) continue;
                                if (connectivity == 6 && nonzero > 1) continue;
                                if (connectivity == 18 && nonzero > 2) continue;
                                const std::int64_t nz = cz + dz, ny = cy + dy, nx = cx + dx;
                                if (nz < 0 || ny < 0 || nx < 0 || nz >= s[0] || ny >= s[1] || nx >= s[2]) continue;
                                const auto j = idx(nz, ny, nx);
                                if (mask[j] && !labels[j]) {
                                    labels[j] = next;
                                    q.push_back({nz, ny, nx});
                                }
                            }
                }
                if (sizes) sizes->push_back(count);
            }
    return labels;
}

inline double dice(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& g) {
    double inter = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += (p[i] && g[i]);
        sp += p[i];
        sg += g[i];
    }
    if (sp + sg == 0) return 1.0;
    return 2.0 * inter / (sp + sg);
}

// Voxel count of components of `a` that share no voxel with `b`.
inline std::size_t untouched_voxels(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                    const Index3& s, int connectivity) {
    std::vector<std::size_t> sizes;
    const auto labels = flood_fill(a, s, connectivity, &sizes);
    std::size_t total = 0;
    for (std::uint32_t c = 1; c <= sizes.size(); ++c) {
        bool touched = false;
        for (std::size_t i = 0; i < a.size() && !touched; ++i) touched = labels[i] == c && b[i];
        if (!touched) total += sizes[c - 1];
    }
    return total;
}

struct Stats {
    double mean, std, p_low, p_high;
};

inline double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double f = pos - static_cast<double>(lo);
    return v[lo] + f * (v[hi] - v[lo]);
}

inline Stats stats(const std::vector<double>& v) {
    long double sum = 0;
    for (double x : v) sum += x;
    const long double mean = sum / v.size();
    long double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {static_cast<double>(mean), static_cast<double>(std::sqrt(ss / v.size())), quantile(v, 0.005),
            quantile(v, 0.995)};
}

inline double normalize(double x, const Stats& s) {
    const double c = x < s.p_low ? s.p_low : (x > s.p_high ? s.p_high : x);
    return (c - s.mean) / s.std;
}

inline double rel_diff(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() / ("lesionseg_" + tag + "_" + std::to_string(rng() % 1000000007));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::string str(const std::string& child = "") const { return child.empty() ? path_.string() : (path_ / child).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace oracle
