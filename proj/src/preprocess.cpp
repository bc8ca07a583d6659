#include "lesionseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "lesionseg/errors.hpp"

namespace lesionseg::preprocess {

NormalizationScope parse_scope(const std::string& text) {
    if (text == "corpus") return NormalizationScope::Corpus;
    if (text == "per_case") return NormalizationScope::PerCase;
    throw ConfigError("normalization scope must be 'corpus' or 'per_case', got '" + text + "'");
}

double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw DataError("quantile of an empty sample");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

ChannelStats channel_stats_from_values(std::vector<double> values) {
    if (values.size() < 2)
        throw DataError("foreground statistics need at least 2 foreground voxels, got " +
                        std::to_string(values.size()));
    // Sorting first makes every reduction independent of input order.
    std::sort(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double std = std::sqrt(ss / static_cast<double>(values.size()));
    if (!(std > 0.0))
        throw DataError("degenerate corpus: foreground intensities have zero variance");

    ChannelStats s;
    s.mean = mean;
    s.std = std;
    s.p_low = quantile_sorted(values, 0.005);
    s.p_high = quantile_sorted(values, 0.995);
    return s;
}

NormalizationStats compute_foreground_stats(std::span<const Study> studies) {
    std::vector<double> ct, pet;
    for (const auto& s : studies) {
        if (!s.label) throw DataError("study '" + s.id + "' has no label for foreground statistics");
        const auto mask = s.label->values();
        const auto cv = s.ct.values();
        const auto pv = s.pet.values();
        if (mask.size() != cv.size() || mask.size() != pv.size())
            throw ShapeError("study '" + s.id + "' channel sizes differ from its label");
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            ct.push_back(cv[i]);
            pet.push_back(pv[i]);
        }
    }
    if (ct.empty()) throw DataError("empty foreground: no label voxels in any study");
    NormalizationStats stats;
    stats.ct = channel_stats_from_values(std::move(ct));
    stats.pet = channel_stats_from_values(std::move(pet));
    return stats;
}

Volume normalize_volume(const Volume& volume, const ChannelStats& stats) {
    if (!(stats.std > 0.0) || stats.p_low > stats.p_high)
        throw DataError("invalid channel statistics");
    std::vector<float> out(volume.size());
    const auto in = volume.values();
    const double inv = 1.0 / stats.std;
    for (std::size_t i = 0; i < in.size(); ++i) {
        const double v = std::clamp<double>(in[i], stats.p_low, stats.p_high);
        out[i] = static_cast<float>((v - stats.mean) * inv);
    }
    return Volume(volume.grid(), std::move(out));
}

Study normalize_study(const Study& study, const NormalizationStats& stats) {
    Study out = study;
    out.ct = normalize_volume(study.ct, stats.ct);
    out.pet = normalize_volume(study.pet, stats.pet);
    return out;
}

namespace {

struct AxisMap {
    std::vector<double> pos;  // continuous source index per target index
};

AxisMap map_axis(const Grid3D& src, const Grid3D& dst, int axis) {
    AxisMap m;
    const auto n = dst.shape()[axis];
    m.pos.resize(static_cast<std::size_t>(n));
    bool any_inside = false;
    const double lo = -0.5, hi = static_cast<double>(src.shape()[axis]) - 0.5;
    for (std::int64_t i = 0; i < n; ++i) {
        const double world = dst.origin()[axis] + static_cast<double>(i) * dst.spacing()[axis];
        const double p = (world - src.origin()[axis]) / src.spacing()[axis];
        m.pos[static_cast<std::size_t>(i)] = p;
        if (p >= lo && p <= hi) any_inside = true;
    }
    if (!any_inside)
        throw GeometryError("target grid does not overlap source grid along axis " +
                            std::to_string(axis));
    return m;
}

}  // namespace

Volume resample_to_grid(const Volume& volume, const Grid3D& target) {
    const Grid3D& src = volume.grid();
    AxisMap az = map_axis(src, target, 0), ay = map_axis(src, target, 1),
            ax = map_axis(src, target, 2);
    const auto& s = src.shape();
    auto split = [](double p, std::int64_t n, std::int64_t& i0, std::int64_t& i1, double& f) {
        p = std::clamp(p, 0.0, static_cast<double>(n - 1));
        i0 = static_cast<std::int64_t>(std::floor(p));
        i1 = std::min(i0 + 1, n - 1);
        f = p - static_cast<double>(i0);
    };
    std::vector<float> out(target.num_voxels());
    const auto in = volume.values();
    std::size_t o = 0;
    for (double pz : az.pos) {
        std::int64_t z0, z1;
        double fz;
        split(pz, s[0], z0, z1, fz);
        for (double py : ay.pos) {
            std::int64_t y0, y1;
            double fy;
            split(py, s[1], y0, y1, fy);
            for (double px : ax.pos) {
                std::int64_t x0, x1;
                double fx;
                split(px, s[2], x0, x1, fx);
                auto v = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
                    return static_cast<double>(in[src.index(z, y, x)]);
                };
                const double c00 = v(z0, y0, x0) * (1 - fx) + v(z0, y0, x1) * fx;
                const double c01 = v(z0, y1, x0) * (1 - fx) + v(z0, y1, x1) * fx;
                const double c10 = v(z1, y0, x0) * (1 - fx) + v(z1, y0, x1) * fx;
                const double c11 = v(z1, y1, x0) * (1 - fx) + v(z1, y1, x1) * fx;
                const double c0 = c00 * (1 - fy) + c01 * fy;
                const double c1 = c10 * (1 - fy) + c11 * fy;
                out[o++] = static_cast<float>(c0 * (1 - fz) + c1 * fz);
            }
        }
    }
    return Volume(target, std::move(out));
}

LabelMask resample_to_grid(const LabelMask& mask, const Grid3D& target) {
    const Grid3D& src = mask.grid();
    AxisMap az = map_axis(src, target, 0), ay = map_axis(src, target, 1),
            ax = map_axis(src, target, 2);
    const auto& s = src.shape();
    auto nearest = [](double p, std::int64_t n) {
        return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::lround(p)), 0, n - 1);
    };
    std::vector<std::uint8_t> out(target.num_voxels());
    const auto in = mask.values();
    std::size_t o = 0;
    for (double pz : az.pos)
        for (double py : ay.pos)
            for (double px : ax.pos)
                out[o++] = in[src.index(nearest(pz, s[0]), nearest(py, s[1]), nearest(px, s[2]))];
    return LabelMask(target, std::move(out));
}

namespace {

void emit_channel(YAML::Emitter& out, const char* name, const ChannelStats& c) {
    out << YAML::Key << name << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "mean" << YAML::Value << c.mean;
    out << YAML::Key << "std" << YAML::Value << c.std;
    out << YAML::Key << "p_low" << YAML::Value << c.p_low;
    out << YAML::Key << "p_high" << YAML::Value << c.p_high;
    out << YAML::EndMap;
}

ChannelStats read_channel(const YAML::Node& node, const char* name) {
    const auto c = node[name];
    if (!c) throw FormatError(std::string("stats file missing channel '") + name + "'");
    ChannelStats s;
    s.mean = c["mean"].as<double>();
    s.std = c["std"].as<double>();
    s.p_low = c["p_low"].as<double>();
    s.p_high = c["p_high"].as<double>();
    if (!(s.std > 0.0) || s.p_low > s.p_high)
        throw FormatError(std::string("invalid statistics for channel '") + name + "'");
    return s;
}

}  // namespace

std::string stats_to_yaml(const NormalizationStats& stats) {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    out << YAML::Key << "schema_version" << YAML::Value << 1;
    out << YAML::Key << "kind" << YAML::Value << "foreground_normalization_stats";
    out << YAML::Key << "channels" << YAML::Value << YAML::BeginMap;
    emit_channel(out, "CT", stats.ct);
    emit_channel(out, "PET", stats.pet);
    out << YAML::EndMap << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

NormalizationStats stats_from_yaml(const std::string& text) {
    try {
        const YAML::Node root = YAML::Load(text);
        if (!root["schema_version"] || root["schema_version"].as<int>() != 1)
            throw FormatError("stats file: unsupported or missing schema_version");
        const auto channels = root["channels"];
        NormalizationStats s;
        s.ct = read_channel(channels, "CT");
        s.pet = read_channel(channels, "PET");
        return s;
    } catch (const YAML::Exception& e) {
        throw FormatError(std::string("stats file: ") + e.what());
    }
}

void save_stats(const NormalizationStats& stats, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << stats_to_yaml(stats);
}

NormalizationStats load_stats(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return stats_from_yaml(ss.str());
}

}  // namespace lesionseg::preprocess
