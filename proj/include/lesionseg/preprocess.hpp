#pragma once

#include <span>
#include <string>
#include <vector>

#include "lesionseg/types.hpp"

namespace lesionseg::preprocess {

struct ChannelStats {
    double mean = 0.0;
    double std = 1.0;  // population standard deviation
    double p_low = 0.0;   // 0.5th percentile
    double p_high = 0.0;  // 99.5th percentile

    bool operator==(const ChannelStats&) const = default;
};

struct NormalizationStats {
    ChannelStats ct;
    ChannelStats pet;

    bool operator==(const NormalizationStats&) const = default;
};

// Where normalization statistics come from.
enum class NormalizationScope {
    Corpus,   // pooled over all training foreground voxels
    PerCase,  // each case's own foreground voxels (experimental)
};

NormalizationScope parse_scope(const std::string& text);

// Linear interpolation between order statistics: position q * (n - 1).
double quantile_sorted(std::span<const double> sorted, double q);

ChannelStats channel_stats_from_values(std::vector<double> values);

// Pools voxel values under label == 1 across every study, per channel.
NormalizationStats compute_foreground_stats(std::span<const Study> studies);

// out = (clamp(in, p_low, p_high) - mean) / std
Volume normalize_volume(const Volume& volume, const ChannelStats& stats);

// Normalizes CT and PET of a study with the matching channel stats.
Study normalize_study(const Study& study, const NormalizationStats& stats);

enum class ResampleKind { Image, Mask };

// Axis-aligned resampling in physical space. Images use trilinear
// interpolation with edge clamping; masks use nearest neighbour.
Volume resample_to_grid(const Volume& volume, const Grid3D& target);
LabelMask resample_to_grid(const LabelMask& mask, const Grid3D& target);

std::string stats_to_yaml(const NormalizationStats& stats);
NormalizationStats stats_from_yaml(const std::string& text);
void save_stats(const NormalizationStats& stats, const std::string& path);
NormalizationStats load_stats(const std::string& path);

}  // namespace lesionseg::preprocess
