#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lesionseg/types.hpp"

namespace lesionseg::metrics {

enum class Connectivity { Six = 6, Eighteen = 18, TwentySix = 26 };

Connectivity parse_connectivity(int value);

struct Components {
    // 0 = background, 1..count = component ids in first-voxel scan order.
    std::vector<std::uint32_t> labels;
    std::vector<std::size_t> sizes;  // sizes[i] is the size of component i+1
    std::size_t count() const noexcept { return sizes.size(); }
};

Components connected_components(const LabelMask& mask, Connectivity connectivity);

// Raw-buffer variant; `shape` is (z, y, x).
Components connected_components(std::span<const std::uint8_t> mask, const Index3& shape,
                                Connectivity connectivity);

// 2|P and G| / (|P| + |G|); both empty gives 1.0.
double dice(const LabelMask& pred, const LabelMask& gt);

// Volume (mL) of predicted components that do not touch the reference.
double false_positive_volume(const LabelMask& pred, const LabelMask& gt,
                             Connectivity connectivity = Connectivity::Eighteen);

// Volume (mL) of reference components that the prediction does not touch.
double false_negative_volume(const LabelMask& pred, const LabelMask& gt,
                             Connectivity connectivity = Connectivity::Eighteen);

struct MetricsRow {
    std::string id;
    double dice = 0.0;
    double fpvol_ml = 0.0;
    double fnvol_ml = 0.0;
    double voxel_volume_ml = 0.0;
};

MetricsRow evaluate_pair(const std::string& id, const LabelMask& pred, const LabelMask& gt,
                         Connectivity connectivity = Connectivity::Eighteen);

struct MetricsReport {
    std::vector<MetricsRow> rows;
    double mean_dice = 0.0;
    double mean_fpvol_ml = 0.0;
    double mean_fnvol_ml = 0.0;
    Connectivity connectivity = Connectivity::Eighteen;

    // CSV with header `id,dice,fpvol_ml,fnvol_ml`; the last line holds the aggregate.
    std::string to_csv() const;
    // Aligned table, columns in Dice / FPvol / FNvol order.
    std::string to_table() const;
};

MetricsReport aggregate(std::vector<MetricsRow> rows,
                        Connectivity connectivity = Connectivity::Eighteen);

}  // namespace lesionseg::metrics
