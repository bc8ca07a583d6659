#include "lesionseg/metrics.hpp"

#include <cstdlib>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "lesionseg/errors.hpp"

namespace lesionseg::metrics {

namespace {

struct Offset {
    std::int64_t dz, dy, dx;
};

// Neighbors that precede the current voxel in raster order.
std::vector<Offset> backward_offsets(Connectivity connectivity) {
    const int max_manhattan = connectivity == Connectivity::Six        ? 1
                              : connectivity == Connectivity::Eighteen ? 2
                                                                       : 3;
    std::vector<Offset> out;
    for (std::int64_t dz = -1; dz <= 0; ++dz)
        for (std::int64_t dy = -1; dy <= 1; ++dy)
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                const bool before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                if (!before) continue;
                if (std::abs(dz) + std::abs(dy) + std::abs(dx) > max_manhattan) continue;
                out.push_back({dz, dy, dx});
            }
    return out;
}

std::uint32_t find_root(std::vector<std::uint32_t>& parent, std::uint32_t x) {
    while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    return x;
}

void require_same_grid(const LabelMask& a, const LabelMask& b) {
    if (!(a.grid() == b.grid()))
        throw GeometryError("mask grids differ: " + to_string(a.grid()) + " vs " +
                            to_string(b.grid()));
}

double unmatched_component_volume(const LabelMask& source, const LabelMask& other,
                                  Connectivity connectivity) {
    const Components cc = connected_components(source, connectivity);
    std::vector<char> touched(cc.count() + 1, 0);
    const auto other_values = other.values();
    for (std::size_t i = 0; i < cc.labels.size(); ++i)
        if (cc.labels[i] != 0 && other_values[i] != 0) touched[cc.labels[i]] = 1;
    std::size_t voxels = 0;
    for (std::size_t c = 1; c <= cc.count(); ++c)
        if (!touched[c]) voxels += cc.sizes[c - 1];
    return static_cast<double>(voxels) * source.grid().voxel_volume_ml();
}

}  // namespace

Connectivity parse_connectivity(int value) {
    switch (value) {
        case 6: return Connectivity::Six;
        case 18: return Connectivity::Eighteen;
        case 26: return Connectivity::TwentySix;
        default: throw ConfigError("connectivity must be 6, 18 or 26, got " + std::to_string(value));
    }
}

Components connected_components(std::span<const std::uint8_t> mask, const Index3& shape,
                                Connectivity connectivity) {
    const std::int64_t nz = shape[0], ny = shape[1], nx = shape[2];
    if (static_cast<std::int64_t>(mask.size()) != nz * ny * nx)
        throw ShapeError("mask size does not match shape");

    const auto offsets = backward_offsets(connectivity);
    std::vector<std::uint32_t> provisional(mask.size(), 0);
    std::vector<std::uint32_t> parent{0};

    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x) {
                const std::size_t i = static_cast<std::size_t>((z * ny + y) * nx + x);
                if (!mask[i]) continue;
                std::uint32_t label = 0;
                for (const auto& o : offsets) {
                    const std::int64_t zz = z + o.dz, yy = y + o.dy, xx = x + o.dx;
                    if (zz < 0 || yy < 0 || xx < 0 || yy >= ny || xx >= nx) continue;
                    const std::uint32_t n =
                        provisional[static_cast<std::size_t>((zz * ny + yy) * nx + xx)];
                    if (n == 0) continue;
                    if (label == 0) {
                        label = find_root(parent, n);
                    } else {
                        const std::uint32_t a = find_root(parent, label);
                        const std::uint32_t b = find_root(parent, n);
                        if (a != b) {
                            parent[std::max(a, b)] = std::min(a, b);
                            label = std::min(a, b);
                        }
                    }
                }
                if (label == 0) {
                    label = static_cast<std::uint32_t>(parent.size());
                    parent.push_back(label);
                }
                provisional[i] = label;
            }

    // Relabel roots in order of first appearance.
    Components out;
    out.labels.assign(mask.size(), 0);
    std::vector<std::uint32_t> final_label(parent.size(), 0);
    for (std::size_t i = 0; i < provisional.size(); ++i) {
        if (provisional[i] == 0) continue;
        const std::uint32_t root = find_root(parent, provisional[i]);
        if (final_label[root] == 0) {
            out.sizes.push_back(0);
            final_label[root] = static_cast<std::uint32_t>(out.sizes.size());
        }
        out.labels[i] = final_label[root];
        ++out.sizes[final_label[root] - 1];
    }
    return out;
}

Components connected_components(const LabelMask& mask, Connectivity connectivity) {
    return connected_components(mask.values(), mask.grid().shape(), connectivity);
}

double dice(const LabelMask& pred, const LabelMask& gt) {
    require_same_grid(pred, gt);
    std::size_t p = 0, g = 0, both = 0;
    const auto pv = pred.values();
    const auto gv = gt.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        p += pv[i];
        g += gv[i];
        both += pv[i] & gv[i];
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double false_positive_volume(const LabelMask& pred, const LabelMask& gt,
                             Connectivity connectivity) {
    require_same_grid(pred, gt);
    return unmatched_component_volume(pred, gt, connectivity);
}

double false_negative_volume(const LabelMask& pred, const LabelMask& gt,
                             Connectivity connectivity) {
    require_same_grid(pred, gt);
    return unmatched_component_volume(gt, pred, connectivity);
}

MetricsRow evaluate_pair(const std::string& id, const LabelMask& pred, const LabelMask& gt,
                         Connectivity connectivity) {
    MetricsRow row;
    row.id = id;
    row.dice = dice(pred, gt);
    row.fpvol_ml = false_positive_volume(pred, gt, connectivity);
    row.fnvol_ml = false_negative_volume(pred, gt, connectivity);
    row.voxel_volume_ml = gt.grid().voxel_volume_ml();
    return row;
}

MetricsReport aggregate(std::vector<MetricsRow> rows, Connectivity connectivity) {
    if (rows.empty()) throw DataError("cannot aggregate an empty metrics table");
    MetricsReport report;
    report.connectivity = connectivity;
    double d = 0.0, fp = 0.0, fn = 0.0;
    for (const auto& r : rows) {
        d += r.dice;
        fp += r.fpvol_ml;
        fn += r.fnvol_ml;
    }
    const double n = static_cast<double>(rows.size());
    report.mean_dice = d / n;
    report.mean_fpvol_ml = fp / n;
    report.mean_fnvol_ml = fn / n;
    report.rows = std::move(rows);
    return report;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "id,dice,fpvol_ml,fnvol_ml\n";
    for (const auto& r : rows) os << r.id << ',' << r.dice << ',' << r.fpvol_ml << ',' << r.fnvol_ml << '\n';
    os << "mean," << mean_dice << ',' << mean_fpvol_ml << ',' << mean_fnvol_ml << '\n';
    return os.str();
}

std::string MetricsReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(24) << "id" << std::right << std::setw(10) << "Dice"
       << std::setw(12) << "FPvol" << std::setw(12) << "FNvol" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows)
        os << std::left << std::setw(24) << r.id << std::right << std::setw(10) << r.dice
           << std::setw(12) << r.fpvol_ml << std::setw(12) << r.fnvol_ml << '\n';
    os << std::left << std::setw(24) << "mean" << std::right << std::setw(10) << mean_dice
       << std::setw(12) << mean_fpvol_ml << std::setw(12) << mean_fnvol_ml << '\n';
    os << "connectivity: " << static_cast<int>(connectivity) << ", volumes in mL\n";
    return os.str();
}

}  // namespace lesionseg::metrics
