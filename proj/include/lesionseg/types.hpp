#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lesionseg {

// Axis order everywhere is (z, y, x); x varies fastest in memory.
using Index3 = std::array<std::int64_t, 3>;
using Vec3 = std::array<double, 3>;

class Grid3D {
public:
    Grid3D() = default;
    Grid3D(Index3 shape, Vec3 spacing, Vec3 origin = {0.0, 0.0, 0.0});

    const Index3& shape() const noexcept { return shape_; }
    const Vec3& spacing() const noexcept { return spacing_; }
    const Vec3& origin() const noexcept { return origin_; }

    std::size_t num_voxels() const noexcept;
    double voxel_volume_ml() const noexcept;

    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return static_cast<std::size_t>((z * shape_[1] + y) * shape_[2] + x);
    }
    Index3 coords(std::size_t flat) const noexcept;
    bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return z >= 0 && y >= 0 && x >= 0 && z < shape_[0] && y < shape_[1] && x < shape_[2];
    }

    bool operator==(const Grid3D&) const = default;

private:
    Index3 shape_{1, 1, 1};
    Vec3 spacing_{1.0, 1.0, 1.0};
    Vec3 origin_{0.0, 0.0, 0.0};
};

std::string to_string(const Grid3D& grid);

// One scalar image channel on a grid.
class Volume {
public:
    Volume() = default;
    explicit Volume(Grid3D grid, float fill = 0.0f);
    Volume(Grid3D grid, std::vector<float> values);

    const Grid3D& grid() const noexcept { return grid_; }
    std::span<const float> values() const noexcept { return values_; }
    std::span<float> values_mut() noexcept { return values_; }
    float at(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return values_[grid_.index(z, y, x)];
    }
    std::size_t size() const noexcept { return values_.size(); }

private:
    Grid3D grid_;
    std::vector<float> values_;
};

// Binary lesion mask; values are 0 or 1.
class LabelMask {
public:
    LabelMask() = default;
    explicit LabelMask(Grid3D grid);
    LabelMask(Grid3D grid, std::vector<std::uint8_t> values);

    const Grid3D& grid() const noexcept { return grid_; }
    std::span<const std::uint8_t> values() const noexcept { return values_; }
    std::span<std::uint8_t> values_mut() noexcept { return values_; }
    std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return values_[grid_.index(z, y, x)];
    }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t foreground_count() const noexcept;

private:
    Grid3D grid_;
    std::vector<std::uint8_t> values_;
};

enum class Tracer { FDG, PSMA };

std::string_view to_string(Tracer tracer);
Tracer parse_tracer(std::string_view text);

struct Study {
    std::string id;
    Tracer tracer = Tracer::FDG;
    Volume ct;
    Volume pet;
    std::optional<LabelMask> label;
    bool positive = false;

    // Derives positivity from the label.
    static Study make(std::string id, Tracer tracer, Volume ct, Volume pet,
                      std::optional<LabelMask> label);
};

struct Violation {
    std::string rule;
    std::string message;
};

std::vector<Violation> validate_study(const Study& study);

struct DatasetPartition {
    std::string name;
    std::vector<std::string> study_ids;

    std::size_t size() const noexcept { return study_ids.size(); }
    bool contains(std::string_view id) const;
    bool has_duplicates() const;
};

// True if `parts` are pairwise disjoint and their union equals `whole`.
bool disjointly_covers(const DatasetPartition& whole,
                       std::span<const DatasetPartition> parts);

// study id -> multiplicity; multiplicity m means m-1 extra copies per epoch.
class SampleWeightTable {
public:
    SampleWeightTable() = default;

    void add(const std::string& id, int multiplicity = 1);
    bool contains(const std::string& id) const { return weights_.count(id) != 0; }
    int multiplicity(const std::string& id) const;
    void increment(const std::string& id);

    std::size_t size() const noexcept { return weights_.size(); }
    long total_samples() const noexcept;
    long extra_samples(std::span<const std::string> ids) const;
    std::vector<std::string> ids() const;
    const std::map<std::string, int>& entries() const noexcept { return weights_; }

    bool operator==(const SampleWeightTable&) const = default;

private:
    std::map<std::string, int> weights_;
};

using PerSampleDice = std::map<std::string, double>;

}  // namespace lesionseg
