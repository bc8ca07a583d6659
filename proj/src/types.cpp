#include "lesionseg/types.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "lesionseg/errors.hpp"

namespace lesionseg {

Grid3D::Grid3D(Index3 shape, Vec3 spacing, Vec3 origin)
    : shape_(shape), spacing_(spacing), origin_(origin) {
    for (int a = 0; a < 3; ++a) {
        if (shape_[a] < 1) throw ShapeError("grid shape entries must be >= 1: " + to_string(*this));
        if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a]))
            throw GeometryError("grid spacing entries must be > 0: " + to_string(*this));
        if (!std::isfinite(origin_[a])) throw GeometryError("grid origin must be finite");
    }
}

std::size_t Grid3D::num_voxels() const noexcept {
    return static_cast<std::size_t>(shape_[0] * shape_[1] * shape_[2]);
}

double Grid3D::voxel_volume_ml() const noexcept {
    return spacing_[0] * spacing_[1] * spacing_[2] / 1000.0;
}

Index3 Grid3D::coords(std::size_t flat) const noexcept {
    const auto f = static_cast<std::int64_t>(flat);
    const std::int64_t x = f % shape_[2];
    const std::int64_t y = (f / shape_[2]) % shape_[1];
    const std::int64_t z = f / (shape_[2] * shape_[1]);
    return {z, y, x};
}

std::string to_string(const Grid3D& grid) {
    std::ostringstream os;
    os << "shape(" << grid.shape()[0] << "," << grid.shape()[1] << "," << grid.shape()[2]
       << ") spacing(" << grid.spacing()[0] << "," << grid.spacing()[1] << "," << grid.spacing()[2]
       << ")";
    return os.str();
}

Volume::Volume(Grid3D grid, float fill) : grid_(grid), values_(grid.num_voxels(), fill) {}

Volume::Volume(Grid3D grid, std::vector<float> values)
    : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.num_voxels())
        throw ShapeError("volume value count does not match grid " + to_string(grid_));
}

LabelMask::LabelMask(Grid3D grid) : grid_(grid), values_(grid.num_voxels(), 0) {}

LabelMask::LabelMask(Grid3D grid, std::vector<std::uint8_t> values)
    : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.num_voxels())
        throw ShapeError("mask value count does not match grid " + to_string(grid_));
    for (auto v : values_)
        if (v > 1) throw DataError("label mask must be binary");
}

std::size_t LabelMask::foreground_count() const noexcept {
    return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
}

std::string_view to_string(Tracer tracer) {
    return tracer == Tracer::FDG ? "FDG" : "PSMA";
}

Tracer parse_tracer(std::string_view text) {
    if (text == "FDG" || text == "fdg") return Tracer::FDG;
    if (text == "PSMA" || text == "psma") return Tracer::PSMA;
    throw ConfigError("unknown tracer '" + std::string(text) + "'");
}

Study Study::make(std::string id, Tracer tracer, Volume ct, Volume pet,
                  std::optional<LabelMask> label) {
    Study s;
    s.id = std::move(id);
    s.tracer = tracer;
    s.ct = std::move(ct);
    s.pet = std::move(pet);
    s.positive = label && label->foreground_count() > 0;
    s.label = std::move(label);
    return s;
}

std::vector<Violation> validate_study(const Study& study) {
    std::vector<Violation> out;
    if (study.id.empty()) out.push_back({"id", "study id is empty"});
    if (!(study.ct.grid() == study.pet.grid()))
        out.push_back({"grid-mismatch", "PET grid " + to_string(study.pet.grid()) +
                                            " differs from CT grid " + to_string(study.ct.grid())});
    if (study.label && !(study.label->grid() == study.ct.grid()))
        out.push_back({"grid-mismatch", "label grid " + to_string(study.label->grid()) +
                                            " differs from CT grid " + to_string(study.ct.grid())});
    if (study.ct.size() != study.ct.grid().num_voxels() ||
        study.pet.size() != study.pet.grid().num_voxels())
        out.push_back({"shape", "value array size does not match grid"});

    auto finite = [](const Volume& v) {
        return std::all_of(v.values().begin(), v.values().end(),
                           [](float x) { return std::isfinite(x); });
    };
    if (!finite(study.ct)) out.push_back({"finite", "CT contains non-finite values"});
    if (!finite(study.pet)) out.push_back({"finite", "PET contains non-finite values"});

    if (study.label) {
        for (auto v : study.label->values())
            if (v > 1) {
                out.push_back({"binary", "label is not binary"});
                break;
            }
    }
    const bool has_foreground = study.label && study.label->foreground_count() > 0;
    if (study.positive != has_foreground) {
        out.push_back({"positivity", study.positive
                                         ? "study marked positive but label is missing or empty"
                                         : "study marked negative but label has foreground"});
    }
    return out;
}

bool DatasetPartition::contains(std::string_view id) const {
    return std::find(study_ids.begin(), study_ids.end(), id) != study_ids.end();
}

bool DatasetPartition::has_duplicates() const {
    std::set<std::string> seen(study_ids.begin(), study_ids.end());
    return seen.size() != study_ids.size();
}

bool disjointly_covers(const DatasetPartition& whole, std::span<const DatasetPartition> parts) {
    std::multiset<std::string> pooled;
    for (const auto& p : parts) pooled.insert(p.study_ids.begin(), p.study_ids.end());
    std::set<std::string> unique(pooled.begin(), pooled.end());
    if (unique.size() != pooled.size()) return false;
    std::set<std::string> target(whole.study_ids.begin(), whole.study_ids.end());
    return unique == target;
}

void SampleWeightTable::add(const std::string& id, int multiplicity) {
    if (multiplicity < 1) throw DataError("multiplicity must be >= 1 for " + id);
    weights_.try_emplace(id, multiplicity);
}

int SampleWeightTable::multiplicity(const std::string& id) const {
    auto it = weights_.find(id);
    if (it == weights_.end()) throw DataError("study '" + id + "' is not in the weight table");
    return it->second;
}

void SampleWeightTable::increment(const std::string& id) {
    auto it = weights_.find(id);
    if (it == weights_.end()) throw DataError("cannot boost unknown study '" + id + "'");
    ++it->second;
}

long SampleWeightTable::total_samples() const noexcept {
    long total = 0;
    for (const auto& [id, m] : weights_) total += m;
    return total;
}

long SampleWeightTable::extra_samples(std::span<const std::string> ids) const {
    long extra = 0;
    for (const auto& id : ids) {
        auto it = weights_.find(id);
        if (it != weights_.end()) extra += it->second - 1;
    }
    return extra;
}

std::vector<std::string> SampleWeightTable::ids() const {
    std::vector<std::string> out;
    out.reserve(weights_.size());
    for (const auto& [id, m] : weights_) out.push_back(id);
    return out;
}

}  // namespace lesionseg
