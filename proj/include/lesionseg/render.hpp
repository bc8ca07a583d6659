#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lesionseg/types.hpp"

namespace lesionseg::render {

enum class Mode { Slice, Mip };
Mode parse_mode(const std::string& text);

using Rgb = std::array<std::uint8_t, 3>;
inline constexpr Rgb kGroundTruthColor{0, 255, 0};  // green
inline constexpr Rgb kPredictionColor{255, 255, 0};  // yellow

struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    Rgb pixel(int x, int y) const;
    void set(int x, int y, Rgb c);
};

void write_png(const Image& image, const std::string& path);
Image read_png(const std::string& path);

// 2D binary slice (rows x cols) and its inner contour: foreground pixels with
// a 4-neighbour outside the mask or on the image border.
struct Mask2D {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> values;
};

Mask2D contour(const Mask2D& mask);

// Axial slice with the largest foreground area (first on ties); nullopt for an empty mask.
std::optional<std::int64_t> max_area_axial_slice(const LabelMask& mask);
std::optional<std::int64_t> max_area_coronal_slice(const LabelMask& mask);

struct OverlayOptions {
    Mode mode = Mode::Slice;
    int scale = 4;       // pixels per voxel
    int zoom_scale = 8;  // pixels per voxel in zoom panels
    int zoom_margin = 4; // voxels around the lesion bounding box
};

struct OverlayFile {
    std::string file;
    std::string view;
    std::int64_t index = -1;  // slice index; -1 for projections
    std::string note;
};

struct OverlayResult {
    std::vector<OverlayFile> files;
    std::vector<std::string> notes;
};

// PET background with gt contours (green) and pred contours (yellow). Files
// are named <id>_<view>.png; a manifest overlay_manifest.tsv lists them.
OverlayResult render_overlay(const std::string& id, const Volume& pet, const std::optional<LabelMask>& gt,
                             const std::optional<LabelMask>& pred, const std::string& out_dir,
                             const OverlayOptions& options = {});

}  // namespace lesionseg::render
