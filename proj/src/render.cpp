#include "lesionseg/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>

#include "lesionseg/errors.hpp"
#include "lesionseg/metrics.hpp"

namespace lesionseg::render {

namespace fs = std::filesystem;

Mode parse_mode(const std::string& text) {
    if (text == "slice") return Mode::Slice;
    if (text == "mip") return Mode::Mip;
    throw ConfigError("unknown overlay mode '" + text + "' (slice, mip)");
}

Rgb Image::pixel(int x, int y) const {
    const auto i = static_cast<std::size_t>((y * width + x) * 3);
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void Image::set(int x, int y, Rgb c) {
    const auto i = static_cast<std::size_t>((y * width + x) * 3);
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
}

void write_png(const Image& image, const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing PNG " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y)
        png_write_row(png, const_cast<png_bytep>(image.rgb.data() + static_cast<std::size_t>(y * image.width * 3)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw IoError("cannot read " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    Image img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.rgb.resize(static_cast<std::size_t>(img.width * img.height * 3));
    for (int y = 0; y < img.height; ++y)
        png_read_row(png, img.rgb.data() + static_cast<std::size_t>(y * img.width * 3), nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Mask2D contour(const Mask2D& m) {
    Mask2D out{m.rows, m.cols, std::vector<std::uint8_t>(m.values.size(), 0)};
    auto on = [&](int r, int c) { return r >= 0 && c >= 0 && r < m.rows && c < m.cols && m.values[static_cast<std::size_t>(r * m.cols + c)]; };
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c)
            if (on(r, c) && (!on(r - 1, c) || !on(r + 1, c) || !on(r, c - 1) || !on(r, c + 1)))
                out.values[static_cast<std::size_t>(r * m.cols + c)] = 1;
    return out;
}

std::optional<std::int64_t> max_area_axial_slice(const LabelMask& mask) {
    const Index3 s = mask.grid().shape();
    std::int64_t best = -1;
    std::size_t best_area = 0;
    for (std::int64_t z = 0; z < s[0]; ++z) {
        std::size_t area = 0;
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) area += mask.at(z, y, x);
        if (area > best_area) {
            best_area = area;
            best = z;
        }
    }
    if (best < 0) return std::nullopt;
    return best;
}

std::optional<std::int64_t> max_area_coronal_slice(const LabelMask& mask) {
    const Index3 s = mask.grid().shape();
    std::int64_t best = -1;
    std::size_t best_area = 0;
    for (std::int64_t y = 0; y < s[1]; ++y) {
        std::size_t area = 0;
        for (std::int64_t z = 0; z < s[0]; ++z)
            for (std::int64_t x = 0; x < s[2]; ++x) area += mask.at(z, y, x);
        if (area > best_area) {
            best_area = area;
            best = y;
        }
    }
    if (best < 0) return std::nullopt;
    return best;
}

namespace {

// A 2D view of the volume: background intensities plus optional masks.
struct Plane {
    int rows = 0, cols = 0;
    std::vector<float> background;
    std::optional<Mask2D> gt, pred;
};

enum class View { Axial, Coronal };

// Axial: rows = y, cols = x. Coronal: rows = z flipped (head up), cols = x.
// index < 0 means a maximum-intensity projection along the view axis.
Plane make_plane(const Volume& pet, const std::optional<LabelMask>& gt, const std::optional<LabelMask>& pred, View view,
                 std::int64_t index) {
    const Index3 s = pet.grid().shape();
    Plane p;
    p.rows = static_cast<int>(view == View::Axial ? s[1] : s[0]);
    p.cols = static_cast<int>(s[2]);
    const std::int64_t depth = view == View::Axial ? s[0] : s[1];
    const auto n = static_cast<std::size_t>(p.rows * p.cols);
    p.background.assign(n, index < 0 ? -std::numeric_limits<float>::infinity() : 0.0f);
    if (gt) p.gt = Mask2D{p.rows, p.cols, std::vector<std::uint8_t>(n, 0)};
    if (pred) p.pred = Mask2D{p.rows, p.cols, std::vector<std::uint8_t>(n, 0)};
    const std::int64_t d0 = index < 0 ? 0 : index, d1 = index < 0 ? depth : index + 1;
    for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c < p.cols; ++c) {
            const auto k = static_cast<std::size_t>(r * p.cols + c);
            for (std::int64_t d = d0; d < d1; ++d) {
                const std::int64_t z = view == View::Axial ? d : s[0] - 1 - r;
                const std::int64_t y = view == View::Axial ? r : d;
                p.background[k] = std::max(p.background[k], pet.at(z, y, c));
                if (gt && gt->at(z, y, c)) p.gt->values[k] = 1;
                if (pred && pred->at(z, y, c)) p.pred->values[k] = 1;
            }
        }
    return p;
}

struct Crop {
    int r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // half-open
};

Image draw(const Plane& p, float window_hi, int scale, const Crop& crop) {
    Image img;
    img.width = (crop.c1 - crop.c0) * scale;
    img.height = (crop.r1 - crop.r0) * scale;
    img.rgb.assign(static_cast<std::size_t>(img.width * img.height * 3), 0);
    const std::optional<Mask2D> gt_c = p.gt ? std::optional<Mask2D>(contour(*p.gt)) : std::nullopt;
    const std::optional<Mask2D> pr_c = p.pred ? std::optional<Mask2D>(contour(*p.pred)) : std::nullopt;
    for (int r = crop.r0; r < crop.r1; ++r)
        for (int c = crop.c0; c < crop.c1; ++c) {
            const auto k = static_cast<std::size_t>(r * p.cols + c);
            const float v = std::clamp(p.background[k] / window_hi, 0.0f, 1.0f);
            const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0f));
            Rgb color{g, g, g};
            if (gt_c && gt_c->values[k]) color = kGroundTruthColor;
            if (pr_c && pr_c->values[k]) color = kPredictionColor;
            for (int dy = 0; dy < scale; ++dy)
                for (int dx = 0; dx < scale; ++dx)
                    img.set((c - crop.c0) * scale + dx, (r - crop.r0) * scale + dy, color);
        }
    return img;
}

float window_high(const Volume& pet) {
    std::vector<float> v(pet.values().begin(), pet.values().end());
    const auto k = static_cast<std::size_t>(0.995 * static_cast<double>(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    const float hi = v[k];
    return hi > 0.0f ? hi : 1.0f;
}

// Largest 18-connected component of the mask, as a mask.
std::optional<LabelMask> largest_component(const LabelMask& mask) {
    const auto cc = metrics::connected_components(mask, metrics::Connectivity::Eighteen);
    if (cc.count() == 0) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t i = 1; i < cc.sizes.size(); ++i)
        if (cc.sizes[i] > cc.sizes[best]) best = i;
    std::vector<std::uint8_t> out(mask.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = cc.labels[i] == best + 1 ? 1 : 0;
    return LabelMask(mask.grid(), std::move(out));
}

Crop bounding_crop(const Mask2D& m, int margin) {
    Crop c{m.rows, 0, m.cols, 0};
    for (int r = 0; r < m.rows; ++r)
        for (int col = 0; col < m.cols; ++col)
            if (m.values[static_cast<std::size_t>(r * m.cols + col)]) {
                c.r0 = std::min(c.r0, r);
                c.r1 = std::max(c.r1, r + 1);
                c.c0 = std::min(c.c0, col);
                c.c1 = std::max(c.c1, col + 1);
            }
    c.r0 = std::max(0, c.r0 - margin);
    c.c0 = std::max(0, c.c0 - margin);
    c.r1 = std::min(m.rows, c.r1 + margin);
    c.c1 = std::min(m.cols, c.c1 + margin);
    return c;
}

}  // namespace

OverlayResult render_overlay(const std::string& id, const Volume& pet, const std::optional<LabelMask>& gt,
                             const std::optional<LabelMask>& pred, const std::string& out_dir,
                             const OverlayOptions& options) {
    if (gt && !(gt->grid() == pet.grid())) throw GeometryError("ground-truth mask is not on the PET grid");
    if (pred && !(pred->grid() == pet.grid())) throw GeometryError("predicted mask is not on the PET grid");
    if (options.scale < 1 || options.zoom_scale < 1 || options.zoom_margin < 0)
        throw ConfigError("overlay scales must be >= 1 and the margin >= 0");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    OverlayResult result;
    const float hi = window_high(pet);
    const Index3 s = pet.grid().shape();
    const LabelMask* ref = gt && gt->foreground_count() ? &*gt : (pred && pred->foreground_count() ? &*pred : nullptr);

    auto emit = [&](const Plane& plane, const std::string& view, std::int64_t index, const Crop& crop, int scale) {
        const std::string file = id + "_" + view + ".png";
        write_png(draw(plane, hi, scale, crop), (fs::path(out_dir) / file).string());
        result.files.push_back({file, view, index, ""});
    };
    auto full = [](const Plane& p) { return Crop{0, p.rows, 0, p.cols}; };

    const std::optional<LabelMask> lesion = ref ? largest_component(*ref) : std::nullopt;
    if (options.mode == Mode::Slice) {
        const std::int64_t z = ref ? *max_area_axial_slice(*ref) : s[0] / 2;
        const std::int64_t y = ref ? *max_area_coronal_slice(*ref) : s[1] / 2;
        const Plane axial = make_plane(pet, gt, pred, View::Axial, z);
        const Plane coronal = make_plane(pet, gt, pred, View::Coronal, y);
        emit(axial, "axial", z, full(axial), options.scale);
        emit(coronal, "coronal", y, full(coronal), options.scale);
        if (lesion) {
            const std::int64_t lz = *max_area_axial_slice(*lesion);
            const std::int64_t ly = *max_area_coronal_slice(*lesion);
            const Plane za = make_plane(pet, gt, pred, View::Axial, lz);
            const Plane zc = make_plane(pet, gt, pred, View::Coronal, ly);
            const Plane la = make_plane(pet, lesion, std::nullopt, View::Axial, lz);
            const Plane lc = make_plane(pet, lesion, std::nullopt, View::Coronal, ly);
            emit(za, "axial_zoom", lz, bounding_crop(*la.gt, options.zoom_margin), options.zoom_scale);
            emit(zc, "coronal_zoom", ly, bounding_crop(*lc.gt, options.zoom_margin), options.zoom_scale);
        }
    } else {
        const Plane axial = make_plane(pet, gt, pred, View::Axial, -1);
        const Plane coronal = make_plane(pet, gt, pred, View::Coronal, -1);
        emit(coronal, "mip_coronal", -1, full(coronal), options.scale);
        emit(axial, "mip_axial", -1, full(axial), options.scale);
        if (lesion) {
            const Plane lc = make_plane(pet, lesion, std::nullopt, View::Coronal, -1);
            emit(coronal, "mip_coronal_zoom", -1, bounding_crop(*lc.gt, options.zoom_margin), options.zoom_scale);
        }
    }
    if (!lesion) result.notes.push_back("no lesion in ground truth or prediction; zoom panels skipped");
    if (!gt) result.notes.push_back("no ground truth given");
    if (!pred) result.notes.push_back("no prediction given");

    std::ofstream m(fs::path(out_dir) / (id + "_overlay_manifest.tsv"));
    if (!m) throw IoError("cannot write overlay manifest in " + out_dir);
    m << "file\tview\tindex\n";
    for (const auto& f : result.files) m << f.file << '\t' << f.view << '\t' << f.index << '\n';
    for (const auto& n : result.notes) m << "# note: " << n << '\n';
    return result;
}

}  // namespace lesionseg::render
