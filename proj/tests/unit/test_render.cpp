#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "../support/oracles.hpp"
#include "lesionseg/errors.hpp"
#include "lesionseg/render.hpp"

using namespace lesionseg;
using namespace lesionseg::render;

TEST_CASE("inner contour of a filled square") {
    Mask2D m{5, 5, std::vector<std::uint8_t>(25, 0)};
    for (int r = 1; r < 4; ++r)
        for (int c = 1; c < 4; ++c) m.values[static_cast<std::size_t>(r * 5 + c)] = 1;
    const auto c = contour(m);
    int n = 0;
    for (auto v : c.values) n += v;
    CHECK(n == 8);
    CHECK(c.values[2 * 5 + 2] == 0);
    CHECK(c.values[1 * 5 + 1] == 1);

    Mask2D full{3, 3, std::vector<std::uint8_t>(9, 1)};
    const auto fc = contour(full);
    CHECK(fc.values[4] == 0);  // centre has all four neighbours inside
    CHECK(fc.values[0] == 1);  // border pixels count as contour
}

TEST_CASE("max-area slices") {
    const Grid3D g({6, 5, 5}, {1, 1, 1});
    LabelMask m(g);
    CHECK_FALSE(max_area_axial_slice(m).has_value());
    m.values_mut()[g.index(1, 0, 0)] = 1;
    for (int x = 0; x < 4; ++x) m.values_mut()[g.index(4, 2, x)] = 1;
    m.values_mut()[g.index(4, 3, 0)] = 1;
    CHECK(max_area_axial_slice(m) == 4);
    CHECK(max_area_coronal_slice(m) == 2);
}

TEST_CASE("png round trip") {
    oracle::TempDir dir("png");
    Image img;
    img.width = 3;
    img.height = 2;
    img.rgb.assign(18, 0);
    img.set(2, 1, kPredictionColor);
    img.set(0, 0, kGroundTruthColor);
    write_png(img, dir.str("a.png"));
    const auto back = read_png(dir.str("a.png"));
    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.rgb == img.rgb);
    CHECK_THROWS(read_png(dir.str("missing.png")));
}

TEST_CASE("overlay panels") {
    oracle::TempDir dir("overlay");
    const Grid3D g({12, 12, 12}, {2, 2, 2});
    Volume pet(g, 1.0f);
    LabelMask gt(g), pred(g);
    for (int z = 4; z < 8; ++z)
        for (int y = 4; y < 8; ++y)
            for (int x = 4; x < 8; ++x) {
                gt.values_mut()[g.index(z, y, x)] = 1;
                pet.values_mut()[g.index(z, y, x)] = 5.0f;
            }
    for (int z = 5; z < 7; ++z)
        for (int y = 5; y < 7; ++y)
            for (int x = 5; x < 7; ++x) pred.values_mut()[g.index(z, y, x)] = 1;

    OverlayOptions o;
    o.scale = 2;
    const auto slice = render_overlay("s1", pet, gt, pred, dir.str("slice"), o);
    REQUIRE(slice.files.size() == 4);
    CHECK(slice.files[0].view == "axial");
    CHECK(slice.files[0].index == 4);
    const auto axial = read_png(dir.str("slice/s1_axial.png"));
    CHECK(axial.width == 24);
    CHECK(axial.pixel(4 * 2, 4 * 2) == kGroundTruthColor);   // corner of the gt square
    CHECK(axial.pixel(0, 0) != kGroundTruthColor);
    // pred is absent on this slice, present on the zoom slice
    CHECK(std::filesystem::exists(dir.str("slice/s1_overlay_manifest.tsv")));

    o.mode = Mode::Mip;
    const auto mip = render_overlay("s1", pet, gt, pred, dir.str("mip"), o);
    CHECK(mip.files.size() == 3);
    const auto mc = read_png(dir.str("mip/s1_mip_coronal.png"));
    CHECK(mc.pixel(5 * 2, (11 - 5) * 2) == kPredictionColor);

    const auto empty = render_overlay("s2", pet, gt, LabelMask(g), dir.str("empty"), o);
    CHECK(empty.notes.empty());
    const auto nothing = render_overlay("s3", pet, std::nullopt, LabelMask(g), dir.str("none"), o);
    CHECK(nothing.files.size() == 2);
    CHECK(nothing.notes.size() == 2);

    CHECK_THROWS_AS(render_overlay("x", pet, LabelMask(Grid3D({3, 3, 3}, {1, 1, 1})), std::nullopt, dir.str("bad")),
                    GeometryError);
    CHECK_THROWS_AS(parse_mode("sideways"), ConfigError);
}
