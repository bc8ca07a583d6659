#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "../support/oracles.hpp"
#include "lesionseg/augment.hpp"
#include "lesionseg/errors.hpp"

using namespace lesionseg;
using namespace lesionseg::augment;

namespace {

std::size_t at(const Index3& s, std::int64_t z, std::int64_t y, std::int64_t x) {
    return static_cast<std::size_t>((z * s[1] + y) * s[2] + x);
}

TrainingSample random_sample(std::uint64_t seed, const Index3& shape) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.0f, 1.0f);
    TrainingSample s;
    s.study_id = "x";
    s.shape = shape;
    const auto n = static_cast<std::size_t>(shape[0] * shape[1] * shape[2]);
    for (auto& c : s.channels) {
        c.resize(n);
        for (auto& v : c) v = d(rng);
    }
    s.mask = oracle::random_mask(rng, n, 0.2);
    return s;
}

}  // namespace

TEST_CASE("policy contents") {
    const auto t1 = AugmentationPolicy::type1().transforms();
    const auto t2 = AugmentationPolicy::type2().transforms();
    CHECK(AugmentationPolicy::none().transforms().empty());
    CHECK(t1.size() == 9);
    for (auto t : t1) CHECK(std::find(t2.begin(), t2.end(), t) != t2.end());
    for (auto t : {Transform::Sharpening, Transform::LocalGamma, Transform::Occlusion}) {
        CHECK(std::find(t1.begin(), t1.end(), t) == t1.end());
        CHECK(std::find(t2.begin(), t2.end(), t) != t2.end());
    }
    CHECK(AugmentationPolicy::by_name("type2").name == PolicyName::Type2);
    CHECK_THROWS_AS(parse_policy_name("type3"), ConfigError);
    auto bad = AugmentationPolicy::type1();
    bad.p_gamma = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = AugmentationPolicy::type1();
    bad.scale = {1.2, 0.8};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("None policy is an exact copy or centre crop") {
    const auto s = random_sample(1, {6, 7, 8});
    Rng rng(5);
    const auto out = apply_policy(s, AugmentationPolicy::none(), rng);
    CHECK(out.channels[0] == s.channels[0]);
    CHECK(out.channels[1] == s.channels[1]);
    CHECK(out.mask == s.mask);

    PatchRequest req;
    req.shape = Index3{4, 5, 6};
    const auto crop = apply_policy(s, AugmentationPolicy::none(), rng, req);
    for (std::int64_t z = 0; z < 4; ++z)
        for (std::int64_t y = 0; y < 5; ++y)
            for (std::int64_t x = 0; x < 6; ++x) {
                CHECK(crop.channels[1][at(crop.shape, z, y, x)] == s.channels[1][at(s.shape, z + 1, y + 1, x + 1)]);
                CHECK(crop.mask[at(crop.shape, z, y, x)] == s.mask[at(s.shape, z + 1, y + 1, x + 1)]);
            }
    req.shape = Index3{7, 7, 8};
    CHECK_THROWS_AS(apply_policy(s, AugmentationPolicy::none(), rng, req), GeometryError);
}

TEST_CASE("same stream gives the same sample") {
    const auto s = random_sample(2, {12, 12, 12});
    for (const auto& p : {AugmentationPolicy::type1(), AugmentationPolicy::type2()}) {
        PatchRequest req;
        req.shape = Index3{8, 8, 8};
        Rng a(42), b(42), c(43);
        const auto x = apply_policy(s, p, a, req);
        const auto y = apply_policy(s, p, b, req);
        CHECK(x.channels[0] == y.channels[0]);
        CHECK(x.channels[1] == y.channels[1]);
        CHECK(x.mask == y.mask);
        bool differs = false;
        for (int k = 0; k < 5 && !differs; ++k) differs = apply_policy(s, p, c, req).channels[1] != x.channels[1];
        CHECK(differs);
    }
}

TEST_CASE("quarter turn about z") {
    const Index3 s{5, 5, 5};
    std::vector<float> img(125);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i + 1);
    GeometryPlan plan;
    plan.source_shape = plan.out_shape = s;
    plan.center = {2.0, 2.0, 2.0};
    plan.angles_rad = {std::numbers::pi / 2, 0.0, 0.0};
    const auto out = warp_image(img, plan);
    CHECK(out[at(s, 0, 2, 3)] == doctest::Approx(img[at(s, 0, 1, 2)]));
    // in-plane offset (dy, dx) lands at (dx, -dy)
    for (std::int64_t z = 0; z < 5; ++z)
        for (std::int64_t dy = -2; dy <= 2; ++dy)
            for (std::int64_t dx = -2; dx <= 2; ++dx)
                CHECK(out[at(s, z, 2 + dx, 2 - dy)] == doctest::Approx(img[at(s, z, 2 + dy, 2 + dx)]).epsilon(1e-5));

    std::vector<std::uint8_t> m(125, 0);
    m[at(s, 3, 0, 1)] = 1;
    const auto mo = warp_mask(m, plan);
    CHECK(std::count(mo.begin(), mo.end(), 1) == 1);
    CHECK(mo[at(s, 3, 1, 4)] == 1);
}

TEST_CASE("geometric warps preserve orientation") {
    // coordinate ramps are reproduced exactly by trilinear sampling, so the
    // warped ramps give the source position of each output voxel
    const Index3 s{32, 32, 32};
    std::array<std::vector<float>, 3> ramp;
    for (int a = 0; a < 3; ++a) {
        ramp[a].resize(32 * 32 * 32);
        for (std::int64_t z = 0; z < 32; ++z)
            for (std::int64_t y = 0; y < 32; ++y)
                for (std::int64_t x = 0; x < 32; ++x)
                    ramp[a][at(s, z, y, x)] = static_cast<float>(a == 0 ? z : a == 1 ? y : x);
    }
    auto policy = AugmentationPolicy::type2().geometry_only();
    policy.p_rotation = policy.p_scaling = 1.0;
    policy.p_downsample = 0.0;
    Rng rng(8);
    for (int t = 0; t < 40; ++t) {
        PatchRequest req;
        req.shape = Index3{9, 9, 9};
        req.center = Vec3{15.5, 15.5, 15.5};
        const auto plan = plan_geometry(policy, rng, s, req);
        std::array<std::vector<float>, 3> w;
        for (int a = 0; a < 3; ++a) w[a] = warp_image(ramp[a], plan);
        const Index3 o = plan.out_shape;
        double J[3][3];
        for (int a = 0; a < 3; ++a) {
            J[a][0] = (w[a][at(o, 5, 4, 4)] - w[a][at(o, 3, 4, 4)]) / 2.0;
            J[a][1] = (w[a][at(o, 4, 5, 4)] - w[a][at(o, 4, 3, 4)]) / 2.0;
            J[a][2] = (w[a][at(o, 4, 4, 5)] - w[a][at(o, 4, 4, 3)]) / 2.0;
        }
        const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        CHECK(det > 0.0);
        CHECK(std::abs(det - 1.0 / std::pow(plan.scale, 3)) < 1e-3);
    }
}

TEST_CASE("image and mask stay in lockstep") {
    const auto s = random_sample(3, {16, 16, 16});
    for (const auto& base : {AugmentationPolicy::type1(), AugmentationPolicy::type2()}) {
        auto p = base.geometry_only();
        p.p_rotation = p.p_scaling = 1.0;
        Rng rng(11);
        for (int t = 0; t < 10; ++t) {
            PatchRequest req;
            req.shape = Index3{10, 10, 10};
            Rng copy = rng;
            const auto out = apply_policy(s, p, rng, req);
            const auto plan = plan_geometry(p, copy, s.shape, req);
            CHECK(out.channels[0] == warp_image(s.channels[0], plan));
            CHECK(out.channels[1] == warp_image(s.channels[1], plan));
            CHECK(out.mask == warp_mask(s.mask, plan));
        }
    }
}

TEST_CASE("augmented masks stay binary") {
    const auto s = random_sample(4, {14, 14, 14});
    auto p = AugmentationPolicy::type2();
    p.p_rotation = p.p_scaling = p.p_downsample = p.p_occlusion = p.p_local_gamma = 1.0;
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        PatchRequest req;
        req.shape = Index3{8, 8, 8};
        const auto out = apply_policy(s, p, rng, req);
        REQUIRE(out.mask.size() == 512);
        for (auto v : out.mask) CHECK(v <= 1);
        for (const auto& c : out.channels)
            for (float v : c) CHECK(std::isfinite(v));
    }
}

TEST_CASE("occlusion only touches its boxes") {
    const Index3 s{10, 12, 14};
    std::vector<float> img(10 * 12 * 14);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 97) * 0.5f + 1.0f;
    double mean = 0;
    for (float v : img) mean += v;
    mean /= static_cast<double>(img.size());
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        auto work = img;
        const auto boxes = occlude_rectangles(work, s, rng, {1, 3}, {0.1, 0.3});
        REQUIRE(!boxes.empty());
        CHECK(boxes.size() <= 3);
        for (std::int64_t z = 0; z < s[0]; ++z)
            for (std::int64_t y = 0; y < s[1]; ++y)
                for (std::int64_t x = 0; x < s[2]; ++x) {
                    const bool inside = std::any_of(boxes.begin(), boxes.end(),
                                                    [&](const Box& b) { return b.contains(z, y, x); });
                    const auto i = at(s, z, y, x);
                    if (inside) CHECK(work[i] == doctest::Approx(mean).epsilon(1e-5));
                    else CHECK(work[i] == img[i]);
                }
    }
}

TEST_CASE("region gamma") {
    const Index3 s{1, 4, 4};
    std::vector<float> img(16);
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<float>(i) / 15.0f;
    auto work = img;
    const Box box{{0, 0, 0}, {1, 4, 4}};
    REQUIRE(apply_region_gamma(work, s, box, 2.0));
    for (std::size_t i = 0; i < 16; ++i) CHECK(work[i] == doctest::Approx(img[i] * img[i]).epsilon(1e-6));

    // only the region moves; the region's extremes are fixed points
    work = img;
    const Box inner{{0, 1, 1}, {1, 3, 3}};
    REQUIRE(apply_region_gamma(work, s, inner, 1.7));
    for (std::int64_t y = 0; y < 4; ++y)
        for (std::int64_t x = 0; x < 4; ++x) {
            const auto i = at(s, 0, y, x);
            if (!inner.contains(0, y, x)) CHECK(work[i] == img[i]);
        }
    CHECK(work[at(s, 0, 1, 1)] == doctest::Approx(img[at(s, 0, 1, 1)]));
    CHECK(work[at(s, 0, 2, 2)] == doctest::Approx(img[at(s, 0, 2, 2)]));

    std::vector<float> flat(16, 3.0f);
    CHECK_FALSE(apply_region_gamma(flat, s, box, 2.0));
    CHECK(flat == std::vector<float>(16, 3.0f));
}

TEST_CASE("blur preserves constants and spreads a spike") {
    const Index3 s{9, 9, 9};
    std::vector<float> c(729, 2.0f);
    gaussian_blur(c, s, 1.0);
    for (float v : c) CHECK(v == doctest::Approx(2.0f));
    std::vector<float> spike(729, 0.0f);
    spike[at(s, 4, 4, 4)] = 1.0f;
    gaussian_blur(spike, s, 1.0);
    double sum = 0;
    for (float v : spike) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(spike[at(s, 4, 4, 4)] < 0.2f);
    CHECK(spike[at(s, 4, 4, 4)] > spike[at(s, 4, 4, 5)]);
}
