#include <doctest.h>

#include <cmath>
#include <random>

#include "lesionseg/errors.hpp"
#include "lesionseg/inference.hpp"

using namespace lesionseg;
using namespace lesionseg::infer;

namespace {

Volume random_volume(const Grid3D& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0.0f, 2.0f);
    std::vector<float> v(g.num_voxels());
    for (auto& x : v) x = d(rng);
    return Volume(g, v);
}

// Voxelwise predictor: lesion logit = PET, background logit = 0.
nn::Tensor<float> pet_logits(const nn::Tensor<float>& in) {
    nn::Tensor<float> out(1, 2, in.shape[2], in.shape[3], in.shape[4]);
    std::copy(in.channel_ptr(0, 1), in.channel_ptr(0, 1) + in.spatial_size(), out.channel_ptr(0, 1));
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("tile starts cover the axis") {
    CHECK(tile_starts(32, 32, 0.5) == std::vector<std::int64_t>{0});
    CHECK(tile_starts(64, 32, 0.0) == std::vector<std::int64_t>{0, 32});
    CHECK(tile_starts(64, 32, 0.5) == std::vector<std::int64_t>{0, 16, 32});
    for (std::int64_t size = 8; size < 80; size += 3)
        for (std::int64_t patch : {8, 16})
            for (double ov : {0.0, 0.25, 0.5, 0.75}) {
                if (patch > size) continue;
                const auto s = tile_starts(size, patch, ov);
                CHECK(s.front() == 0);
                CHECK(s.back() == size - patch);
                for (std::size_t i = 1; i < s.size(); ++i) {
                    CHECK(s[i] > s[i - 1]);
                    CHECK(s[i] - s[i - 1] <= static_cast<std::int64_t>(std::ceil(patch * (1.0 - ov))));
                }
            }
    CHECK_THROWS_AS(tile_starts(8, 16, 0.5), GeometryError);
}

TEST_CASE("importance window") {
    const Index3 p{6, 8, 10};
    const auto w = gaussian_window(p, 1.0 / 8.0);
    REQUIRE(w.size() == 480);
    float mx = 0;
    for (float v : w) {
        CHECK(v > 0.0f);
        mx = std::max(mx, v);
    }
    CHECK(mx == doctest::Approx(1.0f));
    auto at = [&](int z, int y, int x) { return w[static_cast<std::size_t>((z * 8 + y) * 10 + x)]; };
    CHECK(at(0, 0, 0) == doctest::Approx(at(5, 7, 9)));
    CHECK(at(2, 3, 4) > at(0, 3, 4));
}

TEST_CASE("pointwise predictor survives stitching") {
    // a predictor that ignores context gives every tile the same answer per voxel,
    // so any convex blend must return exactly that answer
    for (const Index3 shape : {Index3{20, 23, 17}, Index3{8, 8, 8}, Index3{5, 12, 7}}) {
        const Grid3D g(shape, {1, 1, 1});
        const auto ct = random_volume(g, 1), pet = random_volume(g, 2);
        for (double ov : {0.0, 0.5}) {
            InferenceOptions o;
            o.patch = {8, 8, 8};
            o.overlap = ov;
            const auto prob = probability_map(ct, pet, pet_logits, o);
            REQUIRE(prob.grid() == g);
            for (std::size_t i = 0; i < prob.size(); ++i)
                CHECK(prob.values()[i] == doctest::Approx(sigmoid(pet.values()[i])).epsilon(1e-5));
            const auto mask = predict_study(ct, pet, pet_logits, o);
            for (std::size_t i = 0; i < mask.size(); ++i) CHECK(mask.values()[i] == (prob.values()[i] > 0.5f ? 1 : 0));
        }
    }
}

TEST_CASE("blend matches a direct weighted average across tiles") {
    const Grid3D g({12, 20, 9}, {1, 1, 1});
    const auto ct = random_volume(g, 3), pet = random_volume(g, 4);
    InferenceOptions o;
    o.patch = {8, 8, 8};
    o.overlap = 0.5;
    // logit depends on where the tile sits: mean PET of the tile plus local position
    auto context = [](const nn::Tensor<float>& in) {
        nn::Tensor<float> out(1, 2, 8, 8, 8);
        double mean = 0;
        for (std::int64_t i = 0; i < in.spatial_size(); ++i) mean += in.channel_ptr(0, 1)[i];
        mean /= static_cast<double>(in.spatial_size());
        for (std::int64_t i = 0; i < in.spatial_size(); ++i)
            out.channel_ptr(0, 1)[i] = static_cast<float>(3.0 * mean + 0.01 * static_cast<double>(i % 8));
        return out;
    };
    const auto prob = probability_map(ct, pet, context, o);

    const auto w = gaussian_window(o.patch, o.sigma_scale);
    std::vector<double> num(g.num_voxels(), 0.0), den(g.num_voxels(), 0.0);
    for (auto z0 : tile_starts(12, 8, 0.5))
        for (auto y0 : tile_starts(20, 8, 0.5))
            for (auto x0 : tile_starts(9, 8, 0.5)) {
                double mean = 0;
                for (int z = 0; z < 8; ++z)
                    for (int y = 0; y < 8; ++y)
                        for (int x = 0; x < 8; ++x) mean += pet.at(z0 + z, y0 + y, x0 + x);
                mean /= 512.0;
                for (int z = 0; z < 8; ++z)
                    for (int y = 0; y < 8; ++y)
                        for (int x = 0; x < 8; ++x) {
                            const double l1 = static_cast<float>(3.0 * mean + 0.01 * x);
                            const double wk = w[static_cast<std::size_t>((z * 8 + y) * 8 + x)];
                            const auto j = g.index(z0 + z, y0 + y, x0 + x);
                            num[j] += wk * sigmoid(l1);
                            den[j] += wk;
                        }
            }
    for (std::size_t j = 0; j < num.size(); ++j) CHECK(prob.values()[j] == doctest::Approx(num[j] / den[j]).epsilon(1e-5));
}

TEST_CASE("edge cases") {
    const Grid3D g({10, 10, 10}, {1, 1, 1});
    const auto ct = random_volume(g, 5), pet = random_volume(g, 6);
    InferenceOptions o;
    o.patch = {8, 8, 8};
    auto background = [](const nn::Tensor<float>& in) {
        nn::Tensor<float> out(1, 2, in.shape[2], in.shape[3], in.shape[4]);
        std::fill(out.channel_ptr(0, 0), out.channel_ptr(0, 0) + out.spatial_size(), 10.0f);
        return out;
    };
    CHECK(predict_study(ct, pet, background, o).foreground_count() == 0);

    auto wrong = [](const nn::Tensor<float>&) { return nn::Tensor<float>(1, 2, 4, 4, 4); };
    CHECK_THROWS_AS(probability_map(ct, pet, wrong, o), ShapeError);

    o.patch = {32, 32, 32};
    CHECK_THROWS_AS(probability_map(ct, pet, pet_logits, o), GeometryError);

    o.patch = {8, 8, 8};
    o.overlap = 1.0;
    CHECK_THROWS_AS(o.validate(), ConfigError);

    // p == 0.5 is not foreground
    const Grid3D one({8, 8, 8}, {1, 1, 1});
    const Volume zero(one, 0.0f);
    o.overlap = 0.5;
    CHECK(predict_study(zero, zero, pet_logits, o).foreground_count() == 0);
}
