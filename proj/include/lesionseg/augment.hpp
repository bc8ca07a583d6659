#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lesionseg/rng.hpp"
#include "lesionseg/types.hpp"

namespace lesionseg::augment {

enum class PolicyName { None, Type1, Type2 };

std::string to_string(PolicyName name);
PolicyName parse_policy_name(const std::string& text);

// The transform families. There is deliberately no mirroring entry.
enum class Transform {
    Rotation,
    Scaling,
    Cropping,
    GaussianBlur,
    GaussianNoise,
    Brightness,
    Contrast,
    Downsample,
    Gamma,
    Sharpening,
    LocalGamma,
    Occlusion,
};

std::string to_string(Transform t);

struct Range {
    double low = 0.0;
    double high = 0.0;
};

struct AugmentationPolicy {
    PolicyName name = PolicyName::None;

    double p_rotation = 0.0;
    Range rotation_deg{-30.0, 30.0};
    double p_scaling = 0.0;
    Range scale{0.7, 1.4};
    double p_blur = 0.0;
    Range blur_sigma{0.5, 1.0};
    double p_noise = 0.0;
    Range noise_variance{0.0, 0.1};
    double p_brightness = 0.0;
    Range brightness{0.75, 1.25};
    double p_contrast = 0.0;
    Range contrast{0.75, 1.25};
    double p_downsample = 0.0;
    Range downsample{0.5, 1.0};
    double p_gamma = 0.0;
    Range gamma{0.7, 1.5};

    double p_sharpen = 0.0;
    Range sharpen_strength{0.1, 1.0};
    double p_local_gamma = 0.0;
    Range local_gamma{0.7, 1.5};
    Range local_region_fraction{0.25, 0.75};
    double p_occlusion = 0.0;
    Range occlusion_count{1.0, 3.0};
    Range occlusion_size_fraction{0.1, 0.3};

    static AugmentationPolicy none();
    static AugmentationPolicy type1();
    static AugmentationPolicy type2();
    static AugmentationPolicy by_name(const std::string& name);

    // Transforms this policy can apply (probability > 0); cropping is part of
    // every non-None policy.
    std::vector<Transform> transforms() const;
    // Same policy with every intensity transform disabled.
    AugmentationPolicy geometry_only() const;
    void validate() const;
    std::string describe() const;
};

// Two-channel (CT, PET) patch plus its mask, all of one shape.
struct TrainingSample {
    std::string study_id;
    Index3 shape{0, 0, 0};
    std::array<std::vector<float>, 2> channels;
    std::vector<std::uint8_t> mask;

    std::size_t voxels() const noexcept {
        return static_cast<std::size_t>(shape[0] * shape[1] * shape[2]);
    }
    void validate() const;
};

TrainingSample make_training_sample(const Study& normalized_study);

struct PatchRequest {
    std::optional<Index3> shape;   // defaults to the sample shape
    std::optional<Vec3> center;    // voxel coordinates in the source; random if absent
};

struct GeometryPlan {
    Index3 source_shape{};
    Index3 out_shape{};
    Vec3 center{};                        // source coordinates of the patch centre
    Vec3 angles_rad{0.0, 0.0, 0.0};       // about the z, y, x axes
    double scale = 1.0;
    double downsample_factor = 1.0;       // 1 = no low-resolution simulation

    bool is_axis_aligned_copy() const;
};

// Draws the geometric parameters exactly as apply_policy does.
GeometryPlan plan_geometry(const AugmentationPolicy& policy, Rng& rng, const Index3& source_shape,
                           const PatchRequest& request = {});

// Geometric warp of one image channel (trilinear, zero outside) or mask (nearest).
std::vector<float> warp_image(const std::vector<float>& image, const GeometryPlan& plan);
std::vector<std::uint8_t> warp_mask(const std::vector<std::uint8_t>& mask, const GeometryPlan& plan);

TrainingSample apply_policy(const TrainingSample& sample, const AugmentationPolicy& policy, Rng& rng,
                            const PatchRequest& request = {});

struct Box {
    Index3 lo{};
    Index3 hi{};  // exclusive
    bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return z >= lo[0] && z < hi[0] && y >= lo[1] && y < hi[1] && x >= lo[2] && x < hi[2];
    }
};

// Boxes are filled with the pre-occlusion channel mean.
void fill_boxes_with_mean(std::vector<float>& image, const Index3& shape, const std::vector<Box>& boxes);

// Draws `count_range` boxes with per-axis size fractions in `size_range` and fills them.
std::vector<Box> occlude_rectangles(std::vector<float>& image, const Index3& shape, Rng& rng,
                                    Range count_range, Range size_range);

// Gamma inside `region` after min-max scaling of that region; constant regions are left alone.
bool apply_region_gamma(std::vector<float>& image, const Index3& shape, const Box& region, double gamma);

std::optional<Box> local_gamma(std::vector<float>& image, const Index3& shape, Rng& rng,
                               Range region_fraction, Range gamma_range);

void gaussian_blur(std::vector<float>& image, const Index3& shape, double sigma);

}  // namespace lesionseg::augment
