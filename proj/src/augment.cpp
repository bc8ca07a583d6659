#include "lesionseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "lesionseg/errors.hpp"

namespace lesionseg::augment {

std::string to_string(PolicyName name) {
    switch (name) {
        case PolicyName::None: return "None";
        case PolicyName::Type1: return "Type1";
        case PolicyName::Type2: return "Type2";
    }
    return "?";
}

PolicyName parse_policy_name(const std::string& text) {
    if (text == "None" || text == "none") return PolicyName::None;
    if (text == "Type1" || text == "type1") return PolicyName::Type1;
    if (text == "Type2" || text == "type2") return PolicyName::Type2;
    throw ConfigError("unknown augmentation policy '" + text + "' (expected None, Type1 or Type2)");
}

std::string to_string(Transform t) {
    switch (t) {
        case Transform::Rotation: return "rotation";
        case Transform::Scaling: return "scaling";
        case Transform::Cropping: return "cropping";
        case Transform::GaussianBlur: return "gaussian_blur";
        case Transform::GaussianNoise: return "gaussian_noise";
        case Transform::Brightness: return "brightness";
        case Transform::Contrast: return "contrast";
        case Transform::Downsample: return "downsample";
        case Transform::Gamma: return "gamma";
        case Transform::Sharpening: return "sharpening";
        case Transform::LocalGamma: return "local_gamma";
        case Transform::Occlusion: return "occlusion";
    }
    return "?";
}

AugmentationPolicy AugmentationPolicy::none() { return AugmentationPolicy{}; }

AugmentationPolicy AugmentationPolicy::type1() {
    AugmentationPolicy p;
    p.name = PolicyName::Type1;
    p.p_rotation = p.p_scaling = p.p_blur = p.p_noise = 0.2;
    p.p_brightness = p.p_contrast = p.p_downsample = p.p_gamma = 0.2;
    return p;
}

AugmentationPolicy AugmentationPolicy::type2() {
    AugmentationPolicy p = type1();
    p.name = PolicyName::Type2;
    p.scale = {0.6, 1.6};
    p.brightness = {0.6, 1.4};
    p.contrast = {0.6, 1.4};
    p.p_sharpen = 0.2;
    p.p_local_gamma = 0.2;
    p.p_occlusion = 0.2;
    return p;
}

AugmentationPolicy AugmentationPolicy::by_name(const std::string& name) {
    switch (parse_policy_name(name)) {
        case PolicyName::None: return none();
        case PolicyName::Type1: return type1();
        case PolicyName::Type2: return type2();
    }
    return none();
}

std::vector<Transform> AugmentationPolicy::transforms() const {
    std::vector<Transform> out;
    auto add = [&](double p, Transform t) {
        if (p > 0.0) out.push_back(t);
    };
    add(p_rotation, Transform::Rotation);
    add(p_scaling, Transform::Scaling);
    if (name != PolicyName::None) out.push_back(Transform::Cropping);
    add(p_blur, Transform::GaussianBlur);
    add(p_noise, Transform::GaussianNoise);
    add(p_brightness, Transform::Brightness);
    add(p_contrast, Transform::Contrast);
    add(p_downsample, Transform::Downsample);
    add(p_gamma, Transform::Gamma);
    add(p_sharpen, Transform::Sharpening);
    add(p_local_gamma, Transform::LocalGamma);
    add(p_occlusion, Transform::Occlusion);
    return out;
}

AugmentationPolicy AugmentationPolicy::geometry_only() const {
    AugmentationPolicy p = *this;
    p.p_blur = p.p_noise = p.p_brightness = p.p_contrast = p.p_gamma = 0.0;
    p.p_sharpen = p.p_local_gamma = p.p_occlusion = 0.0;
    return p;
}

void AugmentationPolicy::validate() const {
    for (double p : {p_rotation, p_scaling, p_blur, p_noise, p_brightness, p_contrast, p_downsample,
                     p_gamma, p_sharpen, p_local_gamma, p_occlusion})
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("transform probabilities must lie in [0, 1]");
    for (const Range& r : {rotation_deg, scale, blur_sigma, noise_variance, brightness, contrast,
                           downsample, gamma, sharpen_strength, local_gamma, local_region_fraction,
                           occlusion_count, occlusion_size_fraction})
        if (!(r.low <= r.high)) throw ConfigError("augmentation ranges need low <= high");
    if (scale.low <= 0.0 || gamma.low <= 0.0 || local_gamma.low <= 0.0)
        throw ConfigError("scale and gamma ranges must be positive");
    if (downsample.low <= 0.0 || downsample.high > 1.0)
        throw ConfigError("downsample factor range must lie in (0, 1]");
    if (occlusion_count.low < 0.0) throw ConfigError("occlusion count must be >= 0");
    if (local_region_fraction.low <= 0.0 || local_region_fraction.high > 1.0 ||
        occlusion_size_fraction.low <= 0.0 || occlusion_size_fraction.high > 1.0)
        throw ConfigError("region size fractions must lie in (0, 1]");
}

std::string AugmentationPolicy::describe() const {
    std::ostringstream os;
    auto line = [&](const char* what, double p, Range r) {
        if (p > 0.0) os << "  " << what << ": p=" << p << " range=[" << r.low << ", " << r.high << "]\n";
    };
    os << "policy: " << to_string(name) << '\n';
    os << "mirroring: disabled\n";
    os << "transforms:\n";
    if (name != PolicyName::None) os << "  cropping: patch extraction (foreground-biased in training)\n";
    line("rotation_deg (per axis)", p_rotation, rotation_deg);
    line("scaling", p_scaling, scale);
    line("gaussian_blur sigma", p_blur, blur_sigma);
    line("gaussian_noise variance", p_noise, noise_variance);
    line("brightness multiplier", p_brightness, brightness);
    line("contrast multiplier", p_contrast, contrast);
    line("downsample factor", p_downsample, downsample);
    line("gamma", p_gamma, gamma);
    line("sharpening strength", p_sharpen, sharpen_strength);
    if (p_local_gamma > 0.0) {
        line("local_gamma", p_local_gamma, local_gamma);
        os << "    region fraction=[" << local_region_fraction.low << ", " << local_region_fraction.high << "]\n";
    }
    if (p_occlusion > 0.0) {
        line("occlusion count", p_occlusion, occlusion_count);
        os << "    box size fraction=[" << occlusion_size_fraction.low << ", "
           << occlusion_size_fraction.high << "], fill=channel mean\n";
    }
    return os.str();
}

void TrainingSample::validate() const {
    const std::size_t n = voxels();
    if (channels[0].size() != n || channels[1].size() != n || mask.size() != n)
        throw ShapeError("training sample '" + study_id + "': channels and mask must share one shape");
}

TrainingSample make_training_sample(const Study& study) {
    if (!(study.ct.grid() == study.pet.grid())) throw GeometryError("CT and PET grids differ for " + study.id);
    TrainingSample s;
    s.study_id = study.id;
    s.shape = study.ct.grid().shape();
    s.channels[0].assign(study.ct.values().begin(), study.ct.values().end());
    s.channels[1].assign(study.pet.values().begin(), study.pet.values().end());
    if (study.label) s.mask.assign(study.label->values().begin(), study.label->values().end());
    else s.mask.assign(s.voxels(), 0);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Geometry

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

// Rotation acting on (z, y, x) vectors.
Mat3 rotation(const Vec3& angles) {
    const double cz = std::cos(angles[0]), sz = std::sin(angles[0]);
    const double cy = std::cos(angles[1]), sy = std::sin(angles[1]);
    const double cx = std::cos(angles[2]), sx = std::sin(angles[2]);
    const Mat3 rz{{{1, 0, 0}, {0, cz, sz}, {0, -sz, cz}}};
    const Mat3 ry{{{cy, 0, -sy}, {0, 1, 0}, {sy, 0, cy}}};
    const Mat3 rx{{{cx, sx, 0}, {-sx, cx, 0}, {0, 0, 1}}};
    return matmul(rz, matmul(ry, rx));
}

std::size_t flat(const Index3& s, std::int64_t z, std::int64_t y, std::int64_t x) {
    return static_cast<std::size_t>((z * s[1] + y) * s[2] + x);
}

Index3 patch_origin(const GeometryPlan& plan) {
    Index3 lo{};
    for (int a = 0; a < 3; ++a)
        lo[a] = static_cast<std::int64_t>(std::llround(plan.center[a] - (plan.out_shape[a] - 1) / 2.0));
    return lo;
}

template <typename V>
std::vector<V> crop_copy(const std::vector<V>& src, const GeometryPlan& plan) {
    const Index3 lo = patch_origin(plan);
    const auto& s = plan.source_shape;
    const auto& o = plan.out_shape;
    std::vector<V> out(static_cast<std::size_t>(o[0] * o[1] * o[2]), V(0));
    for (std::int64_t z = 0; z < o[0]; ++z) {
        const std::int64_t sz = z + lo[0];
        if (sz < 0 || sz >= s[0]) continue;
        for (std::int64_t y = 0; y < o[1]; ++y) {
            const std::int64_t sy = y + lo[1];
            if (sy < 0 || sy >= s[1]) continue;
            for (std::int64_t x = 0; x < o[2]; ++x) {
                const std::int64_t sx = x + lo[2];
                if (sx < 0 || sx >= s[2]) continue;
                out[flat(o, z, y, x)] = src[flat(s, sz, sy, sx)];
            }
        }
    }
    return out;
}

// Low-resolution simulation on the output patch.
std::vector<float> downsample_resample_image(const std::vector<float>& img, const Index3& shape, double f) {
    Index3 small{};
    for (int a = 0; a < 3; ++a)
        small[a] = std::max<std::int64_t>(1, std::llround(static_cast<double>(shape[a]) * f));
    std::vector<float> low(static_cast<std::size_t>(small[0] * small[1] * small[2]));
    auto nearest_src = [&](std::int64_t i, int a) {
        const double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(shape[a]) / static_cast<double>(small[a]) - 0.5;
        return std::clamp<std::int64_t>(std::llround(pos), 0, shape[a] - 1);
    };
    for (std::int64_t z = 0; z < small[0]; ++z)
        for (std::int64_t y = 0; y < small[1]; ++y)
            for (std::int64_t x = 0; x < small[2]; ++x)
                low[flat(small, z, y, x)] = img[flat(shape, nearest_src(z, 0), nearest_src(y, 1), nearest_src(x, 2))];
    std::vector<float> out(img.size());
    auto coord = [&](std::int64_t i, int a, std::int64_t& i0, std::int64_t& i1, double& t) {
        double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(small[a]) / static_cast<double>(shape[a]) - 0.5;
        pos = std::clamp(pos, 0.0, static_cast<double>(small[a] - 1));
        i0 = static_cast<std::int64_t>(std::floor(pos));
        i1 = std::min(i0 + 1, small[a] - 1);
        t = pos - static_cast<double>(i0);
    };
    for (std::int64_t z = 0; z < shape[0]; ++z) {
        std::int64_t z0, z1;
        double tz;
        coord(z, 0, z0, z1, tz);
        for (std::int64_t y = 0; y < shape[1]; ++y) {
            std::int64_t y0, y1;
            double ty;
            coord(y, 1, y0, y1, ty);
            for (std::int64_t x = 0; x < shape[2]; ++x) {
                std::int64_t x0, x1;
                double tx;
                coord(x, 2, x0, x1, tx);
                auto v = [&](std::int64_t a, std::int64_t b, std::int64_t c) {
                    return static_cast<double>(low[flat(small, a, b, c)]);
                };
                const double c0 = (v(z0, y0, x0) * (1 - tx) + v(z0, y0, x1) * tx) * (1 - ty) +
                                  (v(z0, y1, x0) * (1 - tx) + v(z0, y1, x1) * tx) * ty;
                const double c1 = (v(z1, y0, x0) * (1 - tx) + v(z1, y0, x1) * tx) * (1 - ty) +
                                  (v(z1, y1, x0) * (1 - tx) + v(z1, y1, x1) * tx) * ty;
                out[flat(shape, z, y, x)] = static_cast<float>(c0 * (1 - tz) + c1 * tz);
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> downsample_resample_mask(const std::vector<std::uint8_t>& mask, const Index3& shape, double f) {
    Index3 small{};
    for (int a = 0; a < 3; ++a)
        small[a] = std::max<std::int64_t>(1, std::llround(static_cast<double>(shape[a]) * f));
    auto map = [](std::int64_t i, std::int64_t from, std::int64_t to) {
        const double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(to) / static_cast<double>(from) - 0.5;
        return std::clamp<std::int64_t>(std::llround(pos), 0, to - 1);
    };
    std::vector<std::uint8_t> low(static_cast<std::size_t>(small[0] * small[1] * small[2]));
    for (std::int64_t z = 0; z < small[0]; ++z)
        for (std::int64_t y = 0; y < small[1]; ++y)
            for (std::int64_t x = 0; x < small[2]; ++x)
                low[flat(small, z, y, x)] =
                    mask[flat(shape, map(z, small[0], shape[0]), map(y, small[1], shape[1]), map(x, small[2], shape[2]))];
    std::vector<std::uint8_t> out(mask.size());
    for (std::int64_t z = 0; z < shape[0]; ++z)
        for (std::int64_t y = 0; y < shape[1]; ++y)
            for (std::int64_t x = 0; x < shape[2]; ++x)
                out[flat(shape, z, y, x)] =
                    low[flat(small, map(z, shape[0], small[0]), map(y, shape[1], small[1]), map(x, shape[2], small[2]))];
    return out;
}

struct WarpMap {
    Mat3 m;  // output offset -> source offset
    Vec3 out_center;
};

WarpMap warp_map(const GeometryPlan& plan) {
    const Mat3 r = rotation(plan.angles_rad);
    WarpMap w{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) w.m[i][j] = r[j][i] / plan.scale;  // R^T / s
    for (int a = 0; a < 3; ++a) w.out_center[a] = (plan.out_shape[a] - 1) / 2.0;
    return w;
}

}  // namespace

bool GeometryPlan::is_axis_aligned_copy() const {
    if (angles_rad != Vec3{0.0, 0.0, 0.0} || scale != 1.0) return false;
    for (int a = 0; a < 3; ++a) {
        const double lo = center[a] - (out_shape[a] - 1) / 2.0;
        if (lo != std::floor(lo)) return false;
    }
    return true;
}

GeometryPlan plan_geometry(const AugmentationPolicy& policy, Rng& rng, const Index3& source_shape,
                           const PatchRequest& request) {
    Rng geo(rng());
    GeometryPlan plan;
    plan.source_shape = source_shape;
    plan.out_shape = request.shape.value_or(source_shape);
    for (int a = 0; a < 3; ++a)
        if (plan.out_shape[a] < 1 || plan.out_shape[a] > source_shape[a])
            throw GeometryError("requested patch is larger than the source volume");

    if (request.center) {
        plan.center = *request.center;
    } else {
        for (int a = 0; a < 3; ++a) {
            const std::int64_t slack = source_shape[a] - plan.out_shape[a];
            const std::int64_t lo = policy.name == PolicyName::None ? slack / 2 : uniform_int(geo, 0, slack);
            plan.center[a] = static_cast<double>(lo) + (plan.out_shape[a] - 1) / 2.0;
        }
    }
    if (bernoulli(geo, policy.p_rotation)) {
        for (auto& angle : plan.angles_rad)
            angle = uniform(geo, policy.rotation_deg.low, policy.rotation_deg.high) * std::numbers::pi / 180.0;
    }
    if (bernoulli(geo, policy.p_scaling)) plan.scale = uniform(geo, policy.scale.low, policy.scale.high);
    if (bernoulli(geo, policy.p_downsample))
        plan.downsample_factor = uniform(geo, policy.downsample.low, policy.downsample.high);
    return plan;
}

std::vector<float> warp_image(const std::vector<float>& image, const GeometryPlan& plan) {
    const auto& s = plan.source_shape;
    const auto& o = plan.out_shape;
    if (image.size() != static_cast<std::size_t>(s[0] * s[1] * s[2]))
        throw ShapeError("image does not match the plan's source shape");
    std::vector<float> out;
    if (plan.is_axis_aligned_copy()) {
        out = crop_copy(image, plan);
    } else {
        out.assign(static_cast<std::size_t>(o[0] * o[1] * o[2]), 0.0f);
        const WarpMap w = warp_map(plan);
        auto sample = [&](std::int64_t z, std::int64_t y, std::int64_t x) -> double {
            if (z < 0 || y < 0 || x < 0 || z >= s[0] || y >= s[1] || x >= s[2]) return 0.0;
            return image[flat(s, z, y, x)];
        };
        for (std::int64_t z = 0; z < o[0]; ++z)
            for (std::int64_t y = 0; y < o[1]; ++y)
                for (std::int64_t x = 0; x < o[2]; ++x) {
                    const Vec3 rel{z - w.out_center[0], y - w.out_center[1], x - w.out_center[2]};
                    Vec3 p{};
                    for (int i = 0; i < 3; ++i)
                        p[i] = plan.center[i] + w.m[i][0] * rel[0] + w.m[i][1] * rel[1] + w.m[i][2] * rel[2];
                    const auto z0 = static_cast<std::int64_t>(std::floor(p[0]));
                    const auto y0 = static_cast<std::int64_t>(std::floor(p[1]));
                    const auto x0 = static_cast<std::int64_t>(std::floor(p[2]));
                    const double tz = p[0] - z0, ty = p[1] - y0, tx = p[2] - x0;
                    if (z0 < -1 || y0 < -1 || x0 < -1 || z0 >= s[0] || y0 >= s[1] || x0 >= s[2]) continue;
                    const double c0 = (sample(z0, y0, x0) * (1 - tx) + sample(z0, y0, x0 + 1) * tx) * (1 - ty) +
                                      (sample(z0, y0 + 1, x0) * (1 - tx) + sample(z0, y0 + 1, x0 + 1) * tx) * ty;
                    const double c1 = (sample(z0 + 1, y0, x0) * (1 - tx) + sample(z0 + 1, y0, x0 + 1) * tx) * (1 - ty) +
                                      (sample(z0 + 1, y0 + 1, x0) * (1 - tx) + sample(z0 + 1, y0 + 1, x0 + 1) * tx) * ty;
                    out[flat(o, z, y, x)] = static_cast<float>(c0 * (1 - tz) + c1 * tz);
                }
    }
    if (plan.downsample_factor < 1.0) out = downsample_resample_image(out, o, plan.downsample_factor);
    return out;
}

std::vector<std::uint8_t> warp_mask(const std::vector<std::uint8_t>& mask, const GeometryPlan& plan) {
    const auto& s = plan.source_shape;
    const auto& o = plan.out_shape;
    if (mask.size() != static_cast<std::size_t>(s[0] * s[1] * s[2]))
        throw ShapeError("mask does not match the plan's source shape");
    std::vector<std::uint8_t> out;
    if (plan.is_axis_aligned_copy()) {
        out = crop_copy(mask, plan);
    } else {
        out.assign(static_cast<std::size_t>(o[0] * o[1] * o[2]), 0);
        const WarpMap w = warp_map(plan);
        for (std::int64_t z = 0; z < o[0]; ++z)
            for (std::int64_t y = 0; y < o[1]; ++y)
                for (std::int64_t x = 0; x < o[2]; ++x) {
                    const Vec3 rel{z - w.out_center[0], y - w.out_center[1], x - w.out_center[2]};
                    Index3 q{};
                    for (int i = 0; i < 3; ++i)
                        q[i] = std::llround(plan.center[i] + w.m[i][0] * rel[0] + w.m[i][1] * rel[1] +
                                            w.m[i][2] * rel[2]);
                    if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= s[0] || q[1] >= s[1] || q[2] >= s[2]) continue;
                    out[flat(o, z, y, x)] = mask[flat(s, q[0], q[1], q[2])];
                }
    }
    if (plan.downsample_factor < 1.0) out = downsample_resample_mask(out, o, plan.downsample_factor);
    return out;
}

// ---------------------------------------------------------------------------
// Intensity transforms

void gaussian_blur(std::vector<float>& image, const Index3& shape, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= sum;

    std::vector<float> tmp(image.size());
    const std::array<std::int64_t, 3> stride{shape[1] * shape[2], shape[2], 1};
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t n = shape[axis];
        for (std::int64_t z = 0; z < shape[0]; ++z)
            for (std::int64_t y = 0; y < shape[1]; ++y)
                for (std::int64_t x = 0; x < shape[2]; ++x) {
                    const std::int64_t pos = axis == 0 ? z : axis == 1 ? y : x;
                    const std::int64_t base = z * stride[0] + y * stride[1] + x - pos * stride[axis];
                    double acc = 0.0;
                    for (int k = -radius; k <= radius; ++k) {
                        const std::int64_t p = std::clamp<std::int64_t>(pos + k, 0, n - 1);
                        acc += kernel[static_cast<std::size_t>(k + radius)] * image[static_cast<std::size_t>(base + p * stride[axis])];
                    }
                    tmp[static_cast<std::size_t>(z * stride[0] + y * stride[1] + x)] = static_cast<float>(acc);
                }
        image.swap(tmp);
    }
}

void fill_boxes_with_mean(std::vector<float>& image, const Index3& shape, const std::vector<Box>& boxes) {
    if (image.empty() || boxes.empty()) return;
    double sum = 0.0;
    for (float v : image) sum += v;
    const auto mean = static_cast<float>(sum / static_cast<double>(image.size()));
    for (const auto& b : boxes)
        for (std::int64_t z = std::max<std::int64_t>(0, b.lo[0]); z < std::min(b.hi[0], shape[0]); ++z)
            for (std::int64_t y = std::max<std::int64_t>(0, b.lo[1]); y < std::min(b.hi[1], shape[1]); ++y)
                for (std::int64_t x = std::max<std::int64_t>(0, b.lo[2]); x < std::min(b.hi[2], shape[2]); ++x)
                    image[flat(shape, z, y, x)] = mean;
}

namespace {

Box random_box(Rng& rng, const Index3& shape, Range fraction) {
    Box b;
    for (int a = 0; a < 3; ++a) {
        const auto len = std::clamp<std::int64_t>(
            std::llround(uniform(rng, fraction.low, fraction.high) * static_cast<double>(shape[a])), 1, shape[a]);
        b.lo[a] = uniform_int(rng, 0, shape[a] - len);
        b.hi[a] = b.lo[a] + len;
    }
    return b;
}

}  // namespace

std::vector<Box> occlude_rectangles(std::vector<float>& image, const Index3& shape, Rng& rng,
                                    Range count_range, Range size_range) {
    const auto lo = static_cast<std::int64_t>(std::ceil(count_range.low));
    const auto hi = static_cast<std::int64_t>(std::floor(count_range.high));
    const std::int64_t count = hi <= lo ? std::max<std::int64_t>(0, lo) : uniform_int(rng, lo, hi);
    std::vector<Box> boxes;
    for (std::int64_t i = 0; i < count; ++i) boxes.push_back(random_box(rng, shape, size_range));
    fill_boxes_with_mean(image, shape, boxes);
    return boxes;
}

bool apply_region_gamma(std::vector<float>& image, const Index3& shape, const Box& region, double gamma) {
    float mn = std::numeric_limits<float>::max(), mx = std::numeric_limits<float>::lowest();
    for (std::int64_t z = region.lo[0]; z < region.hi[0]; ++z)
        for (std::int64_t y = region.lo[1]; y < region.hi[1]; ++y)
            for (std::int64_t x = region.lo[2]; x < region.hi[2]; ++x) {
                const float v = image[flat(shape, z, y, x)];
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
    if (!(mx > mn)) return false;
    const double range = static_cast<double>(mx) - mn;
    for (std::int64_t z = region.lo[0]; z < region.hi[0]; ++z)
        for (std::int64_t y = region.lo[1]; y < region.hi[1]; ++y)
            for (std::int64_t x = region.lo[2]; x < region.hi[2]; ++x) {
                float& v = image[flat(shape, z, y, x)];
                const double t = (static_cast<double>(v) - mn) / range;
                v = static_cast<float>(std::pow(t, gamma) * range + mn);
            }
    return true;
}

std::optional<Box> local_gamma(std::vector<float>& image, const Index3& shape, Rng& rng,
                               Range region_fraction, Range gamma_range) {
    const Box region = random_box(rng, shape, region_fraction);
    const double gamma = uniform(rng, gamma_range.low, gamma_range.high);
    if (!apply_region_gamma(image, shape, region, gamma)) return std::nullopt;
    return region;
}

namespace {

void apply_intensity(TrainingSample& s, const AugmentationPolicy& p, Rng& rng) {
    for (auto& ch : s.channels) {
        if (bernoulli(rng, p.p_noise)) {
            const double sd = std::sqrt(uniform(rng, p.noise_variance.low, p.noise_variance.high));
            std::normal_distribution<double> noise(0.0, sd > 0.0 ? sd : 1e-12);
            for (auto& v : ch) v = static_cast<float>(v + noise(rng));
        }
        if (bernoulli(rng, p.p_blur)) gaussian_blur(ch, s.shape, uniform(rng, p.blur_sigma.low, p.blur_sigma.high));
        if (bernoulli(rng, p.p_brightness)) {
            const auto f = static_cast<float>(uniform(rng, p.brightness.low, p.brightness.high));
            for (auto& v : ch) v *= f;
        }
        if (bernoulli(rng, p.p_contrast)) {
            const double f = uniform(rng, p.contrast.low, p.contrast.high);
            double sum = 0.0;
            for (float v : ch) sum += v;
            const double mean = sum / static_cast<double>(ch.size());
            const auto [mn_it, mx_it] = std::minmax_element(ch.begin(), ch.end());
            const float mn = *mn_it, mx = *mx_it;
            for (auto& v : ch) v = std::clamp(static_cast<float>((v - mean) * f + mean), mn, mx);
        }
        if (bernoulli(rng, p.p_gamma)) {
            const Box whole{{0, 0, 0}, s.shape};
            apply_region_gamma(ch, s.shape, whole, uniform(rng, p.gamma.low, p.gamma.high));
        }
        if (bernoulli(rng, p.p_sharpen)) {
            const double alpha = uniform(rng, p.sharpen_strength.low, p.sharpen_strength.high);
            std::vector<float> blurred = ch;
            gaussian_blur(blurred, s.shape, 1.0);
            for (std::size_t i = 0; i < ch.size(); ++i)
                ch[i] = static_cast<float>(ch[i] + alpha * (ch[i] - blurred[i]));
        }
        if (bernoulli(rng, p.p_local_gamma)) local_gamma(ch, s.shape, rng, p.local_region_fraction, p.local_gamma);
    }
    if (bernoulli(rng, p.p_occlusion)) {
        std::vector<Box> boxes;
        const auto lo = static_cast<std::int64_t>(std::ceil(p.occlusion_count.low));
        const auto hi = static_cast<std::int64_t>(std::floor(p.occlusion_count.high));
        const std::int64_t count = hi <= lo ? std::max<std::int64_t>(0, lo) : uniform_int(rng, lo, hi);
        for (std::int64_t i = 0; i < count; ++i) boxes.push_back(random_box(rng, s.shape, p.occlusion_size_fraction));
        for (auto& ch : s.channels) fill_boxes_with_mean(ch, s.shape, boxes);
    }
}

}  // namespace

TrainingSample apply_policy(const TrainingSample& sample, const AugmentationPolicy& policy, Rng& rng,
                            const PatchRequest& request) {
    sample.validate();
    const GeometryPlan plan = plan_geometry(policy, rng, sample.shape, request);
    Rng intensity(rng());
    TrainingSample out;
    out.study_id = sample.study_id;
    out.shape = plan.out_shape;
    for (int c = 0; c < 2; ++c) out.channels[c] = warp_image(sample.channels[c], plan);
    out.mask = warp_mask(sample.mask, plan);
    apply_intensity(out, policy, intensity);
    return out;
}

}  // namespace lesionseg::augment
