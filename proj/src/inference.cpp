#include "lesionseg/inference.hpp"

#include <algorithm>
#include <cmath>

#include "lesionseg/errors.hpp"

namespace lesionseg::infer {

void InferenceOptions::validate() const {
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
    for (auto p : patch)
        if (p < 1) throw ConfigError("patch dimensions must be positive");
    if (gaussian && !(sigma_scale > 0.0)) throw ConfigError("gaussian sigma scale must be positive");
}

std::vector<std::int64_t> tile_starts(std::int64_t size, std::int64_t patch, double overlap) {
    if (patch > size) throw GeometryError("patch larger than the (padded) volume");
    const double target_step = static_cast<double>(patch) * (1.0 - overlap);
    const auto steps =
        static_cast<std::int64_t>(std::ceil(static_cast<double>(size - patch) / target_step - 1e-9)) + 1;
    std::vector<std::int64_t> starts;
    if (steps <= 1) {
        starts.push_back(0);
        return starts;
    }
    const double actual = static_cast<double>(size - patch) / static_cast<double>(steps - 1);
    for (std::int64_t i = 0; i < steps; ++i) starts.push_back(std::llround(actual * static_cast<double>(i)));
    return starts;
}

std::vector<float> gaussian_window(const Index3& patch, double sigma_scale) {
    std::array<std::vector<double>, 3> axis;
    for (int a = 0; a < 3; ++a) {
        const double sigma = static_cast<double>(patch[a]) * sigma_scale;
        const double c = (static_cast<double>(patch[a]) - 1.0) / 2.0;
        double peak = 0.0;
        for (std::int64_t i = 0; i < patch[a]; ++i) {
            const double d = static_cast<double>(i) - c;
            axis[a].push_back(std::exp(-d * d / (2.0 * sigma * sigma)));
            peak = std::max(peak, axis[a].back());
        }
        for (auto& v : axis[a]) v /= peak;
    }
    std::vector<float> w(static_cast<std::size_t>(patch[0] * patch[1] * patch[2]));
    std::size_t i = 0;
    for (double wz : axis[0])
        for (double wy : axis[1])
            for (double wx : axis[2]) w[i++] = static_cast<float>(wz * wy * wx);
    float smallest = 1.0f;
    for (float v : w)
        if (v > 0.0f) smallest = std::min(smallest, v);
    for (auto& v : w) v = std::max(v, smallest);
    return w;
}

PatchPredictor network_predictor(const nn::UNet<float>& net) {
    return [&net](const nn::Tensor<float>& input) { return net.forward(input).logits; };
}

namespace {

// Reflect-pads (without edge repetition) up to at least `patch` per axis.
struct Padded {
    Index3 shape{};
    Index3 before{};
    std::array<std::vector<float>, 2> channels;
};

Padded reflect_pad(const Volume& ct, const Volume& pet, const Index3& patch) {
    const Index3 s = ct.grid().shape();
    Padded p;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t total = std::max<std::int64_t>(0, patch[a] - s[a]);
        p.before[a] = total / 2;
        const std::int64_t after = total - p.before[a];
        if (p.before[a] > s[a] - 1 || after > s[a] - 1)
            throw GeometryError("patch larger than the padded volume; reflect padding cannot cover it");
        p.shape[a] = s[a] + total;
    }
    auto reflect = [](std::int64_t i, std::int64_t n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * (n - 1) - i;
        return i;
    };
    const Volume* src[2] = {&ct, &pet};
    for (int c = 0; c < 2; ++c) {
        auto& out = p.channels[c];
        out.resize(static_cast<std::size_t>(p.shape[0] * p.shape[1] * p.shape[2]));
        std::size_t i = 0;
        for (std::int64_t z = 0; z < p.shape[0]; ++z)
            for (std::int64_t y = 0; y < p.shape[1]; ++y)
                for (std::int64_t x = 0; x < p.shape[2]; ++x)
                    out[i++] = src[c]->at(reflect(z - p.before[0], s[0]), reflect(y - p.before[1], s[1]),
                                          reflect(x - p.before[2], s[2]));
    }
    return p;
}

}  // namespace

Volume probability_map(const Volume& ct, const Volume& pet, const PatchPredictor& predictor,
                       const InferenceOptions& options) {
    options.validate();
    if (!(ct.grid() == pet.grid())) throw GeometryError("CT and PET must share one grid");
    const Index3& P = options.patch;
    const Padded pad = reflect_pad(ct, pet, P);
    const Index3& S = pad.shape;

    const std::vector<float> window =
        options.gaussian ? gaussian_window(P, options.sigma_scale)
                         : std::vector<float>(static_cast<std::size_t>(P[0] * P[1] * P[2]), 1.0f);
    const std::size_t n = static_cast<std::size_t>(S[0] * S[1] * S[2]);
    std::vector<double> acc_fg(n, 0.0), acc_w(n, 0.0);

    const auto sz = tile_starts(S[0], P[0], options.overlap);
    const auto sy = tile_starts(S[1], P[1], options.overlap);
    const auto sx = tile_starts(S[2], P[2], options.overlap);
    nn::Tensor<float> input(1, 2, P[0], P[1], P[2]);
    for (auto z0 : sz)
        for (auto y0 : sy)
            for (auto x0 : sx) {
                for (int c = 0; c < 2; ++c) {
                    float* dst = input.channel_ptr(0, c);
                    for (std::int64_t z = 0; z < P[0]; ++z)
                        for (std::int64_t y = 0; y < P[1]; ++y) {
                            const float* row =
                                pad.channels[c].data() + ((z0 + z) * S[1] + (y0 + y)) * S[2] + x0;
                            std::copy(row, row + P[2], dst + (z * P[1] + y) * P[2]);
                        }
                }
                const nn::Tensor<float> logits = predictor(input);
                if (logits.shape != std::array<std::int64_t, 5>{1, nn::kNumClasses, P[0], P[1], P[2]})
                    throw ShapeError("predictor returned logits of the wrong shape");
                const float* l0 = logits.channel_ptr(0, 0);
                const float* l1 = logits.channel_ptr(0, 1);
                std::size_t k = 0;
                for (std::int64_t z = 0; z < P[0]; ++z)
                    for (std::int64_t y = 0; y < P[1]; ++y)
                        for (std::int64_t x = 0; x < P[2]; ++x, ++k) {
                            // two-class softmax
                            const double p1 = 1.0 / (1.0 + std::exp(static_cast<double>(l0[k]) - l1[k]));
                            const std::size_t dst = static_cast<std::size_t>(((z0 + z) * S[1] + (y0 + y)) * S[2] + x0 + x);
                            acc_fg[dst] += window[k] * p1;
                            acc_w[dst] += window[k];
                        }
            }

    const Index3 s = ct.grid().shape();
    std::vector<float> prob(ct.size());
    std::size_t i = 0;
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                const std::size_t j = static_cast<std::size_t>(
                    ((z + pad.before[0]) * S[1] + (y + pad.before[1])) * S[2] + x + pad.before[2]);
                prob[i++] = static_cast<float>(std::clamp(acc_fg[j] / acc_w[j], 0.0, 1.0));
            }
    return Volume(ct.grid(), std::move(prob));
}

LabelMask threshold_probability(const Volume& probability) {
    std::vector<std::uint8_t> mask(probability.size());
    const auto v = probability.values();
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = v[i] > 0.5f ? 1 : 0;
    return LabelMask(probability.grid(), std::move(mask));
}

LabelMask predict_study(const Volume& ct, const Volume& pet, const PatchPredictor& predictor,
                        const InferenceOptions& options) {
    return threshold_probability(probability_map(ct, pet, predictor, options));
}

Volume probability_map(const Study& normalized, const nn::UNet<float>& net, double overlap) {
    InferenceOptions opt;
    opt.patch = net.config().patch_size;
    opt.overlap = overlap;
    return probability_map(normalized.ct, normalized.pet, network_predictor(net), opt);
}

LabelMask predict_study(const Study& normalized, const nn::UNet<float>& net, double overlap) {
    return threshold_probability(probability_map(normalized, net, overlap));
}

}  // namespace lesionseg::infer
