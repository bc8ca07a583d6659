#pragma once

#include <array>
#include <functional>
#include <vector>

#include "lesionseg/network.hpp"
#include "lesionseg/types.hpp"

namespace lesionseg::infer {

// Maps a 1 x 2 x patch input to 1 x 2 x patch logits.
using PatchPredictor = std::function<nn::Tensor<float>(const nn::Tensor<float>&)>;

struct InferenceOptions {
    Index3 patch{32, 32, 32};
    double overlap = 0.5;
    bool gaussian = true;
    double sigma_scale = 1.0 / 8.0;  // sigma = patch * sigma_scale per axis

    void validate() const;
};

// Evenly spaced tile starts covering [0, size) with step <= patch * (1 - overlap).
std::vector<std::int64_t> tile_starts(std::int64_t size, std::int64_t patch, double overlap);

// Importance window, max 1, strictly positive everywhere.
std::vector<float> gaussian_window(const Index3& patch, double sigma_scale);

PatchPredictor network_predictor(const nn::UNet<float>& net);

// Foreground probability in [0, 1] on the study grid. Inputs are the two
// normalized channels (CT, PET) on one grid.
Volume probability_map(const Volume& ct, const Volume& pet, const PatchPredictor& predictor,
                       const InferenceOptions& options);

// Raw blended argmax: foreground where p > 0.5. No post-processing.
LabelMask threshold_probability(const Volume& probability);

LabelMask predict_study(const Volume& ct, const Volume& pet, const PatchPredictor& predictor,
                        const InferenceOptions& options);

LabelMask predict_study(const Study& normalized, const nn::UNet<float>& net, double overlap = 0.5);
Volume probability_map(const Study& normalized, const nn::UNet<float>& net, double overlap = 0.5);

}  // namespace lesionseg::infer
