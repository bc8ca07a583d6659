#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lesionseg/io.hpp"
#include "lesionseg/types.hpp"

namespace lesionseg::synth {

struct Range {
    double low = 0.0;
    double high = 0.0;
};

struct StudyParams {
    std::string id = "syn_0000";
    std::uint64_t seed = 0;
    Index3 shape{32, 32, 32};
    Vec3 spacing{2.0, 2.0, 2.0};
    int n_lesions = 1;
    Tracer tracer = Tracer::FDG;
    double difficulty = 0.0;        // in [0, 1]; scales lesion peaks by 1 - 0.7 * difficulty
    double lesion_amplitude = 6.0;  // PET peak above background at difficulty 0
    Range sigma_voxels{1.5, 2.5};
    double ct_noise_sd = 10.0;  // HU
    double pet_noise_sd = 0.15;

    void validate() const;
};

struct Lesion {
    Vec3 center{};  // voxel coordinates
    double sigma = 0.0;
    double amplitude = 0.0;
};

struct SyntheticStudy {
    Study study;
    std::vector<Lesion> lesions;
    double difficulty = 0.0;
};

// Deterministic per (params.seed, shape, n_lesions); difficulty changes only
// the lesion amplitudes, never their placement or the noise.
SyntheticStudy generate_study(const StudyParams& params);

// Mean PET inside the label minus mean PET over the rest of the body.
double measured_lesion_contrast(const Study& study);

enum class DifficultyKind { Constant, Uniform, Bimodal };

struct DifficultyDistribution {
    DifficultyKind kind = DifficultyKind::Bimodal;
    double value = 0.0;            // Constant
    double hard_fraction = 0.25;   // Bimodal: exact count round(hard_fraction * n)
    double easy_low = 0.0, easy_high = 0.2;
    double hard_low = 0.8, hard_high = 1.0;

    void validate() const;
};

DifficultyDistribution parse_difficulty(const std::string& text);

struct CorpusParams {
    std::uint64_t seed = 0;
    int n_studies = 10;
    Index3 shape{32, 32, 32};
    Vec3 spacing{2.0, 2.0, 2.0};
    int min_lesions = 1;
    int max_lesions = 3;
    double psma_fraction = 0.4;
    double negative_fraction = 0.0;
    DifficultyDistribution difficulty{};
    std::string id_prefix = "syn_";
};

// Writes <out>/images/<id>_{ct,pet,label}.nii.gz and <out>/manifest.tsv.
io::Manifest generate_corpus(const CorpusParams& params, const std::string& out_dir);

// In-memory variant used by tests and the acceptance runs.
std::vector<SyntheticStudy> generate_corpus_studies(const CorpusParams& params);

}  // namespace lesionseg::synth
