#include "lesionseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "lesionseg/errors.hpp"
#include "lesionseg/rng.hpp"

namespace lesionseg::synth {

namespace {

struct Hotspot {
    Vec3 frac;  // centre as a fraction of the shape (z, y, x)
    double amplitude;
};

// Physiological uptake confounders per tracer.
const std::vector<Hotspot>& hotspots(Tracer tracer) {
    static const std::vector<Hotspot> fdg{
        {{0.82, 0.50, 0.50}, 5.0},  // brain
        {{0.60, 0.42, 0.56}, 4.0},  // heart
        {{0.18, 0.55, 0.50}, 6.0},  // bladder
    };
    static const std::vector<Hotspot> psma{
        {{0.58, 0.50, 0.34}, 3.0},  // liver
        {{0.42, 0.62, 0.30}, 5.0},  // kidney
        {{0.42, 0.62, 0.70}, 5.0},  // kidney
        {{0.80, 0.40, 0.50}, 4.0},  // salivary glands
    };
    return tracer == Tracer::FDG ? fdg : psma;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void StudyParams::validate() const {
    for (auto s : shape)
        if (s < 16) throw ConfigError("synthetic studies need every axis >= 16 voxels");
    for (auto s : spacing)
        if (!(s > 0.0)) throw ConfigError("spacing must be positive");
    if (n_lesions < 0) throw ConfigError("n_lesions must be >= 0");
    if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw ConfigError("difficulty must lie in [0, 1]");
    if (!(sigma_voxels.low >= 1.5 && sigma_voxels.low <= sigma_voxels.high))
        throw ConfigError("lesion sigma range must start at >= 1.5 voxels");
    if (!(lesion_amplitude > 0.0)) throw ConfigError("lesion amplitude must be positive");
    if (ct_noise_sd < 0.0 || pet_noise_sd < 0.0) throw ConfigError("noise levels must be >= 0");
}

SyntheticStudy generate_study(const StudyParams& p) {
    p.validate();
    const Index3& S = p.shape;
    const Grid3D grid(S, p.spacing);
    Rng body_rng(derive_seed(p.seed, 3));
    Rng layout(derive_seed(p.seed, 1));
    Rng noise(derive_seed(p.seed, 2));

    Vec3 centre{}, semi{};
    for (int a = 0; a < 3; ++a) {
        centre[a] = (S[a] - 1) / 2.0 + uniform(body_rng, -1.0, 1.0);
        semi[a] = S[a] * (a == 0 ? 0.47 : 0.44) * uniform(body_rng, 0.9, 1.0);
    }
    const double hot_sigma = 0.08 * static_cast<double>(*std::min_element(S.begin(), S.end()));
    const auto& hot = hotspots(p.tracer);

    // Lesion placement by rejection sampling.
    std::vector<Lesion> lesions;
    const double scale = 1.0 - 0.7 * p.difficulty;
    for (int i = 0; i < p.n_lesions; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
            Lesion l;
            l.sigma = uniform(layout, p.sigma_voxels.low, p.sigma_voxels.high);
            const double jitter = uniform(layout, 0.9, 1.1);
            for (int a = 0; a < 3; ++a) l.center[a] = uniform(layout, 0.0, static_cast<double>(S[a] - 1));
            l.amplitude = p.lesion_amplitude * jitter * scale;
            bool ok = true;
            double r2 = 0.0;
            for (int a = 0; a < 3; ++a) {
                if (l.center[a] < 2.0 * l.sigma || l.center[a] > S[a] - 1 - 2.0 * l.sigma) ok = false;
                const double d = (l.center[a] - centre[a]) / semi[a];
                r2 += d * d;
            }
            if (r2 > 0.7 * 0.7) ok = false;
            for (const auto& h : hot) {
                double d2 = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const double d = l.center[a] - h.frac[a] * (S[a] - 1);
                    d2 += d * d;
                }
                if (std::sqrt(d2) < 1.2 * (hot_sigma + l.sigma)) ok = false;
            }
            for (const auto& o : lesions) {
                double d2 = 0.0;
                for (int a = 0; a < 3; ++a) d2 += (l.center[a] - o.center[a]) * (l.center[a] - o.center[a]);
                if (std::sqrt(d2) < 1.6 * (l.sigma + o.sigma)) ok = false;
            }
            if (ok) {
                lesions.push_back(l);
                placed = true;
            }
        }
        if (!placed)
            throw GenerationError("cannot fit " + std::to_string(p.n_lesions) + " lesions into a " + to_string(grid) +
                                  " phantom");
    }

    const std::size_t n = grid.num_voxels();
    std::vector<float> ct(n), pet(n);
    std::vector<std::uint8_t> label(n, 0);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::size_t k = 0;
    for (std::int64_t z = 0; z < S[0]; ++z)
        for (std::int64_t y = 0; y < S[1]; ++y)
            for (std::int64_t x = 0; x < S[2]; ++x, ++k) {
                const Vec3 q{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
                double r2 = 0.0;
                for (int a = 0; a < 3; ++a) r2 += std::pow((q[a] - centre[a]) / semi[a], 2);
                const double r = std::sqrt(r2);
                const double body = logistic((1.0 - r) * 12.0);
                const double lean = logistic((0.8 - r) * 15.0);  // soft tissue inside a fat layer
                double ct_v = -1000.0 + body * (900.0 + lean * 140.0);
                double pet_v = 0.05 + 0.95 * body;
                for (const auto& h : hot) {
                    double d2 = 0.0;
                    for (int a = 0; a < 3; ++a) d2 += std::pow(q[a] - h.frac[a] * (S[a] - 1), 2);
                    pet_v += h.amplitude * std::exp(-d2 / (2.0 * hot_sigma * hot_sigma));
                }
                for (const auto& l : lesions) {
                    double d2 = 0.0;
                    for (int a = 0; a < 3; ++a) d2 += std::pow(q[a] - l.center[a], 2);
                    const double g = std::exp(-d2 / (2.0 * l.sigma * l.sigma));
                    pet_v += l.amplitude * g;
                    ct_v += 30.0 * scale * g;
                    if (g >= 0.5) label[k] = 1;
                }
                ct_v += p.ct_noise_sd * unit(noise);
                pet_v += p.pet_noise_sd * unit(noise);
                ct[k] = static_cast<float>(ct_v);
                pet[k] = static_cast<float>(std::max(0.0, pet_v));
            }

    SyntheticStudy out;
    out.study = Study::make(p.id, p.tracer, Volume(grid, std::move(ct)), Volume(grid, std::move(pet)),
                            LabelMask(grid, std::move(label)));
    out.lesions = std::move(lesions);
    out.difficulty = p.difficulty;
    return out;
}

double measured_lesion_contrast(const Study& study) {
    if (!study.label) throw DataError("contrast needs a label for " + study.id);
    const auto pet = study.pet.values();
    const auto lab = study.label->values();
    double in = 0.0, out = 0.0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t i = 0; i < pet.size(); ++i) {
        if (lab[i]) {
            in += pet[i];
            ++n_in;
        } else if (pet[i] > 0.5f) {  // body only
            out += pet[i];
            ++n_out;
        }
    }
    if (n_in == 0 || n_out == 0) throw DataError("no lesion or no body voxels in " + study.id);
    return in / static_cast<double>(n_in) - out / static_cast<double>(n_out);
}

void DifficultyDistribution::validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(value) || !unit(hard_fraction) || !unit(easy_low) || !unit(easy_high) || !unit(hard_low) ||
        !unit(hard_high) || easy_low > easy_high || hard_low > hard_high)
        throw ConfigError("difficulty parameters must lie in [0, 1] with low <= high");
}

DifficultyDistribution parse_difficulty(const std::string& text) {
    DifficultyDistribution d;
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    auto number = [&](double fallback) {
        if (arg.empty()) return fallback;
        try {
            return std::stod(arg);
        } catch (const std::logic_error&) {
            throw ConfigError("bad difficulty argument '" + arg + "'");
        }
    };
    if (kind == "bimodal") {
        d.kind = DifficultyKind::Bimodal;
        d.hard_fraction = number(0.25);
    } else if (kind == "uniform") {
        d.kind = DifficultyKind::Uniform;
    } else if (kind == "constant") {
        d.kind = DifficultyKind::Constant;
        d.value = number(0.0);
    } else {
        throw ConfigError("unknown difficulty distribution '" + text + "' (bimodal[:f], uniform, constant:v)");
    }
    d.validate();
    return d;
}

std::vector<SyntheticStudy> generate_corpus_studies(const CorpusParams& params) {
    if (params.n_studies < 1) throw ConfigError("a corpus needs at least one study");
    if (params.min_lesions < 0 || params.max_lesions < params.min_lesions)
        throw ConfigError("lesion count range is invalid");
    params.difficulty.validate();
    const auto n = static_cast<std::size_t>(params.n_studies);

    std::vector<bool> hard(n, false);
    if (params.difficulty.kind == DifficultyKind::Bimodal) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng pick(derive_seed(params.seed, 0xd1ff));
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(pick, 0, static_cast<std::int64_t>(i) - 1))]);
        const auto n_hard = static_cast<std::size_t>(std::llround(params.difficulty.hard_fraction * static_cast<double>(n)));
        for (std::size_t i = 0; i < n_hard; ++i) hard[order[i]] = true;
    }

    std::vector<SyntheticStudy> out;
    for (std::size_t i = 0; i < n; ++i) {
        Rng meta(derive_seed(params.seed, i, 7));
        StudyParams sp;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%04zu", i);
        sp.id = params.id_prefix + buf;
        sp.seed = derive_seed(params.seed, i, 11);
        sp.shape = params.shape;
        sp.spacing = params.spacing;
        sp.tracer = bernoulli(meta, params.psma_fraction) ? Tracer::PSMA : Tracer::FDG;
        sp.n_lesions = static_cast<int>(uniform_int(meta, params.min_lesions, params.max_lesions));
        if (bernoulli(meta, params.negative_fraction)) sp.n_lesions = 0;
        const auto& d = params.difficulty;
        switch (d.kind) {
            case DifficultyKind::Constant: sp.difficulty = d.value; break;
            case DifficultyKind::Uniform: sp.difficulty = uniform(meta, 0.0, 1.0); break;
            case DifficultyKind::Bimodal:
                sp.difficulty = hard[i] ? uniform(meta, d.hard_low, d.hard_high) : uniform(meta, d.easy_low, d.easy_high);
                break;
        }
        out.push_back(generate_study(sp));
    }
    return out;
}

io::Manifest generate_corpus(const CorpusParams& params, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const auto studies = generate_corpus_studies(params);
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    io::Manifest manifest;
    manifest.base_dir = out_dir;
    for (const auto& s : studies) {
        io::ManifestEntry e;
        e.id = s.study.id;
        e.tracer = s.study.tracer;
        e.ct_path = "images/" + e.id + "_ct.nii.gz";
        e.pet_path = "images/" + e.id + "_pet.nii.gz";
        e.label_path = "images/" + e.id + "_label.nii.gz";
        e.source_site = "synthetic";
        e.difficulty = s.difficulty;
        io::save_volume(s.study.ct, manifest.resolve(e.ct_path));
        io::save_volume(s.study.pet, manifest.resolve(e.pet_path));
        io::save_mask(*s.study.label, manifest.resolve(*e.label_path));
        manifest.entries.push_back(std::move(e));
    }
    io::save_manifest(manifest, (fs::path(out_dir) / "manifest.tsv").string());
    return manifest;
}

}  // namespace lesionseg::synth
