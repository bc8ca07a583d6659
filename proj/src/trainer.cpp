#include "lesionseg/trainer.hpp"

#include <malloc.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lesionseg/errors.hpp"
#include "lesionseg/inference.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/rng.hpp"

namespace lesionseg::train {

namespace fs = std::filesystem;

void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

// ---------------------------------------------------------------------------
// Loss

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

template <typename T>
LossValue segmentation_loss(const nn::Tensor<T>& logits, std::span<const std::uint8_t> target, nn::Tensor<T>* grad,
                            double weight) {
    const std::int64_t n = logits.batch();
    if (n == 0 || logits.spatial_size() == 0) throw DataError("loss on an empty batch");
    if (logits.channels() != nn::kNumClasses) throw ShapeError("loss expects two-class logits");
    const std::int64_t v = logits.spatial_size();
    if (static_cast<std::int64_t>(target.size()) != n * v) throw ShapeError("loss target does not match logits");
    if (grad && grad->shape != logits.shape) throw ShapeError("gradient buffer does not match logits");

    const auto m = static_cast<double>(n * v);
    std::vector<double> p1(static_cast<std::size_t>(n * v));
    double ce = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
        const T* z0 = logits.channel_ptr(b, 0);
        const T* z1 = logits.channel_ptr(b, 1);
        for (std::int64_t i = 0; i < v; ++i) {
            const double d = static_cast<double>(z1[i]) - static_cast<double>(z0[i]);
            const double p = 1.0 / (1.0 + std::exp(-d));
            const double g = target[static_cast<std::size_t>(b * v + i)] ? 1.0 : 0.0;
            p1[static_cast<std::size_t>(b * v + i)] = p;
            ce += g > 0 ? softplus(-d) : softplus(d);
            inter += p * g;
            psum += p;
            gsum += g;
        }
    }
    ce /= m;
    const double denom = psum + gsum + kDiceSmooth;
    const double soft_dice = (2.0 * inter + kDiceSmooth) / denom;

    if (grad) {
        for (std::int64_t b = 0; b < n; ++b) {
            T* d0 = grad->channel_ptr(b, 0);
            T* d1 = grad->channel_ptr(b, 1);
            for (std::int64_t i = 0; i < v; ++i) {
                const std::size_t k = static_cast<std::size_t>(b * v + i);
                const double p = p1[k];
                const double g = target[k] ? 1.0 : 0.0;
                const double d_dice_dp = (2.0 * g * denom - (2.0 * inter + kDiceSmooth)) / (denom * denom);
                // d/dz1 of the loss; d/dz0 is its negative for a two-class softmax
                const double dz1 = (p - g) / m - d_dice_dp * p * (1.0 - p);
                d1[i] += static_cast<T>(weight * dz1);
                d0[i] -= static_cast<T>(weight * dz1);
            }
        }
    }
    return {ce + (1.0 - soft_dice), ce, 1.0 - soft_dice};
}

template LossValue segmentation_loss<float>(const nn::Tensor<float>&, std::span<const std::uint8_t>,
                                            nn::Tensor<float>*, double);
template LossValue segmentation_loss<double>(const nn::Tensor<double>&, std::span<const std::uint8_t>,
                                             nn::Tensor<double>*, double);

std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::int64_t batch,
                                            const Index3& shape, int factor) {
    if (factor < 1) throw ConfigError("downsampling factor must be >= 1");
    const std::int64_t v = shape[0] * shape[1] * shape[2];
    if (static_cast<std::int64_t>(labels.size()) != batch * v) throw ShapeError("label buffer size mismatch");
    const Index3 s{shape[0] / factor, shape[1] / factor, shape[2] / factor};
    std::vector<std::uint8_t> out(static_cast<std::size_t>(batch * s[0] * s[1] * s[2]));
    std::size_t k = 0;
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t z = 0; z < s[0]; ++z)
            for (std::int64_t y = 0; y < s[1]; ++y)
                for (std::int64_t x = 0; x < s[2]; ++x)
                    out[k++] = labels[static_cast<std::size_t>(
                        b * v + ((z * factor) * shape[1] + y * factor) * shape[2] + x * factor)];
    return out;
}

std::vector<double> deep_supervision_weights(const std::vector<int>& aux_factors) {
    std::vector<double> w{1.0};
    for (int f : aux_factors) w.push_back(1.0 / static_cast<double>(f));
    double sum = 0.0;
    for (double x : w) sum += x;
    for (double& x : w) x /= sum;
    return w;
}

template <typename T>
SupervisedLoss<T> supervised_loss(const typename nn::UNet<T>::Output& out, std::span<const std::uint8_t> target) {
    const auto weights = deep_supervision_weights(out.aux_factors);
    SupervisedLoss<T> r;
    r.d_logits = nn::Tensor<T>(out.logits.shape);
    const LossValue full = segmentation_loss(out.logits, target, &r.d_logits, weights[0]);
    r.value.total += weights[0] * full.total;
    r.value.ce += weights[0] * full.ce;
    r.value.dice_term += weights[0] * full.dice_term;
    const Index3 shape{out.logits.shape[2], out.logits.shape[3], out.logits.shape[4]};
    for (std::size_t a = 0; a < out.aux.size(); ++a) {
        const auto small = downsample_labels(target, out.logits.batch(), shape, out.aux_factors[a]);
        r.d_aux.emplace_back(out.aux[a].shape);
        const LossValue lv = segmentation_loss(out.aux[a], small, &r.d_aux.back(), weights[a + 1]);
        r.value.total += weights[a + 1] * lv.total;
        r.value.ce += weights[a + 1] * lv.ce;
        r.value.dice_term += weights[a + 1] * lv.dice_term;
    }
    return r;
}

template SupervisedLoss<float> supervised_loss<float>(const nn::UNet<float>::Output&, std::span<const std::uint8_t>);
template SupervisedLoss<double> supervised_loss<double>(const nn::UNet<double>::Output&,
                                                        std::span<const std::uint8_t>);

// ---------------------------------------------------------------------------
// Optimizer and schedule

double Sgd::step(std::vector<nn::Parameter<float>>& params, nn::Gradients<float>& grads, double lr) {
    if (grads.size() != params.size()) throw ShapeError("gradient list does not match the parameters");
    if (velocity_.size() != params.size()) {
        velocity_.clear();
        for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0f);
    }
    double sq = 0.0;
    for (const auto& g : grads)
        for (float x : g) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    const double clip =
        options_.grad_clip > 0.0 && norm > options_.grad_clip ? options_.grad_clip / (norm + 1e-6) : 1.0;
    const double mu = options_.momentum;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].value;
        auto& v = velocity_[i];
        const auto& g = grads[i];
        if (g.size() != w.size()) throw ShapeError("gradient size mismatch for " + params[i].name);
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = clip * g[j] + options_.weight_decay * w[j];
            const double vj = mu * v[j] + gj;
            v[j] = static_cast<float>(vj);
            w[j] = static_cast<float>(w[j] - lr * (options_.nesterov ? gj + mu * vj : vj));
        }
    }
    return norm;
}

double poly_lr(double lr0, int epoch, int total_epochs, double exponent) {
    if (total_epochs <= 0) return lr0;
    const double frac = std::clamp(static_cast<double>(epoch) / total_epochs, 0.0, 1.0);
    return lr0 * std::pow(1.0 - frac, exponent);
}

std::vector<std::string> epoch_draws(const SampleWeightTable& weights, std::uint64_t seed, std::int64_t epoch) {
    std::vector<std::string> draws;
    draws.reserve(static_cast<std::size_t>(weights.total_samples()));
    for (const auto& [id, m] : weights.entries())
        for (int k = 0; k < m; ++k) draws.push_back(id);
    Rng rng(derive_seed(seed, 0x65706f6368ULL, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = draws.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
        std::swap(draws[i - 1], draws[j]);
    }
    return draws;
}

// ---------------------------------------------------------------------------
// Case store

CaseStore::CaseStore(io::Manifest manifest, preprocess::NormalizationStats stats, preprocess::NormalizationScope scope)
    : manifest_(std::move(manifest)), stats_(stats), scope_(scope) {}

void CaseStore::add(const Study& normalized) {
    Entry e{normalized, augment::make_training_sample(normalized), {}};
    for (std::size_t i = 0; i < e.sample.mask.size(); ++i)
        if (e.sample.mask[i]) e.foreground.push_back(static_cast<std::uint32_t>(i));
    cache_.insert_or_assign(normalized.id, std::move(e));
}

bool CaseStore::contains(const std::string& id) const {
    if (cache_.count(id)) return true;
    if (!manifest_) return false;
    for (const auto& e : manifest_->entries)
        if (e.id == id) return true;
    return false;
}

std::vector<std::string> CaseStore::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, e] : cache_) out.push_back(id);
    if (manifest_)
        for (const auto& e : manifest_->entries)
            if (!cache_.count(e.id)) out.push_back(e.id);
    std::sort(out.begin(), out.end());
    return out;
}

const CaseStore::Entry& CaseStore::entry(const std::string& id) const {
    if (auto it = cache_.find(id); it != cache_.end()) return it->second;
    if (!manifest_ || !contains(id)) throw DataError("study '" + id + "' is not in the dataset");
    try {
        const Study raw = io::load_study(*manifest_, manifest_->find(id));
        preprocess::NormalizationStats stats = stats_;
        if (scope_ == preprocess::NormalizationScope::PerCase) {
            if (raw.positive) {
                stats = preprocess::compute_foreground_stats(std::span<const Study>(&raw, 1));
            } else {
                auto all = [](const Volume& v) { return preprocess::channel_stats_from_values({v.values().begin(), v.values().end()}); };
                stats = preprocess::NormalizationStats{all(raw.ct), all(raw.pet)};
            }
        }
        const_cast<CaseStore*>(this)->add(preprocess::normalize_study(raw, stats));
    } catch (const Error& e) {
        throw DataError("study '" + id + "' could not be loaded: " + e.what());
    }
    return cache_.at(id);
}

const Study& CaseStore::study(const std::string& id) const { return entry(id).study; }
const augment::TrainingSample& CaseStore::sample(const std::string& id) const { return entry(id).sample; }
const std::vector<std::uint32_t>& CaseStore::foreground(const std::string& id) const {
    return entry(id).foreground;
}

// ---------------------------------------------------------------------------
// Training

TrainState::TrainState(nn::NetworkConfig config, std::uint64_t seed_)
    : net(nn::build_network<float>(config, seed_)), seed(seed_) {}

void TrainOptions::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0))
        throw ConfigError("foreground fraction must lie in [0, 1]");
    if (checkpoint_every < 0) throw ConfigError("checkpoint interval must be >= 0");
    policy.validate();
}

namespace {

// Zero-pads a sample (centred) so every axis is at least `min_shape`.
augment::TrainingSample pad_sample(const augment::TrainingSample& s, const Index3& min_shape, Index3& before) {
    Index3 shape{};
    for (int a = 0; a < 3; ++a) {
        shape[a] = std::max(s.shape[a], min_shape[a]);
        before[a] = (shape[a] - s.shape[a]) / 2;
    }
    augment::TrainingSample out;
    out.study_id = s.study_id;
    out.shape = shape;
    const std::size_t n = out.voxels();
    out.channels[0].assign(n, 0.0f);
    out.channels[1].assign(n, 0.0f);
    out.mask.assign(n, 0);
    std::size_t k = 0;
    for (std::int64_t z = 0; z < s.shape[0]; ++z)
        for (std::int64_t y = 0; y < s.shape[1]; ++y)
            for (std::int64_t x = 0; x < s.shape[2]; ++x, ++k) {
                const auto d = static_cast<std::size_t>(((z + before[0]) * shape[1] + y + before[1]) * shape[2] + x + before[2]);
                out.channels[0][d] = s.channels[0][k];
                out.channels[1][d] = s.channels[1][k];
                out.mask[d] = s.mask[k];
            }
    return out;
}

}  // namespace

augment::TrainingSample draw_patch(const CaseStore& store, const std::string& id, const nn::NetworkConfig& config,
                                   const TrainOptions& options, std::uint64_t seed, std::int64_t epoch,
                                   std::int64_t occurrence) {
    const augment::TrainingSample& raw = store.sample(id);
    const auto& fg = store.foreground(id);
    const Index3& patch = config.patch_size;
    Rng rng(derive_seed(derive_seed(seed, hash_string(id), static_cast<std::uint64_t>(epoch)),
                        static_cast<std::uint64_t>(occurrence)));

    Index3 before{0, 0, 0};
    const bool needs_pad = raw.shape[0] < patch[0] || raw.shape[1] < patch[1] || raw.shape[2] < patch[2];
    augment::TrainingSample padded;
    if (needs_pad) padded = pad_sample(raw, patch, before);
    const augment::TrainingSample& src = needs_pad ? padded : raw;

    augment::PatchRequest request{patch, std::nullopt};
    if (!fg.empty() && bernoulli(rng, options.foreground_fraction)) {
        const std::uint32_t flat = fg[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(fg.size()) - 1))];
        const Index3 c{static_cast<std::int64_t>(flat) / (raw.shape[1] * raw.shape[2]),
                       (static_cast<std::int64_t>(flat) / raw.shape[2]) % raw.shape[1],
                       static_cast<std::int64_t>(flat) % raw.shape[2]};
        Vec3 center{};
        for (int a = 0; a < 3; ++a) {
            const double half = (patch[a] - 1) / 2.0;
            center[a] = std::clamp(static_cast<double>(c[a] + before[a]), half,
                                   static_cast<double>(src.shape[a] - 1) - half);
            center[a] = std::floor(center[a] - half) + half;  // keep the crop voxel-aligned
        }
        request.center = center;
    }
    return augment::apply_policy(src, options.policy, rng, request);
}

TrainState train(TrainState state, const CaseStore& store, const SampleWeightTable& weights,
                 const TrainOptions& options) {
    options.validate();
    if (options.epochs == 0) {
        state.lineage.push_back(options.run_name);
        return state;
    }
    if (weights.size() == 0) throw DataError("training needs a non-empty weight table");
    for (const auto& id : weights.ids())
        if (!store.contains(id)) throw DataError("weighted study '" + id + "' is not in the dataset");
    if (options.reset_optimizer || state.optimizer.velocity().empty()) state.optimizer = Sgd(options.sgd);

    const nn::NetworkConfig& cfg = state.net.config();
    const Index3& patch = cfg.patch_size;
    const std::int64_t vox = patch[0] * patch[1] * patch[2];

    for (int e = 0; e < options.epochs; ++e) {
        const double lr = poly_lr(options.lr, e, options.epochs);
        const auto draws = epoch_draws(weights, state.seed, state.epoch);
        std::map<std::string, std::int64_t> seen;
        double loss_sum = 0.0, ce_sum = 0.0, dice_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < draws.size(); start += static_cast<std::size_t>(options.batch_size)) {
            const std::size_t end = std::min(draws.size(), start + static_cast<std::size_t>(options.batch_size));
            const auto n = static_cast<std::int64_t>(end - start);
            nn::Tensor<float> input(n, cfg.input_channels, patch[0], patch[1], patch[2]);
            std::vector<std::uint8_t> target(static_cast<std::size_t>(n * vox));
            for (std::int64_t b = 0; b < n; ++b) {
                const std::string& id = draws[start + static_cast<std::size_t>(b)];
                const auto s = draw_patch(store, id, cfg, options, state.seed, state.epoch, seen[id]++);
                std::copy(s.channels[0].begin(), s.channels[0].end(), input.channel_ptr(b, 0));
                std::copy(s.channels[1].begin(), s.channels[1].end(), input.channel_ptr(b, 1));
                std::copy(s.mask.begin(), s.mask.end(), target.begin() + b * vox);
            }
            auto pass = state.net.forward_train(input);
            const auto loss = supervised_loss<float>(pass.output, target);
            auto grads = state.net.backward(pass, loss.d_logits, loss.d_aux);
            state.optimizer.step(state.net.parameters(), grads, lr);
            loss_sum += loss.value.total;
            ce_sum += loss.value.ce;
            dice_sum += loss.value.dice_term;
            ++batches;
        }
        ++state.epoch;
        if (options.on_epoch) {
            EpochLog log;
            log.round = options.run_name;
            log.epoch = state.epoch - 1;
            log.local_epoch = e;
            log.lr = lr;
            log.loss = loss_sum / static_cast<double>(batches);
            log.ce = ce_sum / static_cast<double>(batches);
            log.dice_term = dice_sum / static_cast<double>(batches);
            log.samples = draws.size();
            options.on_epoch(log);
        }
        if (options.checkpoint_every > 0 && options.on_checkpoint && (e + 1) % options.checkpoint_every == 0 &&
            e + 1 < options.epochs)
            options.on_checkpoint(state);
    }
    state.weights = weights;
    state.lineage.push_back(options.run_name);
    return state;
}

PerSampleDice evaluate_per_sample(const nn::UNet<float>& net, const CaseStore& store,
                                  std::span<const std::string> ids, double overlap) {
    std::vector<std::string> unlabeled;
    for (const auto& id : ids)
        if (!store.study(id).label) unlabeled.push_back(id);
    if (!unlabeled.empty()) {
        std::string list;
        for (const auto& id : unlabeled) list += (list.empty() ? "" : ", ") + id;
        throw DataError("cannot evaluate unlabeled studies: " + list);
    }
    PerSampleDice out;
    for (const auto& id : ids) {
        const Study& s = store.study(id);
        out[id] = metrics::dice(infer::predict_study(s, net, overlap), *s.label);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string weights_to_tsv(const SampleWeightTable& table) {
    std::ostringstream os;
    os << "id\tmultiplicity\n";
    for (const auto& [id, m] : table.entries()) os << id << '\t' << m << '\n';
    return os.str();
}

SampleWeightTable weights_from_tsv(const std::string& text) {
    SampleWeightTable t;
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("id\t", 0) == 0) continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("bad weight table line: " + line);
        try {
            t.add(line.substr(0, tab), std::stoi(line.substr(tab + 1)));
        } catch (const std::logic_error&) {
            throw FormatError("bad multiplicity in line: " + line);
        }
    }
    return t;
}

std::string dice_to_tsv(const PerSampleDice& dice) {
    std::ostringstream os;
    os.precision(17);
    os << "id\tdice\n";
    for (const auto& [id, d] : dice) os << id << '\t' << d << '\n';
    return os.str();
}

PerSampleDice dice_from_tsv(const std::string& text) {
    PerSampleDice out;
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("id\t", 0) == 0) continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("bad dice line: " + line);
        try {
            out[line.substr(0, tab)] = std::stod(line.substr(tab + 1));
        } catch (const std::logic_error&) {
            throw FormatError("bad dice value in line: " + line);
        }
    }
    return out;
}

namespace {

void emit_ints(YAML::Emitter& out, const char* key, const std::vector<int>& v) {
    out << YAML::Key << key << YAML::Value << YAML::Flow << v;
}

template <typename V>
V get(const YAML::Node& node, const char* key) {
    if (!node[key]) throw ConfigError(std::string("missing key '") + key + "'");
    try {
        return node[key].as<V>();
    } catch (const YAML::Exception&) {
        throw ConfigError(std::string("bad value for '") + key + "'");
    }
}

}  // namespace

std::string network_config_to_yaml(const nn::NetworkConfig& c) {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "input_channels" << YAML::Value << c.input_channels;
    out << YAML::Key << "num_encoder_stages" << YAML::Value << c.num_encoder_stages;
    emit_ints(out, "encoder_convs_per_stage", c.encoder_convs_per_stage);
    emit_ints(out, "decoder_convs_per_stage", c.decoder_convs_per_stage);
    out << YAML::Key << "base_features" << YAML::Value << c.base_features;
    out << YAML::Key << "max_features" << YAML::Value << c.max_features;
    out << YAML::Key << "patch_size" << YAML::Value << YAML::Flow
        << std::vector<std::int64_t>(c.patch_size.begin(), c.patch_size.end());
    out << YAML::Key << "deep_supervision" << YAML::Value << c.deep_supervision;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

nn::NetworkConfig network_config_from_yaml(const std::string& text) {
    YAML::Node n;
    try {
        n = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("network config is not valid YAML: ") + e.what());
    }
    nn::NetworkConfig c;
    c.input_channels = get<int>(n, "input_channels");
    c.num_encoder_stages = get<int>(n, "num_encoder_stages");
    c.encoder_convs_per_stage = get<std::vector<int>>(n, "encoder_convs_per_stage");
    c.decoder_convs_per_stage = get<std::vector<int>>(n, "decoder_convs_per_stage");
    c.base_features = get<int>(n, "base_features");
    c.max_features = get<int>(n, "max_features");
    const auto p = get<std::vector<std::int64_t>>(n, "patch_size");
    if (p.size() != 3) throw ConfigError("patch_size needs three entries");
    c.patch_size = {p[0], p[1], p[2]};
    c.deep_supervision = get<bool>(n, "deep_supervision");
    c.validate();
    return c;
}

namespace {

constexpr char kWeightsMagic[8] = {'L', 'S', 'G', 'W', 'T', 'S', '0', '1'};

void write_tensors(const std::string& path, const std::vector<nn::Parameter<float>>& params,
                   const std::vector<std::vector<float>>* values) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(kWeightsMagic, sizeof kWeightsMagic);
    const auto count = static_cast<std::uint64_t>(params.size());
    f.write(reinterpret_cast<const char*>(&count), sizeof count);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        const auto& data = values ? (*values)[i] : p.value;
        const auto len = static_cast<std::uint32_t>(p.name.size());
        f.write(reinterpret_cast<const char*>(&len), sizeof len);
        f.write(p.name.data(), len);
        const auto n = static_cast<std::uint64_t>(data.size());
        f.write(reinterpret_cast<const char*>(&n), sizeof n);
        f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    }
    if (!f) throw IoError("failed writing " + path);
}

std::vector<std::vector<float>> read_tensors(const std::string& path, const std::vector<nn::Parameter<float>>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    char magic[8];
    f.read(magic, sizeof magic);
    if (!f || std::memcmp(magic, kWeightsMagic, sizeof magic) != 0) throw FormatError(path + ": not a weight file");
    std::uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!f || count != params.size()) throw FormatError(path + ": parameter count does not match the network");
    std::vector<std::vector<float>> out;
    for (const auto& p : params) {
        std::uint32_t len = 0;
        f.read(reinterpret_cast<char*>(&len), sizeof len);
        if (!f || len > 4096) throw FormatError(path + ": corrupt entry");
        std::string name(len, '\0');
        f.read(name.data(), len);
        std::uint64_t n = 0;
        f.read(reinterpret_cast<char*>(&n), sizeof n);
        if (!f || name != p.name || n != p.value.size())
            throw FormatError(path + ": entry '" + name + "' does not match parameter '" + p.name + "'");
        std::vector<float> data(n);
        f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!f) throw FormatError(path + ": truncated");
        out.push_back(std::move(data));
    }
    return out;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace

void save_checkpoint(const TrainState& state, const CheckpointInfo& info, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
    const fs::path d(dir);
    write_file(d / "network.yaml", network_config_to_yaml(state.net.config()));
    write_tensors((d / "weights.bin").string(), state.net.parameters(), nullptr);
    if (state.optimizer.velocity().size() == state.net.parameters().size())
        write_tensors((d / "optimizer.bin").string(), state.net.parameters(), &state.optimizer.velocity());
    else
        fs::remove(d / "optimizer.bin", ec);
    write_file(d / "sample_weights.tsv", weights_to_tsv(state.weights));
    write_file(d / "dice.tsv", dice_to_tsv(info.dice));
    if (!info.run_config_yaml.empty()) write_file(d / "run_config.yaml", info.run_config_yaml);

    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "schema_version" << YAML::Value << 1;
    out << YAML::Key << "round_name" << YAML::Value << info.round_name;
    out << YAML::Key << "round_index" << YAML::Value << info.round_index;
    out << YAML::Key << "epoch" << YAML::Value << state.epoch;
    out << YAML::Key << "seed" << YAML::Value << state.seed;
    out << YAML::Key << "lineage" << YAML::Value << YAML::Flow << state.lineage;
    const auto& sgd = state.optimizer.options();
    out << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "momentum" << YAML::Value << sgd.momentum;
    out << YAML::Key << "nesterov" << YAML::Value << sgd.nesterov;
    out << YAML::Key << "weight_decay" << YAML::Value << sgd.weight_decay;
    out << YAML::Key << "grad_clip" << YAML::Value << sgd.grad_clip;
    out << YAML::EndMap;
    out << YAML::EndMap;
    write_file(d / "state.yaml", std::string(out.c_str()) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    const fs::path d(dir);
    if (!fs::is_directory(d)) throw IoError("checkpoint directory not found: " + dir);
    const nn::NetworkConfig config = network_config_from_yaml(read_file(d / "network.yaml"));
    YAML::Node st;
    try {
        st = YAML::Load(read_file(d / "state.yaml"));
    } catch (const YAML::Exception& e) {
        throw FormatError(dir + "/state.yaml: " + e.what());
    }
    if (get<int>(st, "schema_version") != 1) throw FormatError("unsupported checkpoint schema version");
    LoadedCheckpoint ck{TrainState(config, get<std::uint64_t>(st, "seed")), {}};
    ck.state.epoch = get<std::int64_t>(st, "epoch");
    ck.state.lineage = get<std::vector<std::string>>(st, "lineage");
    ck.info.round_name = get<std::string>(st, "round_name");
    ck.info.round_index = get<int>(st, "round_index");
    if (const auto o = st["optimizer"]) {
        SgdOptions sgd;
        sgd.momentum = get<double>(o, "momentum");
        sgd.nesterov = get<bool>(o, "nesterov");
        sgd.weight_decay = get<double>(o, "weight_decay");
        sgd.grad_clip = get<double>(o, "grad_clip");
        ck.state.optimizer = Sgd(sgd);
    }
    auto& params = ck.state.net.parameters();
    auto values = read_tensors((d / "weights.bin").string(), params);
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = std::move(values[i]);
    if (fs::exists(d / "optimizer.bin"))
        ck.state.optimizer.velocity() = read_tensors((d / "optimizer.bin").string(), params);
    ck.state.weights = weights_from_tsv(read_file(d / "sample_weights.tsv"));
    ck.info.dice = dice_from_tsv(read_file(d / "dice.tsv"));
    if (fs::exists(d / "run_config.yaml")) ck.info.run_config_yaml = read_file(d / "run_config.yaml");
    return ck;
}

}  // namespace lesionseg::train
