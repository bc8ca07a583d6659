#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lesionseg/augment.hpp"
#include "lesionseg/io.hpp"
#include "lesionseg/network.hpp"
#include "lesionseg/preprocess.hpp"
#include "lesionseg/types.hpp"

namespace lesionseg::train {

inline constexpr double kDiceSmooth = 1e-5;

// Keeps large activation buffers on the heap instead of fresh mmap pages per
// allocation. Call once from an executable's main.
void tune_allocator();

struct LossValue {
    double total = 0.0;  // ce + dice_term
    double ce = 0.0;
    double dice_term = 0.0;  // 1 - soft dice of the lesion class
};

// Cross-entropy (mean over voxels) plus (1 - soft Dice) of the lesion class,
// with the Dice pooled over the whole batch. `target` holds N x spatial labels.
// If `grad` is given, d(weight * loss)/d(logits) is added into it.
template <typename T>
LossValue segmentation_loss(const nn::Tensor<T>& logits, std::span<const std::uint8_t> target,
                            nn::Tensor<T>* grad = nullptr, double weight = 1.0);

// Nearest downsampling of an N x D x H x W label volume by `factor` (index i * factor).
std::vector<std::uint8_t> downsample_labels(std::span<const std::uint8_t> labels, std::int64_t batch,
                                            const Index3& shape, int factor);

// Loss weights for the full-resolution output followed by each auxiliary
// output: 0.5^log2(factor), normalised to sum 1.
std::vector<double> deep_supervision_weights(const std::vector<int>& aux_factors);

template <typename T>
struct SupervisedLoss {
    LossValue value;
    nn::Tensor<T> d_logits;
    std::vector<nn::Tensor<T>> d_aux;
};

template <typename T>
SupervisedLoss<T> supervised_loss(const typename nn::UNet<T>::Output& out, std::span<const std::uint8_t> target);

// SGD with Nesterov momentum, decoupled from the network.
struct SgdOptions {
    double momentum = 0.99;
    bool nesterov = true;
    double weight_decay = 3e-5;
    double grad_clip = 12.0;  // global L2 norm; <= 0 disables
};

class Sgd {
public:
    Sgd() = default;
    explicit Sgd(SgdOptions options) : options_(options) {}

    // Returns the gradient norm before clipping.
    double step(std::vector<nn::Parameter<float>>& params, nn::Gradients<float>& grads, double lr);
    const SgdOptions& options() const noexcept { return options_; }
    std::vector<std::vector<float>>& velocity() noexcept { return velocity_; }
    const std::vector<std::vector<float>>& velocity() const noexcept { return velocity_; }
    void reset() { velocity_.clear(); }

private:
    SgdOptions options_;
    std::vector<std::vector<float>> velocity_;
};

// lr0 * (1 - epoch / total)^0.9
double poly_lr(double lr0, int epoch, int total_epochs, double exponent = 0.9);

// One epoch of draws: every id repeated by its multiplicity, shuffled with a
// stream derived from (seed, epoch).
std::vector<std::string> epoch_draws(const SampleWeightTable& weights, std::uint64_t seed, std::int64_t epoch);

// Normalized training cases, loaded lazily from a manifest or added in memory.
class CaseStore {
public:
    CaseStore() = default;
    CaseStore(io::Manifest manifest, preprocess::NormalizationStats stats,
              preprocess::NormalizationScope scope = preprocess::NormalizationScope::Corpus);

    void add(const Study& normalized);
    bool contains(const std::string& id) const;
    std::vector<std::string> ids() const;

    // DataError naming the id when the study is unknown or its files are unreadable.
    const Study& study(const std::string& id) const;
    const augment::TrainingSample& sample(const std::string& id) const;
    const std::vector<std::uint32_t>& foreground(const std::string& id) const;

private:
    struct Entry {
        Study study;
        augment::TrainingSample sample;
        std::vector<std::uint32_t> foreground;
    };
    const Entry& entry(const std::string& id) const;

    std::optional<io::Manifest> manifest_;
    preprocess::NormalizationStats stats_{};
    preprocess::NormalizationScope scope_ = preprocess::NormalizationScope::Corpus;
    mutable std::map<std::string, Entry> cache_;
};

struct TrainState {
    explicit TrainState(nn::NetworkConfig config, std::uint64_t seed = 0);

    nn::UNet<float> net;
    Sgd optimizer;
    std::int64_t epoch = 0;     // epochs completed across all training calls
    std::uint64_t seed = 0;
    SampleWeightTable weights;  // table used by the last training call
    std::vector<std::string> lineage;
};

struct EpochLog {
    std::string round;
    std::int64_t epoch = 0;  // global epoch index
    int local_epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double ce = 0.0;
    double dice_term = 0.0;
    std::size_t samples = 0;
};

struct TrainOptions {
    std::string run_name = "train";
    int epochs = 1;
    double lr = 1e-2;
    int batch_size = 2;
    augment::AugmentationPolicy policy = augment::AugmentationPolicy::type1();
    double foreground_fraction = 1.0 / 3.0;
    SgdOptions sgd{};
    bool reset_optimizer = true;
    std::function<void(const EpochLog&)> on_epoch;
    // Called every `checkpoint_every` epochs (0 = never) with the state so far.
    int checkpoint_every = 0;
    std::function<void(const TrainState&)> on_checkpoint;

    void validate() const;
};

// Extracts one training patch for `id` on its `occurrence`-th draw in `epoch`.
augment::TrainingSample draw_patch(const CaseStore& store, const std::string& id, const nn::NetworkConfig& config,
                                   const TrainOptions& options, std::uint64_t seed, std::int64_t epoch,
                                   std::int64_t occurrence);

TrainState train(TrainState state, const CaseStore& store, const SampleWeightTable& weights,
                 const TrainOptions& options);

PerSampleDice evaluate_per_sample(const nn::UNet<float>& net, const CaseStore& store,
                                  std::span<const std::string> ids, double overlap = 0.5);

// Checkpoint directory: network.yaml, weights.bin, optimizer.bin,
// sample_weights.tsv, dice.tsv, state.yaml, run_config.yaml.
struct CheckpointInfo {
    std::string round_name;
    int round_index = 0;
    PerSampleDice dice;
    std::string run_config_yaml;
};

void save_checkpoint(const TrainState& state, const CheckpointInfo& info, const std::string& dir);

struct LoadedCheckpoint {
    TrainState state;
    CheckpointInfo info;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

std::string weights_to_tsv(const SampleWeightTable& table);
SampleWeightTable weights_from_tsv(const std::string& text);
std::string dice_to_tsv(const PerSampleDice& dice);
PerSampleDice dice_from_tsv(const std::string& text);

std::string network_config_to_yaml(const nn::NetworkConfig& config);
nn::NetworkConfig network_config_from_yaml(const std::string& text);

}  // namespace lesionseg::train
