#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lesionseg/boosting.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/network.hpp"
#include "lesionseg/preprocess.hpp"
#include "lesionseg/trainer.hpp"

namespace lesionseg {

inline constexpr int kRunConfigSchemaVersion = 1;

struct TrainingSettings {
    std::string augmentation = "Type1";
    double lr = 1e-2;
    int epochs = 50;
    int batch_size = 2;
    double foreground_fraction = 1.0 / 3.0;
    train::SgdOptions sgd{};
    int checkpoint_every = 0;
};

struct SplitSettings {
    std::vector<std::string> names{"A", "B"};
    std::vector<std::size_t> sizes;  // empty = everything in the first partition
};

struct PathSettings {
    std::string manifest;
    std::string stats;   // optional; computed from the training partition when empty or missing
    std::string output;  // default output directory
};

// Everything a run needs. Relative paths resolve against the config file's directory.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string network_preset = "toy";  // toy | paper
    nn::NetworkConfig network = nn::NetworkConfig::toy();
    TrainingSettings training{};
    preprocess::NormalizationScope normalization = preprocess::NormalizationScope::Corpus;
    double overlap = 0.5;
    metrics::Connectivity connectivity = metrics::Connectivity::Eighteen;
    PathSettings paths{};
    SplitSettings split{};
    std::vector<boosting::BoostRound> rounds;

    void validate() const;
    train::TrainOptions train_options() const;
};

std::string run_config_to_yaml(const RunConfig& config);
// `base_dir` resolves relative paths; empty leaves them as written.
RunConfig run_config_from_yaml(const std::string& text, const std::string& base_dir = "");
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);

}  // namespace lesionseg
