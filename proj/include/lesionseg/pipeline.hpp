#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>

#include "lesionseg/boosting.hpp"
#include "lesionseg/config.hpp"
#include "lesionseg/trainer.hpp"

namespace lesionseg {

// Trains and scores boosting rounds with the real network.
class TrainingExecutor : public boosting::RoundExecutor {
public:
    // `checkpoint_root` empty = keep models in memory only. `log_path` empty = no training log.
    TrainingExecutor(const train::CaseStore& store, RunConfig config, std::string checkpoint_root = "",
                     std::string log_path = "");

    void train_round(const boosting::BoostRound& round, int index, const SampleWeightTable& weights) override;
    PerSampleDice evaluate(const std::string& round_name, std::span<const std::string> ids) override;

    const train::TrainState& state(const std::string& round_name) const;
    std::function<void(const train::EpochLog&)> on_epoch;

private:
    std::string round_dir(const std::string& round_name) const;

    const train::CaseStore& store_;
    RunConfig config_;
    std::string checkpoint_root_;
    std::string log_path_;
    std::map<std::string, std::unique_ptr<train::TrainState>> states_;
    std::map<std::string, int> indices_;
};

// Appends one JSON line per epoch.
void append_epoch_log(const std::string& path, const train::EpochLog& log);

// Positive ids of the manifest split per config.split.
boosting::PartitionMap make_partitions(const RunConfig& config, const io::Manifest& manifest);

// Loads the stats file named in the config, or computes it from the studies
// of the first partition and writes it to `write_to` (if non-empty).
preprocess::NormalizationStats resolve_stats(const RunConfig& config, const io::Manifest& manifest,
                                             const boosting::PartitionMap& partitions, const std::string& write_to);

struct BoostRun {
    boosting::ScheduleResult result;
    std::string audit_path;
};

// Full boosting run into `out_dir`: stats.yaml, audit.jsonl, train_log.jsonl,
// rounds/<index>_<name>/ checkpoints, extras.txt.
BoostRun run_boost(const RunConfig& config, const std::string& out_dir,
                   std::function<void(const train::EpochLog&)> on_epoch = {});

// Writes <out_dir>/reproducibility.yaml.
void write_reproducibility_record(const std::string& out_dir, const std::string& command,
                                  const std::vector<std::string>& args, std::uint64_t seed,
                                  const std::string& config_yaml = "");

}  // namespace lesionseg
