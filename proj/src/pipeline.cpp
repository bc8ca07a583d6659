#include "lesionseg/pipeline.hpp"

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lesionseg/errors.hpp"
#include "lesionseg/io.hpp"
#include "lesionseg/rng.hpp"

namespace lesionseg {

namespace fs = std::filesystem;

TrainingExecutor::TrainingExecutor(const train::CaseStore& store, RunConfig config, std::string checkpoint_root,
                                   std::string log_path)
    : store_(store), config_(std::move(config)), checkpoint_root_(std::move(checkpoint_root)),
      log_path_(std::move(log_path)) {}

std::string TrainingExecutor::round_dir(const std::string& round_name) const {
    char prefix[16];
    std::snprintf(prefix, sizeof prefix, "%02d_", indices_.at(round_name));
    return (fs::path(checkpoint_root_) / (prefix + round_name)).string();
}

void TrainingExecutor::train_round(const boosting::BoostRound& round, int index, const SampleWeightTable& weights) {
    std::unique_ptr<train::TrainState> state;
    if (round.init_from) {
        state = std::make_unique<train::TrainState>(this->state(*round.init_from));
    } else {
        state = std::make_unique<train::TrainState>(config_.network, derive_seed(config_.seed, hash_string(round.name)));
    }
    state->seed = derive_seed(config_.seed, hash_string(round.name), 1);
    indices_[round.name] = index;

    train::TrainOptions opts = config_.train_options();
    opts.run_name = round.name;
    opts.epochs = round.epochs;
    opts.lr = round.lr;
    opts.policy = augment::AugmentationPolicy::by_name(round.augmentation);
    opts.on_epoch = [this](const train::EpochLog& log) {
        if (!log_path_.empty()) append_epoch_log(log_path_, log);
        if (on_epoch) on_epoch(log);
    };
    const std::string config_yaml = run_config_to_yaml(config_);
    if (!checkpoint_root_.empty() && opts.checkpoint_every > 0) {
        const std::string dir = round_dir(round.name);
        opts.on_checkpoint = [dir, index, name = round.name, config_yaml](const train::TrainState& s) {
            train::save_checkpoint(s, {name, index, {}, config_yaml}, dir);
        };
    }
    *state = train::train(std::move(*state), store_, weights, opts);
    if (!checkpoint_root_.empty())
        train::save_checkpoint(*state, {round.name, index, {}, config_yaml}, round_dir(round.name));
    states_[round.name] = std::move(state);
}

PerSampleDice TrainingExecutor::evaluate(const std::string& round_name, std::span<const std::string> ids) {
    const train::TrainState& s = state(round_name);
    PerSampleDice dice = train::evaluate_per_sample(s.net, store_, ids, config_.overlap);
    if (!checkpoint_root_.empty())
        train::save_checkpoint(s, {round_name, indices_.at(round_name), dice, run_config_to_yaml(config_)},
                               round_dir(round_name));
    return dice;
}

const train::TrainState& TrainingExecutor::state(const std::string& round_name) const {
    auto it = states_.find(round_name);
    if (it == states_.end()) throw DataError("no trained model for round '" + round_name + "'");
    return *it->second;
}

void append_epoch_log(const std::string& path, const train::EpochLog& log) {
    nlohmann::json j{{"round", log.round},   {"epoch", log.epoch}, {"local_epoch", log.local_epoch},
                     {"lr", log.lr},         {"loss", log.loss},   {"ce", log.ce},
                     {"dice_term", log.dice_term}, {"samples", log.samples}};
    std::ofstream f(path, std::ios::app);
    if (!f) throw IoError("cannot append to " + path);
    f << j.dump() << '\n';
}

boosting::PartitionMap make_partitions(const RunConfig& config, const io::Manifest& manifest) {
    const std::vector<std::string> ids = io::positive_ids(manifest);
    if (ids.empty()) throw DataError("the manifest has no positive studies");
    std::vector<std::size_t> sizes = config.split.sizes;
    if (sizes.empty()) {
        sizes.assign(config.split.names.size(), 0);
        sizes[0] = ids.size();
    }
    boosting::PartitionMap out;
    for (auto& p : io::split_dataset(ids, config.seed, sizes, config.split.names)) out[p.name] = std::move(p);
    return out;
}

preprocess::NormalizationStats resolve_stats(const RunConfig& config, const io::Manifest& manifest,
                                             const boosting::PartitionMap& partitions, const std::string& write_to) {
    if (!config.paths.stats.empty() && fs::exists(config.paths.stats)) {
        auto stats = preprocess::load_stats(config.paths.stats);
        if (!write_to.empty()) preprocess::save_stats(stats, write_to);
        return stats;
    }
    const auto& first = partitions.at(config.split.names.front());
    std::vector<Study> studies;
    for (const auto& id : first.study_ids) studies.push_back(io::load_study(manifest, manifest.find(id)));
    auto stats = preprocess::compute_foreground_stats(studies);
    if (!write_to.empty()) preprocess::save_stats(stats, write_to);
    return stats;
}

BoostRun run_boost(const RunConfig& config, const std::string& out_dir,
                   std::function<void(const train::EpochLog&)> on_epoch) {
    config.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    if (config.paths.manifest.empty()) throw ConfigError("paths.manifest is required");

    const io::Manifest manifest = io::load_manifest(config.paths.manifest);
    boosting::PartitionMap partitions = make_partitions(config, manifest);
    const auto stats = resolve_stats(config, manifest, partitions, (fs::path(out_dir) / "stats.yaml").string());
    train::CaseStore store(manifest, stats, config.normalization);
    save_run_config(config, (fs::path(out_dir) / "run_config.yaml").string());

    std::vector<boosting::BoostRound> rounds = config.rounds;
    if (rounds.empty()) {
        boosting::BoostRound r;
        r.name = "Model1";
        r.added_partitions = {config.split.names.front()};
        r.epochs = config.training.epochs;
        r.lr = config.training.lr;
        r.augmentation = config.training.augmentation;
        rounds.push_back(r);
    }

    BoostRun run;
    run.audit_path = (fs::path(out_dir) / "audit.jsonl").string();
    const std::string log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    fs::remove(run.audit_path, ec);
    fs::remove(log_path, ec);
    TrainingExecutor executor(store, config, (fs::path(out_dir) / "rounds").string(), log_path);
    executor.on_epoch = std::move(on_epoch);
    boosting::AuditLog log(run.audit_path);
    run.result = boosting::run_schedule(rounds, partitions, executor, &log);

    std::vector<std::string> columns;
    for (const auto& r : rounds)
        for (const auto& d : r.derive) {
            columns.push_back(d.low_name);
            columns.push_back(d.rest_name);
        }
    if (columns.empty()) columns = config.split.names;
    const auto audit = boosting::parse_audit(io::read_text_file(run.audit_path));
    io::write_text_file((fs::path(out_dir) / "extras.txt").string(),
                        boosting::format_extras_table(audit, boosting::extras_table(audit, columns), columns));
    return run;
}

void write_reproducibility_record(const std::string& out_dir, const std::string& command,
                                  const std::vector<std::string>& args, std::uint64_t seed,
                                  const std::string& config_yaml) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "schema_version" << YAML::Value << 1;
    out << YAML::Key << "tool" << YAML::Value << "lesionseg";
    out << YAML::Key << "version" << YAML::Value << LESIONSEG_VERSION;
    out << YAML::Key << "command" << YAML::Value << command;
    out << YAML::Key << "args" << YAML::Value << YAML::Flow << args;
    out << YAML::Key << "seed" << YAML::Value << seed;
    if (!config_yaml.empty()) out << YAML::Key << "config" << YAML::Value << YAML::Literal << config_yaml;
    out << YAML::EndMap;
    io::write_text_file((fs::path(out_dir) / "reproducibility.yaml").string(), std::string(out.c_str()) + "\n");
}

}  // namespace lesionseg
