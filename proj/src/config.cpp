#include "lesionseg/config.hpp"

#include <yaml-cpp/yaml.h>

#include <filesystem>

#include "lesionseg/augment.hpp"
#include "lesionseg/errors.hpp"
#include "lesionseg/io.hpp"

namespace lesionseg {

namespace fs = std::filesystem;

void RunConfig::validate() const {
    network.validate();
    if (!(training.lr > 0.0)) throw ConfigError("training.lr must be > 0");
    if (training.epochs < 1) throw ConfigError("training.epochs must be >= 1");
    if (training.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
    augment::AugmentationPolicy::by_name(training.augmentation).validate();
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("inference.overlap must lie in [0, 1)");
    if (!split.sizes.empty() && split.sizes.size() != split.names.size())
        throw ConfigError("split.sizes and split.names must have the same length");
    if (split.names.empty()) throw ConfigError("split.names must not be empty");
    if (!rounds.empty()) {
        boosting::PartitionMap initial;
        for (const auto& n : split.names) initial[n] = DatasetPartition{n, {}};
        boosting::validate_schedule(rounds, initial);
        for (const auto& r : rounds) augment::AugmentationPolicy::by_name(r.augmentation);
    }
}

train::TrainOptions RunConfig::train_options() const {
    train::TrainOptions o;
    o.epochs = training.epochs;
    o.lr = training.lr;
    o.batch_size = training.batch_size;
    o.policy = augment::AugmentationPolicy::by_name(training.augmentation);
    o.foreground_fraction = training.foreground_fraction;
    o.sgd = training.sgd;
    o.checkpoint_every = training.checkpoint_every;
    return o;
}

namespace {

template <typename V>
V get_or(const YAML::Node& node, const char* key, V fallback) {
    if (!node || !node[key] || node[key].IsNull()) return fallback;
    try {
        return node[key].as<V>();
    } catch (const YAML::Exception&) {
        throw ConfigError(std::string("bad value for '") + key + "'");
    }
}

template <typename V>
V require(const YAML::Node& node, const char* key) {
    if (!node || !node[key]) throw ConfigError(std::string("missing key '") + key + "'");
    return get_or<V>(node, key, V{});
}

void emit_rule_fields(YAML::Emitter& out, const boosting::SelectionRule& r, bool with_sources) {
    out << YAML::Key << "kind" << YAML::Value << boosting::to_string(r.kind);
    if (r.kind == boosting::SelectionKind::BottomK) out << YAML::Key << "k" << YAML::Value << r.k;
    if (r.kind == boosting::SelectionKind::BelowThreshold)
        out << YAML::Key << "threshold" << YAML::Value << r.threshold;
    out << YAML::Key << "exclude_zero" << YAML::Value << r.exclude_zero;
    if (with_sources) out << YAML::Key << "from" << YAML::Value << YAML::Flow << r.source_partitions;
}

boosting::SelectionRule parse_rule(const YAML::Node& n, bool with_sources) {
    boosting::SelectionRule r;
    r.kind = boosting::parse_selection_kind(require<std::string>(n, "kind"));
    r.k = get_or<int>(n, "k", r.k);
    r.threshold = get_or<double>(n, "threshold", r.threshold);
    r.exclude_zero = get_or<bool>(n, "exclude_zero", false);
    if (with_sources) r.source_partitions = get_or<std::vector<std::string>>(n, "from", {});
    if (r.kind == boosting::SelectionKind::BottomK && !n["k"]) throw ConfigError("bottom_k rule needs 'k'");
    if (r.kind == boosting::SelectionKind::BelowThreshold && !n["threshold"])
        throw ConfigError("below_threshold rule needs 'threshold'");
    return r;
}

std::string resolve(const std::string& base, const std::string& path) {
    if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base) / path).lexically_normal().string();
}

}  // namespace

std::string run_config_to_yaml(const RunConfig& c) {
    YAML::Emitter out;
    out.SetDoublePrecision(17);
    out << YAML::BeginMap;
    out << YAML::Key << "schema_version" << YAML::Value << kRunConfigSchemaVersion;
    out << YAML::Key << "seed" << YAML::Value << c.seed;

    out << YAML::Key << "network" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "preset" << YAML::Value << c.network_preset;
    out << YAML::Key << "num_encoder_stages" << YAML::Value << c.network.num_encoder_stages;
    out << YAML::Key << "encoder_convs_per_stage" << YAML::Value << YAML::Flow << c.network.encoder_convs_per_stage;
    out << YAML::Key << "decoder_convs_per_stage" << YAML::Value << YAML::Flow << c.network.decoder_convs_per_stage;
    out << YAML::Key << "base_features" << YAML::Value << c.network.base_features;
    out << YAML::Key << "max_features" << YAML::Value << c.network.max_features;
    out << YAML::Key << "patch_size" << YAML::Value << YAML::Flow
        << std::vector<std::int64_t>(c.network.patch_size.begin(), c.network.patch_size.end());
    out << YAML::Key << "deep_supervision" << YAML::Value << c.network.deep_supervision;
    out << YAML::EndMap;

    const auto& t = c.training;
    out << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "augmentation" << YAML::Value << t.augmentation;
    out << YAML::Key << "lr" << YAML::Value << t.lr;
    out << YAML::Key << "epochs" << YAML::Value << t.epochs;
    out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
    out << YAML::Key << "momentum" << YAML::Value << t.sgd.momentum;
    out << YAML::Key << "nesterov" << YAML::Value << t.sgd.nesterov;
    out << YAML::Key << "weight_decay" << YAML::Value << t.sgd.weight_decay;
    out << YAML::Key << "grad_clip" << YAML::Value << t.sgd.grad_clip;
    out << YAML::Key << "foreground_fraction" << YAML::Value << t.foreground_fraction;
    out << YAML::Key << "checkpoint_every" << YAML::Value << t.checkpoint_every;
    out << YAML::EndMap;

    out << YAML::Key << "normalization" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "scope" << YAML::Value
        << (c.normalization == preprocess::NormalizationScope::Corpus ? "corpus" : "per_case");
    out << YAML::EndMap;
    out << YAML::Key << "inference" << YAML::Value << YAML::BeginMap << YAML::Key << "overlap" << YAML::Value
        << c.overlap << YAML::EndMap;
    out << YAML::Key << "metrics" << YAML::Value << YAML::BeginMap << YAML::Key << "connectivity" << YAML::Value
        << static_cast<int>(c.connectivity) << YAML::EndMap;

    out << YAML::Key << "paths" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "manifest" << YAML::Value << c.paths.manifest;
    out << YAML::Key << "stats" << YAML::Value << c.paths.stats;
    out << YAML::Key << "output" << YAML::Value << c.paths.output;
    out << YAML::EndMap;

    out << YAML::Key << "split" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "names" << YAML::Value << YAML::Flow << c.split.names;
    out << YAML::Key << "sizes" << YAML::Value << YAML::Flow << c.split.sizes;
    out << YAML::EndMap;

    out << YAML::Key << "boosting" << YAML::Value << YAML::BeginMap << YAML::Key << "rounds" << YAML::Value
        << YAML::BeginSeq;
    for (const auto& r : c.rounds) {
        out << YAML::BeginMap;
        out << YAML::Key << "name" << YAML::Value << r.name;
        out << YAML::Key << "init_from" << YAML::Value;
        if (r.init_from) out << *r.init_from;
        else out << YAML::Null;
        out << YAML::Key << "add" << YAML::Value << YAML::Flow << r.added_partitions;
        out << YAML::Key << "epochs" << YAML::Value << r.epochs;
        out << YAML::Key << "augmentation" << YAML::Value << r.augmentation;
        out << YAML::Key << "lr" << YAML::Value << r.lr;
        out << YAML::Key << "select" << YAML::Value << YAML::BeginSeq;
        for (const auto& s : r.selections) {
            out << YAML::Flow << YAML::BeginMap;
            emit_rule_fields(out, s, true);
            out << YAML::EndMap;
        }
        out << YAML::EndSeq;
        out << YAML::Key << "derive" << YAML::Value << YAML::BeginSeq;
        for (const auto& d : r.derive) {
            out << YAML::Flow << YAML::BeginMap;
            out << YAML::Key << "source" << YAML::Value << d.source;
            out << YAML::Key << "low" << YAML::Value << d.low_name;
            out << YAML::Key << "rest" << YAML::Value << d.rest_name;
            emit_rule_fields(out, d.rule, false);
            out << YAML::EndMap;
        }
        out << YAML::EndSeq;
        out << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

RunConfig run_config_from_yaml(const std::string& text, const std::string& base_dir) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("run config is not valid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw ConfigError("run config must be a mapping");
    const int version = require<int>(root, "schema_version");
    if (version != kRunConfigSchemaVersion)
        throw ConfigError("unsupported run config schema_version " + std::to_string(version));

    RunConfig c;
    c.seed = require<std::uint64_t>(root, "seed");

    if (const auto n = root["network"]) {
        c.network_preset = get_or<std::string>(n, "preset", "toy");
        if (c.network_preset == "toy") c.network = nn::NetworkConfig::toy();
        else if (c.network_preset == "paper") c.network = nn::NetworkConfig::paper();
        else throw ConfigError("network.preset must be 'toy' or 'paper'");
        auto& net = c.network;
        net.num_encoder_stages = get_or<int>(n, "num_encoder_stages", net.num_encoder_stages);
        net.encoder_convs_per_stage = get_or(n, "encoder_convs_per_stage", net.encoder_convs_per_stage);
        net.decoder_convs_per_stage = get_or(n, "decoder_convs_per_stage", net.decoder_convs_per_stage);
        net.base_features = get_or<int>(n, "base_features", net.base_features);
        net.max_features = get_or<int>(n, "max_features", net.max_features);
        if (n["patch_size"]) {
            const auto p = get_or<std::vector<std::int64_t>>(n, "patch_size", {});
            if (p.size() != 3) throw ConfigError("network.patch_size needs three entries");
            net.patch_size = {p[0], p[1], p[2]};
        }
        net.deep_supervision = get_or<bool>(n, "deep_supervision", net.deep_supervision);
    }

    if (const auto t = root["training"]) {
        auto& s = c.training;
        s.augmentation = get_or<std::string>(t, "augmentation", s.augmentation);
        s.lr = get_or<double>(t, "lr", s.lr);
        s.epochs = get_or<int>(t, "epochs", s.epochs);
        s.batch_size = get_or<int>(t, "batch_size", s.batch_size);
        s.sgd.momentum = get_or<double>(t, "momentum", s.sgd.momentum);
        s.sgd.nesterov = get_or<bool>(t, "nesterov", s.sgd.nesterov);
        s.sgd.weight_decay = get_or<double>(t, "weight_decay", s.sgd.weight_decay);
        s.sgd.grad_clip = get_or<double>(t, "grad_clip", s.sgd.grad_clip);
        s.foreground_fraction = get_or<double>(t, "foreground_fraction", s.foreground_fraction);
        s.checkpoint_every = get_or<int>(t, "checkpoint_every", s.checkpoint_every);
    }
    if (const auto n = root["normalization"])
        c.normalization = preprocess::parse_scope(get_or<std::string>(n, "scope", "corpus"));
    if (const auto n = root["inference"]) c.overlap = get_or<double>(n, "overlap", c.overlap);
    if (const auto n = root["metrics"])
        c.connectivity = metrics::parse_connectivity(get_or<int>(n, "connectivity", 18));
    if (const auto p = root["paths"]) {
        c.paths.manifest = resolve(base_dir, get_or<std::string>(p, "manifest", ""));
        c.paths.stats = resolve(base_dir, get_or<std::string>(p, "stats", ""));
        c.paths.output = resolve(base_dir, get_or<std::string>(p, "output", ""));
    }
    if (const auto s = root["split"]) {
        c.split.names = get_or(s, "names", c.split.names);
        c.split.sizes = get_or(s, "sizes", c.split.sizes);
    }
    if (const auto b = root["boosting"]) {
        for (const auto& rn : b["rounds"]) {
            boosting::BoostRound r;
            r.name = require<std::string>(rn, "name");
            if (rn["init_from"] && !rn["init_from"].IsNull()) r.init_from = rn["init_from"].as<std::string>();
            r.added_partitions = get_or<std::vector<std::string>>(rn, "add", {});
            r.epochs = get_or<int>(rn, "epochs", c.training.epochs);
            r.augmentation = get_or<std::string>(rn, "augmentation", c.training.augmentation);
            r.lr = get_or<double>(rn, "lr", c.training.lr);
            for (const auto& sn : rn["select"]) r.selections.push_back(parse_rule(sn, true));
            for (const auto& dn : rn["derive"])
                r.derive.push_back({require<std::string>(dn, "source"), require<std::string>(dn, "low"),
                                    require<std::string>(dn, "rest"), parse_rule(dn, false)});
            c.rounds.push_back(std::move(r));
        }
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    const std::string base = fs::absolute(fs::path(path)).parent_path().string();
    return run_config_from_yaml(io::read_text_file(path), base);
}

void save_run_config(const RunConfig& config, const std::string& path) {
    io::write_text_file(path, run_config_to_yaml(config));
}

}  // namespace lesionseg
