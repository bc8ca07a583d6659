#include "lesionseg/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "lesionseg/boosting.hpp"
#include "lesionseg/config.hpp"
#include "lesionseg/errors.hpp"
#include "lesionseg/inference.hpp"
#include "lesionseg/io.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/pipeline.hpp"
#include "lesionseg/preprocess.hpp"
#include "lesionseg/render.hpp"
#include "lesionseg/synth.hpp"
#include "lesionseg/trainer.hpp"

namespace lesionseg::cli {

namespace fs = std::filesystem;

namespace {

Index3 parse_index3(const std::string& text, const char* flag) {
    std::vector<std::int64_t> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoll(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(std::string(flag) + ": '" + text + "' is not a list of integers");
        }
    }
    if (v.size() != 3) throw ConfigError(std::string(flag) + " needs three comma-separated values");
    return {v[0], v[1], v[2]};
}

Vec3 parse_vec3(const std::string& text, const char* flag) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            v.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError(std::string(flag) + ": '" + text + "' is not a list of numbers");
        }
    }
    if (v.size() != 3) throw ConfigError(std::string(flag) + " needs three comma-separated values");
    return {v[0], v[1], v[2]};
}

// --out, else $LESIONSEG_OUTPUT_ROOT/<command>, else a ConfigError.
std::string output_dir(const std::string& flag, const std::string& command, const std::string& fallback = "") {
    if (!flag.empty()) return flag;
    if (!fallback.empty()) return fallback;
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return (fs::path(root) / command).string();
    throw ConfigError(command + ": --out is required (or set " + std::string(kOutputRootEnv) + ")");
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

std::string strip_nifti_ext(const std::string& name) {
    for (const char* ext : {".nii.gz", ".nii"}) {
        const std::string e(ext);
        if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0)
            return name.substr(0, name.size() - e.size());
    }
    return {};
}

// Study id from a mask file name: the extension and a trailing role suffix are dropped.
std::string id_from_mask_file(const std::string& name) {
    std::string stem = strip_nifti_ext(name);
    for (const char* suffix : {"_pred", "_label", "_gt", "_seg", "_mask"}) {
        const std::string s(suffix);
        if (stem.size() > s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0)
            return stem.substr(0, stem.size() - s.size());
    }
    return stem;
}

std::map<std::string, std::string> scan_masks(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        const std::string stem = strip_nifti_ext(name);
        // image volumes and probability maps can share the directory
        if (stem.empty() || stem.ends_with("_prob") || stem.ends_with("_ct") || stem.ends_with("_pet")) continue;
        const std::string id = id_from_mask_file(name);
        if (!out.emplace(id, e.path().string()).second) throw DataError("two mask files map to id '" + id + "' in " + dir);
    }
    return out;
}

std::string find_stats_near(const std::string& checkpoint) {
    const fs::path c = fs::absolute(checkpoint);
    for (const fs::path& p : {c / "stats.yaml", c.parent_path() / "stats.yaml", c.parent_path().parent_path() / "stats.yaml"})
        if (fs::exists(p)) return p.string();
    return {};
}

struct Context {
    std::vector<std::string> args;
    std::ostream& out;
    std::ostream& err;
};

// ---- stats

struct StatsArgs {
    std::string manifest, config, partition, out;
};

void cmd_stats(const StatsArgs& a, Context& ctx) {
    io::Manifest manifest;
    std::vector<std::string> ids;
    std::uint64_t seed = 0;
    std::string config_yaml;
    if (!a.config.empty()) {
        const RunConfig config = load_run_config(a.config);
        seed = config.seed;
        config_yaml = run_config_to_yaml(config);
        manifest = io::load_manifest(a.manifest.empty() ? config.paths.manifest : a.manifest);
        const auto parts = make_partitions(config, manifest);
        const std::string name = a.partition.empty() ? config.split.names.front() : a.partition;
        auto it = parts.find(name);
        if (it == parts.end()) throw ConfigError("unknown partition '" + name + "'");
        ids = it->second.study_ids;
    } else {
        if (a.manifest.empty()) throw ConfigError("stats: --manifest or --config is required");
        if (!a.partition.empty()) throw ConfigError("stats: --partition needs --config");
        manifest = io::load_manifest(a.manifest);
        ids = io::positive_ids(manifest);
    }
    if (ids.empty()) throw DataError("no labelled studies to compute statistics from");
    std::vector<Study> studies;
    for (const auto& id : ids) studies.push_back(io::load_study(manifest, manifest.find(id)));
    const auto stats = preprocess::compute_foreground_stats(studies);

    const std::string path = a.out.empty() ? (fs::path(output_dir("", "stats")) / "stats.yaml").string() : a.out;
    const std::string dir = fs::absolute(path).parent_path().string();
    ensure_dir(dir);
    preprocess::save_stats(stats, path);
    write_reproducibility_record(dir, "stats", ctx.args, seed, config_yaml);
    ctx.out << preprocess::stats_to_yaml(stats);
    ctx.out << "# " << ids.size() << " studies -> " << path << "\n";
}

// ---- synth

struct SynthArgs {
    std::uint64_t seed = 0;
    int n = 10;
    std::string shape = "32,32,32";
    std::string spacing = "2,2,2";
    std::string difficulty = "bimodal";
    int min_lesions = 1, max_lesions = 3;
    double psma_fraction = 0.4;
    double negative_fraction = 0.0;
    std::string prefix = "syn_";
    std::string out;
};

void cmd_synth(const SynthArgs& a, Context& ctx) {
    synth::CorpusParams p;
    p.seed = a.seed;
    p.n_studies = a.n;
    p.shape = parse_index3(a.shape, "--shape");
    p.spacing = parse_vec3(a.spacing, "--spacing");
    p.difficulty = synth::parse_difficulty(a.difficulty);
    p.min_lesions = a.min_lesions;
    p.max_lesions = a.max_lesions;
    p.psma_fraction = a.psma_fraction;
    p.negative_fraction = a.negative_fraction;
    p.id_prefix = a.prefix;
    const std::string dir = output_dir(a.out, "synth");
    const io::Manifest m = synth::generate_corpus(p, dir);
    write_reproducibility_record(dir, "synth", ctx.args, a.seed);
    ctx.out << "wrote " << m.entries.size() << " studies to " << (fs::path(dir) / "manifest.tsv").string() << "\n";
}

// ---- train

struct TrainArgs {
    std::string config, manifest, out, resume;
    int epochs = 0;
    std::optional<std::uint64_t> seed;
};

void cmd_train(const TrainArgs& a, Context& ctx) {
    RunConfig config = load_run_config(a.config);
    if (a.seed) config.seed = *a.seed;
    if (a.epochs > 0) config.training.epochs = a.epochs;
    if (!a.manifest.empty()) config.paths.manifest = a.manifest;
    config.validate();
    const std::string dir = output_dir(a.out, "train", config.paths.output);
    ensure_dir(dir);

    const io::Manifest manifest = io::load_manifest(config.paths.manifest);
    const auto parts = make_partitions(config, manifest);
    const auto stats = resolve_stats(config, manifest, parts, (fs::path(dir) / "stats.yaml").string());
    train::CaseStore store(manifest, stats, config.normalization);
    save_run_config(config, (fs::path(dir) / "run_config.yaml").string());
    write_reproducibility_record(dir, "train", ctx.args, config.seed, run_config_to_yaml(config));

    train::TrainOptions opts = config.train_options();
    opts.run_name = "train";
    const std::string log_path = (fs::path(dir) / "train_log.jsonl").string();
    const std::string ckpt = (fs::path(dir) / "checkpoint").string();
    const std::string config_yaml = run_config_to_yaml(config);
    opts.on_epoch = [&](const train::EpochLog& log) {
        append_epoch_log(log_path, log);
        ctx.out << "epoch " << log.epoch << " loss " << log.loss << " lr " << log.lr << "\n";
    };
    if (opts.checkpoint_every > 0)
        opts.on_checkpoint = [&](const train::TrainState& s) {
            train::save_checkpoint(s, {"train", 0, {}, config_yaml}, ckpt);
        };

    SampleWeightTable weights;
    std::optional<train::TrainState> state;
    if (!a.resume.empty()) {
        auto loaded = train::load_checkpoint(a.resume);
        if (!(loaded.state.net.config() == config.network))
            throw ConfigError("checkpoint network layout differs from the config");
        weights = loaded.state.weights;
        state.emplace(std::move(loaded.state));
        opts.reset_optimizer = false;
    } else {
        std::error_code ec;
        fs::remove(log_path, ec);
        state.emplace(config.network, derive_seed(config.seed, hash_string("train")));
        state->seed = derive_seed(config.seed, hash_string("train"), 1);
    }
    if (weights.size() == 0)
        for (const auto& id : parts.at(config.split.names.front()).study_ids) weights.add(id);

    train::TrainState trained = train::train(std::move(*state), store, weights, opts);
    const auto ids = weights.ids();
    const PerSampleDice dice = train::evaluate_per_sample(trained.net, store, ids, config.overlap);
    train::save_checkpoint(trained, {"train", 0, dice, config_yaml}, ckpt);
    double mean = 0.0;
    for (const auto& [id, d] : dice) mean += d;
    ctx.out << "mean training dice " << mean / static_cast<double>(std::max<std::size_t>(1, dice.size())) << "\n";
    ctx.out << "checkpoint " << ckpt << "\n";
}

// ---- boost

struct BoostRunArgs {
    std::string config, manifest, out;
    std::optional<std::uint64_t> seed;
};

void cmd_boost_run(const BoostRunArgs& a, Context& ctx) {
    RunConfig config = load_run_config(a.config);
    if (a.seed) config.seed = *a.seed;
    if (!a.manifest.empty()) config.paths.manifest = a.manifest;
    config.validate();
    const std::string dir = output_dir(a.out, "boost", config.paths.output);
    ensure_dir(dir);
    write_reproducibility_record(dir, "boost run", ctx.args, config.seed, run_config_to_yaml(config));
    const BoostRun run = run_boost(config, dir, [&](const train::EpochLog& log) {
        ctx.out << log.round << " epoch " << log.local_epoch << " loss " << log.loss << "\n";
    });
    for (const auto& r : run.result.rounds) {
        double mean = 0.0;
        for (const auto& [id, d] : r.dice) mean += d;
        ctx.out << r.name << ": pool " << r.weights.size() << " total " << r.weights.total_samples()
                << " mean dice " << mean / static_cast<double>(std::max<std::size_t>(1, r.dice.size())) << "\n";
    }
    ctx.out << io::read_text_file((fs::path(dir) / "extras.txt").string());
}

struct AuditArgs {
    std::string audit, out;
    std::vector<std::string> columns;
};

void cmd_audit(const AuditArgs& a, Context& ctx) {
    std::string path = a.audit;
    if (fs::is_directory(path)) path = (fs::path(path) / "audit.jsonl").string();
    const auto audit = boosting::parse_audit(io::read_text_file(path));
    const auto replayed = boosting::replay_audit(audit);  // DataError on any mismatch
    std::vector<std::string> columns = a.columns;
    if (columns.empty())
        for (const auto& r : audit.rounds)
            for (const auto& [name, part] : r.derived) columns.push_back(name);
    if (columns.empty())
        for (const auto& [name, part] : audit.partitions) columns.push_back(name);
    const std::string table = boosting::format_extras_table(audit, boosting::extras_table(audit, columns), columns);
    ctx.out << table;
    ctx.out << "replayed " << replayed.size() << " rounds: weights consistent\n";
    if (audit.failed) ctx.out << "run failed: " << audit.failure << "\n";
    if (!a.out.empty()) {
        ensure_dir(a.out);
        io::write_text_file((fs::path(a.out) / "extras.txt").string(), table);
        write_reproducibility_record(a.out, "audit", ctx.args, 0);
    }
}

// ---- predict

struct PredictArgs {
    std::string checkpoint, manifest, stats, out;
    std::vector<std::string> ids;
    bool prob = false;
    double overlap = -1.0;
};

void cmd_predict(const PredictArgs& a, Context& ctx) {
    auto loaded = train::load_checkpoint(a.checkpoint);
    RunConfig config;
    if (!loaded.info.run_config_yaml.empty()) config = run_config_from_yaml(loaded.info.run_config_yaml);
    const double overlap = a.overlap >= 0.0 ? a.overlap : config.overlap;
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("--overlap must lie in [0, 1)");

    const std::string stats_path = a.stats.empty() ? find_stats_near(a.checkpoint) : a.stats;
    if (stats_path.empty()) throw ConfigError("predict: --stats is required (none found next to the checkpoint)");
    const auto stats = preprocess::load_stats(stats_path);
    const io::Manifest manifest = io::load_manifest(a.manifest);
    train::CaseStore store(manifest, stats, config.normalization);

    const std::string dir = output_dir(a.out, "predict");
    ensure_dir(dir);
    write_reproducibility_record(dir, "predict", ctx.args, loaded.state.seed, loaded.info.run_config_yaml);
    const std::vector<std::string> ids = a.ids.empty() ? manifest.ids() : a.ids;
    std::ostringstream listing;
    listing << "id\tprediction\tforeground_voxels\n";
    for (const auto& id : ids) {
        const Study& s = store.study(id);
        const Volume prob = infer::probability_map(s, loaded.state.net, overlap);
        const LabelMask pred = infer::threshold_probability(prob);
        const std::string file = id + "_pred.nii.gz";
        io::save_mask(pred, (fs::path(dir) / file).string());
        if (a.prob) io::save_volume(prob, (fs::path(dir) / (id + "_prob.nii.gz")).string());
        listing << id << '\t' << file << '\t' << pred.foreground_count() << '\n';
        ctx.out << id << ": " << pred.foreground_count() << " foreground voxels\n";
    }
    io::write_text_file((fs::path(dir) / "predictions.tsv").string(), listing.str());
}

// ---- evaluate

struct EvaluateArgs {
    std::string pred_dir, gt_dir, manifest, out;
    int connectivity = 18;
};

void cmd_evaluate(const EvaluateArgs& a, Context& ctx) {
    const auto conn = metrics::parse_connectivity(a.connectivity);
    std::map<std::string, std::string> gt_files;
    if (!a.gt_dir.empty()) {
        gt_files = scan_masks(a.gt_dir);
    } else if (!a.manifest.empty()) {
        const auto m = io::load_manifest(a.manifest);
        for (const auto& e : m.entries)
            if (e.label_path) gt_files[e.id] = m.resolve(*e.label_path);
    } else {
        throw ConfigError("evaluate: --gt-dir or --manifest is required");
    }
    if (gt_files.empty()) throw DataError("no reference masks found");
    const auto pred_files = scan_masks(a.pred_dir);

    std::vector<metrics::MetricsRow> rows;
    for (const auto& [id, gt_path] : gt_files) {
        auto it = pred_files.find(id);
        if (it == pred_files.end()) throw DataError("no prediction for study '" + id + "' in " + a.pred_dir);
        rows.push_back(metrics::evaluate_pair(id, io::load_mask(it->second), io::load_mask(gt_path), conn));
    }
    for (const auto& [id, path] : pred_files)
        if (!gt_files.count(id)) ctx.err << "warning: prediction '" << id << "' has no reference; skipped\n";
    const auto report = metrics::aggregate(std::move(rows), conn);

    const std::string dir = output_dir(a.out, "evaluate");
    ensure_dir(dir);
    io::write_text_file((fs::path(dir) / "report.csv").string(), report.to_csv());
    YAML::Emitter meta;
    meta.SetDoublePrecision(10);
    meta << YAML::BeginMap;
    meta << YAML::Key << "schema_version" << YAML::Value << 1;
    meta << YAML::Key << "connectivity" << YAML::Value << a.connectivity;
    meta << YAML::Key << "volume_unit" << YAML::Value << "mL";
    meta << YAML::Key << "studies" << YAML::Value << report.rows.size();
    meta << YAML::Key << "mean_dice" << YAML::Value << report.mean_dice;
    meta << YAML::Key << "mean_fpvol_ml" << YAML::Value << report.mean_fpvol_ml;
    meta << YAML::Key << "mean_fnvol_ml" << YAML::Value << report.mean_fnvol_ml;
    meta << YAML::Key << "pred_dir" << YAML::Value << a.pred_dir;
    meta << YAML::Key << "reference" << YAML::Value << (a.gt_dir.empty() ? a.manifest : a.gt_dir);
    meta << YAML::EndMap;
    io::write_text_file((fs::path(dir) / "report.yaml").string(), std::string(meta.c_str()) + "\n");
    write_reproducibility_record(dir, "evaluate", ctx.args, 0);
    ctx.out << report.to_table();
}

// ---- render-overlay

struct RenderArgs {
    std::string id, pet, gt, pred, manifest, pred_dir, out, mode = "slice";
    std::vector<std::string> ids;
};

void cmd_render(const RenderArgs& a, Context& ctx) {
    render::OverlayOptions opts;
    opts.mode = render::parse_mode(a.mode);
    const std::string dir = output_dir(a.out, "render");
    ensure_dir(dir);
    write_reproducibility_record(dir, "render-overlay", ctx.args, 0);

    auto report = [&](const std::string& id, const render::OverlayResult& r) {
        for (const auto& f : r.files) ctx.out << id << ": " << f.file << "\n";
        for (const auto& n : r.notes) ctx.out << id << ": " << n << "\n";
    };
    if (!a.pet.empty()) {
        if (a.id.empty()) throw ConfigError("render-overlay: --id is required with --pet");
        std::optional<LabelMask> gt, pred;
        if (!a.gt.empty()) gt = io::load_mask(a.gt);
        if (!a.pred.empty()) pred = io::load_mask(a.pred);
        report(a.id, render::render_overlay(a.id, io::load_volume(a.pet), gt, pred, dir, opts));
        return;
    }
    if (a.manifest.empty()) throw ConfigError("render-overlay: --pet or --manifest is required");
    const auto m = io::load_manifest(a.manifest);
    const std::vector<std::string> ids = a.ids.empty() ? m.ids() : a.ids;
    for (const auto& id : ids) {
        const auto& e = m.find(id);
        std::optional<LabelMask> gt, pred;
        if (e.label_path) gt = io::load_mask(m.resolve(*e.label_path));
        if (!a.pred_dir.empty()) {
            const fs::path p = fs::path(a.pred_dir) / (id + "_pred.nii.gz");
            if (fs::exists(p)) pred = io::load_mask(p.string());
            else ctx.err << "warning: no prediction for '" << id << "'\n";
        }
        report(id, render::render_overlay(id, io::load_volume(m.resolve(e.pet_path)), gt, pred, dir, opts));
    }
}

// ---- describe

void cmd_describe_policy(const std::string& name, Context& ctx) {
    std::vector<std::string> names;
    if (name.empty() || name == "all") names = {"None", "Type1", "Type2"};
    else names = {name};
    for (const auto& n : names) ctx.out << augment::AugmentationPolicy::by_name(n).describe() << "\n";
}

void cmd_describe_network(const std::string& preset, Context& ctx) {
    nn::NetworkConfig c;
    if (preset == "toy") c = nn::NetworkConfig::toy();
    else if (preset == "paper") c = nn::NetworkConfig::paper();
    else throw ConfigError("--preset must be 'toy' or 'paper'");
    c.validate();
    ctx.out << nn::format_stage_report(c);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Whole-body PET/CT lesion segmentation with sample attention boosting", "lesionseg"};
    app.set_version_flag("--version", LESIONSEG_VERSION);
    app.require_subcommand(1);
    app.fallthrough(false);

    Context ctx{args, out, err};
    std::function<void()> action;

    StatsArgs stats;
    auto* s = app.add_subcommand("stats", "Foreground intensity statistics for normalization");
    s->add_option("--manifest", stats.manifest, "Study manifest (all positive studies are used)");
    s->add_option("--config", stats.config, "Run config; uses its manifest and split");
    s->add_option("--partition", stats.partition, "Partition of the config split (default: first)");
    s->add_option("--out", stats.out, "Output stats.yaml path");
    s->callback([&] { action = [&] { cmd_stats(stats, ctx); }; });

    SynthArgs sy;
    auto* y = app.add_subcommand("synth", "Generate a synthetic PET/CT lesion corpus");
    y->add_option("--seed", sy.seed, "Corpus seed")->capture_default_str();
    y->add_option("--n", sy.n, "Number of studies")->capture_default_str()->check(CLI::PositiveNumber);
    y->add_option("--shape", sy.shape, "Volume shape z,y,x")->capture_default_str();
    y->add_option("--spacing", sy.spacing, "Voxel spacing z,y,x in mm")->capture_default_str();
    y->add_option("--difficulty", sy.difficulty, "bimodal[:hard_fraction] | uniform | constant:v")->capture_default_str();
    y->add_option("--min-lesions", sy.min_lesions, "Fewest lesions per positive study")->capture_default_str();
    y->add_option("--max-lesions", sy.max_lesions, "Most lesions per positive study")->capture_default_str();
    y->add_option("--psma-fraction", sy.psma_fraction, "Fraction of PSMA studies")->capture_default_str();
    y->add_option("--negative-fraction", sy.negative_fraction, "Fraction of lesion-free studies")->capture_default_str();
    y->add_option("--prefix", sy.prefix, "Study id prefix")->capture_default_str();
    y->add_option("--out", sy.out, "Output directory");
    y->callback([&] { action = [&] { cmd_synth(sy, ctx); }; });

    TrainArgs tr;
    std::uint64_t train_seed = 0;
    auto* t = app.add_subcommand("train", "Train one model on the first split partition");
    t->add_option("--config", tr.config, "Run config")->required();
    t->add_option("--manifest", tr.manifest, "Override paths.manifest");
    t->add_option("--out", tr.out, "Output directory (default: paths.output)");
    t->add_option("--epochs", tr.epochs, "Override training.epochs");
    auto* tseed = t->add_option("--seed", train_seed, "Override the config seed");
    t->add_option("--resume", tr.resume, "Checkpoint directory to continue from");
    t->callback([&] {
        if (*tseed) tr.seed = train_seed;
        action = [&] { cmd_train(tr, ctx); };
    });

    auto* b = app.add_subcommand("boost", "Sample attention boosting");
    b->require_subcommand(1);
    BoostRunArgs br;
    std::uint64_t boost_seed = 0;
    auto* brun = b->add_subcommand("run", "Run the boosting schedule of a config");
    brun->add_option("--config", br.config, "Run config")->required();
    brun->add_option("--manifest", br.manifest, "Override paths.manifest");
    brun->add_option("--out", br.out, "Output directory (default: paths.output)");
    auto* bseed = brun->add_option("--seed", boost_seed, "Override the config seed");
    brun->callback([&] {
        if (*bseed) br.seed = boost_seed;
        action = [&] { cmd_boost_run(br, ctx); };
    });
    AuditArgs au;
    auto add_audit_flags = [&](CLI::App* sub) {
        sub->add_option("--audit", au.audit, "audit.jsonl or a boost output directory")->required();
        sub->add_option("--columns", au.columns, "Partitions to tabulate (default: derived partitions)");
        sub->add_option("--out", au.out, "Write extras.txt and a reproducibility record here");
        sub->callback([&] { action = [&] { cmd_audit(au, ctx); }; });
    };
    add_audit_flags(b->add_subcommand("audit", "Replay an audit log and print the extra-samples table"));
    add_audit_flags(app.add_subcommand("audit", "Same as `boost audit`"));

    PredictArgs pr;
    auto* p = app.add_subcommand("predict", "Sliding-window prediction with a checkpoint");
    p->add_option("--checkpoint", pr.checkpoint, "Checkpoint directory")->required();
    p->add_option("--manifest", pr.manifest, "Studies to predict")->required();
    p->add_option("--ids", pr.ids, "Subset of study ids");
    p->add_option("--stats", pr.stats, "Normalization stats (default: stats.yaml beside the checkpoint)");
    p->add_option("--overlap", pr.overlap, "Tile overlap in [0, 1) (default: from the checkpoint config)");
    p->add_flag("--prob", pr.prob, "Also write the foreground probability map");
    p->add_option("--out", pr.out, "Output directory");
    p->callback([&] { action = [&] { cmd_predict(pr, ctx); }; });

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Dice, FPvol and FNvol per study");
    e->add_option("--pred-dir", ev.pred_dir, "Predicted masks (<id>_pred.nii.gz or <id>.nii.gz)")->required();
    e->add_option("--gt-dir", ev.gt_dir, "Reference masks");
    e->add_option("--manifest", ev.manifest, "Take reference masks from a manifest instead");
    e->add_option("--connectivity", ev.connectivity, "6, 18 or 26")->capture_default_str();
    e->add_option("--out", ev.out, "Output directory for report.csv and report.yaml");
    e->callback([&] { action = [&] { cmd_evaluate(ev, ctx); }; });

    RenderArgs rd;
    auto* r = app.add_subcommand("render-overlay", "PNG overlays of PET with reference and predicted contours");
    r->add_option("--id", rd.id, "Study id used in file names (with --pet)");
    r->add_option("--pet", rd.pet, "PET volume");
    r->add_option("--gt", rd.gt, "Reference mask");
    r->add_option("--pred", rd.pred, "Predicted mask");
    r->add_option("--manifest", rd.manifest, "Render studies of a manifest instead");
    r->add_option("--ids", rd.ids, "Subset of manifest ids");
    r->add_option("--pred-dir", rd.pred_dir, "Directory of <id>_pred.nii.gz files (with --manifest)");
    r->add_option("--mode", rd.mode, "slice or mip")->capture_default_str();
    r->add_option("--out", rd.out, "Output directory");
    r->callback([&] { action = [&] { cmd_render(rd, ctx); }; });

    std::string policy;
    auto* dp = app.add_subcommand("describe-policy", "Print augmentation policies");
    dp->add_option("--policy", policy, "None, Type1, Type2 or all");
    dp->callback([&] { action = [&] { cmd_describe_policy(policy, ctx); }; });

    std::string preset = "toy";
    auto* dn = app.add_subcommand("describe-network", "Print the stage layout of a network preset");
    dn->add_option("--preset", preset, "toy or paper")->capture_default_str();
    dn->callback([&] { action = [&] { cmd_describe_network(preset, ctx); }; });

    if (!args.empty() && !args[0].empty() && args[0][0] != '-' && !app.get_subcommand_no_throw(args[0])) {
        err << "unknown subcommand '" << args[0] << "'\n" << app.help();
        return kExitConfig;
    }

    std::vector<std::string> argv_store{"lesionseg"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        if (code == 0) return kExitOk;
        if (ex.get_name() != "CallForHelp") err << app.help();
        return kExitConfig;
    }

    try {
        if (action) action();
        return kExitOk;
    } catch (const ConfigError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitRuntime;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace lesionseg::cli
