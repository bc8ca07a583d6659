#include "lesionseg/boosting.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lesionseg/errors.hpp"

namespace lesionseg::boosting {

using json = nlohmann::json;

std::string to_string(SelectionKind kind) {
    switch (kind) {
        case SelectionKind::BottomK: return "bottom_k";
        case SelectionKind::BelowThreshold: return "below_threshold";
        case SelectionKind::All: return "all";
    }
    return "?";
}

SelectionKind parse_selection_kind(const std::string& text) {
    if (text == "bottom_k") return SelectionKind::BottomK;
    if (text == "below_threshold") return SelectionKind::BelowThreshold;
    if (text == "all") return SelectionKind::All;
    throw ConfigError("unknown selection kind '" + text + "' (bottom_k, below_threshold, all)");
}

void SelectionRule::validate() const {
    if (kind == SelectionKind::BottomK && k < 1) throw ConfigError("bottom_k selection needs k >= 1");
    if (kind == SelectionKind::BelowThreshold && !(threshold > 0.0 && threshold < 1.0))
        throw ConfigError("below_threshold selection needs 0 < threshold < 1");
}

std::string SelectionRule::describe() const {
    std::ostringstream os;
    switch (kind) {
        case SelectionKind::BottomK: os << "bottom-" << k; break;
        case SelectionKind::BelowThreshold: os << "dice<" << threshold; break;
        case SelectionKind::All: os << "all"; break;
    }
    if (exclude_zero) os << " excluding dice=0";
    if (!source_partitions.empty()) {
        os << " of ";
        for (std::size_t i = 0; i < source_partitions.size(); ++i) os << (i ? "," : "") << source_partitions[i];
    }
    return os.str();
}

std::vector<std::string> select_hard_samples(const PerSampleDice& dice, const SelectionRule& rule,
                                             const PartitionMap& partitions) {
    rule.validate();
    std::set<std::string> candidates;
    if (rule.source_partitions.empty()) {
        for (const auto& [id, d] : dice) candidates.insert(id);
    } else {
        for (const auto& name : rule.source_partitions) {
            auto it = partitions.find(name);
            if (it == partitions.end()) throw SelectionError("unknown source partition '" + name + "'");
            candidates.insert(it->second.study_ids.begin(), it->second.study_ids.end());
        }
    }
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& id : candidates) {
        auto it = dice.find(id);
        if (it == dice.end()) throw SelectionError("no Dice score for candidate '" + id + "'");
        if (rule.exclude_zero && it->second == 0.0) continue;
        ranked.emplace_back(it->second, id);
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<std::string> out;
    switch (rule.kind) {
        case SelectionKind::BottomK:
            if (static_cast<std::size_t>(rule.k) > ranked.size())
                throw SelectionError("bottom_k asks for " + std::to_string(rule.k) + " samples but only " +
                                     std::to_string(ranked.size()) + " candidates remain");
            for (int i = 0; i < rule.k; ++i) out.push_back(ranked[static_cast<std::size_t>(i)].second);
            break;
        case SelectionKind::BelowThreshold:
            for (const auto& [d, id] : ranked)
                if (d < rule.threshold) out.push_back(id);
            break;
        case SelectionKind::All:
            for (const auto& [d, id] : ranked) out.push_back(id);
            break;
    }
    return out;
}

SampleWeightTable boost(SampleWeightTable weights, std::span<const std::string> selected) {
    for (const auto& id : selected) weights.increment(id);
    return weights;
}

void validate_schedule(const std::vector<BoostRound>& rounds, const PartitionMap& initial) {
    if (rounds.empty()) throw ConfigError("boosting schedule has no rounds");
    std::set<std::string> known_partitions;
    for (const auto& [name, p] : initial) known_partitions.insert(name);
    std::set<std::string> seen;
    auto need_partition = [&](const std::string& round, const std::string& name) {
        if (!known_partitions.count(name))
            throw ConfigError("round '" + round + "' refers to unknown partition '" + name + "'");
    };
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        const auto& r = rounds[i];
        if (r.name.empty()) throw ConfigError("every round needs a name");
        if (seen.count(r.name)) throw ConfigError("duplicate round name '" + r.name + "'");
        if (r.epochs < 1) throw ConfigError("round '" + r.name + "' needs epochs >= 1");
        if (!(r.lr > 0.0)) throw ConfigError("round '" + r.name + "' needs lr > 0");
        if (r.init_from && !seen.count(*r.init_from))
            throw ConfigError("round '" + r.name + "' starts from '" + *r.init_from + "', which is not an earlier round");
        if (!r.selections.empty() && !r.init_from)
            throw ConfigError("round '" + r.name + "' selects samples but has no earlier model to score them");
        if (i == 0 && !r.selections.empty()) throw ConfigError("the first round cannot select samples");
        for (const auto& p : r.added_partitions) need_partition(r.name, p);
        for (const auto& s : r.selections) {
            s.validate();
            for (const auto& p : s.source_partitions) need_partition(r.name, p);
        }
        for (const auto& d : r.derive) {
            need_partition(r.name, d.source);
            d.rule.validate();
            if (d.low_name.empty() || d.rest_name.empty() || d.low_name == d.rest_name)
                throw ConfigError("round '" + r.name + "' derives partitions with missing or equal names");
            known_partitions.insert(d.low_name);
            known_partitions.insert(d.rest_name);
        }
        seen.insert(r.name);
    }
}

std::vector<BoostRound> reference_schedule() {
    auto bottom = [](int k, std::vector<std::string> src, bool ez = false) {
        SelectionRule r;
        r.kind = SelectionKind::BottomK;
        r.k = k;
        r.exclude_zero = ez;
        r.source_partitions = std::move(src);
        return r;
    };
    auto below = [](double t, std::vector<std::string> src) {
        SelectionRule r;
        r.kind = SelectionKind::BelowThreshold;
        r.threshold = t;
        r.source_partitions = std::move(src);
        return r;
    };
    SelectionRule nonzero;
    nonzero.kind = SelectionKind::All;
    nonzero.exclude_zero = true;
    nonzero.source_partitions = {"A*"};

    std::vector<BoostRound> s(5);
    s[0].name = "Model1";
    s[0].added_partitions = {"A"};
    s[0].epochs = 1500;
    s[0].augmentation = "Type1";
    s[0].derive = {{"A", "A*", "A**", bottom(50, {})}, {"B", "B*", "B**", bottom(54, {})}};

    s[1].name = "Model2";
    s[1].init_from = "Model1";
    s[1].added_partitions = {"B*"};
    s[1].selections = {bottom(50, {"A*"})};
    s[1].epochs = 1000;
    s[1].augmentation = "Type2";

    s[2].name = "Model3";
    s[2].init_from = "Model1";
    s[2].added_partitions = {"B*"};
    s[2].selections = {nonzero};
    s[2].epochs = 1000;
    s[2].augmentation = "Type1";

    s[3].name = "Model4";
    s[3].init_from = "Model3";
    s[3].added_partitions = {"B"};
    s[3].selections = {below(0.7, {"A**", "B*"})};
    s[3].epochs = 500;
    s[3].augmentation = "Type1";

    s[4].name = "Model5";
    s[4].init_from = "Model4";
    s[4].selections = {below(0.75, {"A*", "A**", "B"})};
    s[4].epochs = 500;
    s[4].augmentation = "Type1";

    for (auto& r : s) r.lr = 2e-4;
    return s;
}

// ---------------------------------------------------------------------------
// Audit log

namespace {

json rule_to_json(const SelectionRule& r) {
    json j{{"kind", to_string(r.kind)}, {"exclude_zero", r.exclude_zero}, {"source_partitions", r.source_partitions}};
    if (r.kind == SelectionKind::BottomK) j["k"] = r.k;
    if (r.kind == SelectionKind::BelowThreshold) j["threshold"] = r.threshold;
    return j;
}

SelectionRule rule_from_json(const json& j) {
    SelectionRule r;
    r.kind = parse_selection_kind(j.at("kind").get<std::string>());
    r.exclude_zero = j.value("exclude_zero", false);
    r.source_partitions = j.value("source_partitions", std::vector<std::string>{});
    if (j.contains("k")) r.k = j.at("k").get<int>();
    if (j.contains("threshold")) r.threshold = j.at("threshold").get<double>();
    return r;
}

json partitions_to_json(const PartitionMap& parts) {
    json j = json::object();
    for (const auto& [name, p] : parts) j[name] = p.study_ids;
    return j;
}

PartitionMap partitions_from_json(const json& j) {
    PartitionMap out;
    for (auto it = j.begin(); it != j.end(); ++it)
        out[it.key()] = DatasetPartition{it.key(), it.value().get<std::vector<std::string>>()};
    return out;
}

}  // namespace

AuditLog::AuditLog(std::string path) : path_(std::move(path)) {}

void AuditLog::write(const std::string& line) {
    lines_.push_back(line);
    if (path_.empty()) return;
    std::ofstream f(path_, std::ios::app);
    if (!f) throw IoError("cannot append to audit log " + path_);
    f << line << '\n';
    f.flush();
}

void AuditLog::start(const PartitionMap& partitions, std::span<const std::string> evaluation_ids) {
    write(json{{"event", "start"},
               {"partitions", partitions_to_json(partitions)},
               {"evaluation_ids", std::vector<std::string>(evaluation_ids.begin(), evaluation_ids.end())}}
              .dump());
}

void AuditLog::round(const RoundRecord& r) {
    json sel = json::array();
    for (const auto& e : r.selections)
        sel.push_back({{"rule", rule_to_json(e.rule)}, {"dice_source", e.dice_source}, {"ids", e.ids}});
    json weights = json::object();
    for (const auto& [id, m] : r.weights.entries()) weights[id] = m;
    json dice = json::object();
    for (const auto& [id, d] : r.dice) dice[id] = d;
    write(json{{"event", "round"},
               {"index", r.index},
               {"name", r.name},
               {"init_from", r.init_from ? json(*r.init_from) : json(nullptr)},
               {"added_partitions", r.added_partitions},
               {"added_ids", r.added_ids},
               {"selections", sel},
               {"weights", weights},
               {"total_samples", r.weights.total_samples()},
               {"dice", dice},
               {"derived", partitions_to_json(r.derived)}}
              .dump());
}

void AuditLog::failure(const std::string& round_name, const std::string& message) {
    write(json{{"event", "failure"}, {"round", round_name}, {"message", message}}.dump());
}

void AuditLog::finish() { write(json{{"event", "end"}}.dump()); }

const RoundRecord& ScheduleResult::find(const std::string& name) const {
    for (const auto& r : rounds)
        if (r.name == name) return r;
    throw DataError("no round named '" + name + "'");
}

ScheduleResult run_schedule(const std::vector<BoostRound>& rounds, PartitionMap partitions, RoundExecutor& executor,
                            AuditLog* log, std::span<const std::string> evaluation_ids) {
    validate_schedule(rounds, partitions);
    std::vector<std::string> eval_ids(evaluation_ids.begin(), evaluation_ids.end());
    if (eval_ids.empty()) {
        std::set<std::string> all;
        for (const auto& [name, p] : partitions) all.insert(p.study_ids.begin(), p.study_ids.end());
        eval_ids.assign(all.begin(), all.end());
    }
    if (log) log->start(partitions, eval_ids);

    ScheduleResult result;
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        const BoostRound& round = rounds[i];
        try {
            RoundRecord rec;
            rec.index = static_cast<int>(i);
            rec.name = round.name;
            rec.init_from = round.init_from;
            rec.added_partitions = round.added_partitions;
            const RoundRecord* parent = round.init_from ? &result.find(*round.init_from) : nullptr;
            if (parent) rec.weights = parent->weights;
            for (const auto& name : round.added_partitions)
                for (const auto& id : partitions.at(name).study_ids)
                    if (!rec.weights.contains(id)) {
                        rec.weights.add(id);
                        rec.added_ids.push_back(id);
                    }
            for (const auto& rule : round.selections) {
                SelectionEvent ev{rule, parent->name, select_hard_samples(parent->dice, rule, partitions)};
                rec.weights = boost(std::move(rec.weights), ev.ids);
                rec.selections.push_back(std::move(ev));
            }
            executor.train_round(round, rec.index, rec.weights);
            rec.dice = executor.evaluate(round.name, eval_ids);
            for (const auto& d : round.derive) {
                SelectionRule rule = d.rule;
                rule.source_partitions = {d.source};
                const auto low = select_hard_samples(rec.dice, rule, partitions);
                const std::set<std::string> low_set(low.begin(), low.end());
                DatasetPartition lo{d.low_name, {}}, rest{d.rest_name, {}};
                for (const auto& id : partitions.at(d.source).study_ids)
                    (low_set.count(id) ? lo : rest).study_ids.push_back(id);
                rec.derived[d.low_name] = lo;
                rec.derived[d.rest_name] = rest;
                partitions[d.low_name] = std::move(lo);
                partitions[d.rest_name] = std::move(rest);
            }
            if (log) log->round(rec);
            result.rounds.push_back(std::move(rec));
        } catch (const std::exception& e) {
            if (log) log->failure(round.name, e.what());
            throw;
        }
    }
    if (log) log->finish();
    result.partitions = std::move(partitions);
    return result;
}

AuditSummary parse_audit(const std::string& jsonl) {
    AuditSummary out;
    std::istringstream is(jsonl);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            const std::string ev = j.at("event").get<std::string>();
            if (ev == "start") {
                out.partitions = partitions_from_json(j.at("partitions"));
                for (const auto& [name, part] : out.partitions) out.initial_partitions.push_back(name);
            } else if (ev == "round") {
                RoundRecord r;
                r.index = j.at("index").get<int>();
                r.name = j.at("name").get<std::string>();
                if (!j.at("init_from").is_null()) r.init_from = j.at("init_from").get<std::string>();
                r.added_partitions = j.at("added_partitions").get<std::vector<std::string>>();
                r.added_ids = j.at("added_ids").get<std::vector<std::string>>();
                for (const auto& s : j.at("selections"))
                    r.selections.push_back(
                        {rule_from_json(s.at("rule")), s.at("dice_source").get<std::string>(),
                         s.at("ids").get<std::vector<std::string>>()});
                for (auto it = j.at("weights").begin(); it != j.at("weights").end(); ++it)
                    r.weights.add(it.key(), it.value().get<int>());
                for (auto it = j.at("dice").begin(); it != j.at("dice").end(); ++it)
                    r.dice[it.key()] = it.value().get<double>();
                r.derived = partitions_from_json(j.at("derived"));
                for (const auto& [name, p] : r.derived) out.partitions[name] = p;
                out.rounds.push_back(std::move(r));
            } else if (ev == "failure") {
                out.failed = true;
                out.failure = j.at("round").get<std::string>() + ": " + j.at("message").get<std::string>();
            }
        } catch (const json::exception& e) {
            throw FormatError("audit log line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<std::pair<std::string, SampleWeightTable>> replay_audit(const AuditSummary& audit) {
    std::vector<std::pair<std::string, SampleWeightTable>> out;
    std::map<std::string, SampleWeightTable> by_name;
    for (const auto& r : audit.rounds) {
        SampleWeightTable t;
        if (r.init_from) {
            auto it = by_name.find(*r.init_from);
            if (it == by_name.end()) throw DataError("audit: round '" + r.name + "' starts from an unlogged round");
            t = it->second;
        }
        for (const auto& id : r.added_ids) t.add(id);
        for (const auto& s : r.selections) t = boost(std::move(t), s.ids);
        if (!(t == r.weights)) throw DataError("audit: weight table of round '" + r.name + "' is not explained by its events");
        by_name[r.name] = t;
        out.emplace_back(r.name, std::move(t));
    }
    return out;
}

std::vector<ExtrasRow> extras_table(const AuditSummary& audit, const std::vector<std::string>& columns) {
    std::vector<ExtrasRow> rows;
    for (const auto& r : audit.rounds) {
        ExtrasRow row;
        row.round = r.name;
        for (const auto& c : columns) {
            auto it = audit.partitions.find(c);
            row.extras.push_back(it == audit.partitions.end() ? 0 : r.weights.extra_samples(it->second.study_ids));
        }
        for (const auto& name : audit.initial_partitions) {
            long n = 0;
            for (const auto& id : audit.partitions.at(name).study_ids) n += r.weights.contains(id) ? 1 : 0;
            row.pool.push_back(n);
        }
        row.total = r.weights.total_samples();
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_extras_table(const AuditSummary& audit, const std::vector<ExtrasRow>& rows,
                                const std::vector<std::string>& columns) {
    std::ostringstream os;
    os << std::left << std::setw(10) << "Model";
    for (const auto& c : columns) os << std::right << std::setw(8) << ("+" + c);
    for (const auto& p : audit.initial_partitions) os << std::right << std::setw(10) << ("from " + p);
    os << std::setw(8) << "total" << '\n';
    for (const auto& r : rows) {
        os << std::left << std::setw(10) << r.round;
        for (long e : r.extras) os << std::right << std::setw(8) << e;
        for (long n : r.pool) os << std::right << std::setw(10) << n;
        os << std::setw(8) << r.total << '\n';
    }
    return os.str();
}

}  // namespace lesionseg::boosting
