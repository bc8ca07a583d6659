#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lesionseg/types.hpp"

namespace lesionseg::boosting {

enum class SelectionKind {
    BottomK,         // the k lowest Dice scores
    BelowThreshold,  // every Dice < threshold
    All,             // every candidate left after exclusion
};

std::string to_string(SelectionKind kind);
SelectionKind parse_selection_kind(const std::string& text);

struct SelectionRule {
    SelectionKind kind = SelectionKind::BottomK;
    int k = 1;
    double threshold = 0.5;
    bool exclude_zero = false;
    std::vector<std::string> source_partitions;  // empty = every id in the Dice map

    void validate() const;
    std::string describe() const;
    bool operator==(const SelectionRule&) const = default;
};

using PartitionMap = std::map<std::string, DatasetPartition>;

// Ordered by ascending Dice, ties by ascending id. Zero-Dice ids are dropped
// before ranking when exclude_zero is set.
std::vector<std::string> select_hard_samples(const PerSampleDice& dice, const SelectionRule& rule,
                                             const PartitionMap& partitions = {});

// +1 multiplicity per selected id; DataError on an id outside the table.
SampleWeightTable boost(SampleWeightTable weights, std::span<const std::string> selected);

// Splits `source` into `low_name` (selected by `rule` on this round's Dice)
// and `rest_name` after the round has been evaluated.
struct PartitionDerivation {
    std::string source;
    std::string low_name;
    std::string rest_name;
    SelectionRule rule;
    bool operator==(const PartitionDerivation&) const = default;
};

struct BoostRound {
    std::string name;
    std::optional<std::string> init_from;  // empty = fresh weights
    std::vector<std::string> added_partitions;
    std::vector<SelectionRule> selections;  // scored with the init_from model's Dice
    int epochs = 1;
    std::string augmentation = "Type1";
    double lr = 1e-2;
    std::vector<PartitionDerivation> derive;
    bool operator==(const BoostRound&) const = default;
};

// ConfigError on duplicate names, forward/unknown init_from, selections
// without a model to score them, unknown partitions, epochs < 1 or lr <= 0.
void validate_schedule(const std::vector<BoostRound>& rounds, const PartitionMap& initial);

// The five-round schedule: A/B split, A*/A** and B*/B** derived from round 1.
std::vector<BoostRound> reference_schedule();

class RoundExecutor {
public:
    virtual ~RoundExecutor() = default;
    // Trains `round` on `weights`, starting from the model of round.init_from.
    virtual void train_round(const BoostRound& round, int index, const SampleWeightTable& weights) = 0;
    virtual PerSampleDice evaluate(const std::string& round_name, std::span<const std::string> ids) = 0;
};

struct SelectionEvent {
    SelectionRule rule;
    std::string dice_source;  // round whose Dice drove the selection
    std::vector<std::string> ids;
};

struct RoundRecord {
    int index = 0;
    std::string name;
    std::optional<std::string> init_from;
    std::vector<std::string> added_partitions;
    std::vector<std::string> added_ids;  // ids new to the pool this round
    std::vector<SelectionEvent> selections;
    SampleWeightTable weights;
    PerSampleDice dice;
    PartitionMap derived;
};

class AuditLog {
public:
    AuditLog() = default;
    explicit AuditLog(std::string path);  // appends JSON lines, flushed per event

    void start(const PartitionMap& partitions, std::span<const std::string> evaluation_ids);
    void round(const RoundRecord& record);
    void failure(const std::string& round_name, const std::string& message);
    void finish();
    const std::vector<std::string>& lines() const noexcept { return lines_; }

private:
    void write(const std::string& line);
    std::string path_;
    std::vector<std::string> lines_;
};

struct ScheduleResult {
    std::vector<RoundRecord> rounds;
    PartitionMap partitions;  // initial plus derived
    const RoundRecord& find(const std::string& name) const;
};

// Runs the rounds in order. Every id in `evaluation_ids` (default: the union
// of the initial partitions) is scored after each round.
ScheduleResult run_schedule(const std::vector<BoostRound>& rounds, PartitionMap partitions, RoundExecutor& executor,
                            AuditLog* log = nullptr, std::span<const std::string> evaluation_ids = {});

struct AuditSummary {
    PartitionMap partitions;                      // initial plus derived
    std::vector<std::string> initial_partitions;  // names from the start event
    std::vector<RoundRecord> rounds;
    bool failed = false;
    std::string failure;
};

AuditSummary parse_audit(const std::string& jsonl);

// Rebuilds every round's weight table from pool additions and selection
// events alone; DataError if any differs from the logged table.
std::vector<std::pair<std::string, SampleWeightTable>> replay_audit(const AuditSummary& audit);

struct ExtrasRow {
    std::string round;
    std::vector<long> extras;  // per column partition
    std::vector<long> pool;    // pool ids drawn from each initial partition
    long total = 0;
};

// Extra samples per `columns` partition and pool composition per initial partition.
std::vector<ExtrasRow> extras_table(const AuditSummary& audit, const std::vector<std::string>& columns);
// Columns "+<partition>" hold extra samples, "from <partition>" the pool composition.
std::string format_extras_table(const AuditSummary& audit, const std::vector<ExtrasRow>& rows,
                                const std::vector<std::string>& columns);

}  // namespace lesionseg::boosting
