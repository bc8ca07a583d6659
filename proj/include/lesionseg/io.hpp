#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lesionseg/types.hpp"

namespace lesionseg::io {

// NIfTI-1 volumes, gzip-compressed when the path ends in .gz. Shape and
// spacing are reordered from the file's (x, y, z) to (z, y, x); the voxel
// payload already has x fastest, so no data shuffling is needed.
Volume load_volume(const std::string& path);
LabelMask load_mask(const std::string& path);

// Float32 payload.
void save_volume(const Volume& volume, const std::string& path);
// Uint8 payload with values in {0, 1}.
void save_mask(const LabelMask& mask, const std::string& path);

struct ManifestEntry {
    std::string id;
    Tracer tracer = Tracer::FDG;
    std::string ct_path;
    std::string pet_path;
    std::optional<std::string> label_path;
    std::string source_site;
    std::optional<double> difficulty;  // synthetic corpora only
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::string base_dir;  // relative paths resolve against this

    const ManifestEntry& find(const std::string& id) const;
    std::string resolve(const std::string& path) const;
    std::vector<std::string> ids() const;
};

inline constexpr int kManifestSchemaVersion = 1;

// Tab-separated:
//   # lesionseg-manifest schema_version=1
//   id  tracer  ct_path  pet_path  label_path  source_site  difficulty
// `-` marks an absent label or difficulty.
Manifest parse_manifest(const std::string& text, const std::string& base_dir,
                        bool check_paths = true);
Manifest load_manifest(const std::string& path, bool check_paths = true);
std::string manifest_to_tsv(const Manifest& manifest);
void save_manifest(const Manifest& manifest, const std::string& path);

Study load_study(const Manifest& manifest, const ManifestEntry& entry);

// Ids whose label file exists and contains foreground; loads each label.
std::vector<std::string> positive_ids(const Manifest& manifest);

// Deterministic shuffled split of `ids` into consecutive partitions of the
// given sizes. Sizes must sum to the number of ids.
std::vector<DatasetPartition> split_dataset(std::span<const std::string> ids, std::uint64_t seed,
                                            std::span<const std::size_t> sizes,
                                            std::span<const std::string> names);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace lesionseg::io
