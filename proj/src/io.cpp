#include "lesionseg/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "lesionseg/errors.hpp"
#include "lesionseg/rng.hpp"

namespace fs = std::filesystem;

namespace lesionseg::io {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

enum NiftiType : std::int16_t {
    kUInt8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUInt16 = 512,
    kUInt32 = 768,
};

template <typename T>
T read_field(const std::uint8_t* bytes, std::size_t offset, bool swap) {
    T v;
    std::memcpy(&v, bytes + offset, sizeof(T));
    if (swap && sizeof(T) > 1) {
        auto* p = reinterpret_cast<std::uint8_t*>(&v);
        std::reverse(p, p + sizeof(T));
    }
    return v;
}

template <typename T>
void write_field(std::uint8_t* bytes, std::size_t offset, T v) {
    std::memcpy(bytes + offset, &v, sizeof(T));
}

class GzFile {
public:
    GzFile(const std::string& path, const char* mode) : path_(path) {
        handle_ = gzopen(path.c_str(), mode);
        if (!handle_) throw IoError("cannot open " + path);
    }
    ~GzFile() {
        if (handle_) gzclose(handle_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    std::size_t read(void* dst, std::size_t n) {
        auto* out = static_cast<std::uint8_t*>(dst);
        std::size_t done = 0;
        while (done < n) {
            const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n - done, 1u << 30));
            const int got = gzread(handle_, out + done, chunk);
            if (got < 0) throw FormatError("corrupt gzip stream in " + path_);
            if (got == 0) break;
            done += static_cast<std::size_t>(got);
        }
        return done;
    }

    void write(const void* src, std::size_t n) {
        const auto* in = static_cast<const std::uint8_t*>(src);
        std::size_t done = 0;
        while (done < n) {
            const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n - done, 1u << 30));
            if (gzwrite(handle_, in + done, chunk) != static_cast<int>(chunk))
                throw IoError("write failed for " + path_);
            done += chunk;
        }
    }

    void close() {
        if (handle_ && gzclose(handle_) != Z_OK) {
            handle_ = nullptr;
            throw IoError("failed to finish writing " + path_);
        }
        handle_ = nullptr;
    }

private:
    std::string path_;
    gzFile handle_ = nullptr;
};

struct RawImage {
    Grid3D grid;
    std::vector<double> values;
};

RawImage read_nifti(const std::string& path) {
    if (!fs::exists(path)) throw IoError("file not found: " + path);
    GzFile file(path, "rb");
    std::array<std::uint8_t, kHeaderSize> hdr{};
    if (file.read(hdr.data(), kHeaderSize) != kHeaderSize)
        throw FormatError("truncated NIfTI header in " + path);

    bool swap = false;
    if (read_field<std::int32_t>(hdr.data(), 0, false) != 348) {
        if (read_field<std::int32_t>(hdr.data(), 0, true) != 348)
            throw FormatError("not a NIfTI-1 file (sizeof_hdr != 348): " + path);
        swap = true;
    }
    if (std::memcmp(hdr.data() + 344, "n+1", 3) != 0)
        throw FormatError("unsupported NIfTI magic (single-file n+1 expected): " + path);

    std::array<std::int16_t, 8> dim{};
    for (int i = 0; i < 8; ++i) dim[i] = read_field<std::int16_t>(hdr.data(), 40 + 2 * i, swap);
    if (dim[0] < 3 || dim[0] > 7) throw ShapeError("NIfTI dim[0] must be 3..7 in " + path);
    for (int i = 4; i <= dim[0]; ++i)
        if (dim[i] > 1) throw ShapeError("non-3D NIfTI payload in " + path);
    for (int i = 1; i <= 3; ++i)
        if (dim[i] < 1) throw FormatError("non-positive dimension in " + path);

    const auto datatype = read_field<std::int16_t>(hdr.data(), 70, swap);
    std::array<float, 8> pixdim{};
    for (int i = 0; i < 8; ++i) pixdim[i] = read_field<float>(hdr.data(), 76 + 4 * i, swap);
    const float vox_offset = read_field<float>(hdr.data(), 108, swap);
    float slope = read_field<float>(hdr.data(), 112, swap);
    const float inter = read_field<float>(hdr.data(), 116, swap);
    const auto qform_code = read_field<std::int16_t>(hdr.data(), 252, swap);
    const auto sform_code = read_field<std::int16_t>(hdr.data(), 254, swap);

    Vec3 origin{0.0, 0.0, 0.0};
    if (sform_code > 0) {
        origin = {read_field<float>(hdr.data(), 312 + 12, swap),
                  read_field<float>(hdr.data(), 296 + 12, swap),
                  read_field<float>(hdr.data(), 280 + 12, swap)};
    } else if (qform_code > 0) {
        origin = {read_field<float>(hdr.data(), 276, swap), read_field<float>(hdr.data(), 272, swap),
                  read_field<float>(hdr.data(), 268, swap)};
    }
    Vec3 spacing{std::fabs(pixdim[3]), std::fabs(pixdim[2]), std::fabs(pixdim[1])};
    for (double& s : spacing)
        if (!(s > 0.0)) s = 1.0;

    Grid3D grid({dim[3], dim[2], dim[1]}, spacing, origin);

    std::size_t bytes_per_voxel = 0;
    switch (datatype) {
        case kUInt8:
        case kInt8: bytes_per_voxel = 1; break;
        case kInt16:
        case kUInt16: bytes_per_voxel = 2; break;
        case kInt32:
        case kUInt32:
        case kFloat32: bytes_per_voxel = 4; break;
        case kFloat64: bytes_per_voxel = 8; break;
        default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype));
    }

    const auto offset = static_cast<std::size_t>(vox_offset);
    if (offset < kHeaderSize) throw FormatError("invalid vox_offset in " + path);
    std::vector<std::uint8_t> skip(offset - kHeaderSize);
    if (file.read(skip.data(), skip.size()) != skip.size())
        throw FormatError("truncated NIfTI extension block in " + path);

    const std::size_t n = grid.num_voxels();
    std::vector<std::uint8_t> payload(n * bytes_per_voxel);
    if (file.read(payload.data(), payload.size()) != payload.size())
        throw FormatError("truncated NIfTI payload in " + path);

    RawImage img{grid, std::vector<double>(n)};
    const std::uint8_t* p = payload.data();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t o = i * bytes_per_voxel;
        double v = 0.0;
        switch (datatype) {
            case kUInt8: v = p[o]; break;
            case kInt8: v = static_cast<std::int8_t>(p[o]); break;
            case kInt16: v = read_field<std::int16_t>(p, o, swap); break;
            case kUInt16: v = read_field<std::uint16_t>(p, o, swap); break;
            case kInt32: v = read_field<std::int32_t>(p, o, swap); break;
            case kUInt32: v = read_field<std::uint32_t>(p, o, swap); break;
            case kFloat32: v = read_field<float>(p, o, swap); break;
            case kFloat64: v = read_field<double>(p, o, swap); break;
        }
        img.values[i] = v;
    }
    if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f))
        for (double& v : img.values) v = v * slope + inter;
    return img;
}

void write_nifti(const std::string& path, const Grid3D& grid, std::int16_t datatype,
                 std::int16_t bitpix, const void* data, std::size_t bytes) {
    std::array<std::uint8_t, kDataOffset> hdr{};
    write_field<std::int32_t>(hdr.data(), 0, 348);
    const auto& s = grid.shape();
    const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(s[2]),
                                          static_cast<std::int16_t>(s[1]),
                                          static_cast<std::int16_t>(s[0]), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) write_field<std::int16_t>(hdr.data(), 40 + 2 * i, dim[i]);
    write_field<std::int16_t>(hdr.data(), 70, datatype);
    write_field<std::int16_t>(hdr.data(), 72, bitpix);
    const auto& sp = grid.spacing();
    const std::array<float, 8> pixdim{1.0f, static_cast<float>(sp[2]), static_cast<float>(sp[1]),
                                      static_cast<float>(sp[0]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) write_field<float>(hdr.data(), 76 + 4 * i, pixdim[i]);
    write_field<float>(hdr.data(), 108, static_cast<float>(kDataOffset));
    write_field<float>(hdr.data(), 112, 1.0f);
    write_field<float>(hdr.data(), 116, 0.0f);
    hdr[123] = 2;  // xyzt_units: mm
    const char* descrip = "lesionseg";
    std::memcpy(hdr.data() + 148, descrip, std::strlen(descrip));
    write_field<std::int16_t>(hdr.data(), 252, 1);  // qform: scanner
    write_field<std::int16_t>(hdr.data(), 254, 1);  // sform: scanner
    const auto& o = grid.origin();
    write_field<float>(hdr.data(), 268, static_cast<float>(o[2]));
    write_field<float>(hdr.data(), 272, static_cast<float>(o[1]));
    write_field<float>(hdr.data(), 276, static_cast<float>(o[0]));
    const std::array<std::array<float, 4>, 3> srow{{{pixdim[1], 0, 0, static_cast<float>(o[2])},
                                                    {0, pixdim[2], 0, static_cast<float>(o[1])},
                                                    {0, 0, pixdim[3], static_cast<float>(o[0])}}};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            write_field<float>(hdr.data(), 280 + 16 * r + 4 * c, srow[r][c]);
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    const bool compress = path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty() && !fs::exists(parent)) throw IoError("directory does not exist: " + parent.string());
    GzFile file(path, compress ? "wb6" : "wbT");
    file.write(hdr.data(), hdr.size());
    file.write(data, bytes);
    file.close();
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

Volume load_volume(const std::string& path) {
    RawImage img = read_nifti(path);
    std::vector<float> values(img.values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = static_cast<float>(img.values[i]);
        if (!std::isfinite(values[i])) throw DataError("non-finite voxel value in " + path);
    }
    return Volume(img.grid, std::move(values));
}

LabelMask load_mask(const std::string& path) {
    RawImage img = read_nifti(path);
    std::vector<std::uint8_t> values(img.values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = img.values[i];
        if (v != 0.0 && v != 1.0)
            throw DataError("label file is not binary (value " + std::to_string(v) + "): " + path);
        values[i] = v != 0.0 ? 1 : 0;
    }
    return LabelMask(img.grid, std::move(values));
}

void save_volume(const Volume& volume, const std::string& path) {
    const auto v = volume.values();
    write_nifti(path, volume.grid(), kFloat32, 32, v.data(), v.size() * sizeof(float));
}

void save_mask(const LabelMask& mask, const std::string& path) {
    const auto v = mask.values();
    write_nifti(path, mask.grid(), kUInt8, 8, v.data(), v.size());
}

const ManifestEntry& Manifest::find(const std::string& id) const {
    for (const auto& e : entries)
        if (e.id == id) return e;
    throw DataError("study '" + id + "' is not in the manifest");
}

std::string Manifest::resolve(const std::string& path) const {
    fs::path p(path);
    if (p.is_absolute() || base_dir.empty()) return p.string();
    return (fs::path(base_dir) / p).string();
}

std::vector<std::string> Manifest::ids() const {
    std::vector<std::string> out;
    for (const auto& e : entries) out.push_back(e.id);
    return out;
}

Manifest parse_manifest(const std::string& text, const std::string& base_dir, bool check_paths) {
    Manifest m;
    m.base_dir = base_dir;
    std::istringstream in(text);
    std::string line;
    bool saw_version = false;
    bool saw_header = false;
    std::size_t line_no = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto pos = line.find("schema_version=");
            if (pos != std::string::npos) {
                const int version = std::stoi(line.substr(pos + 15));
                if (version != kManifestSchemaVersion)
                    throw ConfigError("manifest schema_version " + std::to_string(version) +
                                      " is not supported");
                saw_version = true;
            }
            continue;
        }
        auto cols = split_tabs(line);
        if (!saw_header) {
            if (cols.size() < 6 || cols[0] != "id" || cols[1] != "tracer")
                throw ConfigError("manifest header must start with id, tracer, ct_path, pet_path, "
                                  "label_path, source_site");
            saw_header = true;
            continue;
        }
        if (cols.size() < 6)
            throw ConfigError("manifest line " + std::to_string(line_no) + " has too few columns");
        ManifestEntry e;
        e.id = cols[0];
        e.tracer = parse_tracer(cols[1]);
        e.ct_path = cols[2];
        e.pet_path = cols[3];
        if (cols[4] != "-" && !cols[4].empty()) e.label_path = cols[4];
        e.source_site = cols[5];
        if (cols.size() > 6 && cols[6] != "-" && !cols[6].empty()) e.difficulty = std::stod(cols[6]);
        if (e.id.empty()) throw ConfigError("manifest line " + std::to_string(line_no) + " has no id");
        if (!seen.insert(e.id).second) throw ConfigError("duplicate manifest id '" + e.id + "'");
        m.entries.push_back(std::move(e));
    }
    if (!saw_version) throw ConfigError("manifest is missing its schema_version line");
    if (check_paths) {
        for (const auto& e : m.entries) {
            for (const auto* p : {&e.ct_path, &e.pet_path})
                if (!fs::exists(m.resolve(*p)))
                    throw IoError("manifest entry '" + e.id + "' references missing file " + *p);
            if (e.label_path && !fs::exists(m.resolve(*e.label_path)))
                throw IoError("manifest entry '" + e.id + "' references missing file " + *e.label_path);
        }
    }
    return m;
}

Manifest load_manifest(const std::string& path, bool check_paths) {
    return parse_manifest(read_text_file(path), fs::path(path).parent_path().string(), check_paths);
}

std::string manifest_to_tsv(const Manifest& manifest) {
    std::ostringstream os;
    os.precision(10);
    os << "# lesionseg-manifest schema_version=" << kManifestSchemaVersion << '\n';
    os << "id\ttracer\tct_path\tpet_path\tlabel_path\tsource_site\tdifficulty\n";
    for (const auto& e : manifest.entries) {
        os << e.id << '\t' << to_string(e.tracer) << '\t' << e.ct_path << '\t' << e.pet_path << '\t'
           << (e.label_path ? *e.label_path : "-") << '\t' << e.source_site << '\t';
        if (e.difficulty) os << *e.difficulty;
        else os << '-';
        os << '\n';
    }
    return os.str();
}

void save_manifest(const Manifest& manifest, const std::string& path) {
    write_text_file(path, manifest_to_tsv(manifest));
}

Study load_study(const Manifest& manifest, const ManifestEntry& entry) {
    std::optional<LabelMask> label;
    if (entry.label_path) label = load_mask(manifest.resolve(*entry.label_path));
    Study s = Study::make(entry.id, entry.tracer, load_volume(manifest.resolve(entry.ct_path)),
                          load_volume(manifest.resolve(entry.pet_path)), std::move(label));
    auto violations = validate_study(s);
    if (!violations.empty())
        throw DataError("study '" + entry.id + "' is invalid: " + violations.front().message);
    return s;
}

std::vector<std::string> positive_ids(const Manifest& manifest) {
    std::vector<std::string> out;
    for (const auto& e : manifest.entries) {
        if (!e.label_path) continue;
        if (load_mask(manifest.resolve(*e.label_path)).foreground_count() > 0) out.push_back(e.id);
    }
    return out;
}

std::vector<DatasetPartition> split_dataset(std::span<const std::string> ids, std::uint64_t seed,
                                            std::span<const std::size_t> sizes,
                                            std::span<const std::string> names) {
    if (sizes.size() != names.size())
        throw ConfigError("split_dataset: one name per partition size is required");
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != ids.size())
        throw ConfigError("split sizes sum to " + std::to_string(total) + " but there are " +
                          std::to_string(ids.size()) + " positive studies");

    std::vector<std::string> order(ids.begin(), ids.end());
    std::sort(order.begin(), order.end());
    if (std::adjacent_find(order.begin(), order.end()) != order.end())
        throw ConfigError("split_dataset: duplicate study ids");
    Rng rng(derive_seed(seed, hash_string("split_dataset")));
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)));
        std::swap(order[i - 1], order[j]);
    }

    std::vector<DatasetPartition> parts;
    std::size_t cursor = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
        DatasetPartition part{names[p], {}};
        part.study_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                              order.begin() + static_cast<std::ptrdiff_t>(cursor + sizes[p]));
        std::sort(part.study_ids.begin(), part.study_ids.end());
        cursor += sizes[p];
        parts.push_back(std::move(part));
    }
    return parts;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << text;
    if (!f) throw IoError("write failed for " + path);
}

}  // namespace lesionseg::io
