#pragma once

// Dataset manifests: directory ingestion, CSV round trip, patient-level
// cross-validation folds, synthetic-count planning with largest-remainder
// apportionment, and mixing synthetic rows into real training data.
//
// A manifest row carries (image_path, label, patient_id, split, provenance,
// adjective). Two invariants hold for every manifest this module emits:
//   - the patient -> split mapping is a function (no patient straddles splits)
//   - referenced files decode as 8-bit grayscale images (checked on ingest,
//     and on demand via validate(true))

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "png_io.hpp"
#include "prompt.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace echogen {

enum class Split { train = 0, val = 1, test = 2 };

inline constexpr std::array<const char*, 3> kSplitNames = {"train", "val", "test"};

inline const char* split_name(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

inline Split parse_split(const std::string& s) {
    for (std::size_t i = 0; i < kSplitNames.size(); ++i) {
        if (s == kSplitNames[i]) return static_cast<Split>(i);
    }
    throw DataError("unknown split name: " + s);
}

struct ManifestRow {
    std::string image_path;
    ClassLabel label = ClassLabel::benign;
    std::string patient_id;
    Split split = Split::train;
    bool synthetic = false;
    std::string adjective;  // adjective slug for synthetic rows, empty for real rows
};

struct DatasetManifest {
    std::vector<ManifestRow> rows;

    i64 count(Split s) const {
        i64 n = 0;
        for (const ManifestRow& r : rows) n += r.split == s ? 1 : 0;
        return n;
    }

    // Per-class row counts within one split, indexed by ClassLabel.
    std::array<i64, 3> class_counts(Split s) const {
        std::array<i64, 3> n{0, 0, 0};
        for (const ManifestRow& r : rows) {
            if (r.split == s) ++n[static_cast<std::size_t>(r.label)];
        }
        return n;
    }

    std::vector<ManifestRow> rows_in(Split s) const {
        std::vector<ManifestRow> out;
        for (const ManifestRow& r : rows) {
            if (r.split == s) out.push_back(r);
        }
        return out;
    }

    // Unique patient ids of rows in `s`, in first-appearance order.
    std::vector<std::string> patients_in(Split s) const {
        std::vector<std::string> out;
        std::set<std::string> seen;
        for (const ManifestRow& r : rows) {
            if (r.split == s && seen.insert(r.patient_id).second) out.push_back(r.patient_id);
        }
        return out;
    }

    // Enforce manifest invariants. With check_files, every referenced image
    // must also decode as 8-bit grayscale.
    void validate(bool check_files = false) const {
        std::map<std::string, Split> patient_split;
        for (const ManifestRow& r : rows) {
            if (r.image_path.empty()) throw DataError("manifest row with empty image path");
            if (r.patient_id.empty()) {
                throw DataError("manifest row with empty patient id: " + r.image_path);
            }
            auto [it, inserted] = patient_split.emplace(r.patient_id, r.split);
            if (!inserted && it->second != r.split) {
                throw DataError("patient " + r.patient_id + " appears in both " +
                                split_name(it->second) + " and " + split_name(r.split));
            }
        }
        if (check_files) {
            for (const ManifestRow& r : rows) (void)read_png_gray8(r.image_path);
        }
    }
};

inline constexpr const char* kManifestHeader =
    "image_path,label,patient_id,split,provenance,adjective";

namespace detail {

inline void check_csv_field(const std::string& v, const char* what) {
    if (v.find_first_of(",\n\r") != std::string::npos) {
        throw ValueError(std::string("manifest ") + what + " may not contain commas or newlines: " + v);
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ostringstream out;
    out << kManifestHeader << "\n";
    for (const ManifestRow& r : m.rows) {
        detail::check_csv_field(r.image_path, "image path");
        detail::check_csv_field(r.patient_id, "patient id");
        detail::check_csv_field(r.adjective, "adjective");
        out << r.image_path << ',' << class_name(r.label) << ',' << r.patient_id << ','
            << split_name(r.split) << ',' << (r.synthetic ? "synthetic" : "real") << ','
            << r.adjective << "\n";
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::string s = out.str();
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError(path + ": empty manifest file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader) {
        throw DataError(path + ": bad manifest header, expected \"" +
                        std::string(kManifestHeader) + "\"");
    }
    DatasetManifest m;
    i64 lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> fields = detail::split_csv_line(line);
        if (fields.size() != 6) {
            throw DataError(path + ":" + std::to_string(lineno) + ": expected 6 fields, got " +
                            std::to_string(fields.size()));
        }
        ManifestRow r;
        r.image_path = fields[0];
        try {
            r.label = parse_class(fields[1]);
            r.split = parse_split(fields[3]);
        } catch (const Error& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        r.patient_id = fields[2];
        if (fields[4] == "real") {
            r.synthetic = false;
        } else if (fields[4] == "synthetic") {
            r.synthetic = true;
        } else {
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": unknown provenance: " + fields[4]);
        }
        r.adjective = fields[5];
        m.rows.push_back(std::move(r));
    }
    m.validate(false);
    return m;
}

// --- ingestion -------------------------------------------------------------

namespace detail {

// patients.csv: header "filename,patient_id", one row per image file.
inline std::map<std::string, std::string> load_patients_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError(path + ": empty patients file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "filename,patient_id") {
        throw DataError(path + ": bad header, expected \"filename,patient_id\"");
    }
    std::map<std::string, std::string> map;
    i64 lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
            throw DataError(path + ":" + std::to_string(lineno) + ": expected filename,patient_id");
        }
        if (!map.emplace(fields[0], fields[1]).second) {
            throw DataError(path + ":" + std::to_string(lineno) +
                            ": duplicate filename entry: " + fields[0]);
        }
    }
    return map;
}

inline std::vector<std::string> sorted_dir_names(const std::filesystem::path& dir, bool dirs) {
    std::vector<std::string> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.empty() || name[0] == '.') continue;
        if (dirs ? e.is_directory() : e.is_regular_file()) out.push_back(name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// Build a manifest from a directory tree. Two layouts are accepted:
//   root/{benign,malignant,normal}/*.png           -> every row lands in train
//   root/{train,val,test}/{class dirs}/*.png       -> split per subdirectory
// An optional root/patients.csv maps filename -> patient id; when absent,
// every file becomes its own patient (stem as id) and a warning is recorded.
// Every file must decode as 8-bit grayscale PNG; filenames must be unique
// across the whole tree; in the flat layout all three class directories must
// exist and be non-empty.
inline DatasetManifest ingest(const std::string& root,
                              std::vector<std::string>* warnings = nullptr) {
    namespace fs = std::filesystem;
    const fs::path rootp(root);
    if (!fs::is_directory(rootp)) throw IoError("dataset root is not a directory: " + root);

    const std::vector<std::string> top = detail::sorted_dir_names(rootp, true);
    bool split_layout = false;
    for (const std::string& d : top) {
        for (const char* s : kSplitNames) split_layout = split_layout || d == s;
    }

    // (split, class, directory) triples to scan
    std::vector<std::pair<Split, std::pair<ClassLabel, fs::path>>> scan;
    if (split_layout) {
        for (const std::string& d : top) {
            bool is_split = false;
            for (std::size_t i = 0; i < kSplitNames.size(); ++i) is_split |= d == kSplitNames[i];
            if (!is_split) {
                throw DataError("unexpected directory next to split directories: " + d);
            }
            const Split sp = parse_split(d);
            const std::vector<std::string> cls = detail::sorted_dir_names(rootp / d, true);
            if (cls.empty()) throw DataError("split directory is empty: " + d);
            for (const std::string& c : cls) {
                ClassLabel label;
                try {
                    label = parse_class(c);
                } catch (const Error&) {
                    throw DataError("unrecognized class directory: " + d + "/" + c);
                }
                scan.emplace_back(sp, std::make_pair(label, rootp / d / c));
            }
        }
    } else {
        for (const std::string& d : top) {
            try {
                (void)parse_class(d);
            } catch (const Error&) {
                throw DataError("unrecognized class directory: " + d);
            }
        }
        for (const char* c : kClassNames) {
            const fs::path dir = rootp / c;
            if (!fs::is_directory(dir)) throw DataError("missing class directory: " + std::string(c));
            scan.emplace_back(Split::train, std::make_pair(parse_class(c), dir));
        }
    }

    // Optional patient map
    std::map<std::string, std::string> patient_of;
    bool have_patients = false;
    const fs::path pcsv = rootp / "patients.csv";
    if (fs::is_regular_file(pcsv)) {
        patient_of = detail::load_patients_csv(pcsv.generic_string());
        have_patients = true;
    } else if (warnings != nullptr) {
        warnings->push_back("patients.csv not found under " + root +
                            "; treating every image as its own patient");
    }

    DatasetManifest m;
    std::set<std::string> seen_names;
    for (const auto& [sp, cls_dir] : scan) {
        const auto& [label, dir] = cls_dir;
        const std::vector<std::string> files = detail::sorted_dir_names(dir, false);
        if (files.empty()) {
            throw DataError("class directory is empty: " + std::string(class_name(label)));
        }
        for (const std::string& fname : files) {
            if (!seen_names.insert(fname).second) {
                throw DataError("duplicate filename: " + fname);
            }
            const fs::path fpath = dir / fname;
            (void)read_png_gray8(fpath.generic_string());  // throws citing the path
            ManifestRow r;
            r.image_path = fpath.generic_string();
            r.label = label;
            r.split = sp;
            r.synthetic = false;
            if (have_patients) {
                const auto it = patient_of.find(fname);
                if (it == patient_of.end()) {
                    throw DataError("patients.csv has no entry for: " + fname);
                }
                r.patient_id = it->second;
            } else {
                r.patient_id = fs::path(fname).stem().string();
            }
            m.rows.push_back(std::move(r));
        }
    }
    if (have_patients) {
        for (const auto& [fname, pid] : patient_of) {
            if (seen_names.find(fname) == seen_names.end()) {
                throw DataError("patients.csv names a file that was not found: " + fname);
            }
            (void)pid;
        }
    }
    m.validate(false);  // rejects a patient assigned to two splits
    return m;
}

// --- cross-validation folds ------------------------------------------------

// Partition the training pool into k patient-level train/val splits. Fold i
// keeps every original train row; rows of the i-th patient block become val.
// Patients per validation fold are balanced within +-1. Rows outside the
// train split are not part of any fold.
inline std::vector<DatasetManifest> make_folds(const DatasetManifest& m, i64 k, std::uint64_t seed) {
    if (k < 2) throw ValueError("fold count must be at least 2, got " + std::to_string(k));
    const std::vector<ManifestRow> pool = m.rows_in(Split::train);
    std::vector<std::string> patients;
    {
        std::set<std::string> uniq;
        for (const ManifestRow& r : pool) uniq.insert(r.patient_id);
        patients.assign(uniq.begin(), uniq.end());
    }
    if (static_cast<i64>(patients.size()) < k) {
        throw ValueError("training pool has " + std::to_string(patients.size()) +
                         " patients, fewer than " + std::to_string(k) + " folds");
    }

    RngStream rng(seed, "folds");
    for (i64 i = static_cast<i64>(patients.size()) - 1; i > 0; --i) {
        const i64 j = rng.next_below(i + 1);
        std::swap(patients[static_cast<std::size_t>(i)], patients[static_cast<std::size_t>(j)]);
    }

    std::map<std::string, i64> fold_of;
    for (std::size_t i = 0; i < patients.size(); ++i) {
        fold_of[patients[i]] = static_cast<i64>(i) % k;
    }

    std::vector<DatasetManifest> folds(static_cast<std::size_t>(k));
    for (i64 f = 0; f < k; ++f) {
        for (const ManifestRow& r : pool) {
            ManifestRow copy = r;
            copy.split = fold_of[r.patient_id] == f ? Split::val : Split::train;
            folds[static_cast<std::size_t>(f)].rows.push_back(std::move(copy));
        }
    }
    return folds;
}

// --- synthetic-count planning ---------------------------------------------

struct MixPlan {
    double ratio = 1.0;            // one of 0.5, 1.0, 2.0
    std::array<i64, 3> per_class{};  // synthetic image counts, indexed by ClassLabel
    std::string adjective;         // raw adjective ("" for the plain prompt)
    std::uint64_t seed = 0;

    i64 total() const { return per_class[0] + per_class[1] + per_class[2]; }
};

// Largest-remainder apportionment of `total` seats proportional to `weights`.
// Remainder ties break by class-name lexical order, which here coincides with
// index order (benign < malignant < normal).
inline std::array<i64, 3> apportion_counts(const std::array<i64, 3>& weights, i64 total) {
    if (total < 0) throw ValueError("cannot apportion a negative total");
    const i64 wsum = weights[0] + weights[1] + weights[2];
    if (wsum <= 0) throw ValueError("apportionment needs at least one positive class weight");
    for (i64 w : weights) {
        if (w < 0) throw ValueError("class weights must be non-negative");
    }

    std::array<i64, 3> out{};
    std::array<double, 3> rem{};
    i64 assigned = 0;
    for (std::size_t c = 0; c < 3; ++c) {
        const double quota =
            static_cast<double>(total) * static_cast<double>(weights[c]) / static_cast<double>(wsum);
        out[c] = static_cast<i64>(std::floor(quota));
        rem[c] = quota - std::floor(quota);
        assigned += out[c];
    }
    std::array<std::size_t, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (i64 seat = 0; seat < total - assigned; ++seat) {
        ++out[order[static_cast<std::size_t>(seat)]];
    }
    return out;
}

// Build the synthetic-generation plan for one adjective at one ratio. Counts
// total floor(ratio * |real train|), matching real class frequencies unless
// `balanced`, in which case the three classes split the total as evenly as
// the remainder rule allows.
inline MixPlan plan_mix(const DatasetManifest& real, double ratio, const std::string& adjective,
                        std::uint64_t seed, bool balanced = false) {
    const bool known = ratio == 0.5 || ratio == 1.0 || ratio == 2.0;
    if (!known) {
        throw ValueError("mix ratio must be one of 0.5, 1.0, 2.0");
    }
    const i64 train_size = real.count(Split::train);
    if (train_size <= 0) throw ValueError("real manifest has no training rows to mix against");
    MixPlan plan;
    plan.ratio = ratio;
    plan.adjective = adjective;
    plan.seed = seed;
    const i64 total = static_cast<i64>(std::floor(ratio * static_cast<double>(train_size)));
    const std::array<i64, 3> weights =
        balanced ? std::array<i64, 3>{1, 1, 1} : real.class_counts(Split::train);
    plan.per_class = apportion_counts(weights, total);
    return plan;
}

// --- mixing ----------------------------------------------------------------

// Append synthetic rows to the real manifest's training split. Synthetic rows
// must all carry provenance=synthetic and split=train; paths must not collide
// with real rows. Validation and test splits therefore stay purely real.
inline DatasetManifest mix(const DatasetManifest& real, const DatasetManifest& synthetic) {
    std::set<std::string> real_paths;
    for (const ManifestRow& r : real.rows) real_paths.insert(r.image_path);
    for (const ManifestRow& r : synthetic.rows) {
        if (!r.synthetic) {
            throw DataError("mix: row is not marked synthetic: " + r.image_path);
        }
        if (r.split != Split::train) {
            throw DataError("mix: synthetic row targets split " + std::string(split_name(r.split)) +
                            ": " + r.image_path);
        }
        if (real_paths.count(r.image_path) > 0) {
            throw DataError("mix: path collides with a real row: " + r.image_path);
        }
    }
    DatasetManifest out = real;
    out.rows.insert(out.rows.end(), synthetic.rows.begin(), synthetic.rows.end());
    out.validate(false);
    return out;
}

// --- image loading ---------------------------------------------------------

struct LoadedSplit {
    Tensor images;                  // (n, 1, side, side) in [-1, 1]
    std::vector<ClassLabel> labels; // one per image, manifest order
    std::vector<ManifestRow> rows;  // the rows behind each image
};

// Read every image of one split into a batch tensor. Each file must be a
// side x side 8-bit grayscale PNG.
inline LoadedSplit load_split(const DatasetManifest& m, Split s, i64 side) {
    LoadedSplit out;
    out.rows = m.rows_in(s);
    if (out.rows.empty()) {
        throw DataError(std::string("manifest has no rows in split ") + split_name(s));
    }
    const i64 n = static_cast<i64>(out.rows.size());
    std::vector<float> buf(static_cast<std::size_t>(n * side * side));
    out.labels.reserve(out.rows.size());
    for (i64 i = 0; i < n; ++i) {
        const ManifestRow& r = out.rows[static_cast<std::size_t>(i)];
        const ImageU8 img = read_png_gray8(r.image_path);
        if (img.width != side || img.height != side) {
            throw ShapeError(r.image_path + ": expected " + std::to_string(side) + "x" +
                             std::to_string(side) + ", got " + std::to_string(img.width) + "x" +
                             std::to_string(img.height));
        }
        for (i64 p = 0; p < side * side; ++p) {
            buf[static_cast<std::size_t>(i * side * side + p)] =
                static_cast<float>(img.pixels[static_cast<std::size_t>(p)]) / 127.5f - 1.0f;
        }
        out.labels.push_back(r.label);
    }
    out.images = Tensor::from_data({n, 1, side, side}, std::move(buf));
    return out;
}

}  // namespace echogen
