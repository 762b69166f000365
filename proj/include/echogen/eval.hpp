#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "echogen/classifier.hpp"
#include "echogen/error.hpp"
#include "echogen/manifest.hpp"
#include "echogen/metrics.hpp"
#include "echogen/png_io.hpp"
#include "echogen/prompt.hpp"
#include "echogen/rng.hpp"
#include "echogen/stats.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

// Pick the adapter rank with the lowest distance score; ties go to the
// smallest rank.
inline i64 rank_select(const std::map<i64, double>& score_by_rank) {
    if (score_by_rank.empty()) throw ValueError("rank selection: no candidates");
    i64 best_rank = score_by_rank.begin()->first;
    double best = score_by_rank.begin()->second;
    for (const auto& [rank, score] : score_by_rank)
        if (score < best) {
            best = score;
            best_rank = rank;
        }
    return best_rank;
}

// Penultimate-layer features for a batch of images, computed in chunks so
// arbitrarily large sets fit in memory. Returns (n, feature_dim).
inline Tensor feature_matrix(const Classifier& model, const Tensor& images, i64 chunk = 64) {
    if (images.rank() != 4) throw ShapeError("feature matrix: images must be rank 4");
    if (chunk < 1) throw ValueError("feature matrix: chunk must be positive");
    NoGradGuard guard;
    const i64 n = images.dim(0);
    std::vector<float> out;
    i64 dim = 0;
    for (i64 off = 0; off < n; off += chunk) {
        std::vector<i64> idx;
        for (i64 i = off; i < std::min(n, off + chunk); i++) idx.push_back(i);
        const Tensor feats = model.features(detail::gather_rows(images, idx));
        dim = feats.dim(1);
        out.insert(out.end(), feats.data(), feats.data() + feats.numel());
    }
    return Tensor::from_data({n, dim}, std::move(out));
}

namespace detail {

// Load every row of a manifest (all splits) at the given side.
inline LoadedSplit load_all_rows(const DatasetManifest& m, i64 side) {
    LoadedSplit out;
    out.rows = m.rows;
    const i64 n = static_cast<i64>(out.rows.size());
    std::vector<float> buf(static_cast<std::size_t>(n * side * side));
    for (i64 i = 0; i < n; i++) {
        const ManifestRow& r = out.rows[static_cast<std::size_t>(i)];
        const ImageU8 img = read_png_gray8(r.image_path);
        if (img.width != side || img.height != side)
            throw ShapeError(r.image_path + ": expected " + std::to_string(side) + "x" + std::to_string(side) +
                             ", got " + std::to_string(img.width) + "x" + std::to_string(img.height));
        for (i64 p = 0; p < side * side; p++)
            buf[static_cast<std::size_t>(i * side * side + p)] =
                static_cast<float>(img.pixels[static_cast<std::size_t>(p)]) / 127.5f - 1.0f;
        out.labels.push_back(r.label);
    }
    out.images = Tensor::from_data({n, 1, side, side}, std::move(buf));
    return out;
}

inline double batched_accuracy(const Classifier& model, const Tensor& x, const std::vector<ClassLabel>& y,
                               i64 chunk = 64) {
    NoGradGuard guard;
    const i64 n = x.dim(0);
    i64 hits = 0;
    for (i64 off = 0; off < n; off += chunk) {
        std::vector<i64> idx;
        for (i64 i = off; i < std::min(n, off + chunk); i++) idx.push_back(i);
        const auto pred = argmax_rows(model.forward(gather_rows(x, idx)));
        for (std::size_t i = 0; i < idx.size(); i++)
            if (pred[i] == static_cast<std::int32_t>(y[static_cast<std::size_t>(idx[i])])) hits++;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string json_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f.good()) throw IoError("cannot open " + path + " for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f.good()) throw IoError("failed writing " + path);
}

}  // namespace detail

// One line of the synthetic-probe experiment: a classifier trained on real
// data only, evaluated on one adjective's synthetic set.
struct ProbeRow {
    std::string adjective;
    i64 count = 0;
    double accuracy = 0.0;
};

// Evaluate a (real-trained) classifier on each named synthetic set. Rows
// come back in input order, one per set.
inline std::vector<ProbeRow> probe_synthetic(const Classifier& model,
                                             const std::vector<std::pair<std::string, DatasetManifest>>& sets) {
    std::vector<ProbeRow> out;
    for (const auto& [adjective, manifest] : sets) {
        if (manifest.rows.empty()) throw ValueError("probe: synthetic set \"" + adjective + "\" is empty");
        const LoadedSplit all = detail::load_all_rows(manifest, model.config().side);
        ProbeRow row;
        row.adjective = adjective;
        row.count = static_cast<i64>(all.rows.size());
        row.accuracy = detail::batched_accuracy(model, all.images, all.labels);
        out.push_back(std::move(row));
    }
    return out;
}

inline void write_probe_csv(const std::string& path, const std::vector<ProbeRow>& rows) {
    std::string text = "adjective,count,accuracy\n";
    for (const auto& r : rows)
        text += r.adjective + "," + std::to_string(r.count) + "," + detail::format_double(r.accuracy) + "\n";
    detail::write_text_file(path, text);
}

// Standalone scatter: one point per adjective, accuracy on the y axis.
inline void write_probe_svg(const std::string& path, const std::vector<ProbeRow>& rows) {
    const int width = 120 + static_cast<int>(rows.size()) * 90;
    const int height = 360;
    const int plot_left = 70, plot_top = 30, plot_bottom = 300;
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) + " " + std::to_string(height) +
         "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"16\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">synthetic-probe accuracy</text>\n";
    // y axis with a tick every 0.25
    s += "<line x1=\"" + std::to_string(plot_left) + "\" y1=\"" + std::to_string(plot_top) + "\" x2=\"" +
         std::to_string(plot_left) + "\" y2=\"" + std::to_string(plot_bottom) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; i++) {
        const double frac = i / 4.0;
        const int y = plot_bottom - static_cast<int>(frac * (plot_bottom - plot_top));
        s += "<line x1=\"" + std::to_string(plot_left - 4) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
             std::to_string(plot_left) + "\" y2=\"" + std::to_string(y) + "\" stroke=\"black\"/>\n";
        s += "<text x=\"" + std::to_string(plot_left - 44) + "\" y=\"" + std::to_string(y + 5) +
             "\" font-family=\"sans-serif\" font-size=\"12\">" + detail::format_double(frac).substr(0, 4) +
             "</text>\n";
    }
    for (std::size_t i = 0; i < rows.size(); i++) {
        const int x = plot_left + 50 + static_cast<int>(i) * 90;
        const int y = plot_bottom - static_cast<int>(rows[i].accuracy * (plot_bottom - plot_top));
        s += "<circle cx=\"" + std::to_string(x) + "\" cy=\"" + std::to_string(y) +
             "\" r=\"5\" fill=\"steelblue\"/>\n";
        s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(plot_bottom + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
             detail::json_escape(rows[i].adjective) + "</text>\n";
        s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y - 10) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
             detail::format_double(rows[i].accuracy) + "</text>\n";
    }
    s += "</svg>\n";
    detail::write_text_file(path, s);
}

// One cell of the augmentation grid: an (adjective, ratio, preset) condition
// trained across folds. Baseline rows use adjective "baseline", ratio 0.
struct GridCell {
    std::string adjective;
    double ratio = 0.0;
    std::string preset;
    std::uint64_t seed = 0;
    bool present = true;
    std::vector<double> fold_accuracy;
    double mean_accuracy = 0.0;
    bool has_ttest = false;
    TTestResult vs_baseline;
};

struct EvalReport {
    std::vector<GridCell> cells;
    std::vector<GridCell> baselines;       // one per preset
    std::map<std::string, double> fids;    // per-adjective distance scores
    std::uint64_t seed = 0;

    // Mean fields must equal the arithmetic mean of the fold fields.
    void validate() const {
        auto check = [](const GridCell& c) {
            if (!c.present) return;
            if (c.fold_accuracy.empty()) throw StateError("report cell has no fold results");
            double m = 0.0;
            for (double a : c.fold_accuracy) m += a;
            m /= static_cast<double>(c.fold_accuracy.size());
            if (std::abs(m - c.mean_accuracy) > 1e-9)
                throw StateError("report cell mean diverges from its fold mean");
        };
        for (const auto& c : cells) check(c);
        for (const auto& b : baselines) check(b);
    }
};

// Grid description: which conditions to run and how to fold the real data.
struct GridSpec {
    std::vector<std::string> adjectives;
    std::vector<double> ratios;
    std::vector<std::string> presets;
    i64 folds = 3;
    std::uint64_t seed = 0;
    std::map<std::string, double> fids;  // optional, copied into the report
};

// Supplies the synthetic training rows for one (adjective, ratio) condition,
// or nothing if that condition has no trained generator output.
using CellSource = std::function<std::optional<DatasetManifest>(const std::string&, double)>;

namespace detail {

struct FoldData {
    Tensor train_x, val_x;
    std::vector<ClassLabel> train_y, val_y;
};

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (b.dim(0) == 0) return a;
    std::vector<float> v;
    v.reserve(static_cast<std::size_t>(a.numel() + b.numel()));
    v.insert(v.end(), a.data(), a.data() + a.numel());
    v.insert(v.end(), b.data(), b.data() + b.numel());
    Shape shape = a.shape();
    shape[0] = a.dim(0) + b.dim(0);
    return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace detail

// Train/evaluate every (adjective, ratio, preset) condition over k folds of
// the real manifest, with the cell's synthetic rows joining each fold's
// training side; validation stays purely real. A missing synthetic source
// marks the cell absent and the run continues. Baselines train on real data
// alone, one per preset, and each cell is paired-tested against the
// baseline of its preset.
inline EvalReport run_experiment_grid(const DatasetManifest& real, const CellSource& source,
                                      const ClassifierConfig& base_cfg, const GridSpec& grid) {
    if (grid.adjectives.empty() || grid.ratios.empty() || grid.presets.empty())
        throw ValueError("experiment grid: adjectives, ratios, and presets must be nonempty");

    const std::vector<DatasetManifest> folds = make_folds(real, grid.folds, grid.seed);
    std::vector<detail::FoldData> fold_data;
    for (const auto& f : folds) {
        detail::FoldData d;
        LoadedSplit tr = load_split(f, Split::train, base_cfg.side);
        LoadedSplit va = load_split(f, Split::val, base_cfg.side);
        d.train_x = tr.images;
        d.train_y = tr.labels;
        d.val_x = va.images;
        d.val_y = va.labels;
        fold_data.push_back(std::move(d));
    }

    RngStream seeds(grid.seed, "grid");
    auto fold_seed = [&](const std::string& label, i64 fold) {
        return seeds.substream(label + "/" + std::to_string(fold)).next_u64();
    };

    auto run_condition = [&](const std::string& label, const std::string& preset, const Tensor* synth_x,
                             const std::vector<ClassLabel>* synth_y) {
        std::vector<double> accs;
        for (i64 f = 0; f < grid.folds; f++) {
            const auto& d = fold_data[static_cast<std::size_t>(f)];
            Tensor tx = d.train_x;
            std::vector<ClassLabel> ty = d.train_y;
            if (synth_x && synth_x->dim(0) > 0) {
                tx = detail::concat_rows(tx, *synth_x);
                ty.insert(ty.end(), synth_y->begin(), synth_y->end());
            }
            ClassifierConfig cfg = base_cfg;
            cfg.preset = preset;
            const std::uint64_t s = fold_seed(label, f);
            Classifier model(cfg, RngStream(s, "classifier-init"));
            train_classifier(model, tx, ty, d.val_x, d.val_y, s);
            accs.push_back(detail::batched_accuracy(model, d.val_x, d.val_y));
        }
        return accs;
    };

    EvalReport report;
    report.seed = grid.seed;
    report.fids = grid.fids;

    std::map<std::string, std::vector<double>> baseline_accs;
    for (const auto& preset : grid.presets) {
        GridCell base;
        base.adjective = "baseline";
        base.ratio = 0.0;
        base.preset = preset;
        base.seed = grid.seed;
        base.fold_accuracy = run_condition("baseline/" + preset, preset, nullptr, nullptr);
        double m = 0.0;
        for (double a : base.fold_accuracy) m += a;
        base.mean_accuracy = m / static_cast<double>(base.fold_accuracy.size());
        baseline_accs[preset] = base.fold_accuracy;
        report.baselines.push_back(std::move(base));
    }

    for (const auto& adjective : grid.adjectives)
        for (double ratio : grid.ratios)
            for (const auto& preset : grid.presets) {
                GridCell cell;
                cell.adjective = adjective;
                cell.ratio = ratio;
                cell.preset = preset;
                cell.seed = grid.seed;
                const std::optional<DatasetManifest> synth = source(adjective, ratio);
                if (!synth.has_value()) {
                    cell.present = false;
                    report.cells.push_back(std::move(cell));
                    continue;
                }
                for (const auto& r : synth->rows)
                    if (!r.synthetic || r.split != Split::train)
                        throw DataError("experiment grid: cell " + adjective +
                                        " supplied a non-synthetic or non-train row");
                Tensor sx;
                std::vector<ClassLabel> sy;
                const bool have_synth = !synth->rows.empty();
                if (have_synth) {
                    LoadedSplit loaded = detail::load_all_rows(*synth, base_cfg.side);
                    sx = loaded.images;
                    sy = loaded.labels;
                }
                char label[128];
                std::snprintf(label, sizeof label, "%s/%.2f/%s", adjective.c_str(), ratio, preset.c_str());
                cell.fold_accuracy = run_condition(label, preset, have_synth ? &sx : nullptr, have_synth ? &sy : nullptr);
                double m = 0.0;
                for (double a : cell.fold_accuracy) m += a;
                cell.mean_accuracy = m / static_cast<double>(cell.fold_accuracy.size());
                if (cell.fold_accuracy.size() >= 2) {
                    cell.vs_baseline = paired_ttest(cell.fold_accuracy, baseline_accs[preset]);
                    cell.has_ttest = true;
                }
                report.cells.push_back(std::move(cell));
            }

    report.validate();
    return report;
}

namespace detail {

inline std::string cell_csv_row(const GridCell& c) {
    std::string folds;
    for (std::size_t i = 0; i < c.fold_accuracy.size(); i++) {
        if (i) folds += ";";
        folds += format_double(c.fold_accuracy[i]);
    }
    std::string p = "";
    if (c.has_ttest) p = c.vs_baseline.degenerate ? "degenerate" : format_double(c.vs_baseline.p);
    return c.adjective + "," + format_double(c.ratio) + "," + c.preset + "," + std::to_string(c.seed) + "," +
           (c.present ? "ok" : "absent") + "," + folds + "," + (c.present ? format_double(c.mean_accuracy) : "") +
           "," + p + "\n";
}

inline std::string cell_json(const GridCell& c) {
    std::string folds = "[";
    for (std::size_t i = 0; i < c.fold_accuracy.size(); i++) {
        if (i) folds += ",";
        folds += format_double(c.fold_accuracy[i]);
    }
    folds += "]";
    std::string s = "{\"adjective\":\"" + json_escape(c.adjective) + "\",\"ratio\":" + format_double(c.ratio) +
                    ",\"preset\":\"" + json_escape(c.preset) + "\",\"seed\":" + std::to_string(c.seed) +
                    ",\"present\":" + (c.present ? "true" : "false") + ",\"fold_accuracy\":" + folds;
    if (c.present) s += ",\"mean_accuracy\":" + format_double(c.mean_accuracy);
    if (c.has_ttest) {
        if (c.vs_baseline.degenerate)
            s += ",\"p_vs_baseline\":\"degenerate\"";
        else
            s += ",\"p_vs_baseline\":" + format_double(c.vs_baseline.p);
    }
    s += "}";
    return s;
}

}  // namespace detail

inline void write_report_csv(const std::string& path, const EvalReport& report) {
    std::string text = "adjective,ratio,preset,seed,status,fold_accuracy,mean_accuracy,p_vs_baseline\n";
    for (const auto& c : report.cells) text += detail::cell_csv_row(c);
    for (const auto& b : report.baselines) text += detail::cell_csv_row(b);
    detail::write_text_file(path, text);
}

inline void write_report_json(const std::string& path, const EvalReport& report) {
    std::string s = "{\n  \"seed\": " + std::to_string(report.seed) + ",\n  \"cells\": [";
    for (std::size_t i = 0; i < report.cells.size(); i++) {
        if (i) s += ",";
        s += "\n    " + detail::cell_json(report.cells[i]);
    }
    s += "\n  ],\n  \"baselines\": [";
    for (std::size_t i = 0; i < report.baselines.size(); i++) {
        if (i) s += ",";
        s += "\n    " + detail::cell_json(report.baselines[i]);
    }
    s += "\n  ],\n  \"fids\": {";
    bool first = true;
    for (const auto& [adjective, value] : report.fids) {
        if (!first) s += ",";
        first = false;
        s += "\n    \"" + detail::json_escape(adjective) + "\": " + detail::format_double(value);
    }
    s += "\n  }\n}\n";
    detail::write_text_file(path, s);
}

}  // namespace echogen
