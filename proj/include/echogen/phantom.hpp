#pragma once

// Procedural grayscale phantom dataset: a speckle-noise background plus a
// class-dependent lesion. Lets the whole pipeline (fine-tuning, generation,
// mixing, classification, evaluation) run hermetically without clinical data.
//
// Per-class recipe, all values drawn per image from its own RNG substream:
//   background  base intensity B ~ U[0.25, 0.40] of full scale; multiplicative
//               Rayleigh speckle, smoothed by two 3x3 box-blur passes and
//               mean-normalized so the pre-lesion image mean is exactly B
//   normal      no lesion
//   benign      one smooth dark ellipse: center ~ U[0.35, 0.65]*side each
//               axis, semi-axes ~ U[0.12, 0.22]*side, rotation ~ U[0, pi),
//               depth 0.40, soft edge (sigmoid width 2.8 px)
//   malignant   one dark spiculated star: center as above, base radius
//               ~ U[0.10, 0.18]*side, spike count ~ {7..11}, spike amplitude
//               ~ U[0.25, 0.45], rotation ~ U[0, 2pi), depth 0.45, sharp edge
//               (sigmoid width 0.6 px)
//
// Benign and malignant phantoms are separable by construction: the malignant
// boundary is both longer (spikes) and far sharper, so an edge-count feature
// splits the classes.
//
// Patients own 1-3 consecutive images of one class; splits are assigned per
// patient at 70/15/15 (train/val/test) by largest remainder.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "error.hpp"
#include "manifest.hpp"
#include "png_io.hpp"
#include "prompt.hpp"
#include "rng.hpp"

namespace echogen {

struct PhantomConfig {
    i64 per_class = 10;
    i64 side = 64;
    std::uint64_t seed = 0;
};

// Render one phantom image, consuming draws from `st` in a fixed order.
inline ImageU8 render_phantom(ClassLabel label, i64 side, RngStream& st) {
    if (side < 8) throw ValueError("phantom side must be at least 8, got " + std::to_string(side));
    const double b_base = 0.25 + 0.15 * st.next_uniform();

    // Lesion parameters are drawn before any pixel noise so the pixel stream
    // stays aligned across classes.
    double cx = 0, cy = 0, ax = 0, bx = 0, rot = 0, r0 = 0, amp = 0, phase = 0;
    i64 spikes = 0;
    if (label == ClassLabel::benign) {
        cx = (0.35 + 0.30 * st.next_uniform()) * static_cast<double>(side);
        cy = (0.35 + 0.30 * st.next_uniform()) * static_cast<double>(side);
        ax = (0.12 + 0.10 * st.next_uniform()) * static_cast<double>(side);
        bx = (0.12 + 0.10 * st.next_uniform()) * static_cast<double>(side);
        rot = 3.14159265358979323846 * st.next_uniform();
    } else if (label == ClassLabel::malignant) {
        cx = (0.35 + 0.30 * st.next_uniform()) * static_cast<double>(side);
        cy = (0.35 + 0.30 * st.next_uniform()) * static_cast<double>(side);
        r0 = (0.10 + 0.08 * st.next_uniform()) * static_cast<double>(side);
        spikes = 7 + st.next_below(5);
        amp = 0.25 + 0.20 * st.next_uniform();
        phase = 2.0 * 3.14159265358979323846 * st.next_uniform();
    }

    // Rayleigh speckle field
    const std::size_t n = static_cast<std::size_t>(side * side);
    std::vector<double> field(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double g1 = st.next_gaussian();
        const double g2 = st.next_gaussian();
        field[i] = std::sqrt(g1 * g1 + g2 * g2);
    }

    // Two edge-clamped 3x3 box-blur passes correlate the speckle grain.
    std::vector<double> tmp(n);
    for (int pass = 0; pass < 2; ++pass) {
        for (i64 y = 0; y < side; ++y) {
            for (i64 x = 0; x < side; ++x) {
                double acc = 0;
                for (i64 dy = -1; dy <= 1; ++dy) {
                    for (i64 dx = -1; dx <= 1; ++dx) {
                        i64 yy = y + dy;
                        i64 xx = x + dx;
                        yy = yy < 0 ? 0 : (yy >= side ? side - 1 : yy);
                        xx = xx < 0 ? 0 : (xx >= side ? side - 1 : xx);
                        acc += field[static_cast<std::size_t>(yy * side + xx)];
                    }
                }
                tmp[static_cast<std::size_t>(y * side + x)] = acc / 9.0;
            }
        }
        field.swap(tmp);
    }
    double mean = 0;
    for (double v : field) mean += v;
    mean /= static_cast<double>(n);
    for (double& v : field) v = v / mean * b_base;

    // Carve the lesion
    if (label != ClassLabel::normal) {
        const double cr = std::cos(rot);
        const double sr = std::sin(rot);
        for (i64 y = 0; y < side; ++y) {
            for (i64 x = 0; x < side; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx;
                const double dy = static_cast<double>(y) + 0.5 - cy;
                double s;  // signed distance to the boundary in pixels (inside > 0)
                double depth;
                double soft;
                if (label == ClassLabel::benign) {
                    const double u = (dx * cr + dy * sr) / ax;
                    const double v = (-dx * sr + dy * cr) / bx;
                    const double d = std::sqrt(u * u + v * v);
                    s = (1.0 - d) * (ax < bx ? ax : bx);
                    depth = 0.40;
                    soft = 2.8;
                } else {
                    const double rho = std::sqrt(dx * dx + dy * dy);
                    const double theta = std::atan2(dy, dx);
                    const double rb =
                        r0 * (1.0 + amp * std::cos(static_cast<double>(spikes) * theta + phase));
                    s = rb - rho;
                    depth = 0.45;
                    soft = 0.6;
                }
                const double w = 1.0 / (1.0 + std::exp(-s / soft));
                field[static_cast<std::size_t>(y * side + x)] *= 1.0 - depth * w;
            }
        }
    }

    ImageU8 img;
    img.width = side;
    img.height = side;
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double v = field[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

// Generate a full phantom dataset under out_dir and return its manifest.
// Deterministic: identical config -> byte-identical files and manifest. Files
// are named phantom_{class}_{index:05}.png; patients are ph{counter:04}.
inline DatasetManifest phantom_generate(const PhantomConfig& cfg, const std::string& out_dir) {
    if (cfg.per_class < 1) {
        throw ValueError("phantom per-class count must be at least 1, got " +
                         std::to_string(cfg.per_class));
    }
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    RngStream root(cfg.seed, "phantom");
    DatasetManifest m;
    i64 patient_counter = 0;

    for (std::size_t ci = 0; ci < kClassNames.size(); ++ci) {
        const ClassLabel label = static_cast<ClassLabel>(ci);
        const std::string cname = class_name(label);

        // Patients own 1-3 consecutive images.
        RngStream psz = root.substream("patients/" + cname);
        std::vector<i64> owned;  // images per patient
        i64 remaining = cfg.per_class;
        while (remaining > 0) {
            i64 take = 1 + psz.next_below(3);
            take = take > remaining ? remaining : take;
            owned.push_back(take);
            remaining -= take;
        }

        // 70/15/15 patient-level split by largest remainder.
        const std::array<i64, 3> split_counts =
            apportion_counts({14, 3, 3}, static_cast<i64>(owned.size()));

        i64 img_index = 0;
        for (std::size_t p = 0; p < owned.size(); ++p) {
            Split sp = Split::test;
            if (static_cast<i64>(p) < split_counts[0]) {
                sp = Split::train;
            } else if (static_cast<i64>(p) < split_counts[0] + split_counts[1]) {
                sp = Split::val;
            }
            char pid[32];
            std::snprintf(pid, sizeof(pid), "ph%04lld",
                          static_cast<long long>(patient_counter++));
            for (i64 j = 0; j < owned[p]; ++j, ++img_index) {
                RngStream st = root.substream(cname + "/" + std::to_string(img_index));
                const ImageU8 img = render_phantom(label, cfg.side, st);
                char fname[64];
                std::snprintf(fname, sizeof(fname), "phantom_%s_%05lld.png", cname.c_str(),
                              static_cast<long long>(img_index));
                const std::string path = (fs::path(out_dir) / fname).generic_string();
                write_png_gray8(path, img);
                ManifestRow r;
                r.image_path = path;
                r.label = label;
                r.patient_id = pid;
                r.split = sp;
                r.synthetic = false;
                m.rows.push_back(std::move(r));
            }
        }
    }
    m.validate(false);
    return m;
}

inline DatasetManifest phantom_generate(i64 per_class, std::uint64_t seed, i64 side,
                                        const std::string& out_dir) {
    PhantomConfig cfg;
    cfg.per_class = per_class;
    cfg.seed = seed;
    cfg.side = side;
    return phantom_generate(cfg, out_dir);
}

}  // namespace echogen
