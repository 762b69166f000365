#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "echogen/classifier.hpp"
#include "echogen/eval.hpp"
#include "echogen/fid.hpp"
#include "echogen/heatmap.hpp"
#include "echogen/manifest.hpp"
#include "echogen/metrics.hpp"
#include "echogen/phantom.hpp"
#include "echogen/png_io.hpp"
#include "echogen/prompt.hpp"
#include "echogen/rng.hpp"
#include "echogen/stats.hpp"
#include "echogen/tensor.hpp"

using namespace echogen;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.generic_string(); }
};

std::vector<std::uint8_t> file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

ConfusionMatrix cm_from(const std::array<std::array<i64, 3>, 3>& c) {
    ConfusionMatrix cm;
    cm.counts = c;
    return cm;
}

// Gaussian feature matrix (n, d): col j has mean mu[j], stddev sigma[j].
Tensor gaussian_features(i64 n, const std::vector<double>& mu, const std::vector<double>& sigma, RngStream& st) {
    const i64 d = static_cast<i64>(mu.size());
    std::vector<float> v(static_cast<std::size_t>(n * d));
    for (i64 i = 0; i < n; i++)
        for (i64 j = 0; j < d; j++)
            v[static_cast<std::size_t>(i * d + j)] = static_cast<float>(
                mu[static_cast<std::size_t>(j)] + sigma[static_cast<std::size_t>(j)] * st.next_gaussian());
    return Tensor::from_data({n, d}, std::move(v));
}

Tensor noise_images(i64 n, i64 side, RngStream& st) {
    std::vector<float> v(static_cast<std::size_t>(n * side * side));
    for (auto& x : v) x = static_cast<float>(st.next_uniform() * 2.0 - 1.0);
    return Tensor::from_data({n, 1, side, side}, std::move(v));
}

// Two-class toy set: class 0 carries a bright blob at (ay, ax), class 1 an
// identical blob at (by, bx). Returns images and labels, shuffled
// deterministically.
void blob_dataset(i64 per_class, i64 side, double ay, double ax, double by, double bx, double noise,
                  std::uint64_t seed, Tensor* images, std::vector<ClassLabel>* labels) {
    RngStream st(seed, "blob-data");
    std::vector<float> v;
    std::vector<ClassLabel> lab;
    for (i64 k = 0; k < 2 * per_class; k++) {
        const bool first = k < per_class;
        const double cy = first ? ay : by, cx = first ? ax : bx;
        for (i64 y = 0; y < side; y++)
            for (i64 x = 0; x < side; x++) {
                double p = noise * (st.next_uniform() * 2.0 - 1.0);
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                p += 1.0 * std::exp(-d2 / (2.0 * 2.5 * 2.5));
                v.push_back(static_cast<float>(std::clamp(p, -1.0, 1.0)));
            }
        lab.push_back(first ? ClassLabel::benign : ClassLabel::malignant);
    }
    // Deterministic interleave so minibatches see both classes.
    std::vector<i64> order(static_cast<std::size_t>(2 * per_class));
    for (i64 i = 0; i < 2 * per_class; i++) order[static_cast<std::size_t>(i)] = i;
    for (i64 i = 2 * per_class - 1; i > 0; i--)
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(st.next_below(static_cast<std::uint64_t>(i) + 1))]);
    const i64 hw = side * side;
    std::vector<float> shuffled(v.size());
    labels->clear();
    for (std::size_t i = 0; i < order.size(); i++) {
        std::copy(v.begin() + order[i] * hw, v.begin() + (order[i] + 1) * hw,
                  shuffled.begin() + static_cast<std::ptrdiff_t>(i) * hw);
        labels->push_back(lab[static_cast<std::size_t>(order[i])]);
    }
    *images = Tensor::from_data({2 * per_class, 1, side, side}, std::move(shuffled));
}

double accuracy_of(const Classifier& model, const Tensor& x, const std::vector<ClassLabel>& y) {
    auto pred = model.predict(x);
    i64 hits = 0;
    for (std::size_t i = 0; i < y.size(); i++)
        if (pred[i] == static_cast<std::int32_t>(y[i])) hits++;
    return static_cast<double>(hits) / static_cast<double>(y.size());
}

ClassifierConfig tiny_cfg(i64 epochs, i64 side = 16) {
    ClassifierConfig cfg;
    cfg.preset = "s";
    cfg.side = side;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.lr = 1e-3f;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Confusion matrices and derived metrics
// ---------------------------------------------------------------------------

TEST_CASE("confusion matrix: construction and validation") {
    ConfusionMatrix cm = ConfusionMatrix::from_predictions({0, 0, 1, 2, 2, 2}, {0, 1, 1, 2, 0, 2});
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 1) == 1);
    CHECK(cm.at(2, 2) == 2);
    CHECK(cm.at(2, 0) == 1);
    CHECK(cm.total() == 6);
    CHECK(cm.trace() == 4);
    CHECK_THROWS_AS(ConfusionMatrix::from_predictions({0, 1}, {0}), ShapeError);
    CHECK_THROWS_AS(ConfusionMatrix::from_predictions({0, 3}, {0, 0}), ValueError);
    CHECK_THROWS_AS(ConfusionMatrix::from_predictions({0, -1}, {0, 0}), ValueError);
}

TEST_CASE("metrics: perfect classifier scores 1 everywhere") {
    const Metrics m = metrics(cm_from({{{4, 0, 0}, {0, 7, 0}, {0, 0, 9}}}));
    CHECK(m.accuracy == Catch::Approx(1.0));
    CHECK(m.macro_sensitivity == Catch::Approx(1.0));
    CHECK(m.macro_specificity == Catch::Approx(1.0));
    CHECK(m.macro_precision == Catch::Approx(1.0));
    CHECK(m.macro_f1 == Catch::Approx(1.0));
    CHECK(m.undefined_terms.empty());
    for (int c = 0; c < 3; c++) {
        REQUIRE(m.sensitivity[c].has_value());
        CHECK(*m.sensitivity[c] == Catch::Approx(1.0));
    }
}

TEST_CASE("metrics: hand-computed three-class table") {
    // One-vs-rest tables worked out by hand for each class before any
    // implementation existed; every number below is frozen from that sheet.
    const Metrics m = metrics(cm_from({{{5, 0, 0}, {0, 0, 5}, {0, 0, 5}}}));
    CHECK(m.accuracy == Catch::Approx(10.0 / 15.0).epsilon(1e-12));

    REQUIRE(m.sensitivity[0].has_value());
    REQUIRE(m.sensitivity[1].has_value());
    REQUIRE(m.sensitivity[2].has_value());
    CHECK(*m.sensitivity[0] == Catch::Approx(1.0));
    CHECK(*m.sensitivity[1] == Catch::Approx(0.0));
    CHECK(*m.sensitivity[2] == Catch::Approx(1.0));
    CHECK(m.macro_sensitivity == Catch::Approx(2.0 / 3.0).epsilon(1e-12));

    // Class 1 is never predicted: precision 0/0 is undefined and excluded.
    CHECK_FALSE(m.precision[1].has_value());
    CHECK(*m.precision[0] == Catch::Approx(1.0));
    CHECK(*m.precision[2] == Catch::Approx(0.5));
    CHECK(m.macro_precision == Catch::Approx(0.75).epsilon(1e-12));

    CHECK(*m.specificity[0] == Catch::Approx(1.0));
    CHECK(*m.specificity[1] == Catch::Approx(1.0));
    CHECK(*m.specificity[2] == Catch::Approx(0.5));
    CHECK(m.macro_specificity == Catch::Approx(5.0 / 6.0).epsilon(1e-12));

    // F1 for class 1 inherits the undefined precision; classes 0 and 2 give
    // 1.0 and 2/3, so the macro mean is 5/6.
    CHECK_FALSE(m.f1[1].has_value());
    CHECK(*m.f1[0] == Catch::Approx(1.0));
    CHECK(*m.f1[2] == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(m.macro_f1 == Catch::Approx(5.0 / 6.0).epsilon(1e-12));

    const std::set<std::string> undef(m.undefined_terms.begin(), m.undefined_terms.end());
    CHECK(undef == std::set<std::string>{"precision/malignant", "f1/malignant"});
}

TEST_CASE("metrics: uniform confusion sits at one third") {
    const Metrics m = metrics(cm_from({{{2, 2, 2}, {2, 2, 2}, {2, 2, 2}}}));
    CHECK(m.accuracy == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(m.macro_sensitivity == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(m.macro_precision == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(m.macro_specificity == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(m.undefined_terms.empty());
}

TEST_CASE("metrics: a single populated class leaves the right terms undefined") {
    const Metrics m = metrics(cm_from({{{15, 0, 0}, {0, 0, 0}, {0, 0, 0}}}));
    CHECK(m.accuracy == Catch::Approx(1.0));
    CHECK_FALSE(m.specificity[0].has_value());  // nothing outside class 0
    CHECK_FALSE(m.sensitivity[1].has_value());
    CHECK_FALSE(m.sensitivity[2].has_value());
    CHECK_FALSE(m.precision[1].has_value());
    CHECK_FALSE(m.precision[2].has_value());
    CHECK(m.macro_sensitivity == Catch::Approx(1.0));
    CHECK(m.macro_precision == Catch::Approx(1.0));
    CHECK(m.macro_specificity == Catch::Approx(1.0));
    CHECK(m.undefined_terms.size() == 7);  // spec0, sens1/2, prec1/2, f1 1/2
}

TEST_CASE("metrics: degenerate matrices are rejected") {
    CHECK_THROWS_AS(metrics(cm_from({{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}})), ValueError);
    CHECK_THROWS_AS(metrics(cm_from({{{4, 0, 0}, {0, -1, 0}, {0, 0, 2}}})), ValueError);
}

TEST_CASE("metrics: invariant under simultaneous class permutation") {
    RngStream st(404, "perm");
    const std::array<std::array<int, 3>, 6> perms = {
        {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    for (int trial = 0; trial < 30; trial++) {
        ConfusionMatrix cm;
        for (i64 r = 0; r < 3; r++)
            for (i64 c = 0; c < 3; c++) cm.at(r, c) = static_cast<i64>(st.next_below(7));
        if (cm.total() == 0) cm.at(0, 0) = 1;
        const Metrics base = metrics(cm);
        for (const auto& p : perms) {
            ConfusionMatrix q;
            for (i64 r = 0; r < 3; r++)
                for (i64 c = 0; c < 3; c++) q.at(p[static_cast<std::size_t>(r)], p[static_cast<std::size_t>(c)]) = cm.at(r, c);
            const Metrics mp = metrics(q);
            CHECK(mp.accuracy == Catch::Approx(base.accuracy).margin(1e-12));
            CHECK(mp.macro_sensitivity == Catch::Approx(base.macro_sensitivity).margin(1e-12));
            CHECK(mp.macro_specificity == Catch::Approx(base.macro_specificity).margin(1e-12));
            CHECK(mp.macro_precision == Catch::Approx(base.macro_precision).margin(1e-12));
            CHECK(mp.macro_f1 == Catch::Approx(base.macro_f1).margin(1e-12));
            CHECK(mp.undefined_terms.size() == base.undefined_terms.size());
            for (int c = 0; c < 3; c++) {
                CHECK(mp.sensitivity[p[static_cast<std::size_t>(c)]].has_value() == base.sensitivity[c].has_value());
                if (base.sensitivity[c])
                    CHECK(*mp.sensitivity[p[static_cast<std::size_t>(c)]] == Catch::Approx(*base.sensitivity[c]).margin(1e-12));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

TEST_CASE("t-test: hand-computed oracle") {
    // Differences {2,1,2,2,1}: mean 1.6, sample variance 0.3, so
    // t = 1.6 / sqrt(0.3/5) = 6.531972647421809 with 4 degrees of freedom.
    // The two-sided p-value is I_x(2, 1/2) at x = 4/(4+t^2), which has the
    // closed form (4/3 - 2*sqrt(1-x) + (2/3)*(1-x)^{3/2}) / (4/3)
    // = 0.0028378459267344 -- both worked out before the implementation.
    const TTestResult r = paired_ttest({30, 31, 29, 32, 30}, {28, 30, 27, 30, 29});
    CHECK_FALSE(r.degenerate);
    CHECK(r.t == Catch::Approx(6.531972647421809).epsilon(1e-6));
    CHECK(r.p == Catch::Approx(0.0028378459267344464).epsilon(1e-6));

    const TTestResult rev = paired_ttest({28, 30, 27, 30, 29}, {30, 31, 29, 32, 30});
    CHECK(rev.t == Catch::Approx(-r.t).margin(1e-12));
    CHECK(rev.p == Catch::Approx(r.p).margin(1e-12));
}

TEST_CASE("t-test: zero-variance differences are flagged, not infinite") {
    const TTestResult same = paired_ttest({1.5, 2.5, 3.5}, {1.5, 2.5, 3.5});
    CHECK(same.degenerate);
    const TTestResult shift = paired_ttest({1, 2, 3, 4, 5}, {2, 3, 4, 5, 6});
    CHECK(shift.degenerate);

    // Identical noise added to both sides cancels in the differences.
    RngStream st(7, "tnoise");
    std::vector<double> a, b;
    for (int i = 0; i < 8; i++) {
        const double n = st.next_gaussian();
        a.push_back(3.0 + n);
        b.push_back(3.0 + n);
    }
    CHECK(paired_ttest(a, b).degenerate);

    CHECK_THROWS_AS(paired_ttest({1, 2}, {1}), ShapeError);
    CHECK_THROWS_AS(paired_ttest({1}, {2}), ValueError);
}

TEST_CASE("t-test: antisymmetry and p-range over random draws") {
    RngStream st(99, "tfuzz");
    for (int trial = 0; trial < 50; trial++) {
        const int n = 3 + static_cast<int>(st.next_below(9));
        std::vector<double> a, b;
        for (int i = 0; i < n; i++) {
            a.push_back(st.next_gaussian() * 2.0);
            b.push_back(st.next_gaussian() * 2.0 + 0.5);
        }
        const TTestResult ab = paired_ttest(a, b), ba = paired_ttest(b, a);
        REQUIRE(ab.degenerate == ba.degenerate);
        if (ab.degenerate) continue;
        CHECK(ab.t == Catch::Approx(-ba.t).margin(1e-10));
        CHECK(ab.p == Catch::Approx(ba.p).margin(1e-10));
        CHECK(ab.p >= 0.0);
        CHECK(ab.p <= 1.0);
    }
}

// ---------------------------------------------------------------------------
// Frechet distance between feature sets
// ---------------------------------------------------------------------------

TEST_CASE("fid: identical feature sets score zero") {
    RngStream st(11, "fid-same");
    const Tensor a = gaussian_features(40, {0, 1, -2, 0.5, 3}, {1, 2, 0.5, 1, 1}, st);
    CHECK(fid(a, a) < 1e-6);
}

TEST_CASE("fid: one-dimensional gaussian closed form") {
    // For 1-D Gaussians the distance is (mu1-mu2)^2 + (s1-s2)^2 = 1 here.
    RngStream st(21, "fid-1d");
    const Tensor a = gaussian_features(20000, {0.0}, {1.0}, st);
    const Tensor b = gaussian_features(20000, {1.0}, {1.0}, st);
    CHECK(fid(a, b) == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("fid: isotropic variance scaling closed form") {
    // N(0, I2) vs N(0, 4*I2): trace term 2*(2-1)^2 = 2, means equal.
    RngStream st(22, "fid-2d");
    const Tensor a = gaussian_features(20000, {0.0, 0.0}, {1.0, 1.0}, st);
    const Tensor b = gaussian_features(20000, {0.0, 0.0}, {2.0, 2.0}, st);
    CHECK(fid(a, b) == Catch::Approx(2.0).epsilon(0.05));
}

TEST_CASE("fid: input validation") {
    RngStream st(23, "fid-bad");
    const Tensor a = gaussian_features(10, {0, 0}, {1, 1}, st);
    const Tensor b = gaussian_features(10, {0, 0, 0}, {1, 1, 1}, st);
    CHECK_THROWS_AS(fid(a, b), ShapeError);
    const Tensor single = gaussian_features(1, {0, 0}, {1, 1}, st);
    CHECK_THROWS_AS(fid(a, single), ValueError);
    CHECK_THROWS_AS(fid(Tensor::zeros({4}), Tensor::zeros({4})), ShapeError);
}

TEST_CASE("fid: symmetric and nonnegative on random sets") {
    RngStream st(24, "fid-sym");
    for (int trial = 0; trial < 10; trial++) {
        std::vector<double> mu1, mu2, s1, s2;
        for (int j = 0; j < 8; j++) {
            mu1.push_back(st.next_gaussian());
            mu2.push_back(st.next_gaussian());
            s1.push_back(0.5 + st.next_uniform());
            s2.push_back(0.5 + st.next_uniform());
        }
        const Tensor a = gaussian_features(60, mu1, s1, st);
        const Tensor b = gaussian_features(60, mu2, s2, st);
        const double ab = fid(a, b), ba = fid(b, a);
        CHECK(ab >= 0.0);
        CHECK(std::abs(ab - ba) < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

TEST_CASE("classifier: configuration presets and validation") {
    ClassifierConfig cfg;
    CHECK(cfg.widths() == std::vector<i64>{16, 32});
    cfg.preset = "m";
    CHECK(cfg.widths() == std::vector<i64>{16, 32, 64});
    CHECK(cfg.blocks_per_stage() == 1);
    cfg.preset = "l";
    CHECK(cfg.widths() == std::vector<i64>{24, 48, 96});
    CHECK(cfg.blocks_per_stage() == 2);

    cfg.preset = "xl";
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = ClassifierConfig{};
    cfg.side = 7;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = ClassifierConfig{};
    cfg.preset = "m";
    cfg.side = 18;  // not divisible by 4
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = ClassifierConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = ClassifierConfig{};
    cfg.lr = 0.0f;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = ClassifierConfig{};
    cfg.epochs = -1;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
}

TEST_CASE("classifier: forward shapes, registry, and state round trip") {
    Classifier model(tiny_cfg(0), RngStream(5, "clf"));
    RngStream st(6, "clf-x");
    const Tensor x = noise_images(2, 16, st);

    const Tensor logits = model.forward(x);
    CHECK(logits.shape() == Shape{2, 3});
    const Tensor feats = model.features(x);
    CHECK(feats.shape() == Shape{2, 32});
    const auto cap = model.forward_capture(x);
    CHECK(cap.logits.shape() == Shape{2, 3});
    CHECK(cap.feature_map.shape() == Shape{2, 32, 8, 8});

    CHECK(model.param("stem.w") != nullptr);
    CHECK(model.param("head.fc.w") != nullptr);
    CHECK(model.param("nonexistent") == nullptr);
    CHECK(model.param_count() > 0);

    // Same seed, same registry; different seed, different weights.
    Classifier twin(tiny_cfg(0), RngStream(5, "clf"));
    CHECK(twin.param_digests() == model.param_digests());
    Classifier other(tiny_cfg(0), RngStream(50, "clf"));
    CHECK(other.param_digests() != model.param_digests());

    // load_state copies every tensor: push the twin away, then restore.
    auto ts = twin.param_tensors();
    ts[0].mutable_data()[0] += 1.0f;
    CHECK(twin.param_digests() != model.param_digests());
    twin.load_state(model.params());
    CHECK(twin.param_digests() == model.param_digests());

    CHECK_THROWS_AS(model.forward(noise_images(1, 8, st)), ShapeError);
}

TEST_CASE("classifier: training is deterministic under the seed") {
    Tensor x;
    std::vector<ClassLabel> y;
    blob_dataset(8, 16, 4.0, 4.0, 12.0, 12.0, 0.15, 31, &x, &y);
    Tensor vx;
    std::vector<ClassLabel> vy;
    blob_dataset(3, 16, 4.0, 4.0, 12.0, 12.0, 0.15, 32, &vx, &vy);

    Classifier a(tiny_cfg(2), RngStream(1, "clf"));
    Classifier b(tiny_cfg(2), RngStream(1, "clf"));
    const TrainCurves ca = train_classifier(a, x, y, vx, vy, 77);
    const TrainCurves cb = train_classifier(b, x, y, vx, vy, 77);
    CHECK(a.param_digests() == b.param_digests());
    CHECK(ca.train_loss == cb.train_loss);
    CHECK(ca.val_accuracy == cb.val_accuracy);
    CHECK(ca.best_epoch == cb.best_epoch);

    Classifier c(tiny_cfg(2), RngStream(1, "clf"));
    const TrainCurves cc = train_classifier(c, x, y, vx, vy, 78);
    CHECK(c.param_digests() != a.param_digests());
    (void)cc;
}

TEST_CASE("classifier: zero epochs keeps the initial weights at chance accuracy") {
    RngStream st(41, "chance");
    const Tensor x = noise_images(24, 16, st);
    std::vector<ClassLabel> y;
    for (i64 i = 0; i < 24; i++) y.push_back(static_cast<ClassLabel>(i % 3));
    const Tensor vx = noise_images(60, 16, st);
    std::vector<ClassLabel> vy;
    for (i64 i = 0; i < 60; i++) vy.push_back(static_cast<ClassLabel>(i % 3));

    Classifier model(tiny_cfg(0), RngStream(42, "clf"));
    const auto before = model.param_digests();
    const TrainCurves curves = train_classifier(model, x, y, vx, vy, 9);
    CHECK(model.param_digests() == before);
    CHECK(curves.train_loss.empty());
    CHECK(curves.val_accuracy.empty());
    CHECK(curves.best_epoch == 0);
    CHECK(curves.best_val_accuracy >= 0.12);
    CHECK(curves.best_val_accuracy <= 0.58);
}

TEST_CASE("classifier: single-class training data is rejected") {
    RngStream st(43, "single");
    const Tensor x = noise_images(8, 16, st);
    const std::vector<ClassLabel> y(8, ClassLabel::normal);
    const Tensor vx = noise_images(4, 16, st);
    const std::vector<ClassLabel> vy(4, ClassLabel::normal);
    Classifier model(tiny_cfg(1), RngStream(44, "clf"));
    CHECK_THROWS_AS(train_classifier(model, x, y, vx, vy, 1), ValueError);
}

TEST_CASE("classifier: the best validation checkpoint is the one retained") {
    TempDir dir("echogen_eval_best");
    const DatasetManifest m = phantom_generate(12, 600, 16, dir.str());
    ClassifierConfig cfg = tiny_cfg(6);
    auto trained = train_classifier(cfg, m, 3);
    REQUIRE(trained.curves.val_accuracy.size() == 6);

    float best = trained.curves.best_val_accuracy;
    for (float acc : trained.curves.val_accuracy) CHECK(best >= acc);

    // Re-measuring the returned weights reproduces the recorded best.
    const LoadedSplit val = load_split(m, Split::val, 16);
    CHECK(accuracy_of(trained.model, val.images, val.labels) == Catch::Approx(best).margin(1e-9));
}

TEST_CASE("classifier: separates rendered phantom classes") {
    // Oracle run (60/class, preset s, 30 epochs, seed 12): validation
    // accuracy reached 0.9615; the bar of 0.85 is recorded from that run.
    TempDir dir("echogen_eval_sep");
    const DatasetManifest m = phantom_generate(60, 1200, 64, dir.str());
    ClassifierConfig cfg;
    cfg.preset = "s";
    cfg.side = 64;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.lr = 1e-3f;
    auto trained = train_classifier(cfg, m, 12);
    CHECK(trained.curves.best_val_accuracy >= 0.85f);
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

TEST_CASE("attention map: bounds and shape hold over random draws") {
    RngStream st(55, "cam-fuzz");
    for (int trial = 0; trial < 100; trial++) {
        Classifier model(tiny_cfg(0), RngStream(1000 + static_cast<std::uint64_t>(trial), "clf"));
        const Tensor img = noise_images(1, 16, st);
        const Tensor map = grad_cam(model, img, static_cast<ClassLabel>(trial % 3));
        REQUIRE(map.shape() == Shape{16, 16});
        float mx = 0.0f;
        for (i64 i = 0; i < map.numel(); i++) {
            CHECK(map.data()[i] >= 0.0f);
            CHECK(map.data()[i] <= 1.0f + 1e-6f);
            mx = std::max(mx, map.data()[i]);
        }
        // Max-normalized: the peak is 1 unless the map vanished entirely.
        CHECK((mx == 0.0f || std::abs(mx - 1.0f) < 1e-5f));
    }
}

TEST_CASE("attention map: constant-zero head yields a flat zero map") {
    Classifier model(tiny_cfg(0), RngStream(66, "clf"));
    // Zero only the head projection: logits become constant zero.
    auto zero_param = [&](const std::string& name) {
        const Tensor* p = model.param(name);
        REQUIRE(p != nullptr);
        Tensor copy = *p;
        std::fill(copy.mutable_data(), copy.mutable_data() + copy.numel(), 0.0f);
    };
    zero_param("head.fc.w");
    zero_param("head.fc.b");
    RngStream st(67, "cam-zero");
    const Tensor map = grad_cam(model, noise_images(1, 16, st), ClassLabel::benign);
    for (i64 i = 0; i < map.numel(); i++) CHECK(map.data()[i] == 0.0f);
}

TEST_CASE("attention map: localizes to the discriminative quadrant") {
    // A classifier constructed (not trained) so its benign logit reads only
    // feature channel 0, which in turn is a pass-through copy of the input:
    // the residual blocks collapse to identities once their second conv is
    // zeroed, the stem and downsample copy channel 0 with a center tap, and
    // every head-norm gain except channel 0 is zeroed. The logit then
    // depends only on where the input has mass; with input mass confined to
    // the top-left quadrant the saliency must land there. Oracle run: 0.99
    // of the mass falls inside; the 0.70 bar is recorded from that run.
    ClassifierConfig cfg = tiny_cfg(0, 32);
    Classifier model(cfg, RngStream(90, "clf"));
    auto fill = [&](const std::string& name, float value) {
        const Tensor* p = model.param(name);
        REQUIRE(p != nullptr);
        Tensor copy = *p;
        std::fill(copy.mutable_data(), copy.mutable_data() + copy.numel(), value);
    };
    auto center_tap = [&](const std::string& name) {
        fill(name, 0.0f);
        const Tensor* p = model.param(name);
        const i64 cin = p->dim(1);
        Tensor copy = *p;
        copy.mutable_data()[((0 * cin + 0) * 3 + 1) * 3 + 1] = 1.0f;  // w[0,0,1,1]
    };
    center_tap("stem.w");
    fill("stage0.block0.conv2.w", 0.0f);
    center_tap("stage0.down.w");
    fill("stage1.block0.conv2.w", 0.0f);
    fill("head.norm.gamma", 0.0f);
    {
        Tensor gamma = *model.param("head.norm.gamma");
        gamma.mutable_data()[0] = 1.0f;
        Tensor fc = *model.param("head.fc.w");
        std::fill(fc.mutable_data(), fc.mutable_data() + fc.numel(), 0.0f);
        fc.mutable_data()[0 * 3 + 0] = 1.0f;  // channel 0 -> benign logit
    }

    for (double sigma : {2.0, 2.5, 3.0}) {
        std::vector<float> v(static_cast<std::size_t>(32 * 32), 0.0f);
        for (i64 y = 0; y < 32; y++)
            for (i64 x = 0; x < 32; x++) {
                const double d2 = (y - 8.0) * (y - 8.0) + (x - 8.0) * (x - 8.0);
                v[static_cast<std::size_t>(y * 32 + x)] = static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
            }
        const Tensor img = Tensor::from_data({1, 1, 32, 32}, std::move(v));
        const Tensor map = grad_cam(model, img, ClassLabel::benign);
        double inside = 0.0, total = 0.0;
        for (i64 y = 0; y < 32; y++)
            for (i64 x = 0; x < 32; x++) {
                const double m = map.data()[y * 32 + x];
                total += m;
                if (y < 16 && x < 16) inside += m;
            }
        REQUIRE(total > 0.0);
        CHECK(inside / total >= 0.70);
    }
}

// ---------------------------------------------------------------------------
// Rank selection, probes, and the experiment grid
// ---------------------------------------------------------------------------

TEST_CASE("rank selection: argmin with smallest-rank ties") {
    CHECK(rank_select({{2, 0.463}, {4, 0.357}, {8, 0.513}}) == 4);
    CHECK(rank_select({{2, 0.5}, {4, 0.5}}) == 2);
    CHECK(rank_select({{8, 0.9}}) == 8);
    CHECK_THROWS_AS(rank_select({}), ValueError);

    RngStream st(70, "rank-fuzz");
    for (int trial = 0; trial < 20; trial++) {
        std::map<i64, double> cand;
        const int n = 2 + static_cast<int>(st.next_below(5));
        for (int i = 0; i < n; i++) cand[static_cast<i64>(1 + st.next_below(32))] = 0.1 + st.next_uniform();
        const double scale = 0.25 + 4.0 * st.next_uniform();
        std::map<i64, double> scaled;
        for (const auto& [r, f] : cand) scaled[r] = f * scale;
        CHECK(rank_select(cand) == rank_select(scaled));
    }
}

TEST_CASE("feature matrix: chunked extraction matches a single pass") {
    Classifier model(tiny_cfg(0), RngStream(71, "clf"));
    RngStream st(72, "feat");
    const Tensor x = noise_images(7, 16, st);
    const Tensor full = feature_matrix(model, x, 7);
    const Tensor chunked = feature_matrix(model, x, 3);
    REQUIRE(full.shape() == Shape{7, 32});
    REQUIRE(chunked.shape() == Shape{7, 32});
    for (i64 i = 0; i < full.numel(); i++)
        CHECK(full.data()[i] == Catch::Approx(chunked.data()[i]).margin(1e-5));
}

TEST_CASE("probe: a copy of the real test set reproduces real accuracy exactly") {
    TempDir dir("echogen_eval_probe");
    const DatasetManifest m = phantom_generate(12, 700, 16, dir.str());
    auto trained = train_classifier(tiny_cfg(5), m, 8);

    // Real test accuracy, measured directly.
    const LoadedSplit test = load_split(m, Split::test, 16);
    const double real_acc = accuracy_of(trained.model, test.images, test.labels);

    DatasetManifest copy;
    for (const auto& r : m.rows)
        if (r.split == Split::test) copy.rows.push_back(r);

    const auto rows = probe_synthetic(trained.model, {{"copy", copy}});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].adjective == "copy");
    CHECK(rows[0].count == static_cast<i64>(copy.rows.size()));
    CHECK(rows[0].accuracy == real_acc);
}

TEST_CASE("probe: pure noise sits at the class prior") {
    TempDir dir("echogen_eval_noise");
    const DatasetManifest m = phantom_generate(12, 701, 16, dir.str());
    auto trained = train_classifier(tiny_cfg(5), m, 8);

    TempDir ndir("echogen_eval_noise_imgs");
    DatasetManifest noise;
    RngStream st(702, "noise");
    for (int c = 0; c < 3; c++)
        for (int i = 0; i < 50; i++) {
            ImageU8 img;
            img.width = 16;
            img.height = 16;
            for (int p = 0; p < 256; p++) img.pixels.push_back(static_cast<std::uint8_t>(st.next_below(256)));
            char name[64];
            std::snprintf(name, sizeof name, "noise_%d_%02d.png", c, i);
            const std::string path = ndir.str() + "/" + name;
            write_png_gray8(path, img);
            ManifestRow row;
            row.image_path = path;
            row.label = static_cast<ClassLabel>(c);
            row.patient_id = std::string("n") + name;
            row.split = Split::train;
            row.synthetic = true;
            row.adjective = "noise";
            noise.rows.push_back(row);
        }

    const auto rows = probe_synthetic(trained.model, {{"noise", noise}});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].count == 150);
    CHECK(rows[0].accuracy >= 0.12);
    CHECK(rows[0].accuracy <= 0.55);
}

TEST_CASE("probe: empty sets are rejected and reports are deterministic") {
    TempDir dir("echogen_eval_probe2");
    const DatasetManifest m = phantom_generate(12, 703, 16, dir.str());
    auto trained = train_classifier(tiny_cfg(3), m, 8);

    DatasetManifest empty;
    CHECK_THROWS_AS(probe_synthetic(trained.model, {{"void", empty}}), ValueError);

    DatasetManifest copy;
    for (const auto& r : m.rows)
        if (r.split == Split::test) copy.rows.push_back(r);
    const auto rows = probe_synthetic(trained.model, {{"alpha", copy}, {"beta", copy}});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].adjective == "alpha");
    CHECK(rows[1].adjective == "beta");

    TempDir out("echogen_eval_probe_out");
    write_probe_csv(out.str() + "/probe.csv", rows);
    write_probe_svg(out.str() + "/probe.svg", rows);
    write_probe_csv(out.str() + "/probe2.csv", rows);
    write_probe_svg(out.str() + "/probe2.svg", rows);
    CHECK(file_bytes(out.str() + "/probe.csv") == file_bytes(out.str() + "/probe2.csv"));
    CHECK(file_bytes(out.str() + "/probe.svg") == file_bytes(out.str() + "/probe2.svg"));

    std::ifstream csv(out.str() + "/probe.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "adjective,count,accuracy");

    const auto svg = file_bytes(out.str() + "/probe.svg");
    const std::string svg_text(svg.begin(), svg.end());
    CHECK(svg_text.find("<svg") != std::string::npos);
    std::size_t circles = 0, pos = 0;
    while ((pos = svg_text.find("<circle", pos)) != std::string::npos) {
        circles++;
        pos++;
    }
    CHECK(circles == 2);
}

TEST_CASE("experiment grid: shape, absent cells, and byte determinism") {
    TempDir real_dir("echogen_eval_grid_real");
    const DatasetManifest real = phantom_generate(12, 800, 16, real_dir.str());
    TempDir pool_dir("echogen_eval_grid_pool");
    const DatasetManifest pool = phantom_generate(40, 801, 16, pool_dir.str());

    // Synthetic source: rows borrowed from the pool, relabeled as synthetic
    // train rows of the requested adjective; one cell is deliberately absent.
    auto source = [&](const std::string& adj, double ratio) -> std::optional<DatasetManifest> {
        if (adj == "beta" && ratio == 1.0) return std::nullopt;
        const MixPlan plan = plan_mix(real, ratio, adj, 0);
        DatasetManifest synth;
        std::array<i64, 3> taken{0, 0, 0};
        for (const auto& r : pool.rows) {
            const auto c = static_cast<std::size_t>(r.label);
            if (taken[c] >= plan.per_class[c]) continue;
            taken[c]++;
            ManifestRow row = r;
            row.split = Split::train;
            row.synthetic = true;
            row.adjective = adj;
            row.patient_id = adj + "-" + row.patient_id;
            synth.rows.push_back(row);
        }
        return synth;
    };

    ClassifierConfig cfg = tiny_cfg(1);
    GridSpec grid;
    grid.adjectives = {"alpha", "beta"};
    grid.ratios = {0.5, 1.0};
    grid.presets = {"s"};
    grid.folds = 2;
    grid.seed = 5;
    grid.fids = {{"alpha", 0.42}, {"beta", 0.57}};

    const EvalReport report = run_experiment_grid(real, source, cfg, grid);
    report.validate();
    REQUIRE(report.cells.size() == 4);
    REQUIRE(report.baselines.size() == 1);
    CHECK(report.fids.at("alpha") == 0.42);

    int absent = 0;
    for (const auto& cell : report.cells) {
        if (!cell.present) {
            absent++;
            CHECK(cell.adjective == "beta");
            CHECK(cell.ratio == 1.0);
            CHECK(cell.fold_accuracy.empty());
            continue;
        }
        REQUIRE(cell.fold_accuracy.size() == 2);
        double mean = 0.0;
        for (double a : cell.fold_accuracy) mean += a;
        mean /= 2.0;
        CHECK(cell.mean_accuracy == Catch::Approx(mean).margin(1e-9));
        CHECK(cell.has_ttest);
    }
    CHECK(absent == 1);
    for (const auto& base : report.baselines) {
        CHECK(base.adjective == "baseline");
        REQUIRE(base.fold_accuracy.size() == 2);
    }

    TempDir out("echogen_eval_grid_out");
    write_report_csv(out.str() + "/grid.csv", report);
    write_report_json(out.str() + "/grid.json", report);

    const EvalReport again = run_experiment_grid(real, source, cfg, grid);
    write_report_csv(out.str() + "/grid2.csv", again);
    write_report_json(out.str() + "/grid2.json", again);
    CHECK(file_bytes(out.str() + "/grid.csv") == file_bytes(out.str() + "/grid2.csv"));
    CHECK(file_bytes(out.str() + "/grid.json") == file_bytes(out.str() + "/grid2.json"));

    std::ifstream csv(out.str() + "/grid.csv");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(csv, line)) lines++;
    CHECK(lines == 6);  // header + 4 cells + 1 baseline
}
