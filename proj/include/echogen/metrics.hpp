#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "echogen/error.hpp"
#include "echogen/prompt.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

// 3x3 contingency table: rows index the true class, columns the prediction,
// both in class order (benign, malignant, normal).
struct ConfusionMatrix {
    std::array<std::array<i64, 3>, 3> counts{};

    i64 at(i64 t, i64 p) const { return counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]; }
    i64& at(i64 t, i64 p) { return counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]; }

    i64 total() const {
        i64 s = 0;
        for (const auto& row : counts)
            for (i64 c : row) s += c;
        return s;
    }

    i64 trace() const { return at(0, 0) + at(1, 1) + at(2, 2); }

    static ConfusionMatrix from_predictions(const std::vector<std::int32_t>& truth,
                                            const std::vector<std::int32_t>& pred) {
        if (truth.size() != pred.size())
            throw ShapeError("confusion matrix: " + std::to_string(truth.size()) + " labels vs " +
                             std::to_string(pred.size()) + " predictions");
        ConfusionMatrix cm;
        for (std::size_t i = 0; i < truth.size(); i++) {
            if (truth[i] < 0 || truth[i] >= 3 || pred[i] < 0 || pred[i] >= 3)
                throw ValueError("confusion matrix: class index out of range at sample " + std::to_string(i));
            cm.at(truth[i], pred[i])++;
        }
        return cm;
    }
};

// One-vs-rest metric suite. Per-class terms with a zero denominator are left
// unset, excluded from the macro means, and named in undefined_terms (as
// "metric/class"), so a report can show exactly what was averaged.
struct Metrics {
    double accuracy = 0.0;
    std::array<std::optional<double>, 3> sensitivity{}, specificity{}, precision{}, f1{};
    double macro_sensitivity = 0.0;
    double macro_specificity = 0.0;
    double macro_precision = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::string> undefined_terms;
};

inline Metrics metrics(const ConfusionMatrix& cm) {
    for (const auto& row : cm.counts)
        for (i64 c : row)
            if (c < 0) throw ValueError("metrics: negative count in confusion matrix");
    const i64 total = cm.total();
    if (total == 0) throw ValueError("metrics: empty confusion matrix");

    Metrics m;
    m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);

    auto macro = [](const std::array<std::optional<double>, 3>& per) {
        double s = 0.0;
        int n = 0;
        for (const auto& v : per)
            if (v) {
                s += *v;
                n++;
            }
        return n == 0 ? 0.0 : s / n;
    };

    for (i64 c = 0; c < 3; c++) {
        i64 tp = cm.at(c, c), fn = 0, fp = 0;
        for (i64 o = 0; o < 3; o++)
            if (o != c) {
                fn += cm.at(c, o);
                fp += cm.at(o, c);
            }
        const i64 tn = total - tp - fn - fp;
        const auto ci = static_cast<std::size_t>(c);
        const std::string cname = class_name(static_cast<ClassLabel>(c));

        if (tp + fn > 0)
            m.sensitivity[ci] = static_cast<double>(tp) / static_cast<double>(tp + fn);
        else
            m.undefined_terms.push_back("sensitivity/" + cname);
        if (tn + fp > 0)
            m.specificity[ci] = static_cast<double>(tn) / static_cast<double>(tn + fp);
        else
            m.undefined_terms.push_back("specificity/" + cname);
        if (tp + fp > 0)
            m.precision[ci] = static_cast<double>(tp) / static_cast<double>(tp + fp);
        else
            m.undefined_terms.push_back("precision/" + cname);

        if (m.precision[ci] && m.sensitivity[ci]) {
            const double p = *m.precision[ci], r = *m.sensitivity[ci];
            m.f1[ci] = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        } else {
            m.undefined_terms.push_back("f1/" + cname);
        }
    }

    m.macro_sensitivity = macro(m.sensitivity);
    m.macro_specificity = macro(m.specificity);
    m.macro_precision = macro(m.precision);
    m.macro_f1 = macro(m.f1);
    return m;
}

}  // namespace echogen
