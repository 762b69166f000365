#pragma once

#include <array>
#include <string>
#include <vector>

#include "echogen/error.hpp"

namespace echogen {

enum class ClassLabel { benign = 0, malignant = 1, normal = 2 };

inline constexpr std::array<const char*, 3> kClassNames = {"benign", "malignant", "normal"};

// The word that fills the {class} slot: "normal" images carry "no tumor".
inline constexpr std::array<const char*, 3> kClassTokens = {"benign", "malignant", "no"};

inline const char* class_name(ClassLabel c) { return kClassNames[static_cast<std::size_t>(c)]; }

inline ClassLabel parse_class(const std::string& s) {
    for (std::size_t i = 0; i < kClassNames.size(); i++)
        if (s == kClassNames[i]) return static_cast<ClassLabel>(i);
    throw ValueError("unknown class label '" + s + "'");
}

// Closed adjective vocabulary; the empty string means no adjective.
inline const std::vector<std::string>& adjective_vocabulary() {
    static const std::vector<std::string> v = {"",          "colorful",     "stylized",  "high-contrast",
                                               "low-contrast", "posterized", "sheared",   "solarized",
                                               "bright",    "dark"};
    return v;
}

inline bool is_valid_adjective(const std::string& adj) {
    for (const auto& a : adjective_vocabulary())
        if (a == adj) return true;
    return false;
}

// Slug used in synthetic file names where an empty adjective needs a word.
inline std::string adjective_slug(const std::string& adj) { return adj.empty() ? "none" : adj; }

struct PromptSpec {
    std::string adjective;
    ClassLabel label = ClassLabel::benign;
};

// Default template; configurable so phantom runs can substitute their own
// noun phrase while keeping the {adj}/{class} slots.
inline constexpr const char* kDefaultPromptTemplate = "{adj} ultrasound image of {class} tumor in the breast";

// Fills the two slots. An empty adjective removes "{adj} " (placeholder plus
// one following space) entirely.
inline std::string render_prompt(const PromptSpec& spec, const std::string& tmpl = kDefaultPromptTemplate) {
    if (!is_valid_adjective(spec.adjective)) throw ValueError("unknown adjective '" + spec.adjective + "'");
    const int ci = static_cast<int>(spec.label);
    if (ci < 0 || ci > 2) throw ValueError("unknown class label");
    std::string out = tmpl;
    const std::string adj_slot = "{adj}";
    const std::string class_slot = "{class}";
    auto pos = out.find(adj_slot);
    if (pos != std::string::npos) {
        if (spec.adjective.empty()) {
            std::size_t len = adj_slot.size();
            if (pos + len < out.size() && out[pos + len] == ' ') len++;
            out.erase(pos, len);
        } else {
            out.replace(pos, adj_slot.size(), spec.adjective);
        }
    }
    pos = out.find(class_slot);
    if (pos == std::string::npos) throw ValueError("prompt template lacks a {class} slot");
    out.replace(pos, class_slot.size(), kClassTokens[static_cast<std::size_t>(ci)]);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

// All adjective x class combinations, adjective-major then class-minor.
inline std::vector<PromptSpec> prompt_grid() {
    std::vector<PromptSpec> specs;
    specs.reserve(adjective_vocabulary().size() * 3);
    for (const auto& adj : adjective_vocabulary())
        for (int c = 0; c < 3; c++) specs.push_back({adj, static_cast<ClassLabel>(c)});
    return specs;
}

}  // namespace echogen
