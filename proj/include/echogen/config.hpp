#pragma once

// Experiment configuration: a typed plain-text `key = value` format with
// dotted key names, one assignment per line.
//
// Grammar (documented in docs/config.md):
//   - blank lines and lines whose first non-space character is '#' are ignored
//   - every other line must be `key = value`; the key must be known
//   - duplicate keys are rejected, as are values that fail to parse
//   - list values are comma-separated; string lists keep empty elements
//     (the adjective vocabulary's first entry is the empty string)
//
// Missing keys take the defaults below, which mirror the defaults of the
// modules each group configures.  `serialize_config` emits a canonical form
// (fixed key order, %.17g doubles) so that parse(serialize(c)) == c and the
// SHA-256 of the canonical text can serve as a stable identifier for a run.

#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "echogen/error.hpp"
#include "echogen/prompt.hpp"
#include "echogen/sha256.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

struct ExperimentConfig {
    std::uint64_t seed = 0;

    // forward-process noise schedule
    i64 schedule_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // denoiser dimensions
    i64 side = 64;
    i64 in_channels = 1;
    i64 base_width = 64;
    std::vector<i64> channel_mult = {1, 2, 2};
    i64 blocks_per_level = 1;
    i64 d_text = 64;
    i64 d_attn = 64;
    i64 heads = 4;
    i64 time_dim = 128;
    i64 max_len = 16;

    // base denoiser training
    i64 train_epochs = 100;
    i64 train_batch = 32;
    double train_lr = 1e-4;

    // low-rank adapter fine-tuning
    i64 lora_rank = 4;
    std::vector<i64> lora_candidates = {2, 4, 8};
    i64 lora_epochs = 20;
    double lora_lr = 1e-4;

    // sampling
    i64 sample_stride = 1;
    i64 sample_batch = 16;

    // prompts
    std::string prompt_template = kDefaultPromptTemplate;
    std::vector<std::string> adjectives = adjective_vocabulary();

    // augmentation ratios (synthetic set size as a fraction of real train)
    std::vector<double> ratios = {0.5, 1.0, 2.0};

    // downstream classifier
    std::string classifier_preset = "s";
    i64 classifier_side = 64;
    i64 classifier_epochs = 100;
    i64 classifier_batch = 32;
    double classifier_lr = 1e-3;

    // evaluation grid
    i64 eval_folds = 5;

    void validate() const {
        if (schedule_steps < 2) throw ConfigError("schedule.steps must be at least 2");
        if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start)
            throw ConfigError("need 0 < schedule.beta_start <= schedule.beta_end < 1");
        if (side < 8) throw ConfigError("unet.side must be at least 8");
        if (in_channels < 1) throw ConfigError("unet.in_channels must be positive");
        if (base_width < 1) throw ConfigError("unet.base_width must be positive");
        if (channel_mult.empty()) throw ConfigError("unet.channel_mult must be non-empty");
        for (i64 m : channel_mult)
            if (m < 1) throw ConfigError("unet.channel_mult entries must be positive");
        if (blocks_per_level < 1) throw ConfigError("unet.blocks_per_level must be positive");
        if (d_text < 2) throw ConfigError("unet.d_text must be at least 2");
        if (d_attn < 1) throw ConfigError("unet.d_attn must be positive");
        if (heads < 1) throw ConfigError("unet.heads must be positive");
        if (time_dim < 2) throw ConfigError("unet.time_dim must be at least 2");
        if (max_len < 2) throw ConfigError("text.max_len must be at least 2");
        if (train_epochs < 0) throw ConfigError("train.epochs must be non-negative");
        if (train_batch < 1) throw ConfigError("train.batch_size must be positive");
        if (!(train_lr > 0.0)) throw ConfigError("train.lr must be positive");
        if (lora_rank < 1) throw ConfigError("lora.rank must be positive");
        if (lora_candidates.empty()) throw ConfigError("lora.candidates must be non-empty");
        for (i64 r : lora_candidates)
            if (r < 1) throw ConfigError("lora.candidates entries must be positive");
        if (lora_epochs < 0) throw ConfigError("lora.epochs must be non-negative");
        if (!(lora_lr > 0.0)) throw ConfigError("lora.lr must be positive");
        if (sample_stride < 1) throw ConfigError("sample.stride must be positive");
        if (sample_batch < 1) throw ConfigError("sample.batch must be positive");
        if (prompt_template.empty()) throw ConfigError("prompt.template must be non-empty");
        if (adjectives.empty()) throw ConfigError("prompt.adjectives must be non-empty");
        if (ratios.empty()) throw ConfigError("mix.ratios must be non-empty");
        for (double r : ratios)
            if (!(r > 0.0) || !std::isfinite(r))
                throw ConfigError("mix.ratios entries must be positive and finite");
        if (classifier_preset != "s" && classifier_preset != "m" && classifier_preset != "l")
            throw ConfigError("classifier.preset must be one of s, m, l");
        if (classifier_side < 8) throw ConfigError("classifier.side must be at least 8");
        if (classifier_epochs < 0) throw ConfigError("classifier.epochs must be non-negative");
        if (classifier_batch < 1) throw ConfigError("classifier.batch_size must be positive");
        if (!(classifier_lr > 0.0)) throw ConfigError("classifier.lr must be positive");
        if (eval_folds < 2) throw ConfigError("eval.folds must be at least 2");
    }

    bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "seed",
        "schedule.steps",
        "schedule.beta_start",
        "schedule.beta_end",
        "unet.side",
        "unet.in_channels",
        "unet.base_width",
        "unet.channel_mult",
        "unet.blocks_per_level",
        "unet.d_text",
        "unet.d_attn",
        "unet.heads",
        "unet.time_dim",
        "text.max_len",
        "train.epochs",
        "train.batch_size",
        "train.lr",
        "lora.rank",
        "lora.candidates",
        "lora.epochs",
        "lora.lr",
        "sample.stride",
        "sample.batch",
        "prompt.template",
        "prompt.adjectives",
        "mix.ratios",
        "classifier.preset",
        "classifier.side",
        "classifier.epochs",
        "classifier.batch_size",
        "classifier.lr",
        "eval.folds",
    };
    return keys;
}

inline std::string trim_ws(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline i64 parse_config_i64(const std::string& key, const std::string& v) {
    if (v.empty()) throw ConfigError("key '" + key + "' has an empty integer value");
    errno = 0;
    char* end = nullptr;
    long long x = std::strtoll(v.c_str(), &end, 10);
    if (errno == ERANGE || end != v.c_str() + v.size())
        throw ConfigError("key '" + key + "': cannot parse '" + v + "' as an integer");
    return static_cast<i64>(x);
}

inline std::uint64_t parse_config_u64(const std::string& key, const std::string& v) {
    if (v.empty() || v[0] == '-')
        throw ConfigError("key '" + key + "': cannot parse '" + v +
                         "' as an unsigned integer");
    errno = 0;
    char* end = nullptr;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (errno == ERANGE || end != v.c_str() + v.size())
        throw ConfigError("key '" + key + "': cannot parse '" + v +
                         "' as an unsigned integer");
    return static_cast<std::uint64_t>(x);
}

inline double parse_config_f64(const std::string& key, const std::string& v) {
    if (v.empty()) throw ConfigError("key '" + key + "' has an empty number value");
    errno = 0;
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (errno == ERANGE || end != v.c_str() + v.size() || !std::isfinite(x))
        throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a finite number");
    return x;
}

// Split on commas, trimming each element.  Empty elements are kept: the
// adjective list legitimately contains the empty string.
inline std::vector<std::string> split_config_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(trim_ws(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim_ws(cur));
    return out;
}

inline std::vector<i64> parse_config_i64_list(const std::string& key, const std::string& v) {
    std::vector<i64> out;
    for (const std::string& e : split_config_list(v)) out.push_back(parse_config_i64(key, e));
    return out;
}

inline std::vector<double> parse_config_f64_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const std::string& e : split_config_list(v)) out.push_back(parse_config_f64(key, e));
    return out;
}

inline std::string format_config_f64(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string join_i64_list(const std::vector<i64>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); i++) {
        if (i) out += ",";
        out += std::to_string(xs[i]);
    }
    return out;
}

inline std::string join_f64_list(const std::vector<double>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); i++) {
        if (i) out += ",";
        out += format_config_f64(xs[i]);
    }
    return out;
}

inline std::string join_str_list(const std::vector<std::string>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); i++) {
        if (i) out += ",";
        out += xs[i];
    }
    return out;
}

// Assign one parsed key.  Keeping assignment and serialization as two plain
// lists in the same canonical order makes the pairing auditable at a glance.
inline void apply_config_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
    if (key == "seed") c.seed = parse_config_u64(key, v);
    else if (key == "schedule.steps") c.schedule_steps = parse_config_i64(key, v);
    else if (key == "schedule.beta_start") c.beta_start = parse_config_f64(key, v);
    else if (key == "schedule.beta_end") c.beta_end = parse_config_f64(key, v);
    else if (key == "unet.side") c.side = parse_config_i64(key, v);
    else if (key == "unet.in_channels") c.in_channels = parse_config_i64(key, v);
    else if (key == "unet.base_width") c.base_width = parse_config_i64(key, v);
    else if (key == "unet.channel_mult") c.channel_mult = parse_config_i64_list(key, v);
    else if (key == "unet.blocks_per_level") c.blocks_per_level = parse_config_i64(key, v);
    else if (key == "unet.d_text") c.d_text = parse_config_i64(key, v);
    else if (key == "unet.d_attn") c.d_attn = parse_config_i64(key, v);
    else if (key == "unet.heads") c.heads = parse_config_i64(key, v);
    else if (key == "unet.time_dim") c.time_dim = parse_config_i64(key, v);
    else if (key == "text.max_len") c.max_len = parse_config_i64(key, v);
    else if (key == "train.epochs") c.train_epochs = parse_config_i64(key, v);
    else if (key == "train.batch_size") c.train_batch = parse_config_i64(key, v);
    else if (key == "train.lr") c.train_lr = parse_config_f64(key, v);
    else if (key == "lora.rank") c.lora_rank = parse_config_i64(key, v);
    else if (key == "lora.candidates") c.lora_candidates = parse_config_i64_list(key, v);
    else if (key == "lora.epochs") c.lora_epochs = parse_config_i64(key, v);
    else if (key == "lora.lr") c.lora_lr = parse_config_f64(key, v);
    else if (key == "sample.stride") c.sample_stride = parse_config_i64(key, v);
    else if (key == "sample.batch") c.sample_batch = parse_config_i64(key, v);
    else if (key == "prompt.template") c.prompt_template = v;
    else if (key == "prompt.adjectives") c.adjectives = split_config_list(v);
    else if (key == "mix.ratios") c.ratios = parse_config_f64_list(key, v);
    else if (key == "classifier.preset") c.classifier_preset = v;
    else if (key == "classifier.side") c.classifier_side = parse_config_i64(key, v);
    else if (key == "classifier.epochs") c.classifier_epochs = parse_config_i64(key, v);
    else if (key == "classifier.batch_size") c.classifier_batch = parse_config_i64(key, v);
    else if (key == "classifier.lr") c.classifier_lr = parse_config_f64(key, v);
    else if (key == "eval.folds") c.eval_folds = parse_config_i64(key, v);
    else throw ConfigError("unknown key '" + key + "'");
}

inline std::string render_config_value(const ExperimentConfig& c, const std::string& key) {
    if (key == "seed") return std::to_string(c.seed);
    if (key == "schedule.steps") return std::to_string(c.schedule_steps);
    if (key == "schedule.beta_start") return format_config_f64(c.beta_start);
    if (key == "schedule.beta_end") return format_config_f64(c.beta_end);
    if (key == "unet.side") return std::to_string(c.side);
    if (key == "unet.in_channels") return std::to_string(c.in_channels);
    if (key == "unet.base_width") return std::to_string(c.base_width);
    if (key == "unet.channel_mult") return join_i64_list(c.channel_mult);
    if (key == "unet.blocks_per_level") return std::to_string(c.blocks_per_level);
    if (key == "unet.d_text") return std::to_string(c.d_text);
    if (key == "unet.d_attn") return std::to_string(c.d_attn);
    if (key == "unet.heads") return std::to_string(c.heads);
    if (key == "unet.time_dim") return std::to_string(c.time_dim);
    if (key == "text.max_len") return std::to_string(c.max_len);
    if (key == "train.epochs") return std::to_string(c.train_epochs);
    if (key == "train.batch_size") return std::to_string(c.train_batch);
    if (key == "train.lr") return format_config_f64(c.train_lr);
    if (key == "lora.rank") return std::to_string(c.lora_rank);
    if (key == "lora.candidates") return join_i64_list(c.lora_candidates);
    if (key == "lora.epochs") return std::to_string(c.lora_epochs);
    if (key == "lora.lr") return format_config_f64(c.lora_lr);
    if (key == "sample.stride") return std::to_string(c.sample_stride);
    if (key == "sample.batch") return std::to_string(c.sample_batch);
    if (key == "prompt.template") return c.prompt_template;
    if (key == "prompt.adjectives") return join_str_list(c.adjectives);
    if (key == "mix.ratios") return join_f64_list(c.ratios);
    if (key == "classifier.preset") return c.classifier_preset;
    if (key == "classifier.side") return std::to_string(c.classifier_side);
    if (key == "classifier.epochs") return std::to_string(c.classifier_epochs);
    if (key == "classifier.batch_size") return std::to_string(c.classifier_batch);
    if (key == "classifier.lr") return format_config_f64(c.classifier_lr);
    if (key == "eval.folds") return std::to_string(c.eval_folds);
    throw ConfigError("unknown key '" + key + "'");
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig c;
    std::set<std::string> seen;
    std::istringstream iss(text);
    std::string line;
    i64 lineno = 0;
    while (std::getline(iss, line)) {
        lineno++;
        const std::string t = detail::trim_ws(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) +
                             ": expected 'key = value', got '" + t + "'");
        const std::string key = detail::trim_ws(t.substr(0, eq));
        const std::string value = detail::trim_ws(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (!seen.insert(key).second)
            throw ConfigError("duplicate key '" + key + "' (line " +
                             std::to_string(lineno) + ")");
        detail::apply_config_key(c, key, value);
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

// Canonical form: fixed key order, one `key = value` per line.  Parsing the
// result reproduces the config exactly, so its bytes identify the experiment.
inline std::string serialize_config(const ExperimentConfig& c) {
    std::string out = "# experiment configuration (canonical form)\n";
    for (const std::string& key : detail::config_keys()) {
        out += key;
        out += " = ";
        out += detail::render_config_value(c, key);
        out += "\n";
    }
    return out;
}

inline std::string config_digest(const ExperimentConfig& c) {
    const std::string text = serialize_config(c);
    return sha256_hex(text.data(), text.size());
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write config file: " + path);
    out << serialize_config(c);
    if (!out) throw IoError("failed writing config file: " + path);
}

}  // namespace echogen
