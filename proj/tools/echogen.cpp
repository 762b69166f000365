// Command-line front end for the echogen pipeline.
//
// Subcommands (each wraps one library operation):
//   pretrain-base     train the conditioned denoiser from scratch
//   finetune-lora     fit low-rank adapters on a frozen base checkpoint
//   generate          sample a synthetic image set for one adjective/ratio
//   mix               append a synthetic set to a real manifest's train split
//   train-classifier  train the downstream lesion classifier
//   evaluate          run the adjective x ratio augmentation grid
//   probe             measure class recovery of a classifier on synthetic sets
//   rank-select       pick the adapter rank with the lowest score
//   report            render grid/probe CSVs as a readable summary
//
// Every artifact-producing command works inside a fresh run directory named
// by UTC timestamp plus the resolved config digest, echoes the resolved
// config there, and records command/digest/seed/wall-time in run.json.
// Identical inputs and seeds give byte-identical artifacts; only run.json's
// timestamp fields differ between reruns.  Errors print a single line
// "error: <category>: <message>" and exit nonzero.

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "echogen/checkpoint.hpp"
#include "echogen/classifier.hpp"
#include "echogen/config.hpp"
#include "echogen/diffusion.hpp"
#include "echogen/error.hpp"
#include "echogen/eval.hpp"
#include "echogen/lora.hpp"
#include "echogen/manifest.hpp"
#include "echogen/prompt.hpp"
#include "echogen/rundir.hpp"
#include "echogen/schedule.hpp"
#include "echogen/synthesize.hpp"
#include "echogen/tensor.hpp"
#include "echogen/text_encoder.hpp"
#include "echogen/unet.hpp"

namespace {

using namespace echogen;

// ---------------------------------------------------------------------------
// shared plumbing

struct CommonOpts {
    std::string config_path;
    std::string out_root;
    std::uint64_t seed = 0;
    bool have_seed = false;
};

struct RunContext {
    ExperimentConfig cfg;
    std::string digest;
    RunDir rd;
    std::chrono::steady_clock::time_point t0;
};

ExperimentConfig resolve_config(const CommonOpts& opts) {
    ExperimentConfig cfg = opts.config_path.empty() ? ExperimentConfig{} : load_config(opts.config_path);
    if (opts.have_seed) cfg.seed = opts.seed;
    cfg.validate();
    return cfg;
}

RunContext begin_run(const CommonOpts& opts) {
    RunContext ctx;
    ctx.cfg = resolve_config(opts);
    ctx.digest = config_digest(ctx.cfg);
    const std::string root = opts.out_root.empty() ? default_output_root() : opts.out_root;
    ctx.rd = create_run_dir(root, ctx.digest);
    save_config(ctx.cfg, ctx.rd.path("config.txt"));
    ctx.t0 = std::chrono::steady_clock::now();
    return ctx;
}

void finish_run(const RunContext& ctx, const std::string& command) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.t0).count();
    write_run_json(ctx.rd, command, ctx.digest, ctx.cfg.seed, wall);
    std::fprintf(stderr, "run directory: %s\n", ctx.rd.root.c_str());
}

void write_lines(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("failed writing " + path);
}

UNetConfig unet_config_of(const ExperimentConfig& cfg) {
    UNetConfig uc;
    uc.side = cfg.side;
    uc.in_channels = cfg.in_channels;
    uc.base_width = cfg.base_width;
    uc.channel_mult = cfg.channel_mult;
    uc.blocks_per_level = cfg.blocks_per_level;
    uc.d_text = cfg.d_text;
    uc.d_attn = cfg.d_attn;
    uc.heads = cfg.heads;
    uc.time_dim = cfg.time_dim;
    return uc;
}

UNet build_unet(const ExperimentConfig& cfg) {
    return UNet(unet_config_of(cfg), RngStream(cfg.seed, "unet-init"));
}

// The text encoder is an untrained featurizer; deriving its weights from a
// fixed stream (not the run seed) lets every command rebuild the identical
// encoder from the config dimensions alone, so prompts used at generation
// time match the ones the denoiser was trained against.
TextEncoder build_encoder(const ExperimentConfig& cfg) {
    return TextEncoder(cfg.d_text, cfg.max_len, RngStream(0, "text-encoder"), cfg.prompt_template);
}

ClassifierConfig classifier_config_of(const ExperimentConfig& cfg) {
    ClassifierConfig cc;
    cc.preset = cfg.classifier_preset;
    cc.side = cfg.classifier_side;
    cc.in_channels = 1;
    cc.epochs = cfg.classifier_epochs;
    cc.batch_size = cfg.classifier_batch;
    cc.lr = static_cast<float>(cfg.classifier_lr);
    return cc;
}

// Per-image conditioning: the three class prompts (no adjective) encoded
// once, then gathered by label so cond/mask rows align with the images.
std::pair<Tensor, Tensor> class_conditioning(const TextEncoder& enc, const std::vector<ClassLabel>& labels,
                                             const std::string& tmpl) {
    NoGradGuard ng;
    std::vector<std::string> prompts;
    for (std::size_t c = 0; c < kClassNames.size(); c++) {
        PromptSpec spec;
        spec.adjective = "";
        spec.label = static_cast<ClassLabel>(c);
        prompts.push_back(render_prompt(spec, tmpl));
    }
    std::vector<TokenizedPrompt> toks;
    const Tensor all = enc.encode_prompts(prompts, &toks);
    const Tensor all_mask = TextEncoder::mask_tensor(toks);
    const i64 n = static_cast<i64>(labels.size());
    const i64 len = all.dim(1), d = all.dim(2);
    Tensor cond = Tensor::zeros({n, len, d});
    Tensor mask = Tensor::zeros({n, len});
    for (i64 i = 0; i < n; i++) {
        const i64 c = static_cast<i64>(labels[static_cast<std::size_t>(i)]);
        std::memcpy(cond.mutable_data() + i * len * d, all.data() + c * len * d,
                    static_cast<std::size_t>(len * d) * sizeof(float));
        std::memcpy(mask.mutable_data() + i * len, all_mask.data() + c * len,
                    static_cast<std::size_t>(len) * sizeof(float));
    }
    return {std::move(cond), std::move(mask)};
}

// Manifests may carry paths relative to their own location (the portable form
// the generate command writes); anchor those before use so every command works
// regardless of the calling directory.
DatasetManifest load_manifest_anchored(const std::string& path) {
    DatasetManifest m = load_manifest(path);
    const std::filesystem::path dir = std::filesystem::path(path).parent_path();
    for (ManifestRow& r : m.rows) {
        const std::filesystem::path p(r.image_path);
        if (p.is_relative() && !dir.empty()) r.image_path = (dir / p).generic_string();
    }
    return m;
}

std::string epoch_log(const TrainStats& stats) {
    std::string text;
    char line[96];
    for (std::size_t i = 0; i < stats.epoch_loss.size(); i++) {
        std::snprintf(line, sizeof(line), "epoch %zu loss %.10g\n", i + 1, stats.epoch_loss[i]);
        text += line;
    }
    std::snprintf(line, sizeof(line), "steps %lld\n", static_cast<long long>(stats.steps));
    text += line;
    return text;
}

std::function<void(int, double)> stderr_epoch_progress(const char* what, i64 total) {
    return [what, total](int epoch, double loss) {
        std::fprintf(stderr, "%s epoch %d/%lld loss %.6f\n", what, epoch + 1, static_cast<long long>(total), loss);
    };
}

std::string synth_dir_name(const std::string& adjective, double ratio) {
    char pct[16];
    std::snprintf(pct, sizeof(pct), "%03lld", static_cast<long long>(std::llround(ratio * 100.0)));
    return adjective_slug(adjective) + "-" + pct;
}

// "2=0.463,4=0.357" -> ordered (key, value-string) pairs.
std::vector<std::pair<std::string, std::string>> parse_kv_list(const std::string& flag, const std::string& text) {
    if (text.empty()) throw ValueError(flag + " expects comma-separated entries like key=value");
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t comma = text.find(',', pos);
        const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        const std::size_t eq = item.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ValueError(flag + ": entry '" + item + "' is not of the form key=value");
        out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

double parse_strict_double(const std::string& flag, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || errno == ERANGE || end != v.c_str() + v.size() || !std::isfinite(x))
        throw ValueError(flag + ": cannot parse '" + v + "' as a number");
    return x;
}

i64 parse_strict_i64(const std::string& flag, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || errno == ERANGE || end != v.c_str() + v.size())
        throw ValueError(flag + ": cannot parse '" + v + "' as an integer");
    return static_cast<i64>(x);
}

// ---------------------------------------------------------------------------
// commands

void cmd_pretrain_base(const CommonOpts& opts, const std::string& manifest_path) {
    RunContext ctx = begin_run(opts);
    const ExperimentConfig& cfg = ctx.cfg;

    const DatasetManifest m = load_manifest_anchored(manifest_path);
    const LoadedSplit train = load_split(m, Split::train, cfg.side);
    UNet model = build_unet(cfg);
    const TextEncoder enc = build_encoder(cfg);
    const NoiseSchedule sched =
        NoiseSchedule::linear(static_cast<int>(cfg.schedule_steps), cfg.beta_start, cfg.beta_end);
    auto [cond, mask] = class_conditioning(enc, train.labels, cfg.prompt_template);

    TrainConfig tc;
    tc.epochs = static_cast<int>(cfg.train_epochs);
    tc.batch_size = cfg.train_batch;
    tc.lr = static_cast<float>(cfg.train_lr);
    tc.seed = cfg.seed;
    tc.on_epoch = stderr_epoch_progress("pretrain", cfg.train_epochs);
    const TrainStats stats = train_denoiser(model, sched, train.images, cond, mask, tc);

    save_checkpoint(ctx.rd.path("weights/denoiser.ckpt"), model.params());
    write_lines(ctx.rd.path("logs/pretrain.log"), epoch_log(stats));
    finish_run(ctx, "pretrain-base");
}

void cmd_finetune_lora(const CommonOpts& opts, const std::string& base_path, const std::string& manifest_path,
                       i64 rank_flag) {
    RunContext ctx = begin_run(opts);
    const ExperimentConfig& cfg = ctx.cfg;
    const i64 rank = rank_flag > 0 ? rank_flag : cfg.lora_rank;

    const DatasetManifest m = load_manifest_anchored(manifest_path);
    const LoadedSplit train = load_split(m, Split::train, cfg.side);
    UNet model = build_unet(cfg);
    model.load_state(load_checkpoint(base_path));
    auto adapters = lora_attach(model, rank, cfg.seed);
    const TextEncoder enc = build_encoder(cfg);
    const NoiseSchedule sched =
        NoiseSchedule::linear(static_cast<int>(cfg.schedule_steps), cfg.beta_start, cfg.beta_end);
    auto [cond, mask] = class_conditioning(enc, train.labels, cfg.prompt_template);

    TrainConfig tc;
    tc.epochs = static_cast<int>(cfg.lora_epochs);
    tc.batch_size = cfg.train_batch;
    tc.lr = static_cast<float>(cfg.lora_lr);
    tc.seed = cfg.seed;
    tc.on_epoch = stderr_epoch_progress("finetune", cfg.lora_epochs);
    const TrainStats stats = train_denoiser(model, sched, train.images, cond, mask, tc, adapters.get());

    save_adapters(ctx.rd.path("adapters/adapters-r" + std::to_string(rank) + ".bin"), *adapters);
    write_lines(ctx.rd.path("logs/finetune.log"), epoch_log(stats));
    finish_run(ctx, "finetune-lora");
}

void cmd_generate(const CommonOpts& opts, const std::string& base_path, const std::string& adapters_path,
                  const std::string& manifest_path, const std::string& adjective, double ratio, bool balanced) {
    RunContext ctx = begin_run(opts);
    const ExperimentConfig& cfg = ctx.cfg;

    bool known = false;
    for (const std::string& a : cfg.adjectives)
        if (a == adjective) known = true;
    if (!known) throw ValueError("adjective '" + adjective + "' is not in the configured vocabulary");

    const DatasetManifest real = load_manifest_anchored(manifest_path);
    UNet model = build_unet(cfg);
    model.load_state(load_checkpoint(base_path));
    if (!adapters_path.empty()) {
        const LoraAdapterSet set = load_adapters(adapters_path);
        verify_adapter_provenance(model, set);
        lora_merge(model, set);
    }
    const TextEncoder enc = build_encoder(cfg);
    const NoiseSchedule sched =
        NoiseSchedule::linear(static_cast<int>(cfg.schedule_steps), cfg.beta_start, cfg.beta_end);

    const MixPlan plan = plan_mix(real, ratio, adjective, cfg.seed, balanced);
    SynthesizeConfig sc;
    sc.stride = cfg.sample_stride;
    sc.batch = cfg.sample_batch;
    sc.prompt_template = cfg.prompt_template;
    const std::string out_dir = ctx.rd.path("synth/" + synth_dir_name(adjective, ratio));
    const DatasetManifest synth = synthesize(model, enc, sched, plan, out_dir, sc);

    // Rows are stored relative to the manifest so the set is byte-identical
    // across run directories and survives being moved.
    DatasetManifest portable = synth;
    for (ManifestRow& r : portable.rows)
        r.image_path = std::filesystem::path(r.image_path).filename().generic_string();
    save_manifest(portable, out_dir + "/manifest.csv");

    char line[160];
    std::snprintf(line, sizeof(line), "wrote %zu synthetic images for '%s' at ratio %.2f\n", synth.rows.size(),
                  adjective_slug(adjective).c_str(), ratio);
    write_lines(ctx.rd.path("logs/generate.log"), line);
    finish_run(ctx, "generate");
}

void cmd_mix(const CommonOpts& opts, const std::string& manifest_path, const std::string& synth_manifest_path) {
    RunContext ctx = begin_run(opts);
    const DatasetManifest real = load_manifest_anchored(manifest_path);
    const DatasetManifest synth = load_manifest_anchored(synth_manifest_path);
    const DatasetManifest mixed = mix(real, synth);
    save_manifest(mixed, ctx.rd.path("reports/mixed_manifest.csv"));

    char line[160];
    std::snprintf(line, sizeof(line), "mixed %zu real rows with %zu synthetic rows\n", real.rows.size(),
                  synth.rows.size());
    write_lines(ctx.rd.path("logs/mix.log"), line);
    finish_run(ctx, "mix");
}

void cmd_train_classifier(const CommonOpts& opts, const std::string& manifest_path) {
    RunContext ctx = begin_run(opts);
    const ExperimentConfig& cfg = ctx.cfg;

    const DatasetManifest m = load_manifest_anchored(manifest_path);
    TrainedClassifier tc = train_classifier(classifier_config_of(cfg), m, cfg.seed);

    save_checkpoint(ctx.rd.path("weights/classifier.ckpt"), tc.model.params());
    std::string curves = "epoch,train_loss,val_accuracy\n";
    char line[128];
    for (std::size_t i = 0; i < tc.curves.train_loss.size(); i++) {
        std::snprintf(line, sizeof(line), "%zu,%.10g,%.10g\n", i + 1, tc.curves.train_loss[i],
                      tc.curves.val_accuracy[i]);
        curves += line;
    }
    write_lines(ctx.rd.path("reports/curves.csv"), curves);
    std::snprintf(line, sizeof(line), "best epoch %lld val accuracy %.10g\n",
                  static_cast<long long>(tc.curves.best_epoch), tc.curves.best_val_accuracy);
    write_lines(ctx.rd.path("logs/classifier.log"), line);
    finish_run(ctx, "train-classifier");
}

std::map<std::string, double> parse_fid_map(const std::string& text) {
    std::map<std::string, double> fids;
    if (text.empty()) return fids;
    for (const auto& [key, value] : parse_kv_list("--fids", text)) {
        if (fids.count(key)) throw ValueError("--fids: duplicate entry for '" + key + "'");
        fids[key] = parse_strict_double("--fids", value);
    }
    return fids;
}

void cmd_evaluate(const CommonOpts& opts, const std::string& manifest_path, const std::string& synth_root,
                  const std::string& fids_text) {
    RunContext ctx = begin_run(opts);
    const ExperimentConfig& cfg = ctx.cfg;

    const DatasetManifest real = load_manifest_anchored(manifest_path);
    GridSpec grid;
    for (const std::string& a : cfg.adjectives) grid.adjectives.push_back(adjective_slug(a));
    grid.ratios = cfg.ratios;
    grid.presets = {cfg.classifier_preset};
    grid.folds = cfg.eval_folds;
    grid.seed = cfg.seed;
    grid.fids = parse_fid_map(fids_text);

    const CellSource source = [&](const std::string& slug, double ratio) -> std::optional<DatasetManifest> {
        const std::filesystem::path p =
            std::filesystem::path(synth_root) / synth_dir_name(slug == "none" ? "" : slug, ratio) / "manifest.csv";
        if (!std::filesystem::exists(p)) return std::nullopt;
        return load_manifest_anchored(p.generic_string());
    };

    const EvalReport report = run_experiment_grid(real, source, classifier_config_of(cfg), grid);
    write_report_csv(ctx.rd.path("reports/grid.csv"), report);
    write_report_json(ctx.rd.path("reports/grid.json"), report);

    std::size_t present = 0;
    for (const auto& c : report.cells)
        if (c.present) present++;
    char line[160];
    std::snprintf(line, sizeof(line), "evaluated %zu of %zu grid cells (%zu baselines)\n", present,
                  report.cells.size(), report.baselines.size());
    write_lines(ctx.rd.path("logs/evaluate.log"), line);
    finish_run(ctx, "evaluate");
}

void cmd_probe(const CommonOpts& opts, const std::string& classifier_path, const std::string& synth_root) {
    RunContext ctx = begin_run(opts);
    const ExperimentConfig& cfg = ctx.cfg;

    Classifier model(classifier_config_of(cfg), RngStream(cfg.seed, "classifier-init"));
    model.load_state(load_checkpoint(classifier_path));

    // One probe set per adjective: all ratio directories for its slug merged.
    std::vector<std::pair<std::string, DatasetManifest>> sets;
    for (const std::string& a : cfg.adjectives) {
        const std::string slug = adjective_slug(a);
        DatasetManifest merged;
        for (const double ratio : cfg.ratios) {
            const std::filesystem::path p =
                std::filesystem::path(synth_root) / synth_dir_name(a, ratio) / "manifest.csv";
            if (!std::filesystem::exists(p)) continue;
            const DatasetManifest part = load_manifest_anchored(p.generic_string());
            merged.rows.insert(merged.rows.end(), part.rows.begin(), part.rows.end());
        }
        if (!merged.rows.empty()) sets.emplace_back(slug, std::move(merged));
    }
    if (sets.empty()) throw ValueError("probe: no synthetic manifests found under " + synth_root);

    const std::vector<ProbeRow> rows = probe_synthetic(model, sets);
    write_probe_csv(ctx.rd.path("reports/probe.csv"), rows);
    write_probe_svg(ctx.rd.path("reports/probe.svg"), rows);

    char line[96];
    std::snprintf(line, sizeof(line), "probed %zu synthetic sets\n", rows.size());
    write_lines(ctx.rd.path("logs/probe.log"), line);
    finish_run(ctx, "probe");
}

// Prints the winning rank to stdout; its only artifact is that line, so no
// run directory is created.
void cmd_rank_select(const std::string& fids_text) {
    std::map<i64, double> scores;
    for (const auto& [key, value] : parse_kv_list("--fids", fids_text)) {
        const i64 rank = parse_strict_i64("--fids", key);
        if (scores.count(rank)) throw ValueError("--fids: duplicate entry for rank " + std::to_string(rank));
        scores[rank] = parse_strict_double("--fids", value);
    }
    std::printf("%lld\n", static_cast<long long>(rank_select(scores)));
}

// --- report: render our own grid/probe CSVs as a readable text summary -----

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::vector<std::string>> read_csv_table(const std::string& path, const std::string& expected_header) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expected_header)
        throw DataError(path + ": unexpected header '" + line + "'");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(split_fields(line));
    }
    return rows;
}

void cmd_report(const CommonOpts& opts, const std::string& grid_csv, const std::string& probe_csv) {
    RunContext ctx = begin_run(opts);

    const auto grid_rows =
        read_csv_table(grid_csv, "adjective,ratio,preset,seed,status,fold_accuracy,mean_accuracy,p_vs_baseline");
    std::string text = "augmentation grid summary\n=========================\n\n";
    char line[256];

    text += "baselines (real data only):\n";
    for (const auto& r : grid_rows) {
        if (r.size() != 8 || r[0] != "baseline") continue;
        std::snprintf(line, sizeof(line), "  preset %s: mean accuracy %s\n", r[2].c_str(), r[6].c_str());
        text += line;
    }
    text += "\ncells (adjective, ratio, preset):\n";
    std::map<std::string, double> baseline_mean;
    for (const auto& r : grid_rows)
        if (r.size() == 8 && r[0] == "baseline") baseline_mean[r[2]] = parse_strict_double("grid.csv", r[6]);
    for (const auto& r : grid_rows) {
        if (r.size() != 8 || r[0] == "baseline") continue;
        if (r[4] != "ok") {
            std::snprintf(line, sizeof(line), "  %-14s %5s  %s: absent (no synthetic set)\n", r[0].c_str(),
                          r[1].c_str(), r[2].c_str());
            text += line;
            continue;
        }
        const double mean = parse_strict_double("grid.csv", r[6]);
        std::string delta = "";
        auto it = baseline_mean.find(r[2]);
        if (it != baseline_mean.end()) {
            std::snprintf(line, sizeof(line), "%+.6f", mean - it->second);
            delta = std::string(" (") + line + " vs baseline)";
        }
        const std::string p = r[7].empty() ? "-" : r[7];
        std::snprintf(line, sizeof(line), "  %-14s %5s  %s: mean accuracy %s%s, p=%s\n", r[0].c_str(), r[1].c_str(),
                      r[2].c_str(), r[6].c_str(), delta.c_str(), p.c_str());
        text += line;
    }

    if (!probe_csv.empty()) {
        const auto probe_rows = read_csv_table(probe_csv, "adjective,count,accuracy");
        text += "\nclass recovery on synthetic sets:\n";
        for (const auto& r : probe_rows) {
            if (r.size() != 3) continue;
            std::snprintf(line, sizeof(line), "  %-14s %s images, accuracy %s\n", r[0].c_str(), r[1].c_str(),
                          r[2].c_str());
            text += line;
        }
    }

    write_lines(ctx.rd.path("reports/summary.txt"), text);
    finish_run(ctx, "report");
}

void add_common(CLI::App* sub, CommonOpts& opts) {
    sub->add_option("--config", opts.config_path, "experiment configuration file (defaults when omitted)");
    sub->add_option("--seed", opts.seed, "override the configured seed");
    sub->add_option("--out", opts.out_root, "output root for run directories (default: $ECHOGEN_RUNS or ./runs)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"text-conditioned ultrasound synthesis and augmentation pipeline"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string manifest_path, base_path, adapters_path, synth_manifest_path, synth_root;
    std::string adjective, fids_text, classifier_path, grid_csv, probe_csv;
    double ratio = 1.0;
    i64 rank_flag = 0;
    bool balanced = false;

    CLI::App* pretrain = app.add_subcommand("pretrain-base", "train the conditioned denoiser from scratch");
    add_common(pretrain, opts);
    pretrain->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();

    CLI::App* finetune = app.add_subcommand("finetune-lora", "fit low-rank adapters on a frozen base");
    add_common(finetune, opts);
    finetune->add_option("--base", base_path, "base denoiser checkpoint")->required();
    finetune->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();
    finetune->add_option("--rank", rank_flag, "adapter rank (default: configured lora.rank)");

    CLI::App* generate = app.add_subcommand("generate", "sample a synthetic set for one adjective and ratio");
    add_common(generate, opts);
    generate->add_option("--base", base_path, "base denoiser checkpoint")->required();
    generate->add_option("--adapters", adapters_path, "adapter file to merge (omit to sample the base)");
    generate->add_option("--manifest", manifest_path, "real manifest the plan is sized against")->required();
    generate->add_option("--adjective", adjective, "prompt adjective (may be empty)")->required();
    generate->add_option("--ratio", ratio, "synthetic size as a fraction of real train (0.5, 1, 2)")->required();
    generate->add_flag("--balanced", balanced, "split the total evenly across classes");

    CLI::App* mixcmd = app.add_subcommand("mix", "append a synthetic set to a real manifest");
    add_common(mixcmd, opts);
    mixcmd->add_option("--manifest", manifest_path, "real dataset manifest CSV")->required();
    mixcmd->add_option("--synth-manifest", synth_manifest_path, "synthetic manifest CSV")->required();

    CLI::App* traincls = app.add_subcommand("train-classifier", "train the downstream lesion classifier");
    add_common(traincls, opts);
    traincls->add_option("--manifest", manifest_path, "dataset manifest CSV (real or mixed)")->required();

    CLI::App* evaluate = app.add_subcommand("evaluate", "run the adjective x ratio augmentation grid");
    add_common(evaluate, opts);
    evaluate->add_option("--manifest", manifest_path, "real dataset manifest CSV")->required();
    evaluate->add_option("--synth-root", synth_root, "directory holding <adjective>-<pct>/ synthetic sets")
        ->required();
    evaluate->add_option("--fids", fids_text, "adjective=fid pairs copied into the report");

    CLI::App* probe = app.add_subcommand("probe", "measure class recovery on synthetic sets");
    add_common(probe, opts);
    probe->add_option("--classifier", classifier_path, "classifier checkpoint")->required();
    probe->add_option("--synth-root", synth_root, "directory holding <adjective>-<pct>/ synthetic sets")->required();

    CLI::App* rankselect = app.add_subcommand("rank-select", "pick the adapter rank with the lowest score");
    rankselect->add_option("--fids", fids_text, "rank=score pairs, e.g. 2=0.463,4=0.357,8=0.513")->required();

    CLI::App* reportcmd = app.add_subcommand("report", "render grid/probe CSVs as a readable summary");
    add_common(reportcmd, opts);
    reportcmd->add_option("--grid", grid_csv, "grid.csv from an evaluate run")->required();
    reportcmd->add_option("--probe", probe_csv, "probe.csv from a probe run (optional)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: usage: %s\n", e.what());
        return 2;
    }

    try {
        opts.have_seed = false;
        for (CLI::App* sub : app.get_subcommands()) {
            const CLI::Option* seed_opt = sub->get_option_no_throw("--seed");
            if (seed_opt != nullptr && seed_opt->count() > 0) opts.have_seed = true;
        }
        if (pretrain->parsed()) cmd_pretrain_base(opts, manifest_path);
        else if (finetune->parsed()) cmd_finetune_lora(opts, base_path, manifest_path, rank_flag);
        else if (generate->parsed()) cmd_generate(opts, base_path, adapters_path, manifest_path, adjective, ratio, balanced);
        else if (mixcmd->parsed()) cmd_mix(opts, manifest_path, synth_manifest_path);
        else if (traincls->parsed()) cmd_train_classifier(opts, manifest_path);
        else if (evaluate->parsed()) cmd_evaluate(opts, manifest_path, synth_root, fids_text);
        else if (probe->parsed()) cmd_probe(opts, classifier_path, synth_root);
        else if (rankselect->parsed()) cmd_rank_select(fids_text);
        else if (reportcmd->parsed()) cmd_report(opts, grid_csv, probe_csv);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", e.category().c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 1;
    }
    return 0;
}
