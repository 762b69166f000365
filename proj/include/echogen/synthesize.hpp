#pragma once

// Synthetic-set generation: run the sampler once per planned class with the
// rendered conditioning prompt and write the results as 8-bit grayscale PNGs,
// returning a manifest of synthetic training rows.
//
// Deterministic: identical (model weights + adapters, adjective, plan, seed)
// produce byte-identical files. Each image owns an RNG substream keyed by
// class and image index, so chunked generation matches one-shot generation
// bit for bit and per-class work could run in parallel.

#include <filesystem>
#include <string>
#include <vector>

#include "diffusion.hpp"
#include "error.hpp"
#include "manifest.hpp"
#include "png_io.hpp"
#include "prompt.hpp"
#include "text_encoder.hpp"
#include "unet.hpp"

namespace echogen {

struct SynthesizeConfig {
    i64 stride = 1;   // sampler stride; 1 walks the full reverse chain
    i64 batch = 16;   // images per sampler call; chunk size never changes bytes
    std::string prompt_template = kDefaultPromptTemplate;
};

inline DatasetManifest synthesize(const UNet& model, const TextEncoder& enc,
                                  const NoiseSchedule& sched, const MixPlan& plan,
                                  const std::string& out_dir,
                                  const SynthesizeConfig& sc = {}) {
    for (i64 c : plan.per_class) {
        if (c < 0) throw ValueError("synthesis plan has a negative class count");
    }
    if (sc.batch < 1) throw ValueError("synthesis batch size must be positive");

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    const std::string slug = adjective_slug(plan.adjective);
    DatasetManifest m;
    std::vector<std::string> written;
    try {
        for (std::size_t ci = 0; ci < kClassNames.size(); ++ci) {
            const i64 count = plan.per_class[ci];
            if (count == 0) continue;
            const ClassLabel label = static_cast<ClassLabel>(ci);
            const std::string cname = class_name(label);

            PromptSpec spec;
            spec.adjective = plan.adjective;
            spec.label = label;
            const std::string prompt = render_prompt(spec, sc.prompt_template);
            std::vector<TokenizedPrompt> toks;
            const Tensor cond = enc.encode_prompts({prompt}, &toks);
            const Tensor mask = TextEncoder::mask_tensor(toks);

            const i64 side = model.config().side;
            for (i64 off = 0; off < count; off += sc.batch) {
                SampleConfig cfg;
                cfg.count = std::min(sc.batch, count - off);
                cfg.stride = sc.stride;
                cfg.seed = plan.seed;
                cfg.stream_label = "synth/" + cname;
                cfg.index_offset = off;
                const Tensor imgs = sample_images(model, sched, cond, mask, cfg);
                for (i64 i = 0; i < cfg.count; ++i) {
                    const ImageU8 img =
                        image_from_floats(imgs.data() + i * side * side, side, side);
                    char fname[96];
                    std::snprintf(fname, sizeof(fname), "%s_%s_%05lld.png", slug.c_str(),
                                  cname.c_str(), static_cast<long long>(off + i));
                    const std::string path = (fs::path(out_dir) / fname).generic_string();
                    write_png_gray8(path, img);
                    written.push_back(path);
                    ManifestRow r;
                    r.image_path = path;
                    r.label = label;
                    r.patient_id = fs::path(fname).stem().string();
                    r.split = Split::train;
                    r.synthetic = true;
                    r.adjective = slug;
                    m.rows.push_back(std::move(r));
                }
            }
        }
    } catch (...) {
        // Leave no partial set behind: a half-written directory would poison
        // later mixing.
        for (const std::string& p : written) {
            std::error_code rmec;
            fs::remove(p, rmec);
        }
        throw;
    }
    m.validate(false);
    return m;
}

}  // namespace echogen
