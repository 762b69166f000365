#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "echogen/ops.hpp"
#include "echogen/prompt.hpp"
#include "echogen/rng.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

struct TokenizedPrompt {
    std::vector<std::int32_t> ids;  // length = max_len, padded with pad id
    std::vector<float> mask;        // 1 for real tokens, 0 for padding
    int real_count = 0;
};

// Closed-vocabulary tokenizer plus a one-block self-attention encoder that
// turns a prompt into the conditioning sequence consumed by cross-attention.
class TextEncoder {
   public:
    static constexpr std::int32_t kPadId = 0;
    static constexpr std::int32_t kUnkId = 1;

    TextEncoder(i64 d_text, i64 max_len, RngStream rng, const std::string& prompt_template = kDefaultPromptTemplate)
        : d_text_(d_text), max_len_(max_len) {
        if (d_text < 2 || max_len < 2) throw ValueError("text encoder: d_text and max_len must be at least 2");
        build_vocabulary(prompt_template);
        auto wrng = rng.substream("text");
        auto draw = [&](const std::string& name, Shape shape, float stddev) {
            auto sub = wrng.substream(name);
            return Tensor::randn(std::move(shape), sub, stddev, true);
        };
        emb_ = draw("emb", {static_cast<i64>(vocab_.size()), d_text_}, 0.02f);
        const float attn_std = 1.0f / std::sqrt(static_cast<float>(d_text_));
        wq_ = draw("sa.wq", {d_text_, d_text_}, attn_std);
        wk_ = draw("sa.wk", {d_text_, d_text_}, attn_std);
        wv_ = draw("sa.wv", {d_text_, d_text_}, attn_std);
        wo_ = draw("sa.wo", {d_text_, d_text_}, attn_std);
        build_positional();
    }

    i64 d_text() const { return d_text_; }
    i64 max_len() const { return max_len_; }
    i64 vocab_size() const { return static_cast<i64>(vocab_.size()); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    // Lowercase whitespace tokenization into the closed vocabulary; unknown
    // words map to the unknown id rather than failing.
    TokenizedPrompt tokenize(const std::string& prompt) const {
        if (prompt.empty()) throw ValueError("tokenize: empty prompt");
        TokenizedPrompt out;
        out.ids.assign(static_cast<std::size_t>(max_len_), kPadId);
        out.mask.assign(static_cast<std::size_t>(max_len_), 0.0f);
        std::istringstream iss(lowercase(prompt));
        std::string word;
        while (iss >> word && out.real_count < max_len_) {
            auto it = word_to_id_.find(word);
            out.ids[static_cast<std::size_t>(out.real_count)] = it == word_to_id_.end() ? kUnkId : it->second;
            out.mask[static_cast<std::size_t>(out.real_count)] = 1.0f;
            out.real_count++;
        }
        if (out.real_count == 0) throw ValueError("tokenize: prompt has no words");
        return out;
    }

    // (max_len x d_text) conditioning for one prompt. Pad positions carry the
    // pad embedding row untouched by position or attention, so extending the
    // padding never changes real-position outputs.
    Tensor encode(const TokenizedPrompt& tok) const {
        std::vector<TokenizedPrompt> batch{tok};
        return encode_batch(batch);
    }

    // Batched form: (batch x max_len x d_text).
    Tensor encode_batch(const std::vector<TokenizedPrompt>& toks) const {
        if (toks.empty()) throw ValueError("encode: empty batch");
        const i64 B = static_cast<i64>(toks.size());
        std::vector<std::int32_t> flat;
        flat.reserve(static_cast<std::size_t>(B * max_len_));
        for (const auto& t : toks) {
            if (static_cast<i64>(t.ids.size()) != max_len_ || t.ids.size() != t.mask.size())
                throw ShapeError("encode: token sequence length mismatch");
            if (t.real_count < 1) throw ValueError("encode: sequence has no real tokens");
            for (std::int32_t id : t.ids)
                if (id < 0 || id >= vocab_size()) throw ShapeError("encode: token id out of range");
            flat.insert(flat.end(), t.ids.begin(), t.ids.end());
        }
        Tensor x = reshape(embedding(emb_, flat), {B, max_len_, d_text_});
        // positional offsets only at real positions
        std::vector<float> pos(static_cast<std::size_t>(B * max_len_ * d_text_), 0.0f);
        for (i64 b = 0; b < B; b++)
            for (i64 p = 0; p < toks[static_cast<std::size_t>(b)].real_count; p++)
                std::copy(pos_table_.begin() + p * d_text_, pos_table_.begin() + (p + 1) * d_text_,
                          pos.begin() + (b * max_len_ + p) * d_text_);
        x = add(x, Tensor::from_data({B, max_len_, d_text_}, std::move(pos)));
        // one residual self-attention block over real positions
        Tensor q = matmul(x, wq_), k = matmul(x, wk_), v = matmul(x, wv_);
        Tensor scores = scale(bmm(q, transpose(k, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(d_text_)));
        std::vector<float> bias(static_cast<std::size_t>(B * max_len_ * max_len_), 0.0f);
        for (i64 b = 0; b < B; b++)
            for (i64 i = 0; i < max_len_; i++)
                for (i64 j = 0; j < max_len_; j++)
                    if (toks[static_cast<std::size_t>(b)].mask[static_cast<std::size_t>(j)] == 0.0f)
                        bias[static_cast<std::size_t>((b * max_len_ + i) * max_len_ + j)] = -1e9f;
        scores = add(scores, Tensor::from_data({B, max_len_, max_len_}, std::move(bias)));
        Tensor attended = matmul(bmm(softmax_lastdim(scores), v), wo_);
        Tensor out = add(x, attended);
        // pad rows are reset to the raw pad embedding so their content is a
        // pure function of the pad parameter
        std::vector<float> keep(static_cast<std::size_t>(B * max_len_ * 1), 0.0f);
        std::vector<std::int32_t> pad_ids(static_cast<std::size_t>(B * max_len_), kPadId);
        for (i64 b = 0; b < B; b++)
            for (i64 p = 0; p < max_len_; p++)
                keep[static_cast<std::size_t>(b * max_len_ + p)] = toks[static_cast<std::size_t>(b)].mask[static_cast<std::size_t>(p)];
        Tensor keep_t = Tensor::from_data({B, max_len_, 1}, std::move(keep));
        Tensor pad_rows = reshape(embedding(emb_, pad_ids), {B, max_len_, d_text_});
        Tensor inv_keep = add(scale(keep_t, -1.0f), Tensor::full({B, max_len_, 1}, 1.0f));
        return add(mul(out, keep_t), mul(pad_rows, inv_keep));
    }

    // Pre-attention embeddings (token + positional), for locality checks.
    Tensor embed_only(const TokenizedPrompt& tok) const {
        Tensor x = embedding(emb_, tok.ids);
        std::vector<float> pos(static_cast<std::size_t>(max_len_ * d_text_), 0.0f);
        for (i64 p = 0; p < tok.real_count; p++)
            std::copy(pos_table_.begin() + p * d_text_, pos_table_.begin() + (p + 1) * d_text_,
                      pos.begin() + p * d_text_);
        return add(x, Tensor::from_data({max_len_, d_text_}, std::move(pos)));
    }

    // Convenience: tokenize + encode for a batch of prompt strings.
    Tensor encode_prompts(const std::vector<std::string>& prompts, std::vector<TokenizedPrompt>* toks_out = nullptr) const {
        std::vector<TokenizedPrompt> toks;
        toks.reserve(prompts.size());
        for (const auto& p : prompts) toks.push_back(tokenize(p));
        Tensor cond = encode_batch(toks);
        if (toks_out) *toks_out = std::move(toks);
        return cond;
    }

    // (B, max_len) 0/1 mask rows aligned with encode_batch output.
    static Tensor mask_tensor(const std::vector<TokenizedPrompt>& toks) {
        if (toks.empty()) throw ValueError("mask_tensor: empty batch");
        const i64 B = static_cast<i64>(toks.size());
        const i64 m = static_cast<i64>(toks.front().mask.size());
        std::vector<float> flat;
        flat.reserve(static_cast<std::size_t>(B * m));
        for (const auto& t : toks) {
            if (static_cast<i64>(t.mask.size()) != m) throw ShapeError("mask_tensor: ragged batch");
            flat.insert(flat.end(), t.mask.begin(), t.mask.end());
        }
        return Tensor::from_data({B, m}, std::move(flat));
    }

    std::vector<std::pair<std::string, Tensor>> params() const {
        return {{"text.emb", emb_}, {"text.sa.wq", wq_}, {"text.sa.wk", wk_}, {"text.sa.wv", wv_}, {"text.sa.wo", wo_}};
    }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : params()) {
            (void)name;
            Tensor tt = t;
            tt.set_requires_grad(trainable);
        }
    }

   private:
    static std::string lowercase(const std::string& s) {
        std::string out = s;
        for (char& c : out)
            if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        return out;
    }

    void build_vocabulary(const std::string& prompt_template) {
        std::set<std::string> words;
        for (const auto& spec : prompt_grid()) {
            std::istringstream iss(render_prompt(spec, prompt_template));
            std::string w;
            while (iss >> w) words.insert(w);
        }
        vocab_ = {"<pad>", "<unk>"};
        for (const auto& w : words) vocab_.push_back(w);
        for (std::size_t i = 0; i < vocab_.size(); i++) word_to_id_[vocab_[i]] = static_cast<std::int32_t>(i);
    }

    void build_positional() {
        pos_table_.assign(static_cast<std::size_t>(max_len_ * d_text_), 0.0f);
        const i64 half = d_text_ / 2;
        for (i64 p = 0; p < max_len_; p++)
            for (i64 i = 0; i < half; i++) {
                const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
                pos_table_[static_cast<std::size_t>(p * d_text_ + i)] = static_cast<float>(std::sin(p * freq));
                pos_table_[static_cast<std::size_t>(p * d_text_ + half + i)] = static_cast<float>(std::cos(p * freq));
            }
    }

    i64 d_text_, max_len_;
    std::vector<std::string> vocab_;
    std::map<std::string, std::int32_t> word_to_id_;
    Tensor emb_, wq_, wk_, wv_, wo_;
    std::vector<float> pos_table_;
};

}  // namespace echogen
