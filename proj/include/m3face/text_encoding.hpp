#pragma once

// Text encoders behind a small interface, plus the task-instruction prompt
// builder. The stub encoder is a pure function of its input string so every
// downstream module can be exercised offline.

#include "m3face/core/error.hpp"
#include "m3face/core/rng.hpp"

#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace m3face::text {

enum class Task { Segmentation, Landmarks, Face };

inline std::string_view instruction_prefix(Task task) {
    switch (task) {
        case Task::Segmentation: return "Generate a face segmentation:";
        case Task::Landmarks: return "Generate face landmarks:";
        case Task::Face: return "Generate a face portrait:";
    }
    throw ValidationError("unknown task");
}

inline std::string build_task_prompt(Task task, const std::string& caption) {
    if (caption.empty()) throw ValidationError("caption must not be empty");
    return std::string(instruction_prefix(task)) + " " + caption;
}

/// Sequence embedding [length, dim] and its mean-pooled vector.
struct TextEmbedding {
    int length = 0;
    int dim = 0;
    std::vector<double> tokens;  // row-major [length, dim]
    std::vector<double> pooled;  // [dim]
    std::optional<std::string> lang_hint;

    void recompute_pooled() {
        pooled.assign(static_cast<std::size_t>(dim), 0.0);
        for (int t = 0; t < length; ++t)
            for (int j = 0; j < dim; ++j) pooled[j] += tokens[static_cast<std::size_t>(t) * dim + j] / length;
    }

    void validate() const {
        if (length < 1 || dim < 1) throw ValidationError("text embedding must have at least one token");
        if (tokens.size() != static_cast<std::size_t>(length) * dim || pooled.size() != static_cast<std::size_t>(dim))
            throw ValidationError("text embedding buffers do not match its shape");
        for (double v : tokens)
            if (!std::isfinite(v)) throw ValidationError("text embedding contains non-finite values");
    }

    bool same_shape(const TextEmbedding& o) const { return length == o.length && dim == o.dim; }

    friend bool operator==(const TextEmbedding& a, const TextEmbedding& b) {
        return a.length == b.length && a.dim == b.dim && a.tokens == b.tokens && a.pooled == b.pooled;
    }
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual std::string id() const = 0;
    virtual int dim() const = 0;
    /// Throws ValidationError for unusable input, BackendError when the
    /// backend cannot run.
    virtual TextEmbedding encode(const std::string& text) const = 0;
    /// Embedding used for the unconditional branch of guidance.
    virtual TextEmbedding encode_unconditional() const = 0;
};

/// Hash-seeded token vectors: each whitespace token (ASCII-lowercased, outer
/// punctuation stripped) maps to a Gaussian vector drawn from a PRNG seeded
/// by the token's FNV-1a hash. Tokens beyond `max_tokens` are dropped.
class StubTextEncoder final : public TextEncoder {
public:
    explicit StubTextEncoder(int dim = 32, int max_tokens = 32) : dim_(dim), max_tokens_(max_tokens) {
        if (dim < 1 || max_tokens < 1) throw ValidationError("stub encoder dimensions must be positive");
    }

    std::string id() const override { return "stub"; }
    int dim() const override { return dim_; }

    static std::vector<std::string> tokenize(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        auto flush = [&] {
            std::size_t b = 0, e = cur.size();
            while (b < e && std::ispunct(static_cast<unsigned char>(cur[b]))) ++b;
            while (e > b && std::ispunct(static_cast<unsigned char>(cur[e - 1]))) --e;
            if (e > b) out.push_back(cur.substr(b, e - b));
            cur.clear();
        };
        for (char ch : text) {
            const auto uc = static_cast<unsigned char>(ch);
            if (std::isspace(uc)) {
                flush();
            } else {
                cur.push_back(uc < 128 ? static_cast<char>(std::tolower(uc)) : ch);
            }
        }
        flush();
        if (out.empty()) out.push_back(text);
        return out;
    }

    TextEmbedding encode(const std::string& text) const override {
        if (text.empty()) throw ValidationError("cannot encode an empty string");
        auto words = tokenize(text);
        if (static_cast<int>(words.size()) > max_tokens_) words.resize(static_cast<std::size_t>(max_tokens_));
        TextEmbedding e;
        e.length = static_cast<int>(words.size());
        e.dim = dim_;
        e.tokens.reserve(words.size() * static_cast<std::size_t>(dim_));
        for (const auto& w : words) {
            Rng rng(fnv1a64(w));
            for (int j = 0; j < dim_; ++j) e.tokens.push_back(0.5 * rng.normal());
        }
        e.recompute_pooled();
        return e;
    }

    TextEmbedding encode_unconditional() const override {
        TextEmbedding e;
        e.length = 1;
        e.dim = dim_;
        e.tokens.assign(static_cast<std::size_t>(dim_), 0.0);
        e.recompute_pooled();
        return e;
    }

private:
    int dim_;
    int max_tokens_;
};

/// Decorator that records every string it is asked to encode.
class RecordingTextEncoder final : public TextEncoder {
public:
    explicit RecordingTextEncoder(std::shared_ptr<const TextEncoder> inner) : inner_(std::move(inner)) {}

    std::string id() const override { return "recording:" + inner_->id(); }
    int dim() const override { return inner_->dim(); }

    TextEmbedding encode(const std::string& text) const override {
        {
            std::lock_guard lock(mu_);
            seen_.push_back(text);
        }
        return inner_->encode(text);
    }

    TextEmbedding encode_unconditional() const override { return inner_->encode_unconditional(); }

    std::vector<std::string> seen() const {
        std::lock_guard lock(mu_);
        return seen_;
    }

private:
    std::shared_ptr<const TextEncoder> inner_;
    mutable std::mutex mu_;
    mutable std::vector<std::string> seen_;
};

/// Backend factory registry keyed by the string id used in run configs.
class EncoderRegistry {
public:
    using Factory = std::function<std::shared_ptr<const TextEncoder>(int dim)>;

    static EncoderRegistry& instance() {
        static EncoderRegistry reg;
        return reg;
    }

    void add(const std::string& id, Factory f) {
        std::lock_guard lock(mu_);
        factories_[id] = std::move(f);
    }

    bool has(const std::string& id) const {
        std::lock_guard lock(mu_);
        return factories_.count(id) > 0;
    }

    std::shared_ptr<const TextEncoder> create(const std::string& id, int dim) const {
        Factory f;
        {
            std::lock_guard lock(mu_);
            auto it = factories_.find(id);
            if (it == factories_.end()) throw BackendError("text encoder backend '" + id + "' is not registered");
            f = it->second;
        }
        return f(dim);
    }

private:
    EncoderRegistry() {
        factories_["stub"] = [](int dim) { return std::make_shared<StubTextEncoder>(dim); };
    }

    mutable std::mutex mu_;
    std::map<std::string, Factory> factories_;
};

inline TextEmbedding encode_text(const TextEncoder& encoder, const std::string& text) { return encoder.encode(text); }

}  // namespace m3face::text
