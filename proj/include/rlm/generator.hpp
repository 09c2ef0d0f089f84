#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rlm/corpus.hpp"
#include "rlm/model.hpp"

namespace rlm {

struct SamplerConfig {
    int num_words = 100;
    double temperature = 1.0;
    std::vector<int> excluded;  // token ids never emitted (typically <eos>, <unk>)
    std::uint64_t seed = 1111;

    void validate() const {
        if (num_words < 0) throw ValueError("sampler: num_words must be nonnegative");
        if (!(temperature > 0.0)) throw ValueError("sampler: temperature must be positive");
    }
};

// Temperature softmax over the logits with excluded ids forced to zero mass,
// then one categorical draw.
inline int sample_next(std::span<const Real> logits, double temperature,
                       std::span<const int> excluded, Rng& rng) {
    if (logits.empty()) throw ValueError("sampler: empty logit vector");
    if (!(temperature > 0.0)) throw ValueError("sampler: temperature must be positive");
    std::vector<double> probs(logits.size());
    double max_logit = -std::numeric_limits<double>::infinity();
    for (Real v : logits) max_logit = std::max(max_logit, static_cast<double>(v));
    double mass = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp((logits[i] - max_logit) / temperature);
        mass += probs[i];
    }
    for (int id : excluded)
        if (id >= 0 && static_cast<std::size_t>(id) < probs.size()) probs[id] = 0.0;
    mass = 0.0;
    for (double p : probs) mass += p;
    if (!(mass > 0.0)) throw ValueError("sampler: all probability mass excluded");
    for (double& p : probs) p /= mass;
    return static_cast<int>(rng.categorical(probs));
}

// Samples cfg.num_words token ids (the uniformly chosen start token counts as
// the first). Runs the model step by step in eval mode with carried state.
inline std::vector<int> generate(LanguageModel& model, const Vocabulary& vocab,
                                 const SamplerConfig& cfg) {
    cfg.validate();
    if (cfg.num_words == 0) return {};
    std::vector<int> allowed;
    for (int id = 0; id < static_cast<int>(vocab.size()); ++id)
        if (std::find(cfg.excluded.begin(), cfg.excluded.end(), id) == cfg.excluded.end())
            allowed.push_back(id);
    if (allowed.empty()) throw ValueError("sampler: every vocabulary id is excluded");
    Rng rng(cfg.seed);
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(cfg.num_words));
    ids.push_back(allowed[rng.below(allowed.size())]);
    RnnState state = model.initial_state(1);
    while (ids.size() < static_cast<std::size_t>(cfg.num_words)) {
        Tape tape;
        IdMatrix step{1, 1, {ids.back()}};
        auto fwd = model.forward(tape, step, state, false, rng);
        ids.push_back(sample_next(fwd.logits.values(), cfg.temperature, cfg.excluded, rng));
        state = std::move(fwd.state);
    }
    return ids;
}

// "@c@" between two words glues them with c: "4 @.@ 9" -> "4.9",
// "mid @-@ 1950s" -> "mid-1950s". A marker with nothing on one side stays
// literal. Text without markers passes through unchanged.
inline bool is_join_marker(const std::string& t) {
    return t.size() == 3 && t.front() == '@' && t.back() == '@';
}

inline std::string moses_detokenize(std::span<const std::string> tokens) {
    std::string out;
    bool glue = false;  // suppress the space before the next token
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        if (is_join_marker(t) && !out.empty() && i + 1 < tokens.size()) {
            out += t[1];
            glue = true;
            continue;
        }
        if (!out.empty() && !glue) out += ' ';
        out += t;
        glue = false;
    }
    return out;
}

inline std::string render_tokens(const Vocabulary& vocab, std::span<const int> ids) {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) tokens.push_back(vocab.token_of(id));
    return moses_detokenize(tokens);
}

}  // namespace rlm
