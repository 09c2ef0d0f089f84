#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "rlm/checkpoint.hpp"
#include "rlm/corpus.hpp"
#include "rlm/model.hpp"
#include "rlm/regularizers.hpp"

namespace rlm {

// The full training recipe: SGD without momentum, global-norm gradient
// rescaling, validation-plateau learning-rate annealing, and L2 weight decay
// applied to every parameter.
struct TrainConfig {
    double lr0 = 20.0;
    double lr_decay_divisor = 4.0;
    int max_epochs = 80;
    double clip_norm = 10.0;
    double weight_decay = 1e-7;
    int batch_size = 20;
    int bptt = 35;
    double dp = 0.5;
    double dp_h = 0.4;
    double alpha = 5.0;
    double beta = 2.0;
    std::uint64_t seed = 1111;
    CellKind cell = CellKind::lstm;
    int hidden_size = 650;
    int num_layers = 2;
    bool tied = true;
    int eval_batch_size = 10;
    NormReduction reduction = NormReduction::mean_norm;
    double min_lr = 1e-4;  // stop early once annealing drives lr below this

    void validate() const {
        if (lr0 <= 0.0) throw ValueError("train: lr0 must be positive");
        if (lr_decay_divisor <= 1.0) throw ValueError("train: lr decay divisor must exceed 1");
        if (max_epochs < 1) throw ValueError("train: max_epochs must be positive");
        if (clip_norm <= 0.0) throw ValueError("train: clip_norm must be positive");
        if (weight_decay < 0.0) throw ValueError("train: weight_decay must be nonnegative");
        if (batch_size < 1 || eval_batch_size < 1)
            throw ValueError("train: batch sizes must be positive");
        if (bptt < 1) throw ValueError("train: bptt must be positive");
        if (alpha < 0.0 || beta < 0.0) throw ValueError("train: alpha/beta must be nonnegative");
    }
};

inline ModelConfig model_config(const TrainConfig& c, int vocab_size) {
    ModelConfig m;
    m.cell = c.cell;
    m.vocab_size = vocab_size;
    m.hidden_size = c.hidden_size;
    m.num_layers = c.num_layers;
    m.dp = c.dp;
    m.dp_h = c.dp_h;
    m.tied = c.tied;
    return m;
}

struct EpochRecord {
    int epoch = 0;
    double train_ppl = 0.0;
    double valid_ppl = 0.0;
    double lr = 0.0;
};

struct TrainState {
    int epoch = 0;
    double lr = 0.0;
    double best_valid_ppl = std::numeric_limits<double>::infinity();
    std::vector<EpochRecord> history;
};

// Rescales the whole gradient set so its global norm does not exceed
// max_norm; returns the applied scale (1 when already under the threshold).
inline double clip_gradients(std::span<Param* const> params, double max_norm) {
    double sq = 0.0;
    for (const Param* p : params)
        for (Real g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return 1.0;
    const double scale = max_norm / norm;
    for (Param* p : params)
        for (Real& g : p->grad) g *= scale;
    return scale;
}

inline double clip_gradients(LanguageModel& model, double max_norm) {
    auto ps = model.params();
    return clip_gradients(ps, max_norm);
}

// p <- p - lr * (grad + weight_decay * p), decay over all weights.
inline void sgd_step(std::span<Param* const> params, double lr, double weight_decay) {
    for (Param* p : params)
        for (std::size_t i = 0; i < p->value.size(); ++i)
            p->value[i] -= lr * (p->grad[i] + weight_decay * p->value[i]);
}

inline void sgd_step(LanguageModel& model, double lr, double weight_decay) {
    auto ps = model.params();
    sgd_step(ps, lr, weight_decay);
}

namespace detail {

struct SliceLoss {
    Real ce = 0.0;
    std::size_t tokens = 0;
};

}  // namespace detail

// One pass over the batched corpus with truncated BPTT: forward with dropout,
// CE + AR + TAR objective, backward, clip, SGD step, detached state carry.
// Returns exp of the token-weighted mean cross entropy (regularizer terms are
// never part of reported perplexity).
inline double run_epoch(LanguageModel& model, const BatchedCorpus& corpus,
                        const TrainConfig& cfg, double lr, Rng& rng) {
    if (corpus.n_steps < 2) throw ValueError("run_epoch: corpus too short to form targets");
    auto params = model.params();
    RnnState state = model.initial_state(corpus.batch);
    double ce_sum = 0.0;
    std::size_t token_count = 0;
    int slice_index = 0;
    for (int offset = 0; offset < corpus.n_steps - 1; offset += cfg.bptt, ++slice_index) {
        BpttSlice slice = bptt_slice(corpus, offset, cfg.bptt);
        Tape tape;
        model.zero_grads();
        auto fwd = model.forward(tape, slice.inputs, state, true, rng);
        Tensor ce = cross_entropy(fwd.logits, slice.targets.ids);
        Tensor ar = ar_loss(fwd.dropped, cfg.alpha, cfg.reduction);
        Tensor tar = tar_loss(fwd.raw, cfg.beta, cfg.reduction);
        Tensor objective = combined_objective(ce, ar, tar);
        if (!std::isfinite(objective.scalar()))
            throw NumericError("run_epoch: non-finite loss at slice " +
                               std::to_string(slice_index) + " (offset " +
                               std::to_string(offset) + ")");
        tape.backward(objective);
        clip_gradients(params, cfg.clip_norm);
        sgd_step(params, lr, cfg.weight_decay);
        state = std::move(fwd.state);
        const std::size_t tokens = static_cast<std::size_t>(slice.inputs.rows) * slice.inputs.cols;
        ce_sum += ce.scalar() * static_cast<double>(tokens);
        token_count += tokens;
    }
    return std::exp(ce_sum / static_cast<double>(token_count));
}

// Dropout disabled, state carried across slices, no parameter updates.
inline double evaluate_perplexity(LanguageModel& model, const BatchedCorpus& corpus,
                                  int bptt = 35) {
    if (corpus.n_steps < 2) throw ValueError("evaluate: corpus too short to form targets");
    Rng unused(0);
    RnnState state = model.initial_state(corpus.batch);
    double ce_sum = 0.0;
    std::size_t token_count = 0;
    for (int offset = 0; offset < corpus.n_steps - 1; offset += bptt) {
        BpttSlice slice = bptt_slice(corpus, offset, bptt);
        Tape tape;
        auto fwd = model.forward(tape, slice.inputs, state, false, unused);
        Tensor ce = cross_entropy(fwd.logits, slice.targets.ids);
        state = std::move(fwd.state);
        const std::size_t tokens = static_cast<std::size_t>(slice.inputs.rows) * slice.inputs.cols;
        ce_sum += ce.scalar() * static_cast<double>(tokens);
        token_count += tokens;
    }
    return std::exp(ce_sum / static_cast<double>(token_count));
}

// Improvement keeps the learning rate and records a new best; anything else
// divides the learning rate. Returns true on improvement.
inline bool anneal_on_plateau(TrainState& state, double new_valid_ppl, double divisor) {
    if (new_valid_ppl < state.best_valid_ppl) {
        state.best_valid_ppl = new_valid_ppl;
        return true;
    }
    state.lr /= divisor;
    return false;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"lr0", c.lr0},
            {"lr_decay_divisor", c.lr_decay_divisor},
            {"max_epochs", c.max_epochs},
            {"clip_norm", c.clip_norm},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"bptt", c.bptt},
            {"dp", c.dp},
            {"dp_h", c.dp_h},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"seed", c.seed},
            {"cell", cell_name(c.cell)},
            {"hidden_size", c.hidden_size},
            {"num_layers", c.num_layers},
            {"tied", c.tied},
            {"eval_batch_size", c.eval_batch_size},
            {"reduction", reduction_name(c.reduction)},
            {"min_lr", c.min_lr}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr0 = j.at("lr0").get<double>();
    c.lr_decay_divisor = j.at("lr_decay_divisor").get<double>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.bptt = j.at("bptt").get<int>();
    c.dp = j.at("dp").get<double>();
    c.dp_h = j.at("dp_h").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.cell = parse_cell(j.at("cell").get<std::string>());
    c.hidden_size = j.at("hidden_size").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.tied = j.at("tied").get<bool>();
    c.eval_batch_size = j.at("eval_batch_size").get<int>();
    c.reduction = parse_reduction(j.at("reduction").get<std::string>());
    c.min_lr = j.at("min_lr").get<double>();
    return c;
}

inline nlohmann::json train_state_to_json(const TrainState& s) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& r : s.history)
        hist.push_back({{"epoch", r.epoch},
                        {"train_ppl", r.train_ppl},
                        {"valid_ppl", r.valid_ppl},
                        {"lr", r.lr}});
    nlohmann::json j = {{"epoch", s.epoch}, {"lr", s.lr}, {"history", hist}};
    if (std::isfinite(s.best_valid_ppl))
        j["best_valid_ppl"] = s.best_valid_ppl;
    else
        j["best_valid_ppl"] = nullptr;
    return j;
}

inline TrainState train_state_from_json(const nlohmann::json& j) {
    TrainState s;
    s.epoch = j.at("epoch").get<int>();
    s.lr = j.at("lr").get<double>();
    if (j.at("best_valid_ppl").is_null())
        s.best_valid_ppl = std::numeric_limits<double>::infinity();
    else
        s.best_valid_ppl = j.at("best_valid_ppl").get<double>();
    for (const auto& r : j.at("history"))
        s.history.push_back(EpochRecord{r.at("epoch").get<int>(),
                                        r.at("train_ppl").get<double>(),
                                        r.at("valid_ppl").get<double>(),
                                        r.at("lr").get<double>()});
    return s;
}

inline CheckpointManifest make_manifest(LanguageModel& model, const TrainConfig& cfg,
                                        const Vocabulary& vocab, const TrainState& state) {
    CheckpointManifest m;
    m.metadata = {{"config", {{"model", model_config_to_json(model.config())},
                              {"train", train_config_to_json(cfg)}}},
                  {"vocabulary", vocabulary_to_json(vocab)},
                  {"train_state", train_state_to_json(state)}};
    m.tensors = snapshot_params(model);
    return m;
}

// Epoch loop with per-epoch validation, plateau annealing, best-checkpoint
// persistence, and a line-delimited JSON metrics log.
inline TrainState train_model(LanguageModel& model, const BatchedCorpus& train_corpus,
                              const BatchedCorpus& valid_corpus, const TrainConfig& cfg,
                              const Vocabulary& vocab, Rng& rng,
                              const std::string& checkpoint_path = "",
                              const std::string& metrics_path = "",
                              std::ostream* log = nullptr) {
    cfg.validate();
    TrainState state;
    state.lr = cfg.lr0;
    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path, std::ios::trunc);
        if (!metrics) throw IoError("cannot open metrics log: " + metrics_path);
    }
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr_used = state.lr;
        const double train_ppl = run_epoch(model, train_corpus, cfg, lr_used, rng);
        const double valid_ppl = evaluate_perplexity(model, valid_corpus, cfg.bptt);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.epoch = epoch;
        state.history.push_back(EpochRecord{epoch, train_ppl, valid_ppl, lr_used});
        const bool improved = anneal_on_plateau(state, valid_ppl, cfg.lr_decay_divisor);
        if (improved && !checkpoint_path.empty())
            save_checkpoint(checkpoint_path, make_manifest(model, cfg, vocab, state));
        if (metrics.is_open()) {
            metrics << nlohmann::json({{"epoch", epoch},
                                       {"train_ppl", train_ppl},
                                       {"valid_ppl", valid_ppl},
                                       {"lr", lr_used},
                                       {"seconds", seconds}})
                           .dump()
                    << '\n';
            metrics.flush();
        }
        if (log)
            (*log) << "epoch " << epoch << "  lr " << lr_used << "  train ppl " << train_ppl
                   << "  valid ppl " << valid_ppl << (improved ? "  *" : "") << '\n';
        if (state.lr < cfg.min_lr) break;
    }
    return state;
}

}  // namespace rlm
