#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rlm/checkpoint.hpp"
#include "rlm/corpus.hpp"
#include "rlm/generator.hpp"
#include "rlm/trainer.hpp"
#include "rlm/verification.hpp"

namespace rlm {

// Seed precedence: --seed flag, then config file, then RLM_SEED, then default.
inline std::optional<std::uint64_t> seed_from_env() {
    const char* s = std::getenv("RLM_SEED");
    if (!s || !*s) return std::nullopt;
    const std::string str(s);
    std::size_t pos = 0;
    unsigned long long v = 0;
    bool bad = str[0] == '-' || str[0] == '+';
    if (!bad) {
        try {
            v = std::stoull(str, &pos);
        } catch (const std::exception&) {
            bad = true;
        }
        if (!bad && pos != str.size()) bad = true;
    }
    if (bad) throw ValueError("RLM_SEED must be a nonnegative integer, got '" + str + "'");
    return v;
}

namespace detail {

// Applies config-file values to the same destinations the flags write to,
// but only for flags the user did not pass (flags override the file).
class ConfigBinder {
public:
    template <class T>
    void bind(CLI::Option* opt, const std::string& key, T& dst) {
        entries_[key] = {opt, [&dst](const nlohmann::json& v) { dst = v.get<T>(); }};
    }

    void apply(const nlohmann::json& cfg) const {
        if (!cfg.is_object()) throw ValueError("config file must hold a JSON object");
        for (auto it = cfg.begin(); it != cfg.end(); ++it) {
            auto found = entries_.find(it.key());
            if (found == entries_.end())
                throw ValueError("config: unknown key '" + it.key() + "'");
            if (found->second.opt->count() == 0) found->second.apply(it.value());
        }
    }

private:
    struct Entry {
        CLI::Option* opt;
        std::function<void(const nlohmann::json&)> apply;
    };
    std::map<std::string, Entry> entries_;
};

struct LoadedModel {
    ModelConfig config;
    Vocabulary vocab;
    CheckpointManifest manifest;
};

inline LoadedModel load_model_header(const std::string& path) {
    LoadedModel lm;
    lm.manifest = load_checkpoint(path);
    lm.config = model_config_from_json(lm.manifest.metadata.at("config").at("model"));
    lm.vocab = vocabulary_from_json(lm.manifest.metadata.at("vocabulary"));
    return lm;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"recurrent language model: train / eval / generate / gradcheck"};
    app.require_subcommand(1);
    int rc = 0;

    // ---------------- train ----------------
    TrainConfig tc;
    std::string train_path, valid_path, checkpoint_path, metrics_path, config_path;
    std::string cell_str = "lstm", reduction_str = "mean_norm";
    detail::ConfigBinder binder;
    auto* train = app.add_subcommand("train", "fit a model on a tokenized corpus");
    auto bind = [&](CLI::Option* opt, const std::string& key, auto& dst) {
        binder.bind(opt, key, dst);
        return opt;
    };
    bind(train->add_option("--train", train_path, "training corpus, one sentence per line"),
         "train", train_path);
    bind(train->add_option("--valid", valid_path, "validation corpus"), "valid", valid_path);
    bind(train->add_option("--checkpoint", checkpoint_path, "where to write the best model"),
         "checkpoint", checkpoint_path);
    bind(train->add_option("--metrics", metrics_path, "line-delimited JSON metrics log"),
         "metrics", metrics_path);
    bind(train->add_option("--lr", tc.lr0, "initial learning rate"), "lr", tc.lr0);
    bind(train->add_option("--lr-decay", tc.lr_decay_divisor, "plateau divisor"), "lr-decay",
         tc.lr_decay_divisor);
    bind(train->add_option("--max-epochs", tc.max_epochs), "max-epochs", tc.max_epochs);
    bind(train->add_option("--clip", tc.clip_norm, "global gradient norm cap"), "clip",
         tc.clip_norm);
    bind(train->add_option("--weight-decay", tc.weight_decay), "weight-decay", tc.weight_decay);
    bind(train->add_option("--batch", tc.batch_size), "batch", tc.batch_size);
    bind(train->add_option("--bptt", tc.bptt, "truncated backprop length"), "bptt", tc.bptt);
    bind(train->add_option("--dp", tc.dp, "input/output dropout rate"), "dp", tc.dp);
    bind(train->add_option("--dp-h", tc.dp_h, "between-layer dropout rate"), "dp-h", tc.dp_h);
    bind(train->add_option("--alpha", tc.alpha, "activation regularization weight"), "alpha",
         tc.alpha);
    bind(train->add_option("--beta", tc.beta, "temporal activation regularization weight"),
         "beta", tc.beta);
    auto* o_seed = bind(train->add_option("--seed", tc.seed), "seed", tc.seed);
    bind(train->add_option("--cell", cell_str, "lstm|gru|tanh"), "cell", cell_str);
    bind(train->add_option("--hidden", tc.hidden_size), "hidden", tc.hidden_size);
    bind(train->add_option("--layers", tc.num_layers), "layers", tc.num_layers);
    bind(train->add_flag("--tied,!--untied", tc.tied, "share embedding and decoder weights"),
         "tied", tc.tied);
    bind(train->add_option("--eval-batch", tc.eval_batch_size), "eval-batch",
         tc.eval_batch_size);
    bind(train->add_option("--reduction", reduction_str, "mean_norm|flat_norm|mean_square"),
         "reduction", reduction_str);
    bind(train->add_option("--min-lr", tc.min_lr, "stop once annealing falls below this"),
         "min-lr", tc.min_lr);
    train->add_option("--config", config_path, "JSON file with keys mirroring the flags");

    train->callback([&]() {
        bool config_set_seed = false;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw IoError("cannot open config file: " + config_path);
            nlohmann::json cfg;
            try {
                in >> cfg;
            } catch (const nlohmann::json::exception& e) {
                throw IoError("config file " + config_path + ": " + std::string(e.what()));
            }
            binder.apply(cfg);
            config_set_seed = cfg.contains("seed");
        }
        if (o_seed->count() == 0 && !config_set_seed)
            if (auto s = seed_from_env()) tc.seed = *s;
        tc.cell = parse_cell(cell_str);
        tc.reduction = parse_reduction(reduction_str);
        tc.validate();
        if (train_path.empty() || valid_path.empty())
            throw ValueError("train: --train and --valid corpus paths are required");
        auto train_lines = read_lines(train_path);
        auto valid_lines = read_lines(valid_path);
        Vocabulary vocab = build_vocabulary(tokens_of_lines(train_lines));
        BatchedCorpus train_c = batchify(encode(train_lines, vocab), tc.batch_size);
        BatchedCorpus valid_c = batchify(encode(valid_lines, vocab), tc.eval_batch_size);
        Rng rng(tc.seed);
        LanguageModel model(model_config(tc, static_cast<int>(vocab.size())), rng);
        TrainState st = train_model(model, train_c, valid_c, tc, vocab, rng, checkpoint_path,
                                    metrics_path, &std::cout);
        std::cout << std::setprecision(12) << "final valid ppl " << st.history.back().valid_ppl
                  << "\nbest valid ppl " << st.best_valid_ppl << '\n';
    });

    // ---------------- eval ----------------
    std::string e_ckpt, e_data, e_cell;
    int e_batch = 10, e_bptt = 35, e_hidden = 0, e_layers = 0;
    auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
    eval->add_option("--checkpoint", e_ckpt)->required();
    eval->add_option("--data", e_data, "corpus to score")->required();
    eval->add_option("--batch", e_batch);
    eval->add_option("--bptt", e_bptt);
    eval->add_option("--cell", e_cell, "cross-check the checkpoint against this cell kind");
    eval->add_option("--hidden", e_hidden, "cross-check hidden size");
    eval->add_option("--layers", e_layers, "cross-check layer count");
    eval->callback([&]() {
        auto lm = detail::load_model_header(e_ckpt);
        if (!e_cell.empty() || e_hidden > 0 || e_layers > 0) {
            ModelConfig requested = lm.config;
            if (!e_cell.empty()) requested.cell = parse_cell(e_cell);
            if (e_hidden > 0) requested.hidden_size = e_hidden;
            if (e_layers > 0) requested.num_layers = e_layers;
            validate_model_config(lm.config, requested);
        }
        Rng rng(0);
        LanguageModel model(lm.config, rng);
        load_params(model, lm.manifest);
        BatchedCorpus data = batchify(encode(read_lines(e_data), lm.vocab), e_batch);
        std::cout << std::setprecision(12) << "perplexity " << evaluate_perplexity(model, data, e_bptt)
                  << '\n';
    });

    // ---------------- generate ----------------
    SamplerConfig sc;
    std::string g_ckpt, g_out;
    auto* gen = app.add_subcommand("generate", "sample text from a checkpoint");
    gen->add_option("--checkpoint", g_ckpt)->required();
    gen->add_option("--words", sc.num_words, "number of tokens to sample");
    gen->add_option("--temperature", sc.temperature);
    auto* g_seed = gen->add_option("--seed", sc.seed);
    gen->add_option("--out", g_out, "write text here instead of stdout");
    gen->callback([&]() {
        if (g_seed->count() == 0)
            if (auto s = seed_from_env()) sc.seed = *s;
        sc.validate();
        auto lm = detail::load_model_header(g_ckpt);
        Rng rng(0);
        LanguageModel model(lm.config, rng);
        load_params(model, lm.manifest);
        sc.excluded = {lm.vocab.eos_id, lm.vocab.unk_id};
        const std::string text = render_tokens(lm.vocab, generate(model, lm.vocab, sc));
        if (!g_out.empty()) {
            std::ofstream out(g_out);
            if (!out) throw IoError("cannot open output file: " + g_out);
            if (!text.empty()) out << text << '\n';
        } else if (!text.empty()) {
            std::cout << text << '\n';
        }
    });

    // ---------------- gradcheck ----------------
    std::string gc_cell = "all";
    bool gc_corrupt = false;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
    gc->add_option("--cell", gc_cell, "lstm|gru|tanh|all");
    gc->add_flag("--corrupt", gc_corrupt,
                 "perturb one analytic gradient first (the check must then fail)");
    gc->callback([&]() {
        std::vector<CheckResult> results;
        if (gc_cell == "all")
            results = run_verification(gc_corrupt);
        else
            results.push_back(verify_model_gradients(parse_cell(gc_cell), gc_corrupt));
        std::vector<std::string> failing;
        for (const auto& r : results) {
            std::cout << (r.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(20)
                      << r.name << "  max rel err " << std::scientific << std::setprecision(3)
                      << r.max_rel_error << "  (threshold " << r.threshold << ")\n"
                      << std::defaultfloat;
            if (!r.pass) failing.push_back(r.name);
        }
        if (!failing.empty()) {
            std::cerr << "gradient check failed:";
            for (const auto& n : failing) std::cerr << ' ' << n;
            std::cerr << '\n';
            rc = 3;
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed checkpoint metadata: " << e.what() << '\n';
        return 2;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return rc;
}

}  // namespace rlm
