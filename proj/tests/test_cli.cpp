#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// Runs the rlm binary through the shell so env-var prefixes work.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const char* bin = std::getenv("RLM_BIN");
    REQUIRE(bin != nullptr);
    static int counter = 0;
    const fs::path out_file = fs::temp_directory_path() /
                              ("rlm_cli_out_" + std::to_string(++counter) + ".txt");
    const fs::path err_file = fs::temp_directory_path() /
                              ("rlm_cli_err_" + std::to_string(counter) + ".txt");
    const std::string cmd = env_prefix + (env_prefix.empty() ? "" : " ") + "\"" + bin + "\" " +
                            args + " > " + out_file.string() + " 2> " + err_file.string();
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    fs::remove(out_file);
    fs::remove(err_file);
    return r;
}

// One workspace with a trained checkpoint, shared across the test cases below.
struct Workspace {
    fs::path dir;
    fs::path train, valid, ckpt, metrics;

    Workspace() {
        dir = fs::temp_directory_path() / "rlm_cli_ws";
        fs::remove_all(dir);
        fs::create_directories(dir);
        train = dir / "train.txt";
        valid = dir / "valid.txt";
        ckpt = dir / "model.bin";
        metrics = dir / "metrics.jsonl";
        std::string body;
        for (int i = 0; i < 30; ++i)
            body += (i % 2 ? "the cat sat on the mat\n" : "the dog slept on the rug\n");
        spit(train, body);
        spit(valid, body.substr(0, body.size() / 2));
    }

    std::string train_args() const {
        return "train --train " + train.string() + " --valid " + valid.string() +
               " --checkpoint " + ckpt.string() + " --metrics " + metrics.string() +
               " --hidden 16 --layers 2 --max-epochs 2 --batch 2 --eval-batch 2 --bptt 8"
               " --dp 0 --dp-h 0 --alpha 0 --beta 0 --lr 1 --seed 42";
    }
};

Workspace& ws() {
    static Workspace w;
    return w;
}

// Trains once; later cases reuse the artifacts.
void ensure_trained() {
    if (fs::exists(ws().ckpt)) return;
    RunResult r = run_cli(ws().train_args());
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("final valid ppl") != std::string::npos);
    REQUIRE(r.out.find("best valid ppl") != std::string::npos);
}

}  // namespace

TEST_CASE("usage errors exit with code 1") {
    REQUIRE(run_cli("--help").code == 0);
    REQUIRE(run_cli("").code == 1);
    REQUIRE(run_cli("frobnicate").code == 1);
    REQUIRE(run_cli("train --no-such-flag 3").code == 1);
    REQUIRE(run_cli("train").code == 1);  // missing --train/--valid
    REQUIRE(run_cli("generate --checkpoint x.bin --words -3").code == 1);
}

TEST_CASE("io errors exit with code 2") {
    REQUIRE(run_cli("train --train /nonexistent/a.txt --valid /nonexistent/b.txt").code == 2);
    REQUIRE(run_cli("eval --checkpoint /nonexistent/ck.bin --data /nonexistent/a.txt").code == 2);
    REQUIRE(run_cli("generate --checkpoint /nonexistent/ck.bin").code == 2);
}

TEST_CASE("train writes a checkpoint and a metrics log") {
    ensure_trained();
    REQUIRE(fs::exists(ws().ckpt));

    std::ifstream in(ws().metrics);
    std::string line;
    int epochs = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        for (const char* key : {"epoch", "train_ppl", "valid_ppl", "lr", "seconds"})
            REQUIRE(j.contains(key));
        ++epochs;
    }
    REQUIRE(epochs == 2);
}

TEST_CASE("eval scores a checkpoint reproducibly") {
    ensure_trained();
    const std::string args =
        "eval --checkpoint " + ws().ckpt.string() + " --data " + ws().valid.string() + " --batch 2";
    RunResult a = run_cli(args);
    REQUIRE(a.code == 0);
    REQUIRE(a.out.rfind("perplexity ", 0) == 0);
    RunResult b = run_cli(args);
    REQUIRE(a.out == b.out);

    SECTION("architecture cross-checks reject a mismatch") {
        REQUIRE(run_cli(args + " --hidden 16").code == 0);
        REQUIRE(run_cli(args + " --hidden 32").code == 2);
        REQUIRE(run_cli(args + " --cell gru").code == 2);
    }
}

TEST_CASE("generate is seed-deterministic and respects exclusions") {
    ensure_trained();
    const std::string base = "generate --checkpoint " + ws().ckpt.string() + " --words 80";
    RunResult a = run_cli(base + " --seed 7");
    RunResult b = run_cli(base + " --seed 7");
    REQUIRE(a.code == 0);
    REQUIRE_FALSE(a.out.empty());
    REQUIRE(a.out == b.out);
    REQUIRE(a.out.find("<eos>") == std::string::npos);
    REQUIRE(a.out.find("<unk>") == std::string::npos);

    SECTION("zero words produce no output") {
        RunResult r = run_cli("generate --checkpoint " + ws().ckpt.string() +
                              " --seed 7 --words 0");
        REQUIRE(r.code == 0);
        REQUIRE(r.out.empty());
    }
    SECTION("--out writes to a file instead of stdout") {
        const fs::path out = ws().dir / "sample.txt";
        RunResult r = run_cli(base + " --seed 7 --out " + out.string());
        REQUIRE(r.code == 0);
        REQUIRE(r.out.empty());
        REQUIRE(slurp(out) == a.out);
    }
    SECTION("RLM_SEED fills in when no flag is given") {
        RunResult env_run = run_cli(base, "RLM_SEED=7");
        REQUIRE(env_run.code == 0);
        REQUIRE(env_run.out == a.out);
        RunResult flag_wins = run_cli(base + " --seed 7", "RLM_SEED=99");
        REQUIRE(flag_wins.out == a.out);
        REQUIRE(run_cli(base, "RLM_SEED=banana").code == 1);
        REQUIRE(run_cli(base, "RLM_SEED=-4").code == 1);
    }
}

TEST_CASE("config file supplies flags, flags still win") {
    ensure_trained();
    const fs::path cfg = ws().dir / "train_cfg.json";
    const fs::path cfg_ckpt = ws().dir / "cfg_model.bin";
    nlohmann::json j = {{"hidden", 12}, {"max-epochs", 1},  {"batch", 2}, {"eval-batch", 2},
                        {"bptt", 8},    {"dp", 0.0},        {"dp-h", 0.0}, {"alpha", 0.0},
                        {"beta", 0.0},  {"lr", 1.0},        {"seed", 5}};
    spit(cfg, j.dump());
    const std::string base = "train --train " + ws().train.string() + " --valid " +
                             ws().valid.string() + " --config " + cfg.string() +
                             " --checkpoint " + cfg_ckpt.string();

    SECTION("values from the file are used") {
        REQUIRE(run_cli(base).code == 0);
        const std::string eval_args = "eval --checkpoint " + cfg_ckpt.string() + " --data " +
                                      ws().valid.string() + " --batch 2";
        REQUIRE(run_cli(eval_args + " --hidden 12").code == 0);
        REQUIRE(run_cli(eval_args + " --hidden 16").code == 2);
    }
    SECTION("a flag overrides the same key in the file") {
        REQUIRE(run_cli(base + " --hidden 16").code == 0);
        REQUIRE(run_cli("eval --checkpoint " + cfg_ckpt.string() + " --data " +
                        ws().valid.string() + " --batch 2 --hidden 16")
                    .code == 0);
    }
    SECTION("unknown keys are usage errors") {
        const fs::path bad = ws().dir / "bad_cfg.json";
        spit(bad, R"({"hiden": 12})");
        REQUIRE(run_cli("train --train " + ws().train.string() + " --valid " +
                        ws().valid.string() + " --config " + bad.string())
                    .code == 1);
    }
    SECTION("malformed json is an io error") {
        const fs::path bad = ws().dir / "broken_cfg.json";
        spit(bad, "{not json");
        REQUIRE(run_cli("train --train " + ws().train.string() + " --valid " +
                        ws().valid.string() + " --config " + bad.string())
                    .code == 2);
        REQUIRE(run_cli("train --train " + ws().train.string() + " --valid " +
                        ws().valid.string() + " --config /nonexistent/cfg.json")
                    .code == 2);
    }
}

TEST_CASE("corrupt checkpoints are format errors") {
    ensure_trained();
    const fs::path broken = ws().dir / "broken.bin";
    std::string bytes = slurp(ws().ckpt);
    bytes[0] = 'X';
    spit(broken, bytes);
    REQUIRE(run_cli("eval --checkpoint " + broken.string() + " --data " + ws().valid.string())
                .code == 2);
}

TEST_CASE("gradcheck subcommand") {
    RunResult ok = run_cli("gradcheck --cell lstm");
    INFO(ok.err);
    REQUIRE(ok.code == 0);
    REQUIRE(ok.out.find("PASS") != std::string::npos);
    REQUIRE(ok.out.find("FAIL") == std::string::npos);

    RunResult bad = run_cli("gradcheck --cell gru --corrupt");
    REQUIRE(bad.code == 3);
    REQUIRE(bad.out.find("FAIL") != std::string::npos);

    REQUIRE(run_cli("gradcheck --cell elman").code == 1);
}
