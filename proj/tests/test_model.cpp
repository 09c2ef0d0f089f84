#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rlm/model.hpp"

using namespace rlm;

namespace {

LayerParams zero_layer(CellKind kind, int H) {
    const int rows = kind == CellKind::lstm ? 4 * H : kind == CellKind::gru ? 2 * H : H;
    LayerParams p;
    p.wx = Param("wx", {rows, H}, std::vector<Real>(static_cast<std::size_t>(rows) * H, 0.0));
    p.wh = Param("wh", {rows, H}, std::vector<Real>(static_cast<std::size_t>(rows) * H, 0.0));
    p.b = Param("b", {rows}, std::vector<Real>(rows, 0.0));
    if (kind == CellKind::gru) {
        p.wxc = Param("wxc", {H, H}, std::vector<Real>(static_cast<std::size_t>(H) * H, 0.0));
        p.whc = Param("whc", {H, H}, std::vector<Real>(static_cast<std::size_t>(H) * H, 0.0));
        p.bc = Param("bc", {H}, std::vector<Real>(H, 0.0));
    }
    return p;
}

ModelConfig tiny_config(CellKind kind, int V = 7, int H = 4, double dp = 0.0, double dp_h = 0.0) {
    ModelConfig c;
    c.cell = kind;
    c.vocab_size = V;
    c.hidden_size = H;
    c.num_layers = 2;
    c.dp = dp;
    c.dp_h = dp_h;
    c.tied = true;
    return c;
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig c = tiny_config(CellKind::lstm);
    REQUIRE_NOTHROW(c.validate());
    c.dp = 1.0;
    REQUIRE_THROWS_AS(c.validate(), ValueError);
    c.dp = 0.5;
    c.hidden_size = 0;
    REQUIRE_THROWS_AS(c.validate(), ValueError);

    REQUIRE(parse_cell("lstm") == CellKind::lstm);
    REQUIRE(parse_cell("gru") == CellKind::gru);
    REQUIRE(parse_cell("tanh") == CellKind::tanh_rnn);
    REQUIRE_THROWS_AS(parse_cell("elman"), ValueError);
}

TEST_CASE("dropout forward") {
    SECTION("p=0 and eval mode are identity") {
        Tape tape;
        Rng rng(5);
        Tensor x = tape.tensor({2, 3}, {1, 2, 3, 4, 5, 6});
        auto [y0, m0] = dropout_forward(tape, x, 0.0, true, rng);
        REQUIRE(y0.detached() == x.detached());
        REQUIRE(m0.mask.detached() == std::vector<Real>(6, 1.0));
        auto [y1, m1] = dropout_forward(tape, x, 0.5, false, rng);
        REQUIRE(y1.detached() == x.detached());
        REQUIRE_THROWS_AS(dropout_forward(tape, x, 1.0, true, rng), ValueError);
    }
    SECTION("mask entries are exactly 0 or 1/(1-p)") {
        Tape tape;
        Rng rng(17);
        Tensor x = tape.tensor({10, 10}, std::vector<Real>(100, 1.0));
        auto [y, m] = dropout_forward(tape, x, 0.25, true, rng);
        for (Real v : m.mask.values()) REQUIRE((v == 0.0 || v == 1.0 / 0.75));
        auto yv = y.values();
        auto mv = m.mask.values();
        for (std::size_t i = 0; i < yv.size(); ++i) REQUIRE(yv[i] == mv[i] * 1.0);
    }
    SECTION("statistics at p=0.5 over 1e6 elements") {
        Tape tape;
        Rng rng(99);
        const std::size_t n = 1'000'000;
        Tensor x = tape.tensor({1000, 1000}, std::vector<Real>(n, 1.0));
        auto [y, m] = dropout_forward(tape, x, 0.5, true, rng);
        std::size_t zeros = 0;
        double sum = 0.0;
        for (Real v : y.values()) {
            zeros += v == 0.0;
            sum += v;
        }
        const double zero_frac = static_cast<double>(zeros) / n;
        REQUIRE(zero_frac > 0.497);
        REQUIRE(zero_frac < 0.503);
        REQUIRE(std::abs(sum / n - 1.0) < 0.01);  // inverted scaling keeps the mean
    }
}

TEST_CASE("lstm cell semantics") {
    const int H = 3, B = 2;
    SECTION("zero parameters, zero state") {
        LayerParams p = zero_layer(CellKind::lstm, H);
        Tape tape;
        CellWeights w = bind_cell(tape, p, CellKind::lstm);
        Tensor x = tape.tensor({B, H}, {0.5, -1, 2, 0, 0.25, -3});
        auto [h, c] = lstm_step(w, x, tape.zeros({B, H}), tape.zeros({B, H}));
        for (Real v : h.values()) REQUIRE(v == 0.0);
        for (Real v : c.values()) REQUIRE(v == 0.0);
    }
    SECTION("forget bias +10, input bias -10 retains memory") {
        LayerParams p = zero_layer(CellKind::lstm, H);
        for (int i = 0; i < H; ++i) {
            p.b.value[i] = -10.0;      // input gate
            p.b.value[H + i] = 10.0;   // forget gate
        }
        Tape tape;
        CellWeights w = bind_cell(tape, p, CellKind::lstm);
        Tensor x = tape.tensor({1, H}, {1, 2, 3});
        auto [h, c] = lstm_step(w, x, tape.zeros({1, H}),
                                tape.tensor({1, H}, std::vector<Real>(H, 1.0)));
        for (Real v : c.values()) REQUIRE(std::abs(v - 1.0) < 1e-4);
    }
    SECTION("saturated gates preserve c across 100 steps") {
        LayerParams p = zero_layer(CellKind::lstm, H);
        for (int i = 0; i < H; ++i) {
            p.b.value[i] = -1000.0;
            p.b.value[H + i] = 1000.0;
        }
        Tape tape;
        CellWeights w = bind_cell(tape, p, CellKind::lstm);
        Tensor x = tape.tensor({1, H}, {0.3, -0.7, 0.9});
        Tensor h = tape.zeros({1, H});
        Tensor c = tape.tensor({1, H}, {0.5, -0.25, 0.125});
        for (int step = 0; step < 100; ++step) {
            auto [hn, cn] = lstm_step(w, x, h, c);
            h = hn;
            c = cn;
        }
        auto cv = c.values();
        REQUIRE(std::abs(cv[0] - 0.5) < 1e-3);
        REQUIRE(std::abs(cv[1] + 0.25) < 1e-3);
        REQUIRE(std::abs(cv[2] - 0.125) < 1e-3);
    }
}

TEST_CASE("gru cell semantics") {
    const int H = 3;
    SECTION("zero parameters, zero state") {
        LayerParams p = zero_layer(CellKind::gru, H);
        Tape tape;
        CellWeights w = bind_cell(tape, p, CellKind::gru);
        Tensor x = tape.tensor({1, H}, {1, -2, 3});
        Tensor h = gru_step(w, x, tape.zeros({1, H}));
        for (Real v : h.values()) REQUIRE(v == 0.0);
    }
    SECTION("saturated-closed update gate copies h through") {
        LayerParams p = zero_layer(CellKind::gru, H);
        for (int i = 0; i < H; ++i) p.b.value[i] = -1000.0;  // z gate rows
        Tape tape;
        CellWeights w = bind_cell(tape, p, CellKind::gru);
        Tensor x = tape.tensor({1, H}, {5, 6, 7});
        Tensor h0 = tape.tensor({1, H}, {0.4, -0.8, 1.6});
        Tensor h1 = gru_step(w, x, h0);
        auto a = h0.values();
        auto b = h1.values();
        for (int i = 0; i < H; ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-9);
    }
}

TEST_CASE("tanh cell semantics") {
    const int H = 3;
    LayerParams p = zero_layer(CellKind::tanh_rnn, H);
    Tape tape;
    CellWeights w = bind_cell(tape, p, CellKind::tanh_rnn);
    Tensor x = tape.tensor({1, H}, {1, 2, 3});
    Tensor h = tanh_step(w, x, tape.zeros({1, H}));
    for (Real v : h.values()) REQUIRE(v == 0.0);

    // huge identity recurrence saturates toward sign(h)
    LayerParams ps = zero_layer(CellKind::tanh_rnn, H);
    for (int i = 0; i < H; ++i) ps.wh.value[static_cast<std::size_t>(i) * H + i] = 1000.0;
    Tape t2;
    CellWeights ws = bind_cell(t2, ps, CellKind::tanh_rnn);
    Tensor hs = tanh_step(ws, t2.zeros({1, H}), t2.tensor({1, H}, {0.1, -0.2, 0.05}));
    auto hv = hs.values();
    REQUIRE(hv[0] == Catch::Approx(1.0));
    REQUIRE(hv[1] == Catch::Approx(-1.0));
    REQUIRE(hv[2] == Catch::Approx(1.0));
}

TEST_CASE("initialization intervals and determinism") {
    ModelConfig c = tiny_config(CellKind::lstm, 50, 16);
    Rng rng(1234);
    LanguageModel m(c, rng);
    const double bound = 1.0 / std::sqrt(16.0);
    for (Real v : m.embedding().value) {
        REQUIRE(v >= -0.1);
        REQUIRE(v <= 0.1);
    }
    for (int l = 0; l < 2; ++l) {
        for (Real v : m.layer(l).wx.value) {
            REQUIRE(v >= -bound);
            REQUIRE(v <= bound);
        }
        for (Real v : m.layer(l).b.value) REQUIRE(v == 0.0);
    }
    for (Real v : m.decoder_bias().value) REQUIRE(v == 0.0);

    // H=650 puts non-embedding weights inside [-0.039223, 0.039223]
    REQUIRE(1.0 / std::sqrt(650.0) == Catch::Approx(0.039223).margin(2e-6));

    Rng rng2(1234);
    LanguageModel m2(c, rng2);
    REQUIRE(m.embedding().value == m2.embedding().value);
    REQUIRE(m.layer(1).wh.value == m2.layer(1).wh.value);

    Rng rng3(1235);
    LanguageModel m3(c, rng3);
    REQUIRE(m.embedding().value != m3.embedding().value);
}

TEST_CASE("parameter count matches the closed form") {
    // tied LSTM: V*H embedding (shared with the decoder) + per layer
    // 4*(2*H^2 + H) gate weights/biases + decoder bias V
    auto expected = [](int V, int H, int layers) {
        return static_cast<std::size_t>(V) * H +
               static_cast<std::size_t>(layers) * 4 * (2 * static_cast<std::size_t>(H) * H + H) +
               static_cast<std::size_t>(V);
    };
    Rng rng(1);
    ModelConfig small = tiny_config(CellKind::lstm, 11, 6);
    REQUIRE(LanguageModel(small, rng).parameter_count() == expected(11, 6, 2));

    // the full-scale configuration: V=10000, H=650, 2 layers
    REQUIRE(expected(10000, 650, 2) == 13'275'200);

    // untied adds a separate V x H decoder matrix
    ModelConfig untied = small;
    untied.tied = false;
    REQUIRE(LanguageModel(untied, rng).parameter_count() ==
            expected(11, 6, 2) + 11 * 6);
}

TEST_CASE("weight tying shares storage both ways") {
    Rng rng(3);
    LanguageModel m(tiny_config(CellKind::lstm, 5, 4), rng);
    REQUIRE(&m.decoder_weight() == &m.embedding());

    // make the embedding the identity; decoding e_k must light up logit k
    std::fill(m.embedding().value.begin(), m.embedding().value.end(), 0.0);
    for (int i = 0; i < 4; ++i) m.embedding().value[static_cast<std::size_t>(i) * 4 + i] = 1.0;
    Tape tape;
    Tensor w = tape.bind(m.embedding());
    Tensor out = tape.tensor({1, 1, 4}, {0, 0, 1, 0});
    Tensor logits = tied_decoder(w, out, tape.bind(m.decoder_bias()));
    REQUIRE(logits.shape() == Shape{1, 5});
    REQUIRE(logits.values()[2] == 1.0);
    REQUIRE(logits.values()[0] == 0.0);

    // perturbing a row moves both the lookup result and the logit column
    m.embedding().value[2 * 4 + 0] += 0.5;
    Tape t2;
    Tensor w2 = t2.bind(m.embedding());
    Tensor emb = embedding_lookup(w2, std::vector<int>{2}, 1, 1);
    REQUIRE(emb.values()[0] == 0.5);
    Tensor logits2 = tied_decoder(w2, t2.tensor({1, 1, 4}, {1, 0, 0, 0}), t2.bind(m.decoder_bias()));
    REQUIRE(logits2.values()[2] == 0.5);

    Rng rng2(3);
    LanguageModel untied(ModelConfig{CellKind::lstm, 5, 4, 2, 0.0, 0.0, false}, rng2);
    REQUIRE(&untied.decoder_weight() != &untied.embedding());
}

TEST_CASE("stacked forward basics") {
    ModelConfig cfg = tiny_config(CellKind::lstm, 9, 4);
    Rng rng(21);
    LanguageModel m(cfg, rng);
    Rng noise(0);

    SECTION("training flag is irrelevant when all rates are zero") {
        IdMatrix ids{3, 2, {1, 2, 3, 4, 5, 6}};
        Tape ta, tb;
        auto a = m.forward(ta, ids, m.initial_state(2), true, noise);
        auto b = m.forward(tb, ids, m.initial_state(2), false, noise);
        REQUIRE(a.logits.detached() == b.logits.detached());
    }
    SECTION("dropped output equals mask times raw, elementwise exactly") {
        ModelConfig cfg2 = tiny_config(CellKind::lstm, 9, 4, 0.4, 0.3);
        Rng r2(8);
        LanguageModel md(cfg2, r2);
        Rng drop(123);
        Tape tape;
        IdMatrix ids{4, 2, {1, 2, 3, 4, 5, 6, 7, 8}};
        auto fwd = md.forward(tape, ids, md.initial_state(2), true, drop);
        auto raw = fwd.raw.values();
        auto dropped = fwd.dropped.values();
        auto mask = fwd.mask.mask.values();
        REQUIRE(raw.size() == dropped.size());
        for (std::size_t i = 0; i < raw.size(); ++i)
            REQUIRE(dropped[i] == mask[i] * raw[i]);
    }
    SECTION("batch columns evolve independently") {
        IdMatrix both{3, 2, {1, 4, 2, 5, 3, 6}};  // column 0: 1,2,3  column 1: 4,5,6
        IdMatrix col0{3, 1, {1, 2, 3}};
        IdMatrix col1{3, 1, {4, 5, 6}};
        Tape t0, t1, t2;
        auto f_both = m.forward(t0, both, m.initial_state(2), false, noise);
        auto f0 = m.forward(t1, col0, m.initial_state(1), false, noise);
        auto f1 = m.forward(t2, col1, m.initial_state(1), false, noise);
        const int V = cfg.vocab_size;
        auto lb = f_both.logits.values();
        auto l0 = f0.logits.values();
        auto l1 = f1.logits.values();
        for (int t = 0; t < 3; ++t)
            for (int v = 0; v < V; ++v) {
                REQUIRE(lb[(static_cast<std::size_t>(t) * 2 + 0) * V + v] ==
                        Catch::Approx(l0[static_cast<std::size_t>(t) * V + v]).margin(1e-12));
                REQUIRE(lb[(static_cast<std::size_t>(t) * 2 + 1) * V + v] ==
                        Catch::Approx(l1[static_cast<std::size_t>(t) * V + v]).margin(1e-12));
            }
    }
    SECTION("carried state: two T=4 segments equal one T=8 run") {
        std::vector<int> stream = {1, 2, 3, 4, 5, 6, 7, 8};
        IdMatrix whole{8, 1, stream};
        Tape tw;
        auto fw = m.forward(tw, whole, m.initial_state(1), false, noise);

        IdMatrix first{4, 1, {1, 2, 3, 4}};
        IdMatrix second{4, 1, {5, 6, 7, 8}};
        Tape ta, tb;
        auto fa = m.forward(ta, first, m.initial_state(1), false, noise);
        auto fb = m.forward(tb, second, fa.state, false, noise);

        auto lw = fw.logits.values();
        auto la = fa.logits.values();
        auto lb2 = fb.logits.values();
        const std::size_t half = la.size();
        for (std::size_t i = 0; i < half; ++i) {
            REQUIRE(std::abs(lw[i] - la[i]) < 1e-10);
            REQUIRE(std::abs(lw[half + i] - lb2[i]) < 1e-10);
        }
    }
    SECTION("state shape mismatches are rejected") {
        Tape tape;
        IdMatrix ids{2, 2, {1, 2, 3, 4}};
        REQUIRE_THROWS_AS(m.forward(tape, ids, m.initial_state(3), false, noise), ShapeError);
    }
    SECTION("out-of-vocabulary ids are rejected") {
        Tape tape;
        IdMatrix ids{1, 1, {9}};
        REQUIRE_THROWS_AS(m.forward(tape, ids, m.initial_state(1), false, noise), ValueError);
    }
}

TEST_CASE("state carry works for gru and tanh cells too") {
    for (CellKind kind : {CellKind::gru, CellKind::tanh_rnn}) {
        Rng rng(77);
        LanguageModel m(tiny_config(kind, 9, 4), rng);
        Rng noise(0);
        IdMatrix whole{6, 1, {1, 2, 3, 4, 5, 6}};
        Tape tw;
        auto fw = m.forward(tw, whole, m.initial_state(1), false, noise);
        Tape ta, tb;
        auto fa = m.forward(ta, IdMatrix{3, 1, {1, 2, 3}}, m.initial_state(1), false, noise);
        auto fb = m.forward(tb, IdMatrix{3, 1, {4, 5, 6}}, fa.state, false, noise);
        auto lw = fw.logits.values();
        auto la = fa.logits.values();
        auto lb = fb.logits.values();
        for (std::size_t i = 0; i < la.size(); ++i) {
            REQUIRE(std::abs(lw[i] - la[i]) < 1e-10);
            REQUIRE(std::abs(lw[la.size() + i] - lb[i]) < 1e-10);
        }
    }
}
