#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rlm/corpus.hpp"
#include "rlm/rng.hpp"
#include "rlm/tensor.hpp"

namespace rlm {

enum class CellKind { lstm, gru, tanh_rnn };

inline const char* cell_name(CellKind k) {
    switch (k) {
        case CellKind::lstm: return "lstm";
        case CellKind::gru: return "gru";
        case CellKind::tanh_rnn: return "tanh";
    }
    return "?";
}

inline CellKind parse_cell(const std::string& s) {
    if (s == "lstm") return CellKind::lstm;
    if (s == "gru") return CellKind::gru;
    if (s == "tanh") return CellKind::tanh_rnn;
    throw ValueError("unknown cell kind '" + s + "' (expected lstm, gru, or tanh)");
}

struct ModelConfig {
    CellKind cell = CellKind::lstm;
    int vocab_size = 0;
    int hidden_size = 650;  // embedding size equals hidden size (weight tying)
    int num_layers = 2;
    double dp = 0.5;    // dropout on word vectors and the final RNN output
    double dp_h = 0.4;  // dropout between RNN layers
    bool tied = true;

    void validate() const {
        if (vocab_size < 1) throw ValueError("model: vocab_size must be positive");
        if (hidden_size < 1) throw ValueError("model: hidden_size must be positive");
        if (num_layers < 1) throw ValueError("model: num_layers must be positive");
        if (dp < 0.0 || dp >= 1.0) throw ValueError("model: dp must be in [0,1)");
        if (dp_h < 0.0 || dp_h >= 1.0) throw ValueError("model: dp_h must be in [0,1)");
    }
};

// Recurrent state carried (detached) between BPTT segments.
struct LayerState {
    std::vector<Real> h;
    std::vector<Real> c;  // LSTM only
};

struct RnnState {
    int batch = 0;
    std::vector<LayerState> layers;
};

struct DropoutMask {
    Tensor mask;  // entries are exactly 0 or 1/(1-p)
    double p = 0.0;
};

// Inverted, non-variational dropout: a fresh Bernoulli(1-p) mask per element
// per call. The mask is returned so AR can reuse it.
inline std::pair<Tensor, DropoutMask> dropout_forward(Tape& tape, const Tensor& x, double p,
                                                      bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ValueError("dropout: rate must be in [0,1)");
    if (!training || p == 0.0) {
        Tensor ones = tape.tensor(x.shape(), std::vector<Real>(x.size(), 1.0));
        return {x, DropoutMask{ones, p}};
    }
    const Real keep_scale = 1.0 / (1.0 - p);
    std::vector<Real> m(x.size());
    for (Real& v : m) v = rng.bernoulli(1.0 - p) ? keep_scale : 0.0;
    Tensor mask = tape.tensor(x.shape(), std::move(m));
    return {mul(x, mask), DropoutMask{mask, p}};
}

// Per-layer weights. Gate rows are packed:
//   lstm: wx,wh [4H x H] (i,f,g,o), b [4H]
//   gru:  wx,wh [2H x H] (z,r), b [2H]; candidate path in wxc,whc [H x H], bc [H]
//   tanh: wx,wh [H x H], b [H]
struct LayerParams {
    Param wx, wh, b;
    Param wxc, whc, bc;  // gru candidate only

    void for_each(const std::function<void(Param&)>& fn) {
        fn(wx);
        fn(wh);
        fn(b);
        if (!wxc.value.empty()) {
            fn(wxc);
            fn(whc);
            fn(bc);
        }
    }
};

// Weight leaves for one segment, with the matmul operands pre-transposed.
struct CellWeights {
    Tensor wxT, whT, b;
    Tensor wxcT, whcT, bc;
};

inline CellWeights bind_cell(Tape& tape, LayerParams& p, CellKind kind) {
    CellWeights w;
    w.wxT = transpose(tape.bind(p.wx));
    w.whT = transpose(tape.bind(p.wh));
    w.b = tape.bind(p.b);
    if (kind == CellKind::gru) {
        w.wxcT = transpose(tape.bind(p.wxc));
        w.whcT = transpose(tape.bind(p.whc));
        w.bc = tape.bind(p.bc);
    }
    return w;
}

// i,f,o = sigmoid(...), g = tanh(...); c' = f.c + i.g; h' = o.tanh(c')
inline std::pair<Tensor, Tensor> lstm_step(const CellWeights& w, const Tensor& x,
                                           const Tensor& h, const Tensor& c) {
    const int H = x.shape()[1];
    Tensor gates = add_row_bias(add(matmul(x, w.wxT), matmul(h, w.whT)), w.b);
    Tensor i = sigmoid(col_slice(gates, 0, H));
    Tensor f = sigmoid(col_slice(gates, H, 2 * H));
    Tensor g = tanh(col_slice(gates, 2 * H, 3 * H));
    Tensor o = sigmoid(col_slice(gates, 3 * H, 4 * H));
    Tensor c_next = add(mul(f, c), mul(i, g));
    Tensor h_next = mul(o, tanh(c_next));
    return {h_next, c_next};
}

// z,r = sigmoid(...); cand = tanh(Wx + U(r.h) + b); h' = (1-z).h + z.cand
inline Tensor gru_step(const CellWeights& w, const Tensor& x, const Tensor& h) {
    const int H = x.shape()[1];
    Tensor zr = sigmoid(add_row_bias(add(matmul(x, w.wxT), matmul(h, w.whT)), w.b));
    Tensor z = col_slice(zr, 0, H);
    Tensor r = col_slice(zr, H, 2 * H);
    Tensor cand = tanh(add_row_bias(add(matmul(x, w.wxcT), matmul(mul(r, h), w.whcT)), w.bc));
    return add(h, mul(z, sub(cand, h)));
}

inline Tensor tanh_step(const CellWeights& w, const Tensor& x, const Tensor& h) {
    return tanh(add_row_bias(add(matmul(x, w.wxT), matmul(h, w.whT)), w.b));
}

struct StackedOutput {
    Tensor raw;      // final layer output before dropout (TAR input)
    Tensor dropped;  // final layer output after dropout (decoder + AR input)
    DropoutMask mask;
    RnnState state;  // detached
};

// Runs T timesteps through the layer stack. dp_h is applied to every
// non-final layer's output sequence, dp to the final layer's. The returned
// state carries no gradient into the next segment.
inline StackedOutput stacked_forward(Tape& tape, const ModelConfig& cfg,
                                     std::vector<LayerParams>& layers, const Tensor& embedded,
                                     const RnnState& state, bool training, Rng& rng) {
    if (embedded.shape().size() != 3)
        throw ShapeError("stacked_forward: expected [T,B,H] input, got " +
                         shape_str(embedded.shape()));
    const int T = embedded.shape()[0], B = embedded.shape()[1], H = embedded.shape()[2];
    if (static_cast<int>(state.layers.size()) != cfg.num_layers || state.batch != B)
        throw ShapeError("stacked_forward: state does not match model layers/batch");
    const std::size_t bh = static_cast<std::size_t>(B) * H;
    for (const auto& ls : state.layers)
        if (ls.h.size() != bh || (cfg.cell == CellKind::lstm && ls.c.size() != bh))
            throw ShapeError("stacked_forward: state vectors do not match batch x hidden");

    StackedOutput out;
    out.state.batch = B;
    out.state.layers.resize(cfg.num_layers);
    Tensor seq = embedded;
    for (int l = 0; l < cfg.num_layers; ++l) {
        CellWeights w = bind_cell(tape, layers[l], cfg.cell);
        Tensor h = tape.tensor({B, H}, state.layers[l].h);
        Tensor c;
        if (cfg.cell == CellKind::lstm) c = tape.tensor({B, H}, state.layers[l].c);
        std::vector<Tensor> steps;
        steps.reserve(T);
        for (int t = 0; t < T; ++t) {
            Tensor x = time_slice(seq, t);
            switch (cfg.cell) {
                case CellKind::lstm: {
                    auto [hn, cn] = lstm_step(w, x, h, c);
                    h = hn;
                    c = cn;
                    break;
                }
                case CellKind::gru:
                    h = gru_step(w, x, h);
                    break;
                case CellKind::tanh_rnn:
                    h = tanh_step(w, x, h);
                    break;
            }
            steps.push_back(h);
        }
        out.state.layers[l].h = h.detached();
        if (cfg.cell == CellKind::lstm) out.state.layers[l].c = c.detached();
        Tensor layer_out = stack_steps(steps);
        if (l + 1 < cfg.num_layers) {
            seq = dropout_forward(tape, layer_out, cfg.dp_h, training, rng).first;
        } else {
            out.raw = layer_out;
            auto [dropped, mask] = dropout_forward(tape, layer_out, cfg.dp, training, rng);
            out.dropped = dropped;
            out.mask = mask;
        }
    }
    return out;
}

// logits = outputs . W^T + bias, with W the (possibly shared) embedding matrix.
inline Tensor tied_decoder(const Tensor& weights, const Tensor& dropped_outputs,
                           const Tensor& bias) {
    if (dropped_outputs.shape().size() != 3)
        throw ShapeError("tied_decoder: expected [T,B,H] outputs");
    const int T = dropped_outputs.shape()[0], B = dropped_outputs.shape()[1],
              H = dropped_outputs.shape()[2];
    if (weights.shape().size() != 2 || weights.shape()[1] != H)
        throw ShapeError("tied_decoder: weights " + shape_str(weights.shape()) +
                         " do not match hidden size " + std::to_string(H));
    Tensor flat = reshape(dropped_outputs, {T * B, H});
    return add_row_bias(matmul(flat, transpose(weights)), bias);
}

// Two-layer (configurable) recurrent language model with tied input/output
// embeddings. Owns all trainable parameters.
class LanguageModel {
public:
    LanguageModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int V = cfg_.vocab_size, H = cfg_.hidden_size;
        const Real bound = 1.0 / std::sqrt(static_cast<Real>(H));
        embedding_ = Param("embedding", {V, H}, rng.uniform_vector(
                               static_cast<std::size_t>(V) * H, -0.1, 0.1));
        layers_.resize(cfg_.num_layers);
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const std::string prefix = "rnn" + std::to_string(l) + ".";
            const int gate_rows = gate_rows_for(cfg_.cell, H);
            auto w = [&](const char* name, int rows, int cols, bool zero = false) {
                std::vector<Real> v = zero ? std::vector<Real>(static_cast<std::size_t>(rows) * cols, 0.0)
                                           : rng.uniform_vector(static_cast<std::size_t>(rows) * cols,
                                                                -bound, bound);
                return Param(prefix + name, rows == 1 ? Shape{cols} : Shape{rows, cols},
                             std::move(v));
            };
            layers_[l].wx = w("wx", gate_rows, H);
            layers_[l].wh = w("wh", gate_rows, H);
            layers_[l].b = w("b", 1, gate_rows, true);
            if (cfg_.cell == CellKind::gru) {
                layers_[l].wxc = w("wxc", H, H);
                layers_[l].whc = w("whc", H, H);
                layers_[l].bc = w("bc", 1, H, true);
            }
        }
        if (!cfg_.tied)
            dec_w_ = Param("decoder.weight", {V, H},
                           rng.uniform_vector(static_cast<std::size_t>(V) * H, -bound, bound));
        dec_b_ = Param("decoder.bias", {V}, std::vector<Real>(V, 0.0));
    }

    const ModelConfig& config() const { return cfg_; }

    RnnState initial_state(int batch) const {
        RnnState s;
        s.batch = batch;
        s.layers.resize(cfg_.num_layers);
        const std::size_t bh = static_cast<std::size_t>(batch) * cfg_.hidden_size;
        for (auto& l : s.layers) {
            l.h.assign(bh, 0.0);
            if (cfg_.cell == CellKind::lstm) l.c.assign(bh, 0.0);
        }
        return s;
    }

    struct Forward {
        Tensor logits;  // [(T*B) x V], rows in t-major order
        Tensor raw;     // [T,B,H]
        Tensor dropped;
        DropoutMask mask;
        RnnState state;
    };

    Forward forward(Tape& tape, const IdMatrix& inputs, const RnnState& state, bool training,
                    Rng& rng) {
        Tensor emb_w = tape.bind(embedding_);
        Tensor emb = embedding_lookup(emb_w, inputs.ids, inputs.rows, inputs.cols);
        Tensor emb_dropped = dropout_forward(tape, emb, cfg_.dp, training, rng).first;
        StackedOutput stacked =
            stacked_forward(tape, cfg_, layers_, emb_dropped, state, training, rng);
        Tensor dec_w = cfg_.tied ? emb_w : tape.bind(dec_w_);
        Tensor logits = tied_decoder(dec_w, stacked.dropped, tape.bind(dec_b_));
        return {logits, stacked.raw, stacked.dropped, stacked.mask, std::move(stacked.state)};
    }

    void for_each_param(const std::function<void(Param&)>& fn) {
        fn(embedding_);
        for (auto& l : layers_) l.for_each(fn);
        if (!cfg_.tied) fn(dec_w_);
        fn(dec_b_);
    }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        for_each_param([&](Param& p) { out.push_back(&p); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        const_cast<LanguageModel*>(this)->for_each_param(
            [&](Param& p) { n += p.size(); });
        return n;
    }

    void zero_grads() {
        for_each_param([](Param& p) { p.zero_grad(); });
    }

    Param& embedding() { return embedding_; }
    Param& decoder_weight() { return cfg_.tied ? embedding_ : dec_w_; }
    Param& decoder_bias() { return dec_b_; }
    LayerParams& layer(int l) { return layers_.at(static_cast<std::size_t>(l)); }
    std::vector<LayerParams>& layers() { return layers_; }

private:
    static int gate_rows_for(CellKind kind, int H) {
        switch (kind) {
            case CellKind::lstm: return 4 * H;
            case CellKind::gru: return 2 * H;
            case CellKind::tanh_rnn: return H;
        }
        return H;
    }

    ModelConfig cfg_;
    Param embedding_;
    Param dec_w_;  // untied models only
    Param dec_b_;
    std::vector<LayerParams> layers_;
};

}  // namespace rlm
