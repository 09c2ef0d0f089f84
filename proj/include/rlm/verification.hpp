#pragma once

#include <string>
#include <vector>

#include "rlm/grad_check.hpp"
#include "rlm/model.hpp"
#include "rlm/regularizers.hpp"

namespace rlm {

struct CheckResult {
    std::string name;
    double max_rel_error = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

namespace detail {

inline CheckResult primitive_check(const std::string& name, const TensorFn& f,
                                   const Shape& shape, std::vector<Real> x0,
                                   double threshold = 1e-6) {
    CheckResult r;
    r.name = name;
    r.threshold = threshold;
    r.max_rel_error = grad_check(f, shape, std::move(x0));
    r.pass = r.max_rel_error < threshold;
    return r;
}

}  // namespace detail

// Central-difference checks for each differentiable primitive, each composed
// with a non-uniform downstream so every path in the backward sees a
// non-constant upstream gradient.
inline std::vector<CheckResult> verify_primitives() {
    std::vector<CheckResult> out;
    Rng rng(421);

    out.push_back(detail::primitive_check(
        "matmul", [](Tape& t, const Tensor& x) { return sum(matmul(x, transpose(x))); },
        {3, 4}, rng.uniform_vector(12, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "add_row_bias",
        [](Tape& t, const Tensor& x) {
            Tensor rows = t.tensor({2, 3}, {0.3, -0.7, 1.1, 0.25, 0.9, -1.4});
            return l2_norm(add_row_bias(rows, x));
        },
        {3}, rng.uniform_vector(3, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "col_slice",
        [](Tape& t, const Tensor& x) { return l2_norm(col_slice(x, 1, 3)); }, {2, 4},
        rng.uniform_vector(8, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "stack_time",
        [](Tape& t, const Tensor& x) {
            Tensor a = time_slice(x, 0);
            Tensor b = time_slice(x, 1);
            return l2_norm(stack_steps(std::vector<Tensor>{b, a, mul(a, b)}));
        },
        {2, 2, 3}, rng.uniform_vector(12, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "sigmoid", [](Tape& t, const Tensor& x) { return l2_norm(sigmoid(x)); }, {2, 3},
        rng.uniform_vector(6, -2.0, 2.0)));
    out.push_back(detail::primitive_check(
        "tanh", [](Tape& t, const Tensor& x) { return l2_norm(tanh(x)); }, {2, 3},
        rng.uniform_vector(6, -2.0, 2.0)));
    out.push_back(detail::primitive_check(
        "exp", [](Tape& t, const Tensor& x) { return l2_norm(exp(x)); }, {2, 3},
        rng.uniform_vector(6, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "log", [](Tape& t, const Tensor& x) { return sum(mul(log(x), x)); }, {2, 3},
        rng.uniform_vector(6, 0.5, 2.0)));
    out.push_back(detail::primitive_check(
        "mul_sub", [](Tape& t, const Tensor& x) { return sum(mul(x, sub(x, scale(x, 0.25)))); },
        {2, 3}, rng.uniform_vector(6, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "l2_norm", [](Tape& t, const Tensor& x) { return l2_norm(x); }, {2, 3},
        rng.uniform_vector(6, 0.2, 1.0)));
    out.push_back(detail::primitive_check(
        "mean_row_l2", [](Tape& t, const Tensor& x) { return mean_row_l2(x); }, {4, 3},
        rng.uniform_vector(12, 0.2, 1.0)));
    {
        std::vector<int> targets = {1, 4, 0, 2, 3, 1};
        out.push_back(detail::primitive_check(
            "cross_entropy",
            [targets](Tape& t, const Tensor& x) { return cross_entropy(x, targets); }, {6, 5},
            rng.uniform_vector(30, -1.5, 1.5)));
    }
    out.push_back(detail::primitive_check(
        "temporal_diff", [](Tape& t, const Tensor& x) { return l2_norm(temporal_diff(x)); },
        {3, 2, 4}, rng.uniform_vector(24, -1.0, 1.0)));
    out.push_back(detail::primitive_check(
        "embedding_lookup",
        [](Tape& t, const Tensor& x) {
            std::vector<int> ids = {0, 2, 1, 2, 3, 0};
            return l2_norm(embedding_lookup(x, ids, 3, 2));
        },
        {4, 5}, rng.uniform_vector(20, -1.0, 1.0)));
    // Activations bounded away from zero: the norm-style penalties have
    // gradient components ~x_i/||x||, and entries near zero leave nothing but
    // finite-difference noise to compare against.
    auto bounded_away = [&rng](std::size_t n) {
        std::vector<Real> v = rng.uniform_vector(n, 0.5, 1.5);
        for (Real& e : v)
            if (rng.uniform() < 0.5) e = -e;
        return v;
    };
    for (NormReduction red :
         {NormReduction::mean_norm, NormReduction::flat_norm, NormReduction::mean_square}) {
        out.push_back(detail::primitive_check(
            std::string("ar_") + reduction_name(red),
            [red](Tape& t, const Tensor& x) { return ar_loss(x, 0.7, red); }, {2, 3, 4},
            bounded_away(24)));
        out.push_back(detail::primitive_check(
            std::string("tar_") + reduction_name(red),
            [red](Tape& t, const Tensor& x) { return tar_loss(x, 0.9, red); }, {3, 2, 4},
            bounded_away(24)));
    }
    return out;
}

// End-to-end check: tiny two-layer model, CE + AR + TAR with dropout active,
// finite differences over every parameter entry. Dropout masks are replayed
// from a fixed seed so each loss evaluation sees the same network. `corrupt`
// deliberately perturbs one analytic gradient to prove the harness notices.
inline CheckResult verify_model_gradients(CellKind cell, bool corrupt = false,
                                          double threshold = 1e-4) {
    ModelConfig mc;
    mc.cell = cell;
    mc.vocab_size = 12;
    mc.hidden_size = 4;
    mc.num_layers = 2;
    mc.dp = 0.2;
    mc.dp_h = 0.2;
    mc.tied = true;
    Rng init(2024);
    LanguageModel model(mc, init);

    const int T = 5, B = 2;
    Rng data(99);
    IdMatrix inputs{T, B, {}};
    std::vector<int> targets;
    for (int i = 0; i < T * B; ++i) {
        inputs.ids.push_back(static_cast<int>(data.below(mc.vocab_size)));
        targets.push_back(static_cast<int>(data.below(mc.vocab_size)));
    }

    const std::uint64_t mask_seed = 77;
    auto objective = [&](Tape& tape) {
        Rng drop(mask_seed);
        RnnState st = model.initial_state(B);
        auto fwd = model.forward(tape, inputs, st, true, drop);
        Tensor ce = cross_entropy(fwd.logits, targets);
        Tensor ar = ar_loss(fwd.dropped, 0.7);
        Tensor tar = tar_loss(fwd.raw, 0.9);
        return combined_objective(ce, ar, tar);
    };

    model.zero_grads();
    {
        Tape tape;
        Tensor obj = objective(tape);
        tape.backward(obj);
    }
    auto params = model.params();
    if (corrupt) params[1]->grad[0] += 0.5;

    CheckResult r;
    r.name = std::string("model_") + cell_name(cell);
    r.threshold = threshold;
    // Step size: near-equal consecutive hidden states put the temporal term
    // close to the sqrt kink, where the third derivative is ~1/||diff||^2 and
    // the h^2 truncation error of a 1e-5 step already exceeds the threshold;
    // 1e-6 keeps truncation below roundoff growth. Floor: saturated gates make
    // some gradient entries smaller than the difference's own cancellation
    // noise, so comparison turns absolute (|a - n| <= 1e-7) below 1e-3.
    r.max_rel_error = grad_check_params(
        params, [&]() { Tape tape; return objective(tape).scalar(); }, 1e-6, 1e-3);
    r.pass = r.max_rel_error < threshold;
    return r;
}

inline std::vector<CheckResult> run_verification(bool corrupt = false) {
    std::vector<CheckResult> out = verify_primitives();
    for (CellKind cell : {CellKind::lstm, CellKind::gru, CellKind::tanh_rnn})
        out.push_back(verify_model_gradients(cell, corrupt));
    return out;
}

inline bool all_passed(std::span<const CheckResult> results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

}  // namespace rlm
