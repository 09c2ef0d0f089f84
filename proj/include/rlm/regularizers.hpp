#pragma once

#include "rlm/tensor.hpp"

namespace rlm {

// Aggregation of the L2 penalty over the batch/time axes. The default takes
// the norm of each (timestep, example) vector and averages, keeping the
// coefficients independent of T and B; the alternatives are provided for
// comparison runs.
enum class NormReduction {
    mean_norm,    // mean over rows of ||row||
    flat_norm,    // single norm of the flattened tensor
    mean_square,  // mean over rows of ||row||^2
};

inline const char* reduction_name(NormReduction r) {
    switch (r) {
        case NormReduction::mean_norm: return "mean_norm";
        case NormReduction::flat_norm: return "flat_norm";
        case NormReduction::mean_square: return "mean_square";
    }
    return "?";
}

inline NormReduction parse_reduction(const std::string& s) {
    if (s == "mean_norm") return NormReduction::mean_norm;
    if (s == "flat_norm") return NormReduction::flat_norm;
    if (s == "mean_square") return NormReduction::mean_square;
    throw ValueError("unknown reduction '" + s +
                     "' (expected mean_norm, flat_norm, or mean_square)");
}

struct RegularizationConfig {
    double alpha = 0.0;  // AR coefficient; 0 disables
    double beta = 0.0;   // TAR coefficient; 0 disables
    NormReduction reduction = NormReduction::mean_norm;

    void validate() const {
        if (alpha < 0.0) throw ValueError("regularization: alpha must be nonnegative");
        if (beta < 0.0) throw ValueError("regularization: beta must be nonnegative");
    }
};

namespace detail {

inline Tensor reduce_rows(const Tensor& seq, NormReduction kind) {
    if (seq.shape().size() != 3)
        throw ShapeError("regularizer: expected [T,B,H] activations, got " +
                         shape_str(seq.shape()));
    const int rows = seq.shape()[0] * seq.shape()[1];
    Tensor flat = reshape(seq, {rows, seq.shape()[2]});
    switch (kind) {
        case NormReduction::mean_norm: return mean_row_l2(flat);
        case NormReduction::flat_norm: return l2_norm(flat);
        case NormReduction::mean_square: return scale(sum(mul(flat, flat)), 1.0 / rows);
    }
    throw ValueError("regularizer: bad reduction");
}

}  // namespace detail

// Activation regularization: alpha * L2 of the dropped final-layer outputs
// (m . h_t). Penalizes activations far from zero.
inline Tensor ar_loss(const Tensor& dropped_outputs, double alpha,
                      NormReduction reduction = NormReduction::mean_norm) {
    if (alpha < 0.0) throw ValueError("ar_loss: alpha must be nonnegative");
    if (alpha == 0.0) return dropped_outputs.tape().zeros({1});
    return scale(detail::reduce_rows(dropped_outputs, reduction), alpha);
}

// Temporal activation regularization: beta * L2(h_t - h_{t+1}) over the raw
// (pre-dropout) final-layer outputs. Penalizes large changes in the hidden
// state between timesteps. Exactly zero for single-timestep segments;
// differences never cross a BPTT segment boundary.
inline Tensor tar_loss(const Tensor& raw_outputs, double beta,
                       NormReduction reduction = NormReduction::mean_norm) {
    if (beta < 0.0) throw ValueError("tar_loss: beta must be nonnegative");
    if (raw_outputs.shape().size() != 3)
        throw ShapeError("tar_loss: expected [T,B,H] activations, got " +
                         shape_str(raw_outputs.shape()));
    if (beta == 0.0 || raw_outputs.shape()[0] == 1) return raw_outputs.tape().zeros({1});
    return scale(detail::reduce_rows(temporal_diff(raw_outputs), reduction), beta);
}

// Training objective: cross entropy plus both penalty terms.
inline Tensor combined_objective(const Tensor& ce, const Tensor& ar, const Tensor& tar) {
    if (ce.size() != 1 || ar.size() != 1 || tar.size() != 1)
        throw ShapeError("combined_objective: all terms must be scalars");
    return add(add(ce, ar), tar);
}

}  // namespace rlm
