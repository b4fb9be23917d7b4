// Attention row kernels. The graph ops and the streaming decoder both call
// these, so batch and incremental paths produce identical numbers.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "simt/tensor.hpp"

namespace simt {

// Allocation mode for streaming self-attention: distribute allocation over
// every source prefix, or concentrate it on the most probable one.
enum class Allocation { expected, max };

// Numerically stable softmax (max subtraction). Throws on empty input.
std::vector<double> softmax(std::span<const double> v);

// Writes softmax of v into out (same length); shared low-level kernel.
void softmax_into(std::span<const double> v, std::span<double> out);

// (q . k) / sqrt(d). Throws on length mismatch.
double scaled_dot(std::span<const double> q, std::span<const double> k, int d);

// Elementwise mean of the first j vectors (j is 1-based). Throws if j is out
// of range or the states are ragged.
std::vector<double> mean_pool_prefix(const std::vector<std::vector<double>>& states, int j);

// Streaming companion of mean_pool_prefix: O(d) per appended vector.
class RunningPrefixMean {
public:
    explicit RunningPrefixMean(int dim) : sum_(dim, 0.0) {}
    void push(std::span<const double> v);
    std::vector<double> mean() const;
    const std::vector<double>& sum() const { return sum_; }
    int count() const { return count_; }

private:
    std::vector<double> sum_;
    int count_ = 0;
};

struct SsaRow {
    std::vector<double> alpha_src; // length = bound
    std::vector<double> alpha_tgt; // length = target context size
};

// Expected-allocation attention row (suffix-accumulation form, O(bound)).
//   alpha_src[j] = sum_{m>=j} p[m] * softmax(e_src[0..m])[j]
//   alpha_tgt[k] = (1 - sum_m p[m]) * softmax(e_tgt)[k]
// p and e_src are read on [0, bound); bound must be >= 1.
SsaRow ssa_expected_row(std::span<const double> p, std::span<const double> e_src,
                        std::span<const double> e_tgt, int bound);

// Max-allocation ablation: all source mass sum(p) goes to softmax over the
// single most probable prefix (ties break toward the shorter prefix).
SsaRow ssa_max_row(std::span<const double> p, std::span<const double> e_src,
                   std::span<const double> e_tgt, int bound);

inline SsaRow ssa_row(std::span<const double> p, std::span<const double> e_src,
                      std::span<const double> e_tgt, int bound, Allocation mode) {
    return mode == Allocation::max ? ssa_max_row(p, e_src, e_tgt, bound)
                                   : ssa_expected_row(p, e_src, e_tgt, bound);
}

// Context vector c = sum_j alpha_src[j] v_src[j] + sum_k alpha_tgt[k] v_tgt[k].
std::vector<double> ssa_context(std::span<const double> alpha_src,
                                std::span<const double> alpha_tgt,
                                const std::vector<std::vector<double>>& v_src,
                                const std::vector<std::vector<double>>& v_tgt);

// Plain causal self-attention over a sequence of state vectors; position i
// attends to positions <= i. Returns one context row per position.
std::vector<std::vector<double>> masked_self_attention(
    const std::vector<std::vector<double>>& states,
    const std::vector<std::vector<double>>& wq,  // [d][d]
    const std::vector<std::vector<double>>& wk,
    const std::vector<std::vector<double>>& wv);

// Allocation probability for one (target prefix, source prefix) pair:
// sigmoid((pooled_t Uq) . (pooled_s Uk) / sqrt(d)).
double prefix_allocation(std::span<const double> pooled_t, std::span<const double> pooled_s,
                         const std::vector<std::vector<double>>& u_q,
                         const std::vector<std::vector<double>>& u_k);

// Soft-attention source mass for one target row (the summation-constraint
// target): sum_j exp(e_src[j]) / (sum_j exp(e_src[j]) + sum_k exp(e_tgt[k])).
double source_attention_mass(std::span<const double> e_src, std::span<const double> e_tgt);

// Row layer norm, eps 1e-5. Batch and streaming paths share this kernel.
void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, std::span<double> out);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace simt
