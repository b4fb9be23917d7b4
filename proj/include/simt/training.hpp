// Training objective (cross-entropy plus summation / latency / consistency
// constraints), the curriculum threshold schedule with prefix masking, and the
// two-stage optimization pipeline.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "simt/data.hpp"
#include "simt/graph.hpp"
#include "simt/model.hpp"

namespace simt {

// delta_train(update) = delta_infer + (1 - delta_infer) * exp(-update / T)
double curriculum_delta(int64_t update, double T, double delta_infer);

// C[i][j] = max(|j - i*J/I| - epsilon, 0) / max(I, J), indices 1-based.
Tensor cost_matrix(int I, int J, double epsilon);

// Per-target-row source bound: the shortest prefix whose cumulative mean
// allocation exceeds delta_train, or J when the threshold is never reached.
std::vector<int> prefix_mask(const Tensor& p_mean, double delta_train);

// Mean of the given layers' allocation matrices (rows I x J).
Tensor mean_allocation(const std::vector<Var>& p_layers, const std::vector<int>& layer_ids);

// Where the summation constraint's source-mass target comes from.
//   reference: the masked self-attention of the frozen stage-start model
//              (stable anchor; the conventional-attention reading).
//   current:   the live model's own scores, treated as a constant.
//   symmetric: the live model's scores with gradients flowing through them.
enum class BetaSource { reference, current, symmetric };

struct LossFlags {
    bool use_sum = true;
    bool use_lat = true;
    bool use_con = true;
    bool sum_beta_grad = false; // symmetric variant when no frozen targets given
    double label_smoothing = 0.0;
};

struct LossVars {
    Var simt, sum, lat, con, total;
};

// Soft-attention source mass per layer (heads averaged) from the forward
// scores; the summation constraint treats this as a constant target.
std::vector<std::vector<double>> source_mass_targets(const ForwardOutput& fwd);

// Assembles the full objective on the graph. The caller supplies the cost
// matrix (cached by shape) and, optionally, frozen source-mass targets so a
// finite-difference check differentiates the same function training uses.
LossVars build_losses(Graph& g, const ForwardOutput& fwd, const std::vector<TokenId>& tgt,
                      const Tensor& cost, const LossFlags& flags,
                      const std::vector<std::vector<double>>* frozen_beta = nullptr);

// One JSON-lines record per optimizer update.
struct LossBreakdown {
    int64_t update = 0;
    double delta_train = 1.0;
    double simt = 0.0, sum = 0.0, lat = 0.0, con = 0.0, total = 0.0;
    double grad_norm = 0.0;
    double frac_rows_sum_p_gt_1 = 0.0;

    std::string to_json() const;
};

class AdamOptimizer {
public:
    struct Options {
        double lr = 5e-4;
        int warmup = 100;
        double warmup_init_lr = 1e-7;
        double beta1 = 0.9;
        double beta2 = 0.98;
        double eps = 1e-8;
    };

    AdamOptimizer(std::vector<Parameter*> params, Options opt);

    // Scales gradients to max_norm if their global norm exceeds it; returns
    // the pre-clip norm. max_norm <= 0 disables clipping.
    double clip_gradients(double max_norm);
    void step();
    void zero_grad();
    int64_t updates() const { return updates_; }
    double current_lr() const;

private:
    std::vector<Parameter*> params_;
    Options opt_;
    std::vector<Tensor> m_, v_;
    int64_t updates_ = 0;
};

enum class TrainStage { pretrain, finetune };

struct TrainOptions {
    TrainStage stage = TrainStage::pretrain;
    int steps = 2000;
    int batch_tokens = 320; // source+target tokens per update
    double clip_norm = 1.0;
    double label_smoothing = 0.1;
    bool use_sum = true;
    bool use_lat = true;
    bool use_con = true;
    BetaSource beta_source = BetaSource::reference;
    uint64_t shuffle_seed = 7;
    std::string log_path; // JSONL; empty disables
    AdamOptimizer::Options adam;
    std::function<void(const LossBreakdown&)> on_step; // optional observer
};

struct TrainResult {
    int64_t updates = 0;
    LossBreakdown last;
};

// Runs one stage over the corpus. Pretraining uses plain causal attention and
// cross-entropy only; finetuning uses streaming attention, all enabled
// constraints, and curriculum prefix masking. Aborts with a batch dump on a
// non-finite loss.
TrainResult train_stage(Model& model, const ParallelCorpus& corpus, const TrainOptions& opt);

} // namespace simt
