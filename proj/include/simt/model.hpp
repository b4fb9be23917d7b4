// Decoder-only streaming translation model: shared source/target parameter
// stack with disjoint position tables, per-layer prefix-allocation attention,
// and an append-only incremental decoding state.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "simt/attention.hpp"
#include "simt/graph.hpp"
#include "simt/rng.hpp"
#include "simt/tensor.hpp"

namespace simt {

using TokenId = int;

// reserved vocabulary slots
constexpr TokenId kPad = 0;
constexpr TokenId kBos = 1;
constexpr TokenId kEos = 2;
constexpr TokenId kUnk = 3;
constexpr int kReservedTokens = 4;

// causal: plain masked self-attention over the whole concatenation (the
// pretraining stage). streaming: prefix-allocation attention on target rows.
enum class AttentionMode { causal, streaming };

enum class Segment { source, target };

struct ModelConfig {
    int vocab_size = 24;
    int model_dim = 64;
    int ffn_dim = 128;
    int layers = 4;
    int heads = 1;
    int decision_layers = 2;     // top layers that vote on WRITE
    double epsilon = 1.0;        // latency-constraint tolerance
    double curriculum_updates = 500.0; // T in the delta_train schedule
    double delta_infer = 0.5;
    int max_source_len = 64;
    int max_target_len = 64;
    uint64_t seed = 1;
    Allocation allocation = Allocation::expected;
    double dropout = 0.0;
    Precision precision = Precision::f64;

    void validate() const;
    int head_dim() const { return model_dim / heads; }
    // 0-based layer indices whose allocation rows drive the policy
    std::vector<int> decision_layer_ids() const;
};

struct ForwardOutput {
    Var logits;                            // [I, vocab]
    std::vector<Var> p;                    // per layer [I, J]; streaming mode only
    std::vector<std::vector<Var>> e_src;   // [layer][head] [I, J]
    std::vector<std::vector<Var>> e_tgt;   // [layer][head] [I, I]
    std::vector<std::vector<Var>> weights; // [layer][head] [I, J+I]
    int source_len = 0;
    int target_rows = 0;
};

struct TrainNoise {
    double rate = 0.0;
    Pcg32* rng = nullptr;
};

// Contiguous row store for incremental per-layer caches.
class RowMat {
public:
    RowMat() = default;
    explicit RowMat(int cols) : cols_(cols) {}
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    void append(std::span<const double> row);
    std::span<const double> row(int i) const {
        return {data_.data() + static_cast<size_t>(i) * cols_, static_cast<size_t>(cols_)};
    }
    const std::vector<double>& raw() const { return data_; }

private:
    int cols_ = 0;
    int rows_ = 0;
    std::vector<double> data_;
};

class Model;

// One decoding stream. Committed source/target entries are computed exactly
// once; the pending (not yet written) target row is re-evaluated whenever the
// source grows.
class StreamState {
public:
    int source_read() const { return source_read_; }
    int committed_targets() const { return committed_; }
    bool has_pending() const { return pending_active_; }
    const std::vector<double>& pending_logits() const { return pending_logits_; }
    const std::vector<double>& pending_cums() const { return pending_cums_; }

    // instrumentation for the work-bound test
    int64_t score_ops() const { return score_ops_; }
    int64_t committed_rows() const { return committed_rows_; }

    // test hook: raw bytes of the committed target key cache of one layer
    const std::vector<double>& target_key_bytes(int layer) const;

private:
    friend class Model;

    struct LayerCache {
        RowMat src_k, src_v;
        RowMat src_pk; // allocation-key projections of pooled source prefixes
        std::vector<double> src_pool_sum;
        RowMat tgt_k, tgt_v;
        std::vector<double> tgt_pool_sum;
    };

    struct PendingLayer {
        std::vector<double> attn_in; // post-norm attention input
        std::vector<double> k, v;
        std::vector<double> p_row; // allocation row over source prefixes read so far
    };

    std::vector<LayerCache> layers_;
    std::vector<PendingLayer> pending_layers_;
    std::vector<double> pending_logits_;
    std::vector<double> pending_cums_;
    TokenId pending_input_ = kPad;
    bool pending_active_ = false;
    int source_read_ = 0;
    int committed_ = 0;
    int64_t score_ops_ = 0;
    int64_t committed_rows_ = 0;
};

struct StepResult {
    std::optional<std::vector<double>> logits; // only for target steps
    std::vector<double> decision_cums;         // cumulative allocation per decision layer
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    Parameter& param(const std::string& name);
    const Parameter& param(const std::string& name) const;

    // Teacher-forced pass over source tokens plus [bos, tgt...] target rows.
    // Row i predicts tgt[i]. bounds (optional, size |tgt|) limits row i of
    // every layer to the first bounds[i] source positions; default: all J.
    ForwardOutput forward(Graph& g, const std::vector<TokenId>& src,
                          const std::vector<TokenId>& tgt, AttentionMode mode,
                          const std::vector<int>* bounds = nullptr,
                          const TrainNoise* noise = nullptr) const;

    StreamState new_stream() const;

    // Feeds one token. source: commits it to the caches and re-evaluates the
    // pending target row (its pooled source context changed). target: starts a
    // new pending row with this input token; any previous pending row must have
    // been committed via stream_commit first.
    StepResult stream_step(StreamState& state, TokenId token, Segment segment) const;

    // Freezes the pending row into the caches. Call exactly when the policy
    // writes: the row's state at the current read count becomes final.
    void stream_commit(StreamState& state) const;

    void set_precision(Precision p);

private:
    void init_parameters();
    Parameter& add_param(const std::string& name, std::vector<int> shape);

    // single-row streaming forward helpers
    void eval_pending(StreamState& state) const;
    void commit_pending(StreamState& state) const;
    void absorb_source(StreamState& state, TokenId token) const;

    ModelConfig cfg_;
    std::vector<std::string> order_;
    std::unordered_map<std::string, Parameter> params_;
};

// Majority vote of the decision layers: WRITE iff strictly more than half of
// the cumulative allocations exceed delta.
enum class Action { read, write };
Action decision_aggregate(std::span<const double> cums, double delta);

// --- checkpoint container (layout documented in FORMATS.md) -----------------
struct CheckpointMeta {
    std::string stage = "init"; // init | pretrain | finetune
    int64_t update = 0;
};

void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta);
Model load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

} // namespace simt
