// Live READ/WRITE decoding loop over the incremental model state, plus the
// replay harness that checks streaming output against a batch forward pass.
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "simt/model.hpp"

namespace simt {

// Read counts (raw source tokens, excluding the end marker) recorded at each
// hypothesis write. Monotone non-decreasing, each in [1, J].
struct PolicyTrace {
    std::vector<int> g;
};

struct StreamDecision {
    std::string action; // "read" | "write"
    int source_read = 0;
    TokenId token = kPad;
    std::vector<double> cums;
};

struct TranslateResult {
    std::vector<TokenId> tokens; // hypothesis, end token excluded
    PolicyTrace trace;           // one entry per hypothesis token
    // model-level read counts (incl. the end marker once fed) for every
    // written row including the final end token; drives exact replay
    std::vector<int> model_bounds;
    std::vector<TokenId> written; // all written tokens incl. trailing eos if emitted
    bool truncated = false;
    std::vector<StreamDecision> decisions; // filled when capture_log is set
};

// Backend seam so the policy loop can run against scripted allocation values
// in tests as well as a live model.
class PolicyBackend {
public:
    virtual ~PolicyBackend() = default;
    virtual StepResult step(TokenId token, Segment segment) = 0;
    virtual void commit_write() = 0;
    virtual std::span<const double> pending_logits() const = 0;
};

class ModelBackend : public PolicyBackend {
public:
    explicit ModelBackend(const Model& model) : model_(model), state_(model.new_stream()) {}
    StepResult step(TokenId token, Segment segment) override {
        return model_.stream_step(state_, token, segment);
    }
    void commit_write() override { model_.stream_commit(state_); }
    std::span<const double> pending_logits() const override { return state_.pending_logits(); }
    const StreamState& state() const { return state_; }

private:
    const Model& model_;
    StreamState state_;
};

// Pull-based source: yields the next raw token or nullopt once exhausted.
using SourceFeed = std::function<std::optional<TokenId>()>;

// Optional live observers (used by the interactive CLI mode).
struct StreamHooks {
    std::function<void(TokenId)> on_write;
    std::function<void(const StreamDecision&)> on_event;
};

// Greedy READ/WRITE loop. Reads one source token first; writes whenever a
// strict majority of the decision layers' cumulative allocations exceed delta
// or the source (raw tokens plus end marker) is exhausted; stops at the end
// token or after max_len hypothesis tokens (truncation flag).
TranslateResult run_policy(PolicyBackend& backend, const SourceFeed& source, double delta,
                           int max_len, bool capture_log = false,
                           const StreamHooks* hooks = nullptr);

TranslateResult run_policy(PolicyBackend& backend, std::span<const TokenId> source_raw,
                           double delta, int max_len, bool capture_log = false);

TranslateResult translate_stream(const Model& model, std::span<const TokenId> source_raw,
                                 double delta, int max_len, bool capture_log = false);

// Streaming decode forced to the given per-row read bounds with teacher-forced
// target rows, compared against one batch forward with the same bounds.
// Returns the maximum absolute logit difference. src_model includes the end
// marker; target_rows is the written sequence (typically ending in eos);
// bounds are model-level read counts, non-decreasing, in [1, |src_model|].
double replay_consistency(const Model& model, const std::vector<TokenId>& src_model,
                          const std::vector<TokenId>& target_rows,
                          const std::vector<int>& bounds);

} // namespace simt
