#include "simt/streaming.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "simt/graph.hpp"

namespace simt {

namespace {

TokenId argmax_token(std::span<const double> logits) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return best;
}

} // namespace

TranslateResult run_policy(PolicyBackend& backend, const SourceFeed& source, double delta,
                           int max_len, bool capture_log, const StreamHooks* hooks) {
    if (max_len < 1) throw std::invalid_argument("translate: max_len must be positive");

    TranslateResult out;
    int raw_read = 0;
    bool source_done = false; // feed returned nullopt
    bool eos_fed = false;
    std::optional<TokenId> lookahead;

    auto pull = [&]() -> std::optional<TokenId> {
        if (lookahead.has_value()) {
            std::optional<TokenId> t = lookahead;
            lookahead.reset();
            return t;
        }
        if (source_done) return std::nullopt;
        std::optional<TokenId> t = source();
        if (!t.has_value()) source_done = true;
        return t;
    };
    // exhaustion must be observable before the next decision; peek one token
    auto refill = [&]() {
        if (!lookahead.has_value() && !source_done) {
            lookahead = source();
            if (!lookahead.has_value()) source_done = true;
        }
    };

    auto model_read = [&]() { return raw_read + (eos_fed ? 1 : 0); };
    auto log_event = [&](const char* action, TokenId tok, const std::vector<double>& cums) {
        StreamDecision ev{action, model_read(), tok, cums};
        if (hooks && hooks->on_event) hooks->on_event(ev);
        if (capture_log) out.decisions.push_back(std::move(ev));
    };

    auto read_one = [&]() -> StepResult {
        TokenId tok;
        std::optional<TokenId> t = pull();
        if (t.has_value()) {
            tok = *t;
            ++raw_read;
        } else if (!eos_fed) {
            tok = kEos;
            eos_fed = true;
        } else {
            throw std::logic_error("translate: read past exhausted source");
        }
        StepResult res = backend.step(tok, Segment::source);
        log_event("read", tok, res.decision_cums);
        return res;
    };

    // the first action is always READ
    refill();
    if (source_done && !lookahead.has_value()) {
        throw std::invalid_argument("translate: empty source");
    }
    StepResult res = read_one();
    res = backend.step(kBos, Segment::target);

    for (;;) {
        refill();
        bool exhausted = source_done && !lookahead.has_value() && eos_fed;
        Action act;
        if (exhausted) {
            act = Action::write;
        } else {
            act = decision_aggregate(res.decision_cums, delta);
        }
        if (act == Action::read) {
            res = read_one();
            continue;
        }
        if (!exhausted && decision_aggregate(res.decision_cums, delta) != Action::write) {
            throw std::logic_error("translate: write without satisfied decision rule");
        }
        TokenId tok = argmax_token(backend.pending_logits());
        backend.commit_write();
        out.written.push_back(tok);
        out.model_bounds.push_back(model_read());
        log_event("write", tok, res.decision_cums);
        if (tok == kEos) break;
        if (hooks && hooks->on_write) hooks->on_write(tok);
        out.tokens.push_back(tok);
        out.trace.g.push_back(raw_read);
        if (static_cast<int>(out.tokens.size()) >= max_len) {
            out.truncated = true;
            break;
        }
        res = backend.step(tok, Segment::target);
    }
    return out;
}

TranslateResult run_policy(PolicyBackend& backend, std::span<const TokenId> source_raw,
                           double delta, int max_len, bool capture_log) {
    size_t next = 0;
    SourceFeed feed = [&]() -> std::optional<TokenId> {
        if (next >= source_raw.size()) return std::nullopt;
        return source_raw[next++];
    };
    return run_policy(backend, feed, delta, max_len, capture_log, nullptr);
}

TranslateResult translate_stream(const Model& model, std::span<const TokenId> source_raw,
                                 double delta, int max_len, bool capture_log) {
    ModelBackend backend(model);
    return run_policy(backend, source_raw, delta, max_len, capture_log);
}

double replay_consistency(const Model& model, const std::vector<TokenId>& src_model,
                          const std::vector<TokenId>& target_rows,
                          const std::vector<int>& bounds) {
    const int J = static_cast<int>(src_model.size());
    const int I = static_cast<int>(target_rows.size());
    if (I == 0) throw std::invalid_argument("replay: empty target");
    if (static_cast<int>(bounds.size()) != I) {
        throw std::invalid_argument("replay: bounds size must match target length");
    }
    for (int i = 0; i < I; ++i) {
        if (bounds[i] < 1 || bounds[i] > J) throw std::invalid_argument("replay: bound out of range");
        if (i > 0 && bounds[i] < bounds[i - 1]) {
            throw std::invalid_argument("replay: bounds must be non-decreasing");
        }
    }

    // streaming pass, scripted to the trace, teacher forced
    StreamState state = model.new_stream();
    std::vector<std::vector<double>> stream_logits;
    int fed = 0;
    for (int i = 0; i < I; ++i) {
        while (fed < bounds[i]) {
            model.stream_step(state, src_model[fed], Segment::source);
            ++fed;
        }
        TokenId input = i == 0 ? kBos : target_rows[i - 1];
        StepResult res = model.stream_step(state, input, Segment::target);
        stream_logits.push_back(*res.logits);
        model.stream_commit(state);
    }

    // batch pass with identical per-row bounds
    Graph g(false, model.config().precision);
    ForwardOutput fwd = model.forward(g, src_model, target_rows, AttentionMode::streaming, &bounds);
    const Tensor& batch_logits = fwd.logits.value();

    double max_diff = 0.0;
    for (int i = 0; i < I; ++i) {
        for (int v = 0; v < batch_logits.cols(); ++v) {
            max_diff = std::max(max_diff, std::fabs(batch_logits.at(i, v) - stream_logits[i][v]));
        }
    }
    return max_diff;
}

} // namespace simt
