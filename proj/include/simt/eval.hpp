// Batch evaluation: decodes a corpus at one or more decision thresholds and
// reports latency (AL), quality (BLEU) and hallucination rate.
#pragma once

#include <string>
#include <vector>

#include "simt/data.hpp"
#include "simt/metrics.hpp"
#include "simt/model.hpp"
#include "simt/streaming.hpp"

namespace simt {

struct SentenceEval {
    std::vector<int> g;
    std::vector<TokenId> hyp;
    int source_len = 0; // raw J
    int target_len = 0; // hypothesis length
    double al = 0.0;
    bool truncated = false;
};

struct EvalReport {
    double delta_infer = 0.0;
    double al = 0.0;   // mean of per-sentence AL
    double bleu = 0.0; // corpus BLEU against references
    double hr = 0.0;   // pooled hallucination rate
    std::vector<SentenceEval> sentences;
};

struct EvalOptions {
    int max_len = 63;
    int threads = 1;
    bool keep_sentences = true;
};

// A hypothesis token counts as grounded when the reference position it sits on
// is alignment-covered and the token matches the reference (synthetic tasks
// are deterministic token mappings, so this is the exact induced alignment).
AlignmentSet hypothesis_alignment(const SentencePair& pair, const std::vector<TokenId>& hyp);

EvalReport evaluate_at(const Model& model, const ParallelCorpus& corpus, double delta,
                       const EvalOptions& opt);

std::vector<EvalReport> evaluate(const Model& model, const ParallelCorpus& corpus,
                                 const std::vector<double>& deltas, const EvalOptions& opt);

std::string report_to_json(const EvalReport& report);
std::string reports_to_json(const std::vector<EvalReport>& reports);

// Minimal static BLEU-vs-AL curve (SVG polyline with axis labels).
void write_tradeoff_svg(const std::string& path, const std::vector<EvalReport>& reports);

} // namespace simt
