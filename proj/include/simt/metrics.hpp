// Latency and quality metrics for streaming translation output.
#pragma once

#include <vector>

#include "simt/data.hpp"
#include "simt/model.hpp"

namespace simt {

// Average lagging of a read-count trace g over a source of length J and a
// translation of length I:
//   AL = (1/tau) * sum_{i<=tau} (g_i - (i-1) * J / I)
// with tau the first index where g reaches J, capped at I when the trace never
// reaches J. An empty trace reports J (fully lagged).
double average_lagging(const std::vector<int>& g, int J, int I);

// Corpus BLEU-4 on token ids: geometric mean of modified n-gram precisions
// with uniform weights and the standard brevity penalty, scaled to [0, 100].
// No smoothing: a zero precision zeroes the score. Orders that occur nowhere
// in the hypothesis corpus (all sentences shorter than n) are dropped from the
// mean so identical corpora always score 100.
double corpus_bleu(const std::vector<std::vector<TokenId>>& hypotheses,
                   const std::vector<std::vector<TokenId>>& references);

// Fraction of hypothesis positions with no aligned source token (1-based
// target indices in the alignment set).
double hallucination_rate(const std::vector<TokenId>& hypothesis, const AlignmentSet& alignment);

} // namespace simt
