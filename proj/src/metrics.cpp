#include "simt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace simt {

double average_lagging(const std::vector<int>& g, int J, int I) {
    if (J < 1) throw std::invalid_argument("average_lagging: J must be positive");
    if (static_cast<int>(g.size()) != I) {
        throw std::invalid_argument("average_lagging: trace length must equal I");
    }
    if (g.empty()) return static_cast<double>(J);
    int tau = I;
    for (int i = 0; i < I; ++i) {
        if (g[i] >= J) {
            tau = i + 1;
            break;
        }
    }
    double acc = 0.0;
    double ratio = static_cast<double>(J) / static_cast<double>(I);
    for (int i = 1; i <= tau; ++i) {
        acc += g[i - 1] - (i - 1) * ratio;
    }
    return acc / tau;
}

namespace {

using NgramCounts = std::map<std::vector<TokenId>, int>;

NgramCounts ngrams(const std::vector<TokenId>& s, int n) {
    NgramCounts counts;
    for (int i = 0; i + n <= static_cast<int>(s.size()); ++i) {
        counts[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)] += 1;
    }
    return counts;
}

} // namespace

double corpus_bleu(const std::vector<std::vector<TokenId>>& hypotheses,
                   const std::vector<std::vector<TokenId>>& references) {
    if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
    if (hypotheses.size() != references.size()) {
        throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
    }
    constexpr int kMaxOrder = 4;
    long matched[kMaxOrder] = {0, 0, 0, 0};
    long total[kMaxOrder] = {0, 0, 0, 0};
    long hyp_len = 0, ref_len = 0;
    for (size_t s = 0; s < hypotheses.size(); ++s) {
        const auto& hyp = hypotheses[s];
        const auto& ref = references[s];
        if (ref.empty()) throw std::invalid_argument("bleu: empty reference sentence");
        hyp_len += static_cast<long>(hyp.size());
        ref_len += static_cast<long>(ref.size());
        for (int n = 1; n <= kMaxOrder; ++n) {
            NgramCounts h = ngrams(hyp, n);
            NgramCounts r = ngrams(ref, n);
            for (const auto& [gram, count] : h) {
                total[n - 1] += count;
                auto it = r.find(gram);
                if (it != r.end()) matched[n - 1] += std::min(count, it->second);
            }
        }
    }
    if (hyp_len == 0) return 0.0;

    int orders = 0;
    double log_precision = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (total[n] == 0) break; // no hypothesis reached this order anywhere
        if (matched[n] == 0) return 0.0;
        log_precision += std::log(static_cast<double>(matched[n]) / total[n]);
        ++orders;
    }
    if (orders == 0) return 0.0;
    double bp = hyp_len >= ref_len ? 1.0
                                   : std::exp(1.0 - static_cast<double>(ref_len) / hyp_len);
    return 100.0 * bp * std::exp(log_precision / orders);
}

double hallucination_rate(const std::vector<TokenId>& hypothesis, const AlignmentSet& alignment) {
    if (hypothesis.empty()) return 1.0;
    int unaligned = 0;
    for (int i = 1; i <= static_cast<int>(hypothesis.size()); ++i) {
        if (!alignment.aligned_target(i)) ++unaligned;
    }
    return static_cast<double>(unaligned) / hypothesis.size();
}

} // namespace simt
