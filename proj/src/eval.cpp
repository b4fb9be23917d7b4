#include "simt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace simt {

AlignmentSet hypothesis_alignment(const SentencePair& pair, const std::vector<TokenId>& hyp) {
    AlignmentSet out;
    for (int i = 1; i <= static_cast<int>(hyp.size()); ++i) {
        if (i > static_cast<int>(pair.target.size())) continue; // beyond the reference
        if (hyp[i - 1] != pair.target[i - 1]) continue;         // wrong token, not grounded
        for (const auto& [j, t] : pair.alignment.pairs) {
            if (t == i) {
                out.pairs.emplace_back(j, i);
                break;
            }
        }
    }
    return out;
}

EvalReport evaluate_at(const Model& model, const ParallelCorpus& corpus, double delta,
                       const EvalOptions& opt) {
    if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
    for (const SentencePair& pair : corpus.pairs) {
        for (TokenId t : pair.source) {
            if (t < 0 || t >= model.config().vocab_size) {
                throw std::invalid_argument("evaluate: corpus does not match model vocabulary");
            }
        }
    }

    const size_t n = corpus.size();
    std::vector<SentenceEval> evals(n);
    std::vector<std::vector<TokenId>> hyps(n);

    auto run_range = [&](size_t from, size_t to) {
        for (size_t s = from; s < to; ++s) {
            const SentencePair& pair = corpus.pairs[s];
            TranslateResult res = translate_stream(model, pair.source, delta, opt.max_len);
            SentenceEval& ev = evals[s];
            ev.g = res.trace.g;
            ev.hyp = res.tokens;
            ev.source_len = static_cast<int>(pair.source.size());
            ev.target_len = static_cast<int>(res.tokens.size());
            ev.truncated = res.truncated;
            ev.al = average_lagging(ev.g, ev.source_len, ev.target_len);
            hyps[s] = res.tokens;
        }
    };

    int threads = std::max(1, opt.threads);
    if (threads == 1 || n < 2) {
        run_range(0, n);
    } else {
        threads = std::min<int>(threads, static_cast<int>(n));
        std::vector<std::thread> pool;
        size_t chunk = (n + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            size_t from = t * chunk;
            size_t to = std::min(n, from + chunk);
            if (from >= to) break;
            pool.emplace_back(run_range, from, to);
        }
        for (auto& th : pool) th.join();
    }

    EvalReport report;
    report.delta_infer = delta;
    std::vector<std::vector<TokenId>> refs(n);
    long halluc = 0, hyp_tokens = 0;
    double al_sum = 0.0;
    for (size_t s = 0; s < n; ++s) {
        refs[s] = corpus.pairs[s].target;
        al_sum += evals[s].al;
        AlignmentSet align = hypothesis_alignment(corpus.pairs[s], hyps[s]);
        if (!hyps[s].empty()) {
            double hr = hallucination_rate(hyps[s], align);
            halluc += std::lround(hr * hyps[s].size());
            hyp_tokens += static_cast<long>(hyps[s].size());
        }
    }
    report.al = al_sum / static_cast<double>(n);
    report.bleu = corpus_bleu(hyps, refs);
    report.hr = hyp_tokens > 0 ? static_cast<double>(halluc) / hyp_tokens : 1.0;
    if (opt.keep_sentences) report.sentences = std::move(evals);
    return report;
}

std::vector<EvalReport> evaluate(const Model& model, const ParallelCorpus& corpus,
                                 const std::vector<double>& deltas, const EvalOptions& opt) {
    if (deltas.empty()) throw std::invalid_argument("evaluate: no thresholds given");
    std::vector<EvalReport> out;
    out.reserve(deltas.size());
    for (double d : deltas) out.push_back(evaluate_at(model, corpus, d, opt));
    return out;
}

namespace {

nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json sentences = nlohmann::json::array();
    for (const SentenceEval& s : r.sentences) {
        sentences.push_back(
            {{"g", s.g}, {"hyp", s.hyp}, {"J", s.source_len}, {"I", s.target_len}});
    }
    return nlohmann::json{{"delta_infer", r.delta_infer},
                          {"AL", r.al},
                          {"BLEU", r.bleu},
                          {"HR", r.hr},
                          {"sentences", sentences}};
}

} // namespace

std::string report_to_json(const EvalReport& report) { return report_json(report).dump(); }

std::string reports_to_json(const std::vector<EvalReport>& reports) {
    nlohmann::json arr = nlohmann::json::array();
    for (const EvalReport& r : reports) arr.push_back(report_json(r));
    return arr.dump(2);
}

void write_tradeoff_svg(const std::string& path, const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("plot: no reports");
    std::vector<std::pair<double, double>> pts;
    for (const EvalReport& r : reports) pts.emplace_back(r.al, r.bleu);
    std::sort(pts.begin(), pts.end());
    double x0 = pts.front().first, x1 = pts.back().first;
    double y0 = 0.0, y1 = 100.0;
    if (x1 - x0 < 1e-9) x1 = x0 + 1.0;
    const double w = 480, h = 320, m = 48;
    auto sx = [&](double x) { return m + (x - x0) / (x1 - x0) * (w - 2 * m); };
    auto sy = [&](double y) { return h - m - (y - y0) / (y1 - y0) * (h - 2 * m); };
    std::ofstream os(path);
    if (!os) throw std::runtime_error("plot: cannot open " + path);
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<line x1='" << m << "' y1='" << h - m << "' x2='" << w - m << "' y2='" << h - m
       << "' stroke='black'/>\n";
    os << "<line x1='" << m << "' y1='" << m << "' x2='" << m << "' y2='" << h - m
       << "' stroke='black'/>\n";
    os << "<text x='" << w / 2 << "' y='" << h - 12 << "' font-size='12'>AL</text>\n";
    os << "<text x='12' y='" << h / 2 << "' font-size='12' transform='rotate(-90 12 " << h / 2
       << ")'>BLEU</text>\n";
    os << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
    for (const auto& [x, y] : pts) os << sx(x) << "," << sy(y) << " ";
    os << "'/>\n";
    for (const auto& [x, y] : pts) {
        os << "<circle cx='" << sx(x) << "' cy='" << sy(y) << "' r='3' fill='steelblue'/>\n";
    }
    os << "</svg>\n";
}

} // namespace simt
