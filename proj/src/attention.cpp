#include "simt/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace simt {

void softmax_into(std::span<const double> v, std::span<double> out) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        z += out[i];
    }
    for (size_t i = 0; i < v.size(); ++i) out[i] /= z;
}

std::vector<double> softmax(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    for (double x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite input");
    }
    std::vector<double> out(v.size());
    softmax_into(v, out);
    return out;
}

double scaled_dot(std::span<const double> q, std::span<const double> k, int d) {
    if (q.size() != k.size()) throw std::invalid_argument("scaled_dot: length mismatch");
    if (d <= 0) throw std::invalid_argument("scaled_dot: d must be positive");
    double acc = 0.0;
    for (size_t i = 0; i < q.size(); ++i) acc += q[i] * k[i];
    return acc / std::sqrt(static_cast<double>(d));
}

std::vector<double> mean_pool_prefix(const std::vector<std::vector<double>>& states, int j) {
    if (j < 1 || j > static_cast<int>(states.size())) {
        throw std::invalid_argument("mean_pool_prefix: prefix length out of range");
    }
    RunningPrefixMean rm(static_cast<int>(states[0].size()));
    for (int i = 0; i < j; ++i) rm.push(states[i]);
    return rm.mean();
}

void RunningPrefixMean::push(std::span<const double> v) {
    if (v.size() != sum_.size()) throw std::invalid_argument("prefix mean: dimension mismatch");
    for (size_t i = 0; i < sum_.size(); ++i) sum_[i] += v[i];
    ++count_;
}

std::vector<double> RunningPrefixMean::mean() const {
    if (count_ == 0) throw std::invalid_argument("prefix mean: empty");
    std::vector<double> m(sum_.size());
    for (size_t i = 0; i < sum_.size(); ++i) m[i] = sum_[i] / count_;
    return m;
}

SsaRow ssa_expected_row(std::span<const double> p, std::span<const double> e_src,
                        std::span<const double> e_tgt, int bound) {
    if (bound < 1 || bound > static_cast<int>(e_src.size()) ||
        bound > static_cast<int>(p.size())) {
        throw std::invalid_argument("ssa row: bound out of range");
    }
    SsaRow out;
    out.alpha_src.assign(bound, 0.0);
    out.alpha_tgt.assign(e_tgt.size(), 0.0);

    // alpha_src[j] = exp(e_j - c) * sum_{m>=j} p[m] / Z_m  with Z_m the running
    // partition sum; one forward cumsum and one suffix sum, O(bound) total.
    double c = e_src[0];
    for (int j = 1; j < bound; ++j) c = std::max(c, e_src[j]);
    std::vector<double> ex(bound);
    std::vector<double> w(bound);
    double z = 0.0;
    double p_total = 0.0;
    for (int m = 0; m < bound; ++m) {
        ex[m] = std::exp(e_src[m] - c);
        z += ex[m];
        w[m] = p[m] / z;
        p_total += p[m];
    }
    double suffix = 0.0;
    for (int j = bound - 1; j >= 0; --j) {
        suffix += w[j];
        out.alpha_src[j] = ex[j] * suffix;
    }

    softmax_into(e_tgt, out.alpha_tgt);
    double residual = 1.0 - p_total;
    for (double& a : out.alpha_tgt) a *= residual;
    return out;
}

SsaRow ssa_max_row(std::span<const double> p, std::span<const double> e_src,
                   std::span<const double> e_tgt, int bound) {
    if (bound < 1 || bound > static_cast<int>(e_src.size()) ||
        bound > static_cast<int>(p.size())) {
        throw std::invalid_argument("ssa row: bound out of range");
    }
    int best = 0;
    double p_total = p[0];
    for (int m = 1; m < bound; ++m) {
        if (p[m] > p[best]) best = m; // ties keep the shorter prefix
        p_total += p[m];
    }
    SsaRow out;
    out.alpha_src.assign(bound, 0.0);
    out.alpha_tgt.assign(e_tgt.size(), 0.0);
    softmax_into(e_src.subspan(0, best + 1), std::span<double>(out.alpha_src.data(), best + 1));
    for (int j = 0; j <= best; ++j) out.alpha_src[j] *= p_total;

    softmax_into(e_tgt, out.alpha_tgt);
    double residual = 1.0 - p_total;
    for (double& a : out.alpha_tgt) a *= residual;
    return out;
}

std::vector<double> ssa_context(std::span<const double> alpha_src,
                                std::span<const double> alpha_tgt,
                                const std::vector<std::vector<double>>& v_src,
                                const std::vector<std::vector<double>>& v_tgt) {
    if (alpha_src.size() > v_src.size() || alpha_tgt.size() > v_tgt.size()) {
        throw std::invalid_argument("ssa_context: weight/value count mismatch");
    }
    size_t dim = v_src.empty() ? v_tgt[0].size() : v_src[0].size();
    std::vector<double> c(dim, 0.0);
    for (size_t j = 0; j < alpha_src.size(); ++j) {
        for (size_t t = 0; t < dim; ++t) c[t] += alpha_src[j] * v_src[j][t];
    }
    for (size_t k = 0; k < alpha_tgt.size(); ++k) {
        for (size_t t = 0; t < dim; ++t) c[t] += alpha_tgt[k] * v_tgt[k][t];
    }
    return c;
}

namespace {

std::vector<double> project(std::span<const double> x, const std::vector<std::vector<double>>& w) {
    // row vector times matrix, accumulating over input index in order
    std::vector<double> out(w[0].size(), 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        double xi = x[i];
        const auto& wrow = w[i];
        for (size_t j = 0; j < out.size(); ++j) out[j] += xi * wrow[j];
    }
    return out;
}

} // namespace

std::vector<std::vector<double>> masked_self_attention(
    const std::vector<std::vector<double>>& states,
    const std::vector<std::vector<double>>& wq,
    const std::vector<std::vector<double>>& wk,
    const std::vector<std::vector<double>>& wv) {
    if (states.empty()) throw std::invalid_argument("masked_self_attention: empty sequence");
    int d = static_cast<int>(wq[0].size());
    std::vector<std::vector<double>> ks, vs, ctx;
    ks.reserve(states.size());
    vs.reserve(states.size());
    for (size_t i = 0; i < states.size(); ++i) {
        std::vector<double> q = project(states[i], wq);
        ks.push_back(project(states[i], wk));
        vs.push_back(project(states[i], wv));
        std::vector<double> scores(i + 1);
        for (size_t l = 0; l <= i; ++l) scores[l] = scaled_dot(q, ks[l], d);
        std::vector<double> w = softmax(scores);
        std::vector<double> c(d, 0.0);
        for (size_t l = 0; l <= i; ++l) {
            for (int t = 0; t < d; ++t) c[t] += w[l] * vs[l][t];
        }
        ctx.push_back(std::move(c));
    }
    return ctx;
}

double prefix_allocation(std::span<const double> pooled_t, std::span<const double> pooled_s,
                         const std::vector<std::vector<double>>& u_q,
                         const std::vector<std::vector<double>>& u_k) {
    std::vector<double> tq = project(pooled_t, u_q);
    std::vector<double> sk = project(pooled_s, u_k);
    return sigmoid(scaled_dot(tq, sk, static_cast<int>(pooled_t.size())));
}

void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, std::span<double> out) {
    const double eps = 1e-5;
    size_t c = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : x) {
        double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    for (size_t j = 0; j < c; ++j) out[j] = (x[j] - mean) * inv * gain[j] + bias[j];
}

double source_attention_mass(std::span<const double> e_src, std::span<const double> e_tgt) {
    double c = e_src.empty() ? e_tgt[0] : e_src[0];
    for (double x : e_src) c = std::max(c, x);
    for (double x : e_tgt) c = std::max(c, x);
    double src = 0.0, tgt = 0.0;
    for (double x : e_src) src += std::exp(x - c);
    for (double x : e_tgt) tgt += std::exp(x - c);
    return src / (src + tgt);
}

} // namespace simt
