#include "simt/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace simt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

void ModelConfig::validate() const {
    if (vocab_size <= kReservedTokens) throw std::invalid_argument("config: vocab too small");
    if (model_dim <= 0 || ffn_dim <= 0) throw std::invalid_argument("config: bad dimensions");
    if (layers < 1) throw std::invalid_argument("config: need at least one layer");
    if (heads < 1 || model_dim % heads != 0) throw std::invalid_argument("config: bad head count");
    if (decision_layers < 1 || decision_layers > layers) {
        throw std::invalid_argument("config: decision_layers out of range");
    }
    if (!(delta_infer > 0.0 && delta_infer < 1.0)) {
        throw std::invalid_argument("config: delta_infer must be in (0,1)");
    }
    if (epsilon < 0.0) throw std::invalid_argument("config: epsilon must be >= 0");
    if (curriculum_updates <= 0.0) throw std::invalid_argument("config: T must be > 0");
    if (max_source_len < 2 || max_target_len < 2) {
        throw std::invalid_argument("config: position tables too small");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("config: bad dropout");
}

std::vector<int> ModelConfig::decision_layer_ids() const {
    std::vector<int> ids(decision_layers);
    std::iota(ids.begin(), ids.end(), layers - decision_layers);
    return ids;
}

void RowMat::append(std::span<const double> row) {
    if (static_cast<int>(row.size()) != cols_) {
        throw std::logic_error("row cache: width mismatch");
    }
    data_.insert(data_.end(), row.begin(), row.end());
    ++rows_;
}

const std::vector<double>& StreamState::target_key_bytes(int layer) const {
    return layers_.at(layer).tgt_k.raw();
}

// ---------------------------------------------------------------------------
// construction

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_parameters();
}

Parameter& Model::add_param(const std::string& name, std::vector<int> shape) {
    order_.push_back(name);
    auto [it, inserted] = params_.emplace(name, Parameter(name, Tensor(std::move(shape))));
    if (!inserted) throw std::logic_error("duplicate parameter " + name);
    return it->second;
}

void Model::init_parameters() {
    int d = cfg_.model_dim;
    add_param("tok_emb", {cfg_.vocab_size, d});
    add_param("src_pos", {cfg_.max_source_len, d});
    add_param("tgt_pos", {cfg_.max_target_len, d});
    add_param("seg_emb", {2, d});
    for (int n = 0; n < cfg_.layers; ++n) {
        std::string pre = "layer" + std::to_string(n) + ".";
        add_param(pre + "ln1.gain", {d});
        add_param(pre + "ln1.bias", {d});
        add_param(pre + "wq", {d, d});
        add_param(pre + "wk", {d, d});
        add_param(pre + "wv", {d, d});
        add_param(pre + "wo", {d, d});
        add_param(pre + "uq", {d, d});
        add_param(pre + "uk", {d, d});
        add_param(pre + "ln2.gain", {d});
        add_param(pre + "ln2.bias", {d});
        add_param(pre + "ffn.w1", {d, cfg_.ffn_dim});
        add_param(pre + "ffn.b1", {cfg_.ffn_dim});
        add_param(pre + "ffn.w2", {cfg_.ffn_dim, d});
        add_param(pre + "ffn.b2", {d});
    }
    add_param("final_ln.gain", {d});
    add_param("final_ln.bias", {d});
    add_param("out_proj", {d, cfg_.vocab_size});
    add_param("out_bias", {cfg_.vocab_size});

    Pcg32 rng(cfg_.seed, 0x9e3779b97f4a7c15ULL);
    for (const std::string& name : order_) {
        Parameter& p = params_.at(name);
        bool is_gain = name.ends_with("gain");
        bool is_bias = name.ends_with("bias") || name.ends_with("b1") || name.ends_with("b2");
        if (is_gain) {
            p.value.fill(1.0);
        } else if (is_bias) {
            p.value.fill(0.0);
        } else {
            for (int64_t i = 0; i < p.value.size(); ++i) {
                p.value[i] = 0.02 * rng.next_gaussian();
            }
        }
    }
    set_precision(cfg_.precision);
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    out.reserve(order_.size());
    for (const std::string& n : order_) out.push_back(&params_.at(n));
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    std::vector<const Parameter*> out;
    out.reserve(order_.size());
    for (const std::string& n : order_) out.push_back(&params_.at(n));
    return out;
}

Parameter& Model::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter " + name);
    return it->second;
}

const Parameter& Model::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter " + name);
    return it->second;
}

void Model::set_precision(Precision p) {
    cfg_.precision = p;
    for (const std::string& n : order_) {
        params_.at(n).value.set_precision(p);
    }
}

// ---------------------------------------------------------------------------
// batch forward

namespace {

void check_tokens(const std::vector<TokenId>& toks, int vocab, const char* what) {
    if (toks.empty()) throw std::invalid_argument(std::string(what) + ": empty sequence");
    for (TokenId t : toks) {
        if (t < 0 || t >= vocab) {
            throw std::invalid_argument(std::string(what) + ": token id out of vocabulary");
        }
    }
}

std::vector<int> iota_ids(int n) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

} // namespace

ForwardOutput Model::forward(Graph& g, const std::vector<TokenId>& src,
                             const std::vector<TokenId>& tgt, AttentionMode mode,
                             const std::vector<int>* bounds, const TrainNoise* noise) const {
    check_tokens(src, cfg_.vocab_size, "source");
    check_tokens(tgt, cfg_.vocab_size, "target");
    const int J = static_cast<int>(src.size());
    const int I = static_cast<int>(tgt.size());
    if (J > cfg_.max_source_len) throw std::invalid_argument("source exceeds position table");
    if (I > cfg_.max_target_len) throw std::invalid_argument("target exceeds position table");
    std::vector<int> bound_vec;
    if (bounds != nullptr) {
        if (mode != AttentionMode::streaming) {
            throw std::invalid_argument("prefix bounds require streaming attention");
        }
        if (static_cast<int>(bounds->size()) != I) {
            throw std::invalid_argument("bounds size must match target length");
        }
        for (int b : *bounds) {
            if (b < 1 || b > J) throw std::invalid_argument("prefix bound out of range");
        }
        bound_vec = *bounds;
    } else {
        bound_vec.assign(I, J);
    }

    const int T = J + I;
    const int d = cfg_.model_dim;
    const int dh = cfg_.head_dim();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // target input row i holds bos for i=0, else tgt[i-1]
    std::vector<int> ids(src.begin(), src.end());
    ids.push_back(kBos);
    for (int i = 0; i + 1 < I; ++i) ids.push_back(tgt[i]);
    std::vector<int> seg(J, 0);
    seg.insert(seg.end(), I, 1);

    Var tok_e = g.gather_rows(g.leaf(param("tok_emb")), ids);
    Var pos_e = g.concat_rows(g.gather_rows(g.leaf(param("src_pos")), iota_ids(J)),
                              g.gather_rows(g.leaf(param("tgt_pos")), iota_ids(I)));
    Var seg_e = g.gather_rows(g.leaf(param("seg_emb")), seg);
    Var x = g.add(g.add(tok_e, pos_e), seg_e);
    if (noise && noise->rate > 0.0) x = g.dropout(x, noise->rate, *noise->rng);

    ForwardOutput out;
    out.source_len = J;
    out.target_rows = I;

    std::vector<int> causal_len(T);
    for (int r = 0; r < T; ++r) causal_len[r] = r + 1;
    std::vector<int> src_causal_len(J);
    for (int r = 0; r < J; ++r) src_causal_len[r] = r + 1;

    for (int n = 0; n < cfg_.layers; ++n) {
        std::string pre = "layer" + std::to_string(n) + ".";
        Var a = g.layer_norm(x, g.leaf(param(pre + "ln1.gain")), g.leaf(param(pre + "ln1.bias")));
        Var q = g.matmul(a, g.leaf(param(pre + "wq")));
        Var k = g.matmul(a, g.leaf(param(pre + "wk")));
        Var v = g.matmul(a, g.leaf(param(pre + "wv")));

        Var ctx;
        if (mode == AttentionMode::causal) {
            out.e_src.emplace_back();
            out.e_tgt.emplace_back();
            std::vector<Var> head_ctx;
            for (int h = 0; h < cfg_.heads; ++h) {
                Var qh = g.col_slice(q, h * dh, dh);
                Var kh = g.col_slice(k, h * dh, dh);
                Var vh = g.col_slice(v, h * dh, dh);
                Var scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
                // target-row score slices, exported for source-mass targets
                Var tgt_rows = g.row_slice(scores, J, I);
                out.e_src.back().push_back(g.col_slice(tgt_rows, 0, J));
                out.e_tgt.back().push_back(g.col_slice(tgt_rows, J, I));
                Var w = g.prefix_softmax(scores, causal_len);
                head_ctx.push_back(g.matmul(w, vh));
            }
            ctx = cfg_.heads == 1 ? head_ctx[0] : g.concat_cols(head_ctx);
        } else {
            Var a_src = g.row_slice(a, 0, J);
            Var a_tgt = g.row_slice(a, J, I);
            Var pooled_s = g.prefix_row_mean(a_src);
            Var pooled_t = g.prefix_row_mean(a_tgt);
            Var pq = g.matmul(pooled_t, g.leaf(param(pre + "uq")));
            Var pk = g.matmul(pooled_s, g.leaf(param(pre + "uk")));
            Var p = g.sigmoid(g.scale(g.matmul_nt(pq, pk), inv_sqrt_d));
            out.p.push_back(p);
            out.e_src.emplace_back();
            out.e_tgt.emplace_back();
            out.weights.emplace_back();

            std::vector<Var> head_ctx;
            for (int h = 0; h < cfg_.heads; ++h) {
                Var qh = g.col_slice(q, h * dh, dh);
                Var kh = g.col_slice(k, h * dh, dh);
                Var vh = g.col_slice(v, h * dh, dh);
                Var qs = g.row_slice(qh, 0, J);
                Var qt = g.row_slice(qh, J, I);
                Var ks = g.row_slice(kh, 0, J);
                Var kt = g.row_slice(kh, J, I);
                Var vs = g.row_slice(vh, 0, J);
                Var vt = g.row_slice(vh, J, I);

                // source rows: plain causal attention within the source
                Var ss = g.scale(g.matmul_nt(qs, ks), inv_sqrt_dh);
                Var ws = g.prefix_softmax(ss, src_causal_len);
                Var ctx_s = g.matmul(ws, vs);

                Var e_s = g.scale(g.matmul_nt(qt, ks), inv_sqrt_dh);
                Var e_t = g.scale(g.matmul_nt(qt, kt), inv_sqrt_dh);
                Var w = g.ssa_weights(p, e_s, e_t, bound_vec, cfg_.allocation);
                Var ctx_t = g.matmul(w, g.concat_rows(vs, vt));
                out.e_src.back().push_back(e_s);
                out.e_tgt.back().push_back(e_t);
                out.weights.back().push_back(w);

                head_ctx.push_back(g.concat_rows(ctx_s, ctx_t));
            }
            ctx = cfg_.heads == 1 ? head_ctx[0] : g.concat_cols(head_ctx);
        }

        Var attn = g.matmul(ctx, g.leaf(param(pre + "wo")));
        if (noise && noise->rate > 0.0) attn = g.dropout(attn, noise->rate, *noise->rng);
        x = g.add(x, attn);

        Var b = g.layer_norm(x, g.leaf(param(pre + "ln2.gain")), g.leaf(param(pre + "ln2.bias")));
        Var hidden = g.relu(g.add_rowvec(g.matmul(b, g.leaf(param(pre + "ffn.w1"))),
                                         g.leaf(param(pre + "ffn.b1"))));
        Var ffn = g.add_rowvec(g.matmul(hidden, g.leaf(param(pre + "ffn.w2"))),
                               g.leaf(param(pre + "ffn.b2")));
        if (noise && noise->rate > 0.0) ffn = g.dropout(ffn, noise->rate, *noise->rng);
        x = g.add(x, ffn);
    }

    Var xf = g.layer_norm(x, g.leaf(param("final_ln.gain")), g.leaf(param("final_ln.bias")));
    Var xt = g.row_slice(xf, J, I);
    out.logits = g.add_rowvec(g.matmul(xt, g.leaf(param("out_proj"))), g.leaf(param("out_bias")));
    return out;
}

// ---------------------------------------------------------------------------
// streaming forward

namespace {

// out = x * W, accumulating over the input index in ascending order (bitwise
// identical to the batch matmul element order).
void row_times(std::span<const double> x, const Tensor& w, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    int rows = w.rows(), cols = w.cols();
    for (int i = 0; i < rows; ++i) {
        double xi = x[i];
        if (xi == 0.0) continue;
        const double* wrow = w.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) out[j] += xi * wrow[j];
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

void maybe_round(std::span<double> v, Precision p) {
    if (p != Precision::f32) return;
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

} // namespace

StreamState Model::new_stream() const {
    StreamState s;
    s.layers_.resize(cfg_.layers);
    for (auto& lc : s.layers_) {
        lc.src_k = RowMat(cfg_.model_dim);
        lc.src_v = RowMat(cfg_.model_dim);
        lc.src_pk = RowMat(cfg_.model_dim);
        lc.src_pool_sum.assign(cfg_.model_dim, 0.0);
        lc.tgt_k = RowMat(cfg_.model_dim);
        lc.tgt_v = RowMat(cfg_.model_dim);
        lc.tgt_pool_sum.assign(cfg_.model_dim, 0.0);
    }
    return s;
}

void Model::absorb_source(StreamState& s, TokenId token) const {
    const int d = cfg_.model_dim;
    const int dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const int j = s.source_read_; // position of this token
    if (j >= cfg_.max_source_len) throw std::logic_error("stream: source position table exhausted");

    std::vector<double> x(d), tmp(d);
    const Tensor& tok_emb = param("tok_emb").value;
    const Tensor& src_pos = param("src_pos").value;
    const Tensor& seg_emb = param("seg_emb").value;
    for (int t = 0; t < d; ++t) {
        x[t] = (tok_emb.at(token, t) + src_pos.at(j, t)) + seg_emb.at(0, t);
    }
    maybe_round(x, cfg_.precision);

    std::vector<double> a(d), qrow(d), krow(d), vrow(d), pooled(d), pkrow(d);
    std::vector<double> ctx(d), attn(d), hidden(cfg_.ffn_dim), ffn(d);
    for (int n = 0; n < cfg_.layers; ++n) {
        auto& lc = s.layers_[n];
        std::string pre = "layer" + std::to_string(n) + ".";
        layer_norm_row(x, param(pre + "ln1.gain").value.values(),
                       param(pre + "ln1.bias").value.values(), a);
        maybe_round(a, cfg_.precision);

        // pooled source prefix mean and its allocation-key projection
        for (int t = 0; t < d; ++t) lc.src_pool_sum[t] += a[t];
        for (int t = 0; t < d; ++t) pooled[t] = lc.src_pool_sum[t] / (j + 1);
        maybe_round(pooled, cfg_.precision);
        row_times(pooled, param(pre + "uk").value, pkrow);
        maybe_round(pkrow, cfg_.precision);
        lc.src_pk.append(pkrow);

        row_times(a, param(pre + "wq").value, qrow);
        row_times(a, param(pre + "wk").value, krow);
        row_times(a, param(pre + "wv").value, vrow);
        maybe_round(qrow, cfg_.precision);
        maybe_round(krow, cfg_.precision);
        maybe_round(vrow, cfg_.precision);
        lc.src_k.append(krow);
        lc.src_v.append(vrow);
        ++s.committed_rows_;

        // causal attention within the source segment
        std::fill(ctx.begin(), ctx.end(), 0.0);
        std::vector<double> scores(j + 1), w(j + 1);
        for (int h = 0; h < cfg_.heads; ++h) {
            int off = h * dh;
            std::span<const double> qh(qrow.data() + off, dh);
            for (int l = 0; l <= j; ++l) {
                scores[l] = dot(qh, lc.src_k.row(l).subspan(off, dh)) * inv_sqrt_dh;
            }
            s.score_ops_ += j + 1;
            maybe_round(scores, cfg_.precision);
            softmax_into(scores, w);
            maybe_round(w, cfg_.precision);
            for (int l = 0; l <= j; ++l) {
                std::span<const double> vh = lc.src_v.row(l).subspan(off, dh);
                double wl = w[l];
                for (int t = 0; t < dh; ++t) ctx[off + t] += wl * vh[t];
            }
        }
        maybe_round(ctx, cfg_.precision);
        row_times(ctx, param(pre + "wo").value, attn);
        maybe_round(attn, cfg_.precision);
        for (int t = 0; t < d; ++t) x[t] += attn[t];
        maybe_round(x, cfg_.precision);

        layer_norm_row(x, param(pre + "ln2.gain").value.values(),
                       param(pre + "ln2.bias").value.values(), tmp);
        maybe_round(tmp, cfg_.precision);
        row_times(tmp, param(pre + "ffn.w1").value, hidden);
        const Tensor& b1 = param(pre + "ffn.b1").value;
        for (int t = 0; t < cfg_.ffn_dim; ++t) {
            hidden[t] += b1[t];
            if (hidden[t] < 0.0) hidden[t] = 0.0;
        }
        maybe_round(hidden, cfg_.precision);
        row_times(hidden, param(pre + "ffn.w2").value, ffn);
        const Tensor& b2 = param(pre + "ffn.b2").value;
        for (int t = 0; t < d; ++t) x[t] += ffn[t] + b2[t];
        maybe_round(x, cfg_.precision);
    }
    ++s.source_read_;
}

void Model::eval_pending(StreamState& s) const {
    const int d = cfg_.model_dim;
    const int dh = cfg_.head_dim();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const int m = s.source_read_;
    const int i = s.committed_; // 0-based slot of the pending row
    if (m < 1) throw std::logic_error("stream: target step before any source token");
    if (i >= cfg_.max_target_len) throw std::logic_error("stream: target position table exhausted");

    s.pending_layers_.assign(cfg_.layers, {});
    s.pending_cums_.clear();

    std::vector<double> x(d), tmp(d);
    const Tensor& tok_emb = param("tok_emb").value;
    const Tensor& tgt_pos = param("tgt_pos").value;
    const Tensor& seg_emb = param("seg_emb").value;
    for (int t = 0; t < d; ++t) {
        x[t] = (tok_emb.at(s.pending_input_, t) + tgt_pos.at(i, t)) + seg_emb.at(1, t);
    }
    maybe_round(x, cfg_.precision);

    std::vector<double> pooled(d), pq(d), qrow(d), ctx(d), attn(d);
    std::vector<double> hidden(cfg_.ffn_dim), ffn(d);
    const auto decision = cfg_.decision_layer_ids();

    for (int n = 0; n < cfg_.layers; ++n) {
        auto& lc = s.layers_[n];
        auto& pl = s.pending_layers_[n];
        std::string pre = "layer" + std::to_string(n) + ".";
        pl.attn_in.resize(d);
        layer_norm_row(x, param(pre + "ln1.gain").value.values(),
                       param(pre + "ln1.bias").value.values(), pl.attn_in);
        maybe_round(pl.attn_in, cfg_.precision);

        // allocation row for this pending position
        for (int t = 0; t < d; ++t) pooled[t] = (lc.tgt_pool_sum[t] + pl.attn_in[t]) / (i + 1);
        maybe_round(pooled, cfg_.precision);
        row_times(pooled, param(pre + "uq").value, pq);
        maybe_round(pq, cfg_.precision);
        pl.p_row.resize(m);
        double cum = 0.0;
        for (int jj = 0; jj < m; ++jj) {
            double score = dot(pq, lc.src_pk.row(jj)) * inv_sqrt_d;
            score = round_to(score, cfg_.precision);
            pl.p_row[jj] = round_to(1.0 / (1.0 + std::exp(-score)), cfg_.precision);
            cum += pl.p_row[jj];
        }
        if (std::find(decision.begin(), decision.end(), n) != decision.end()) {
            s.pending_cums_.push_back(cum);
        }

        pl.k.resize(d);
        pl.v.resize(d);
        row_times(pl.attn_in, param(pre + "wq").value, qrow);
        row_times(pl.attn_in, param(pre + "wk").value, pl.k);
        row_times(pl.attn_in, param(pre + "wv").value, pl.v);
        maybe_round(qrow, cfg_.precision);
        maybe_round(pl.k, cfg_.precision);
        maybe_round(pl.v, cfg_.precision);

        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (int h = 0; h < cfg_.heads; ++h) {
            int off = h * dh;
            std::span<const double> qh(qrow.data() + off, dh);
            std::vector<double> e_src(m), e_tgt(i + 1);
            for (int jj = 0; jj < m; ++jj) {
                e_src[jj] = dot(qh, lc.src_k.row(jj).subspan(off, dh)) * inv_sqrt_dh;
            }
            for (int kk = 0; kk < i; ++kk) {
                e_tgt[kk] = dot(qh, lc.tgt_k.row(kk).subspan(off, dh)) * inv_sqrt_dh;
            }
            e_tgt[i] = dot(qh, std::span<const double>(pl.k.data() + off, dh)) * inv_sqrt_dh;
            s.score_ops_ += m + i + 1;
            maybe_round(e_src, cfg_.precision);
            maybe_round(e_tgt, cfg_.precision);

            SsaRow w = ssa_row(pl.p_row, e_src, e_tgt, m, cfg_.allocation);
            maybe_round(w.alpha_src, cfg_.precision);
            maybe_round(w.alpha_tgt, cfg_.precision);
            for (int jj = 0; jj < m; ++jj) {
                std::span<const double> vh = lc.src_v.row(jj).subspan(off, dh);
                double wj = w.alpha_src[jj];
                for (int t = 0; t < dh; ++t) ctx[off + t] += wj * vh[t];
            }
            for (int kk = 0; kk < i; ++kk) {
                std::span<const double> vh = lc.tgt_v.row(kk).subspan(off, dh);
                double wk = w.alpha_tgt[kk];
                for (int t = 0; t < dh; ++t) ctx[off + t] += wk * vh[t];
            }
            double wi = w.alpha_tgt[i];
            for (int t = 0; t < dh; ++t) ctx[off + t] += wi * pl.v[off + t];
        }
        maybe_round(ctx, cfg_.precision);
        row_times(ctx, param(pre + "wo").value, attn);
        maybe_round(attn, cfg_.precision);
        for (int t = 0; t < d; ++t) x[t] += attn[t];
        maybe_round(x, cfg_.precision);

        layer_norm_row(x, param(pre + "ln2.gain").value.values(),
                       param(pre + "ln2.bias").value.values(), tmp);
        maybe_round(tmp, cfg_.precision);
        row_times(tmp, param(pre + "ffn.w1").value, hidden);
        const Tensor& b1 = param(pre + "ffn.b1").value;
        for (int t = 0; t < cfg_.ffn_dim; ++t) {
            hidden[t] += b1[t];
            if (hidden[t] < 0.0) hidden[t] = 0.0;
        }
        maybe_round(hidden, cfg_.precision);
        row_times(hidden, param(pre + "ffn.w2").value, ffn);
        const Tensor& b2 = param(pre + "ffn.b2").value;
        for (int t = 0; t < d; ++t) x[t] += ffn[t] + b2[t];
        maybe_round(x, cfg_.precision);
    }

    layer_norm_row(x, param("final_ln.gain").value.values(),
                   param("final_ln.bias").value.values(), tmp);
    maybe_round(tmp, cfg_.precision);
    s.pending_logits_.resize(cfg_.vocab_size);
    row_times(tmp, param("out_proj").value, s.pending_logits_);
    const Tensor& ob = param("out_bias").value;
    for (int t = 0; t < cfg_.vocab_size; ++t) s.pending_logits_[t] += ob[t];
    maybe_round(s.pending_logits_, cfg_.precision);
}

void Model::commit_pending(StreamState& s) const {
    if (!s.pending_active_) {
        throw std::logic_error("stream: no pending target row to commit");
    }
    for (int n = 0; n < cfg_.layers; ++n) {
        auto& lc = s.layers_[n];
        auto& pl = s.pending_layers_[n];
        lc.tgt_k.append(pl.k);
        lc.tgt_v.append(pl.v);
        for (int t = 0; t < cfg_.model_dim; ++t) lc.tgt_pool_sum[t] += pl.attn_in[t];
        ++s.committed_rows_;
    }
    ++s.committed_;
    s.pending_active_ = false;
}

StepResult Model::stream_step(StreamState& s, TokenId token, Segment segment) const {
    if (token < 0 || token >= cfg_.vocab_size) {
        throw std::invalid_argument("stream: token id out of vocabulary");
    }
    StepResult res;
    if (segment == Segment::source) {
        absorb_source(s, token);
        if (s.pending_active_) {
            eval_pending(s); // pooled source means changed; refresh the pending row
            res.decision_cums = s.pending_cums_;
        }
    } else {
        if (s.pending_active_) {
            throw std::logic_error("stream: previous pending row was never committed");
        }
        s.pending_input_ = token;
        eval_pending(s); // may throw; activate only on success
        s.pending_active_ = true;
        res.logits = s.pending_logits_;
        res.decision_cums = s.pending_cums_;
    }
    return res;
}

void Model::stream_commit(StreamState& s) const { commit_pending(s); }

Action decision_aggregate(std::span<const double> cums, double delta) {
    if (cums.empty()) throw std::invalid_argument("decision: no decision layers");
    int hits = 0;
    for (double c : cums) {
        if (c > delta) ++hits;
    }
    return 2 * hits > static_cast<int>(cums.size()) ? Action::write : Action::read;
}

// ---------------------------------------------------------------------------
// checkpoint container

namespace {

constexpr char kMagic[8] = {'S', 'I', 'M', 'T', 'C', 'K', 'P', '1'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

std::string config_block(const ModelConfig& c, const CheckpointMeta& meta) {
    std::ostringstream os;
    os << "vocab_size=" << c.vocab_size << "\n";
    os << "model_dim=" << c.model_dim << "\n";
    os << "ffn_dim=" << c.ffn_dim << "\n";
    os << "layers=" << c.layers << "\n";
    os << "heads=" << c.heads << "\n";
    os << "decision_layers=" << c.decision_layers << "\n";
    os.precision(17);
    os << "epsilon=" << c.epsilon << "\n";
    os << "curriculum_updates=" << c.curriculum_updates << "\n";
    os << "delta_infer=" << c.delta_infer << "\n";
    os << "max_source_len=" << c.max_source_len << "\n";
    os << "max_target_len=" << c.max_target_len << "\n";
    os << "seed=" << c.seed << "\n";
    os << "allocation=" << (c.allocation == Allocation::max ? "max" : "expected") << "\n";
    os << "dropout=" << c.dropout << "\n";
    os << "precision=" << (c.precision == Precision::f32 ? "f32" : "f64") << "\n";
    os << "stage=" << meta.stage << "\n";
    os << "update=" << meta.update << "\n";
    return os.str();
}

} // namespace

void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 8);
    write_u32(os, 1); // container version
    std::string cfg = config_block(model.config(), meta);
    write_u32(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    auto params = model.parameters();
    write_u32(os, static_cast<uint32_t>(params.size()));
    for (const Parameter* p : params) {
        write_u32(os, static_cast<uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_u32(os, static_cast<uint32_t>(p->value.rank()));
        for (int dim : p->value.shape()) write_u64(os, static_cast<uint64_t>(dim));
        os.write(reinterpret_cast<const char*>(p->value.data()),
                 static_cast<std::streamsize>(p->value.size() * 8));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path, CheckpointMeta* meta_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    uint32_t version = read_u32(is);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    uint32_t cfg_len = read_u32(is);
    std::string cfg_text(cfg_len, '\0');
    is.read(cfg_text.data(), cfg_len);

    ModelConfig cfg;
    CheckpointMeta meta;
    std::istringstream cs(cfg_text);
    std::string line;
    while (std::getline(cs, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (key == "vocab_size") cfg.vocab_size = std::stoi(val);
        else if (key == "model_dim") cfg.model_dim = std::stoi(val);
        else if (key == "ffn_dim") cfg.ffn_dim = std::stoi(val);
        else if (key == "layers") cfg.layers = std::stoi(val);
        else if (key == "heads") cfg.heads = std::stoi(val);
        else if (key == "decision_layers") cfg.decision_layers = std::stoi(val);
        else if (key == "epsilon") cfg.epsilon = std::stod(val);
        else if (key == "curriculum_updates") cfg.curriculum_updates = std::stod(val);
        else if (key == "delta_infer") cfg.delta_infer = std::stod(val);
        else if (key == "max_source_len") cfg.max_source_len = std::stoi(val);
        else if (key == "max_target_len") cfg.max_target_len = std::stoi(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "allocation") cfg.allocation = val == "max" ? Allocation::max : Allocation::expected;
        else if (key == "dropout") cfg.dropout = std::stod(val);
        else if (key == "precision") cfg.precision = val == "f32" ? Precision::f32 : Precision::f64;
        else if (key == "stage") meta.stage = val;
        else if (key == "update") meta.update = std::stoll(val);
        else throw std::runtime_error("checkpoint: unknown config key " + key);
    }

    Model model(cfg);
    uint32_t n_params = read_u32(is);
    auto params = model.parameters();
    if (n_params != params.size()) {
        throw std::runtime_error("checkpoint: parameter count does not match config");
    }
    for (uint32_t idx = 0; idx < n_params; ++idx) {
        uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t rank = read_u32(is);
        std::vector<int> shape(rank);
        for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(read_u64(is));
        Parameter& p = model.param(name); // throws on unknown name
        if (p.value.shape() != shape) {
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        }
        is.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * 8));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
        if (!p.value.all_finite()) {
            throw std::runtime_error("checkpoint: non-finite values in " + name);
        }
    }
    if (meta_out != nullptr) *meta_out = meta;
    return model;
}

} // namespace simt
