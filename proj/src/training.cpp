#include "simt/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "simt/rng.hpp"

namespace simt {

double curriculum_delta(int64_t update, double T, double delta_infer) {
    if (update < 0) throw std::invalid_argument("curriculum: update must be >= 0");
    if (T <= 0.0) throw std::invalid_argument("curriculum: T must be positive");
    return delta_infer + (1.0 - delta_infer) * std::exp(-static_cast<double>(update) / T);
}

Tensor cost_matrix(int I, int J, double epsilon) {
    if (I < 1 || J < 1) throw std::invalid_argument("cost_matrix: sizes must be >= 1");
    if (epsilon < 0.0) throw std::invalid_argument("cost_matrix: epsilon must be >= 0");
    Tensor c = Tensor::matrix(I, J);
    double inv = 1.0 / std::max(I, J);
    double ratio = static_cast<double>(J) / static_cast<double>(I);
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            c.at(i - 1, j - 1) = inv * std::max(std::fabs(j - i * ratio) - epsilon, 0.0);
        }
    }
    return c;
}

std::vector<int> prefix_mask(const Tensor& p_mean, double delta_train) {
    int I = p_mean.rows(), J = p_mean.cols();
    std::vector<int> bounds(I, J);
    for (int i = 0; i < I; ++i) {
        double cum = 0.0;
        for (int j = 0; j < J; ++j) {
            cum += p_mean.at(i, j);
            if (cum > delta_train) {
                bounds[i] = j + 1;
                break;
            }
        }
    }
    return bounds;
}

Tensor mean_allocation(const std::vector<Var>& p_layers, const std::vector<int>& layer_ids) {
    if (layer_ids.empty()) throw std::invalid_argument("mean_allocation: no layers");
    const Tensor& first = p_layers.at(layer_ids[0]).value();
    Tensor mean(first.shape());
    for (int id : layer_ids) {
        const Tensor& p = p_layers.at(id).value();
        for (int64_t t = 0; t < p.size(); ++t) mean[t] += p[t];
    }
    for (int64_t t = 0; t < mean.size(); ++t) mean[t] /= layer_ids.size();
    return mean;
}

std::vector<std::vector<double>> source_mass_targets(const ForwardOutput& fwd) {
    std::vector<std::vector<double>> beta(fwd.e_src.size());
    for (size_t n = 0; n < fwd.e_src.size(); ++n) {
        int heads = static_cast<int>(fwd.e_src[n].size());
        beta[n].assign(fwd.target_rows, 0.0);
        for (int h = 0; h < heads; ++h) {
            const Tensor& es = fwd.e_src[n][h].value();
            const Tensor& et = fwd.e_tgt[n][h].value();
            for (int i = 0; i < fwd.target_rows; ++i) {
                beta[n][i] += source_attention_mass(
                    es.row(i), et.row(i).subspan(0, static_cast<size_t>(i) + 1));
            }
        }
        for (double& b : beta[n]) b /= heads;
    }
    return beta;
}

LossVars build_losses(Graph& g, const ForwardOutput& fwd, const std::vector<TokenId>& tgt,
                      const Tensor& cost, const LossFlags& flags,
                      const std::vector<std::vector<double>>* frozen_beta) {
    LossVars out;
    out.simt = g.cross_entropy(fwd.logits, tgt, flags.label_smoothing);
    Var zero = g.constant(Tensor::scalar(0.0));
    out.sum = zero;
    out.lat = zero;
    out.con = zero;

    const int layers = static_cast<int>(fwd.p.size());
    if (layers > 0 && flags.use_sum) {
        Var acc = zero;
        std::vector<std::vector<double>> beta_local;
        const std::vector<std::vector<double>>* beta = frozen_beta;
        if (beta == nullptr && !flags.sum_beta_grad) {
            beta_local = source_mass_targets(fwd);
            beta = &beta_local;
        }
        std::vector<int> joint_len(fwd.target_rows);
        for (int i = 0; i < fwd.target_rows; ++i) joint_len[i] = fwd.source_len + i + 1;
        for (int n = 0; n < layers; ++n) {
            Var mass = g.row_sum(fwd.p[n]);
            Var target;
            if (beta != nullptr) {
                target = g.constant(Tensor::from({fwd.target_rows}, (*beta)[n]));
            } else {
                // differentiable source mass: per head, softmax the joint
                // [e_src | e_tgt] row and sum the source share; heads averaged
                int heads = static_cast<int>(fwd.e_src[n].size());
                Var head_acc;
                for (int h = 0; h < heads; ++h) {
                    Var joint = g.concat_cols({fwd.e_src[n][h], fwd.e_tgt[n][h]});
                    Var sm = g.prefix_softmax(joint, joint_len);
                    Var share = g.row_sum(g.col_slice(sm, 0, fwd.source_len));
                    head_acc = h == 0 ? share : g.add(head_acc, share);
                }
                target = heads == 1 ? head_acc : g.scale(head_acc, 1.0 / heads);
            }
            acc = g.add(acc, g.sum(g.abs(g.sub(mass, target))));
        }
        out.sum = acc;
    }
    if (layers > 0 && flags.use_lat) {
        Var cvar = g.constant(cost);
        Var acc = zero;
        for (int n = 0; n < layers; ++n) {
            acc = g.add(acc, g.sum(g.mul(fwd.p[n], cvar)));
        }
        out.lat = acc;
    }
    if (layers > 0 && flags.use_con) {
        Var mean = fwd.p[0];
        for (int n = 1; n < layers; ++n) mean = g.add(mean, fwd.p[n]);
        mean = g.scale(mean, 1.0 / layers);
        Var acc = zero;
        for (int n = 0; n < layers; ++n) {
            acc = g.add(acc, g.sum(g.abs(g.sub(fwd.p[n], mean))));
        }
        out.con = g.scale(acc, 1.0 / layers);
    }
    out.total = g.add(g.add(out.simt, out.sum), g.add(out.lat, out.con));
    return out;
}

std::string LossBreakdown::to_json() const {
    nlohmann::json j{{"update", update},
                     {"delta_train", delta_train},
                     {"l_simt", simt},
                     {"l_sum", sum},
                     {"l_lat", lat},
                     {"l_con", con},
                     {"total", total},
                     {"grad_norm", grad_norm},
                     {"frac_rows_sum_p_gt_1", frac_rows_sum_p_gt_1}};
    return j.dump();
}

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, Options opt)
    : params_(std::move(params)), opt_(opt) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

double AdamOptimizer::current_lr() const {
    int64_t step = updates_ + 1;
    if (step <= opt_.warmup) {
        return opt_.warmup_init_lr +
               (opt_.lr - opt_.warmup_init_lr) * static_cast<double>(step) / opt_.warmup;
    }
    return opt_.lr * std::sqrt(static_cast<double>(opt_.warmup) / static_cast<double>(step));
}

double AdamOptimizer::clip_gradients(double max_norm) {
    double sq = 0.0;
    for (const Parameter* p : params_) {
        for (int64_t i = 0; i < p->grad.size(); ++i) sq += p->grad[i] * p->grad[i];
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double scale = max_norm / norm;
        for (const Parameter* p : params_) {
            for (int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= scale;
        }
    }
    return norm;
}

void AdamOptimizer::step() {
    double lr = current_lr();
    ++updates_;
    double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(updates_));
    double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(updates_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter* p = params_[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (int64_t i = 0; i < p->value.size(); ++i) {
            double gr = p->grad[i];
            m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gr;
            v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gr * gr;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p->value[i] -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
        }
        p->value.round_inplace();
    }
}

void AdamOptimizer::zero_grad() {
    for (const Parameter* p : params_) p->zero_grad();
}

namespace {

struct BatchSentence {
    std::vector<TokenId> src; // with trailing eos
    std::vector<TokenId> tgt; // with trailing eos
    size_t index = 0;
};

void dump_nan_batch(const std::string& log_path, int64_t update,
                    const std::vector<BatchSentence>& batch) {
    std::string path = log_path.empty() ? "nan_batch_dump.json" : log_path + ".nanbatch.json";
    nlohmann::json sentences = nlohmann::json::array();
    for (const auto& s : batch) {
        sentences.push_back({{"index", s.index}, {"source", s.src}, {"target", s.tgt}});
    }
    nlohmann::json j{{"update", update}, {"sentences", sentences}};
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

} // namespace

TrainResult train_stage(Model& model, const ParallelCorpus& corpus, const TrainOptions& opt) {
    if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
    const ModelConfig& cfg = model.config();
    for (const SentencePair& pair : corpus.pairs) {
        for (TokenId t : pair.source) {
            if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("train: token id out of vocabulary");
        }
        for (TokenId t : pair.target) {
            if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("train: token id out of vocabulary");
        }
        if (static_cast<int>(pair.source.size()) + 1 > cfg.max_source_len ||
            static_cast<int>(pair.target.size()) + 1 > cfg.max_target_len) {
            throw std::invalid_argument("train: sentence exceeds position tables");
        }
    }

    AdamOptimizer optim(model.parameters(), opt.adam);
    optim.zero_grad();
    Pcg32 shuffle_rng(opt.shuffle_seed, 0xa02bdbf7bb3c0a7ULL);
    Pcg32 noise_rng(cfg.seed ^ 0x6a09e667f3bcc909ULL, 0x3c6ef372fe94f82bULL);
    const bool finetune = opt.stage == TrainStage::finetune;
    const auto decision_ids = cfg.decision_layer_ids();

    std::ofstream log;
    if (!opt.log_path.empty()) {
        log.open(opt.log_path);
        if (!log) throw std::runtime_error("train: cannot open log " + opt.log_path);
    }

    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);
    size_t cursor = 0;
    auto next_batch = [&]() {
        std::vector<BatchSentence> batch;
        int tokens = 0;
        while (tokens < opt.batch_tokens) {
            if (cursor == order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            const SentencePair& pair = corpus.pairs[order[cursor]];
            BatchSentence s;
            s.index = order[cursor];
            s.src = pair.source;
            s.src.push_back(kEos);
            s.tgt = pair.target;
            s.tgt.push_back(kEos);
            tokens += static_cast<int>(s.src.size() + s.tgt.size());
            batch.push_back(std::move(s));
            ++cursor;
        }
        return batch;
    };

    std::map<std::pair<int, int>, Tensor> cost_cache;
    auto cost_for = [&](int I, int J) -> const Tensor& {
        auto key = std::make_pair(I, J);
        auto it = cost_cache.find(key);
        if (it == cost_cache.end()) {
            it = cost_cache.emplace(key, cost_matrix(I, J, cfg.epsilon)).first;
        }
        return it->second;
    };

    LossFlags flags;
    flags.use_sum = finetune && opt.use_sum;
    flags.use_lat = finetune && opt.use_lat;
    flags.use_con = finetune && opt.use_con;
    flags.sum_beta_grad = opt.beta_source == BetaSource::symmetric;
    flags.label_smoothing = opt.label_smoothing;

    // Frozen stage-start model provides the masked self-attention source-mass
    // targets; they depend only on the sentence, so cache per corpus index.
    std::unique_ptr<Model> reference;
    std::vector<std::vector<std::vector<double>>> beta_cache;
    std::vector<char> beta_cached;
    if (finetune && flags.use_sum && opt.beta_source == BetaSource::reference) {
        reference = std::make_unique<Model>(model);
        beta_cache.resize(corpus.size());
        beta_cached.assign(corpus.size(), 0);
    }
    auto reference_beta = [&](const BatchSentence& s) -> const std::vector<std::vector<double>>* {
        if (!reference) return nullptr;
        if (!beta_cached[s.index]) {
            Graph ref_graph(false, cfg.precision);
            ForwardOutput ref = reference->forward(ref_graph, s.src, s.tgt, AttentionMode::causal);
            beta_cache[s.index] = source_mass_targets(ref);
            beta_cached[s.index] = 1;
        }
        return &beta_cache[s.index];
    };

    TrainNoise noise{cfg.dropout, &noise_rng};
    const TrainNoise* noise_ptr = cfg.dropout > 0.0 ? &noise : nullptr;

    TrainResult result;
    for (int update = 0; update < opt.steps; ++update) {
        double delta_train =
            finetune ? curriculum_delta(update, cfg.curriculum_updates, cfg.delta_infer) : 1.0;
        std::vector<BatchSentence> batch = next_batch();
        const double inv_b = 1.0 / batch.size();

        LossBreakdown rec;
        rec.update = update;
        rec.delta_train = delta_train;
        int64_t p_rows = 0, p_rows_over = 0;

        for (const BatchSentence& s : batch) {
            Graph g(true, cfg.precision);
            LossVars losses;
            if (finetune) {
                std::vector<int> bounds;
                {
                    Graph pre(false, cfg.precision);
                    ForwardOutput fwd0 =
                        model.forward(pre, s.src, s.tgt, AttentionMode::streaming);
                    Tensor p_mean = mean_allocation(fwd0.p, decision_ids);
                    bounds = prefix_mask(p_mean, delta_train);
                }
                ForwardOutput fwd =
                    model.forward(g, s.src, s.tgt, AttentionMode::streaming, &bounds, noise_ptr);
                losses = build_losses(g, fwd, s.tgt, cost_for(fwd.target_rows, fwd.source_len),
                                      flags, reference_beta(s));
                for (const Var& p : fwd.p) {
                    const Tensor& pv = p.value();
                    for (int i = 0; i < pv.rows(); ++i) {
                        double rs = 0.0;
                        for (int j = 0; j < pv.cols(); ++j) rs += pv.at(i, j);
                        ++p_rows;
                        if (rs > 1.0) ++p_rows_over;
                    }
                }
            } else {
                ForwardOutput fwd =
                    model.forward(g, s.src, s.tgt, AttentionMode::causal, nullptr, noise_ptr);
                losses = build_losses(g, fwd, s.tgt, Tensor::matrix(1, 1), flags);
            }
            rec.simt += losses.simt.value()[0] * inv_b;
            rec.sum += losses.sum.value()[0] * inv_b;
            rec.lat += losses.lat.value()[0] * inv_b;
            rec.con += losses.con.value()[0] * inv_b;
            g.backward(losses.total, inv_b);
        }
        rec.total = rec.simt + rec.sum + rec.lat + rec.con;
        rec.frac_rows_sum_p_gt_1 =
            p_rows > 0 ? static_cast<double>(p_rows_over) / static_cast<double>(p_rows) : 0.0;

        if (!std::isfinite(rec.total)) {
            dump_nan_batch(opt.log_path, update, batch);
            throw std::runtime_error("train: non-finite loss at update " + std::to_string(update));
        }

        rec.grad_norm = optim.clip_gradients(opt.clip_norm);
        optim.step();
        optim.zero_grad();

        for (const Parameter* p : model.parameters()) {
            if (!p->value.all_finite()) {
                dump_nan_batch(opt.log_path, update, batch);
                throw std::runtime_error("train: non-finite parameter after update " +
                                         std::to_string(update));
            }
        }

        if (log.is_open()) log << rec.to_json() << "\n";
        if (opt.on_step) opt.on_step(rec);
        result.last = rec;
    }
    result.updates = optim.updates();
    if (log.is_open()) log.flush();
    return result;
}

} // namespace simt
