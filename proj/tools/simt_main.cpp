// Command-line entry points: data generation, two-stage training, batch and
// live streaming translation, evaluation, gradient checking, attention dumps.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "simt/data.hpp"
#include "simt/eval.hpp"
#include "simt/gradcheck.hpp"
#include "simt/metrics.hpp"
#include "simt/model.hpp"
#include "simt/streaming.hpp"
#include "simt/training.hpp"

namespace fs = std::filesystem;
using namespace simt;

namespace {

// Values from --config files back-fill options the user did not pass.
template <typename T>
void config_fill(const CLI::App* app, const std::map<std::string, std::string>& cfg,
                 const std::string& flag, const std::string& key, T& var) {
    const CLI::Option* opt = app->get_option_no_throw(flag);
    if (opt != nullptr && opt->count() > 0) return;
    auto it = cfg.find(key);
    if (it == cfg.end()) return;
    std::istringstream is(it->second);
    is >> var;
    if (is.fail()) throw CLI::ValidationError("config", "bad value for " + key + ": " + it->second);
}

struct ModelFlags {
    int dim = 64, ffn = 128, layers = 4, heads = 1, decision_layers = 2;
    int max_src = 64, max_tgt = 64;
    double epsilon = 1.0, curriculum_t = 500.0, delta_infer = 0.5, dropout = 0.0;
    std::string allocation = "expected";
    uint64_t seed = 1;

    void add_options(CLI::App* app) {
        app->add_option("--dim", dim, "model width");
        app->add_option("--ffn", ffn, "feed-forward width");
        app->add_option("--layers", layers, "decoder layers");
        app->add_option("--heads", heads, "attention heads");
        app->add_option("--decision-layers", decision_layers, "top layers voting on WRITE");
        app->add_option("--epsilon", epsilon, "latency-constraint tolerance");
        app->add_option("--curriculum-t", curriculum_t, "curriculum time constant T");
        app->add_option("--delta-infer", delta_infer, "decision threshold");
        app->add_option("--max-src", max_src, "source position table size");
        app->add_option("--max-tgt", max_tgt, "target position table size");
        app->add_option("--dropout", dropout, "global dropout rate");
        app->add_option("--allocation", allocation, "expected|max")
            ->check(CLI::IsMember({"expected", "max"}));
        app->add_option("--seed", seed, "init / data seed");
    }

    void config_fill_all(const CLI::App* app, const std::map<std::string, std::string>& cfg) {
        config_fill(app, cfg, "--dim", "model_dim", dim);
        config_fill(app, cfg, "--ffn", "ffn_dim", ffn);
        config_fill(app, cfg, "--layers", "layers", layers);
        config_fill(app, cfg, "--heads", "heads", heads);
        config_fill(app, cfg, "--decision-layers", "decision_layers", decision_layers);
        config_fill(app, cfg, "--epsilon", "epsilon", epsilon);
        config_fill(app, cfg, "--curriculum-t", "curriculum_updates", curriculum_t);
        config_fill(app, cfg, "--delta-infer", "delta_infer", delta_infer);
        config_fill(app, cfg, "--max-src", "max_source_len", max_src);
        config_fill(app, cfg, "--max-tgt", "max_target_len", max_tgt);
        config_fill(app, cfg, "--dropout", "dropout", dropout);
        config_fill(app, cfg, "--allocation", "allocation", allocation);
        config_fill(app, cfg, "--seed", "seed", seed);
    }

    ModelConfig to_config(int vocab_size) const {
        ModelConfig c;
        c.vocab_size = vocab_size;
        c.model_dim = dim;
        c.ffn_dim = ffn;
        c.layers = layers;
        c.heads = heads;
        c.decision_layers = decision_layers;
        c.epsilon = epsilon;
        c.curriculum_updates = curriculum_t;
        c.delta_infer = delta_infer;
        c.max_source_len = max_src;
        c.max_target_len = max_tgt;
        c.dropout = dropout;
        c.allocation = allocation == "max" ? Allocation::max : Allocation::expected;
        c.seed = seed;
        return c;
    }
};

struct TrainFlags {
    int steps = 2000, batch_tokens = 320, warmup = 100;
    double lr = 5e-4, clip = 1.0, label_smoothing = 0.1;
    uint64_t shuffle_seed = 7;
    std::string log_path;
    bool no_sum = false, no_lat = false, no_con = false;
    std::string beta_source = "reference";

    void add_options(CLI::App* app, bool finetune) {
        app->add_option("--steps", steps, "optimizer updates");
        app->add_option("--batch-tokens", batch_tokens, "tokens per update");
        app->add_option("--warmup", warmup, "warmup updates");
        app->add_option("--lr", lr, "peak learning rate");
        app->add_option("--clip", clip, "gradient clip norm (0 disables)");
        app->add_option("--label-smoothing", label_smoothing, "label smoothing");
        app->add_option("--shuffle-seed", shuffle_seed, "batch shuffle seed");
        app->add_option("--log", log_path, "JSONL training log path");
        if (finetune) {
            app->add_flag("--no-sum", no_sum, "drop the summation constraint");
            app->add_flag("--no-lat", no_lat, "drop the latency constraint");
            app->add_flag("--no-con", no_con, "drop the consistency constraint");
            app->add_option("--beta-source", beta_source,
                            "summation-constraint target: reference|current|symmetric")
                ->check(CLI::IsMember({"reference", "current", "symmetric"}));
        }
    }

    void config_fill_all(const CLI::App* app, const std::map<std::string, std::string>& cfg) {
        config_fill(app, cfg, "--steps", "steps", steps);
        config_fill(app, cfg, "--batch-tokens", "batch_tokens", batch_tokens);
        config_fill(app, cfg, "--warmup", "warmup", warmup);
        config_fill(app, cfg, "--lr", "lr", lr);
        config_fill(app, cfg, "--clip", "clip_norm", clip);
        config_fill(app, cfg, "--label-smoothing", "label_smoothing", label_smoothing);
        config_fill(app, cfg, "--shuffle-seed", "shuffle_seed", shuffle_seed);
    }

    TrainOptions to_options(TrainStage stage) const {
        TrainOptions o;
        o.stage = stage;
        o.steps = steps;
        o.batch_tokens = batch_tokens;
        o.clip_norm = clip;
        o.label_smoothing = label_smoothing;
        o.use_sum = !no_sum;
        o.use_lat = !no_lat;
        o.use_con = !no_con;
        o.beta_source = beta_source == "current"
                            ? BetaSource::current
                            : (beta_source == "symmetric" ? BetaSource::symmetric
                                                          : BetaSource::reference);
        o.shuffle_seed = shuffle_seed;
        o.log_path = log_path;
        o.adam.lr = lr;
        o.adam.warmup = warmup;
        return o;
    }
};

ParallelCorpus load_split(const Vocab& vocab, const std::string& dir, const std::string& split) {
    std::string align = dir + "/" + split + ".align.jsonl";
    if (!fs::exists(align)) align.clear();
    return load_corpus(vocab, dir + "/" + split + ".src", dir + "/" + split + ".tgt", align);
}

std::vector<TokenId> parse_tokens(const Vocab& vocab, const std::string& line) {
    std::istringstream is(line);
    std::vector<TokenId> ids;
    std::string tok;
    while (is >> tok) ids.push_back(vocab.id(tok));
    return ids;
}

std::string detok(const Vocab& vocab, const std::vector<TokenId>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += " ";
        out += vocab.token(ids[i]);
    }
    return out;
}

int progress_interval(int steps) { return std::max(1, steps / 20); }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"streaming simultaneous translation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "key=value defaults file")->expected(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
    std::string gen_task = "copy", gen_out = "data";
    int gen_vocab = 20, gen_min = 5, gen_max = 15, gen_train = 2000, gen_test = 200;
    int gen_shift = 3, gen_block = 2;
    uint64_t gen_seed = 1;
    gen->add_option("--task", gen_task, "copy|delayed_copy|local_reorder");
    gen->add_option("--vocab", gen_vocab, "task vocabulary size");
    gen->add_option("--min-len", gen_min);
    gen->add_option("--max-len", gen_max);
    gen->add_option("--train", gen_train, "training pairs");
    gen->add_option("--test", gen_test, "held-out pairs");
    gen->add_option("--shift", gen_shift, "delayed_copy shift k");
    gen->add_option("--block", gen_block, "local_reorder block width");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out, "output directory")->required();

    // ---- pretrain ----
    auto* pre = app.add_subcommand("pretrain", "train the causal language model stage");
    std::string pre_data, pre_out = "pretrain.ckpt";
    ModelFlags pre_model;
    TrainFlags pre_train;
    pre->add_option("--data", pre_data, "corpus directory (gen-data layout)")->required();
    pre->add_option("--out", pre_out, "checkpoint path");
    pre_model.add_options(pre);
    pre_train.add_options(pre, false);

    // ---- finetune ----
    auto* fin = app.add_subcommand("finetune", "streaming-attention finetuning stage");
    std::string fin_data, fin_init, fin_out = "model.ckpt";
    // overrides of the checkpoint's stored config
    std::string fin_allocation, fin_delta, fin_t, fin_eps, fin_dropout;
    TrainFlags fin_train;
    fin->add_option("--data", fin_data, "corpus directory")->required();
    fin->add_option("--init", fin_init, "pretrained checkpoint")->required();
    fin->add_option("--out", fin_out, "checkpoint path");
    fin->add_option("--allocation", fin_allocation, "override: expected|max");
    fin->add_option("--delta-infer", fin_delta, "override decision threshold");
    fin->add_option("--curriculum-t", fin_t, "override curriculum T");
    fin->add_option("--epsilon", fin_eps, "override latency tolerance");
    fin->add_option("--dropout", fin_dropout, "override dropout rate");
    fin_train.add_options(fin, true);

    // ---- translate ----
    auto* tr = app.add_subcommand("translate", "batch-translate a source file");
    std::string tr_ckpt, tr_src, tr_vocab, tr_out = "-", tr_trace;
    double tr_delta = 0.5;
    int tr_max_len = 0;
    tr->add_option("--ckpt", tr_ckpt)->required();
    tr->add_option("--src", tr_src)->required();
    tr->add_option("--vocab", tr_vocab)->required();
    tr->add_option("--delta", tr_delta, "decision threshold");
    tr->add_option("--out", tr_out, "hypothesis file or - for stdout");
    tr->add_option("--trace", tr_trace, "JSONL per-sentence traces");
    tr->add_option("--max-len", tr_max_len, "0 = model limit");

    // ---- stream ----
    auto* st = app.add_subcommand("stream", "live decode: tokens on stdin, output on stdout");
    std::string st_ckpt, st_vocab, st_log;
    double st_delta = 0.5;
    st->add_option("--ckpt", st_ckpt)->required();
    st->add_option("--vocab", st_vocab)->required();
    st->add_option("--delta", st_delta);
    st->add_option("--log", st_log, "JSONL per-step decision log");

    // ---- evaluate ----
    auto* ev = app.add_subcommand("evaluate", "latency/quality report over a corpus");
    std::string ev_ckpt, ev_data, ev_split = "test", ev_out = "-", ev_svg;
    std::vector<double> ev_deltas{0.5};
    int ev_threads = 1;
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "corpus directory")->required();
    ev->add_option("--split", ev_split);
    ev->add_option("--deltas", ev_deltas, "thresholds to sweep")->delimiter(',');
    ev->add_option("--out", ev_out, "report JSON path or -");
    ev->add_option("--svg", ev_svg, "BLEU-vs-AL plot path");
    ev->add_option("--threads", ev_threads);

    // ---- grad-check ----
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full objective");
    int gc_layers = 2, gc_dim = 8, gc_len = 4;
    double gc_eps = 1e-5;
    uint64_t gc_seed = 11;
    gc->add_option("--layers", gc_layers);
    gc->add_option("--dim", gc_dim);
    gc->add_option("--len", gc_len, "source/target length");
    gc->add_option("--eps", gc_eps);
    gc->add_option("--seed", gc_seed);

    // ---- dump-attention ----
    auto* da = app.add_subcommand("dump-attention", "JSONL dump of p / alpha matrices");
    std::string da_ckpt, da_vocab, da_src, da_tgt, da_out = "-";
    da->add_option("--ckpt", da_ckpt)->required();
    da->add_option("--vocab", da_vocab)->required();
    da->add_option("--src", da_src, "whitespace-tokenized source")->required();
    da->add_option("--tgt", da_tgt, "whitespace-tokenized target")->required();
    da->add_option("--out", da_out);

    CLI11_PARSE(app, argc, argv);

    try {
        std::map<std::string, std::string> cfg;
        if (!config_path.empty()) cfg = load_config_file(config_path);

        if (*gen) {
            config_fill(gen, cfg, "--task", "task", gen_task);
            config_fill(gen, cfg, "--vocab", "vocab", gen_vocab);
            config_fill(gen, cfg, "--seed", "seed", gen_seed);
            TaskSpec spec;
            spec.kind = task_kind_from_string(gen_task);
            spec.vocab_tokens = gen_vocab;
            spec.min_len = gen_min;
            spec.max_len = gen_max;
            spec.shift = gen_shift;
            spec.block = gen_block;
            fs::create_directories(gen_out);
            Vocab vocab = task_vocab(gen_vocab);
            vocab.save(gen_out + "/vocab.txt");
            ParallelCorpus train = generate_task(spec, gen_train, gen_seed);
            ParallelCorpus test = generate_task(spec, gen_test, gen_seed + 1);
            save_corpus(train, vocab, gen_out + "/train.src", gen_out + "/train.tgt",
                        gen_out + "/train.align.jsonl");
            save_corpus(test, vocab, gen_out + "/test.src", gen_out + "/test.tgt",
                        gen_out + "/test.align.jsonl");
            std::cout << "wrote " << train.size() << " train / " << test.size() << " test pairs to "
                      << gen_out << "\n";
        } else if (*pre) {
            pre_model.config_fill_all(pre, cfg);
            pre_train.config_fill_all(pre, cfg);
            Vocab vocab = Vocab::load(pre_data + "/vocab.txt");
            ParallelCorpus corpus = load_split(vocab, pre_data, "train");
            Model model(pre_model.to_config(vocab.size()));
            TrainOptions opt = pre_train.to_options(TrainStage::pretrain);
            int interval = progress_interval(opt.steps);
            opt.on_step = [&](const LossBreakdown& rec) {
                if (rec.update % interval == 0 || rec.update + 1 == opt.steps) {
                    std::cout << "update " << rec.update << " loss " << rec.total << "\n";
                }
            };
            TrainResult res = train_stage(model, corpus, opt);
            save_checkpoint(pre_out, model, {"pretrain", res.updates});
            std::cout << "saved " << pre_out << " after " << res.updates << " updates\n";
        } else if (*fin) {
            fin_train.config_fill_all(fin, cfg);
            Vocab vocab = Vocab::load(fin_data + "/vocab.txt");
            ParallelCorpus corpus = load_split(vocab, fin_data, "train");
            CheckpointMeta meta;
            Model model = load_checkpoint(fin_init, &meta);
            ModelConfig mc = model.config();
            bool config_changed = false;
            if (!fin_allocation.empty()) {
                mc.allocation = fin_allocation == "max" ? Allocation::max : Allocation::expected;
                config_changed = true;
            }
            if (!fin_delta.empty()) {
                mc.delta_infer = std::stod(fin_delta);
                config_changed = true;
            }
            if (!fin_t.empty()) {
                mc.curriculum_updates = std::stod(fin_t);
                config_changed = true;
            }
            if (!fin_eps.empty()) {
                mc.epsilon = std::stod(fin_eps);
                config_changed = true;
            }
            if (!fin_dropout.empty()) {
                mc.dropout = std::stod(fin_dropout);
                config_changed = true;
            }
            if (config_changed) {
                Model updated(mc);
                for (Parameter* p : updated.parameters()) {
                    p->value = model.param(p->name).value;
                }
                model = std::move(updated);
            }
            TrainOptions opt = fin_train.to_options(TrainStage::finetune);
            int interval = progress_interval(opt.steps);
            opt.on_step = [&](const LossBreakdown& rec) {
                if (rec.update % interval == 0 || rec.update + 1 == opt.steps) {
                    std::cout << "update " << rec.update << " delta_train " << rec.delta_train
                              << " total " << rec.total << "\n";
                }
            };
            TrainResult res = train_stage(model, corpus, opt);
            save_checkpoint(fin_out, model, {"finetune", res.updates});
            std::cout << "saved " << fin_out << " after " << res.updates << " updates\n";
        } else if (*tr) {
            Vocab vocab = Vocab::load(tr_vocab);
            Model model = load_checkpoint(tr_ckpt);
            int max_len = tr_max_len > 0 ? tr_max_len : model.config().max_target_len - 1;
            std::ifstream src(tr_src);
            if (!src) throw std::runtime_error("cannot open " + tr_src);
            std::ofstream out_file;
            std::ostream* out = &std::cout;
            if (tr_out != "-") {
                out_file.open(tr_out);
                if (!out_file) throw std::runtime_error("cannot open " + tr_out);
                out = &out_file;
            }
            std::ofstream trace;
            if (!tr_trace.empty()) trace.open(tr_trace);
            std::string line;
            while (std::getline(src, line)) {
                std::vector<TokenId> ids = parse_tokens(vocab, line);
                TranslateResult res = translate_stream(model, ids, tr_delta, max_len);
                *out << detok(vocab, res.tokens) << "\n";
                if (trace.is_open()) {
                    nlohmann::json j{{"g", res.trace.g},
                                     {"hyp", res.tokens},
                                     {"J", ids.size()},
                                     {"I", res.tokens.size()},
                                     {"truncated", res.truncated}};
                    trace << j.dump() << "\n";
                }
            }
        } else if (*st) {
            Vocab vocab = Vocab::load(st_vocab);
            Model model = load_checkpoint(st_ckpt);
            std::ofstream log;
            if (!st_log.empty()) log.open(st_log);
            SourceFeed feed = []() -> std::optional<TokenId> { return std::nullopt; };
            Vocab* vp = &vocab;
            feed = [vp]() -> std::optional<TokenId> {
                std::string tok;
                if (!(std::cin >> tok)) return std::nullopt;
                return vp->id(tok);
            };
            StreamHooks hooks;
            hooks.on_write = [&](TokenId t) {
                std::cout << vocab.token(t) << " " << std::flush;
            };
            hooks.on_event = [&](const StreamDecision& ev) {
                if (!log.is_open()) return;
                nlohmann::json j{{"action", ev.action},
                                 {"m", ev.source_read},
                                 {"token", vocab.token(ev.token)},
                                 {"cums", ev.cums}};
                log << j.dump() << "\n";
            };
            ModelBackend backend(model);
            TranslateResult res = run_policy(backend, feed, st_delta,
                                             model.config().max_target_len - 1, false, &hooks);
            std::cout << "\n";
            if (log.is_open()) {
                nlohmann::json j{{"g", res.trace.g}, {"truncated", res.truncated}};
                log << j.dump() << "\n";
            }
        } else if (*ev) {
            Vocab vocab = Vocab::load(ev_data + "/vocab.txt");
            Model model = load_checkpoint(ev_ckpt);
            ParallelCorpus corpus = load_split(vocab, ev_data, ev_split);
            EvalOptions opt;
            opt.max_len = model.config().max_target_len - 1;
            opt.threads = ev_threads;
            std::vector<EvalReport> reports = evaluate(model, corpus, ev_deltas, opt);
            std::string json = reports_to_json(reports);
            if (ev_out == "-") {
                std::cout << json << "\n";
            } else {
                std::ofstream os(ev_out);
                if (!os) throw std::runtime_error("cannot open " + ev_out);
                os << json << "\n";
            }
            for (const EvalReport& r : reports) {
                std::cerr << "delta " << r.delta_infer << " AL " << r.al << " BLEU " << r.bleu
                          << " HR " << r.hr << "\n";
            }
            if (!ev_svg.empty()) write_tradeoff_svg(ev_svg, reports);
        } else if (*gc) {
            ModelConfig mc;
            mc.vocab_size = 12;
            mc.model_dim = gc_dim;
            mc.ffn_dim = gc_dim * 2;
            mc.layers = gc_layers;
            mc.heads = 1;
            mc.decision_layers = std::max(1, gc_layers / 2);
            mc.max_source_len = 16;
            mc.max_target_len = 16;
            mc.seed = gc_seed;
            Model model(mc);
            Pcg32 rng(gc_seed, 77);
            std::vector<TokenId> src(gc_len), tgt(gc_len);
            for (int i = 0; i < gc_len; ++i) {
                src[i] = kReservedTokens + static_cast<int>(rng.next_below(mc.vocab_size - kReservedTokens));
                tgt[i] = kReservedTokens + static_cast<int>(rng.next_below(mc.vocab_size - kReservedTokens));
            }
            std::vector<int> bounds(gc_len);
            for (int i = 0; i < gc_len; ++i) bounds[i] = 1 + i * (gc_len - 1) / std::max(1, gc_len - 1);
            Tensor cost = cost_matrix(gc_len, gc_len, mc.epsilon);
            LossFlags flags;
            flags.label_smoothing = 0.1;
            std::vector<std::vector<double>> beta;
            {
                Graph g(true);
                ForwardOutput fwd = model.forward(g, src, tgt, AttentionMode::streaming, &bounds);
                beta = source_mass_targets(fwd);
            }
            auto loss = [&](bool with_grad) {
                Graph g(with_grad);
                ForwardOutput fwd = model.forward(g, src, tgt, AttentionMode::streaming, &bounds);
                LossVars l = build_losses(g, fwd, tgt, cost, flags, &beta);
                if (with_grad) g.backward(l.total);
                return l.total.value()[0];
            };
            GradCheckResult res = grad_check(model.parameters(), loss, gc_eps);
            std::cout << "max relative error " << res.max_rel_error << " (param "
                      << res.worst_param << "[" << res.worst_index << "], analytic "
                      << res.analytic << ", numeric " << res.numeric << ")\n";
            return res.max_rel_error < 1e-4 ? 0 : 1;
        } else if (*da) {
            Vocab vocab = Vocab::load(da_vocab);
            Model model = load_checkpoint(da_ckpt);
            std::vector<TokenId> src = parse_tokens(vocab, da_src);
            std::vector<TokenId> tgt = parse_tokens(vocab, da_tgt);
            src.push_back(kEos);
            tgt.push_back(kEos);
            Graph g(false);
            ForwardOutput fwd = model.forward(g, src, tgt, AttentionMode::streaming);
            std::ofstream out_file;
            std::ostream* out = &std::cout;
            if (da_out != "-") {
                out_file.open(da_out);
                out = &out_file;
            }
            auto matrix_json = [](const Tensor& t) {
                nlohmann::json rows = nlohmann::json::array();
                for (int i = 0; i < t.rows(); ++i) {
                    rows.push_back(std::vector<double>(t.row(i).begin(), t.row(i).end()));
                }
                return rows;
            };
            for (size_t n = 0; n < fwd.p.size(); ++n) {
                nlohmann::json j{{"layer", n}, {"p", matrix_json(fwd.p[n].value())}};
                *out << j.dump() << "\n";
                for (size_t h = 0; h < fwd.weights[n].size(); ++h) {
                    const Tensor& w = fwd.weights[n][h].value();
                    nlohmann::json alpha_s = nlohmann::json::array();
                    nlohmann::json alpha_t = nlohmann::json::array();
                    int J = fwd.source_len;
                    for (int i = 0; i < w.rows(); ++i) {
                        auto row = w.row(i);
                        alpha_s.push_back(std::vector<double>(row.begin(), row.begin() + J));
                        alpha_t.push_back(std::vector<double>(row.begin() + J, row.end()));
                    }
                    nlohmann::json ja{{"layer", n},
                                      {"head", h},
                                      {"alpha_s", alpha_s},
                                      {"alpha_t", alpha_t}};
                    *out << ja.dump() << "\n";
                }
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
