#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "simt/data.hpp"
#include "simt/eval.hpp"
#include "simt/metrics.hpp"
#include "simt/model.hpp"
#include "simt/rng.hpp"

using namespace simt;

TEST_CASE("average lagging hand values") {
    // wait-1 diagonal on J = I = 5
    CHECK(average_lagging({1, 2, 3, 4, 5}, 5, 5) == doctest::Approx(1.0));
    // full-sentence trace: tau = 1, AL = J
    CHECK(average_lagging({5, 5, 5, 5, 5}, 5, 5) == doctest::Approx(5.0));
    // the diagonal gives AL = 1 at any length
    for (int n : {2, 7, 23}) {
        std::vector<int> g(n);
        for (int i = 0; i < n; ++i) g[i] = i + 1;
        CHECK(average_lagging(g, n, n) == doctest::Approx(1.0));
    }
    // trace that never reaches J: tau capped at I
    CHECK(average_lagging({1, 2}, 9, 2) == doctest::Approx((1.0 + (2.0 - 4.5)) / 2.0));
    // empty translation reports full lag
    CHECK(average_lagging({}, 6, 0) == doctest::Approx(6.0));
    CHECK_THROWS_AS(average_lagging({1}, 3, 2), std::invalid_argument);
}

TEST_CASE("corpus bleu identity, disjoint and fixture values") {
    std::vector<std::vector<TokenId>> refs{{4, 5, 6, 7, 9}, {10, 11, 12, 13},
                                           {15, 14, 16, 17, 18, 19}};
    CHECK(corpus_bleu(refs, refs) == doctest::Approx(100.0));

    std::vector<std::vector<TokenId>> disjoint{{20, 21, 22, 23}, {24, 25, 26, 27},
                                               {28, 29, 30, 31, 32, 33}};
    CHECK(corpus_bleu(disjoint, refs) == doctest::Approx(0.0));

    // frozen from an independent reference implementation of corpus BLEU-4
    // (uniform weights, no smoothing, brevity penalty 1 here): order counts
    // 14/15, 9/12, 6/9, 3/6 -> 69.50150297221262
    std::vector<std::vector<TokenId>> hyps{{4, 5, 6, 7, 8}, {10, 11, 12, 13},
                                           {14, 15, 16, 17, 18, 19}};
    CHECK(corpus_bleu(hyps, refs) == doctest::Approx(69.50150297221262).epsilon(1e-9));
    CHECK(std::fabs(corpus_bleu(hyps, refs) - 69.5015) < 0.1);

    CHECK_THROWS_AS(corpus_bleu({}, {}), std::invalid_argument);
}

TEST_CASE("bleu identity holds for corpora shorter than the max order") {
    std::vector<std::vector<TokenId>> tiny{{4, 5}, {6}};
    CHECK(corpus_bleu(tiny, tiny) == doctest::Approx(100.0));
}

TEST_CASE("bleu brevity penalty shortens over-eager hypotheses") {
    std::vector<std::vector<TokenId>> refs{{4, 5, 6, 7, 8, 9}};
    std::vector<std::vector<TokenId>> hyp{{4, 5, 6, 7}};
    double expected = 100.0 * std::exp(1.0 - 6.0 / 4.0); // all precisions are 1
    CHECK(corpus_bleu(hyp, refs) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("hallucination rate") {
    AlignmentSet full;
    for (int i = 1; i <= 5; ++i) full.pairs.emplace_back(i, i);
    std::vector<TokenId> hyp{4, 5, 6, 7, 8};
    CHECK(hallucination_rate(hyp, full) == doctest::Approx(0.0));

    AlignmentSet missing_one = full;
    missing_one.pairs.erase(missing_one.pairs.begin() + 2); // position 3 unaligned
    CHECK(hallucination_rate(hyp, missing_one) == doctest::Approx(0.2));

    CHECK(hallucination_rate(hyp, AlignmentSet{}) == doctest::Approx(1.0));

    // set semantics: order of pairs is irrelevant
    AlignmentSet shuffled;
    shuffled.pairs = {{3, 3}, {1, 1}, {5, 5}, {2, 2}, {4, 4}};
    CHECK(hallucination_rate(hyp, shuffled) == doctest::Approx(0.0));
}

TEST_CASE("task generation: copy") {
    TaskSpec spec;
    spec.kind = TaskKind::copy;
    spec.min_len = 5;
    spec.max_len = 5;
    ParallelCorpus c = generate_task(spec, 3, 9);
    for (const SentencePair& pair : c.pairs) {
        CHECK(pair.target == pair.source);
        REQUIRE(pair.alignment.pairs.size() == 5);
        for (int i = 1; i <= 5; ++i) {
            CHECK(pair.alignment.pairs[i - 1] == std::make_pair(i, i));
        }
    }
}

TEST_CASE("task generation: delayed copy forces the stated alignment") {
    TaskSpec spec;
    spec.kind = TaskKind::delayed_copy;
    spec.shift = 2;
    spec.min_len = 5;
    spec.max_len = 5;
    ParallelCorpus c = generate_task(spec, 4, 21);
    for (const SentencePair& pair : c.pairs) {
        REQUIRE(pair.target.size() == 3); // 5 - 2
        // target token 1 aligns to source token 3
        CHECK(pair.alignment.pairs[0] == std::make_pair(3, 1));
        for (size_t i = 0; i < pair.target.size(); ++i) {
            CHECK(pair.target[i] == pair.source[i + 2]);
        }
    }
    spec.shift = 5;
    CHECK_THROWS_AS(generate_task(spec, 1, 1), std::invalid_argument);
}

TEST_CASE("task generation: local reorder swaps adjacent blocks") {
    TaskSpec spec;
    spec.kind = TaskKind::local_reorder;
    spec.block = 2;
    spec.min_len = 5;
    spec.max_len = 5;
    ParallelCorpus c = generate_task(spec, 2, 33);
    for (const SentencePair& pair : c.pairs) {
        REQUIRE(pair.target.size() == 5);
        CHECK(pair.target[0] == pair.source[2]);
        CHECK(pair.target[1] == pair.source[3]);
        CHECK(pair.target[2] == pair.source[0]);
        CHECK(pair.target[3] == pair.source[1]);
        CHECK(pair.target[4] == pair.source[4]);
    }
}

TEST_CASE("task generation is deterministic and covers every target position") {
    for (TaskKind kind : {TaskKind::copy, TaskKind::delayed_copy, TaskKind::local_reorder}) {
        TaskSpec spec;
        spec.kind = kind;
        ParallelCorpus a = generate_task(spec, 20, 77);
        ParallelCorpus b = generate_task(spec, 20, 77);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a.pairs[i].source == b.pairs[i].source);
            CHECK(a.pairs[i].target == b.pairs[i].target);
            CHECK(a.pairs[i].alignment.pairs == b.pairs[i].alignment.pairs);
            // alignment covers each target position exactly once
            std::vector<int> covered(a.pairs[i].target.size(), 0);
            for (const auto& [j, t] : a.pairs[i].alignment.pairs) {
                REQUIRE(t >= 1);
                REQUIRE(t <= static_cast<int>(covered.size()));
                REQUIRE(j >= 1);
                REQUIRE(j <= static_cast<int>(a.pairs[i].source.size()));
                covered[t - 1] += 1;
            }
            for (int cnt : covered) CHECK(cnt == 1);
        }
        // lengths stay within the configured range
        for (const SentencePair& pair : a.pairs) {
            CHECK(pair.source.size() >= 5);
            CHECK(pair.source.size() <= 15);
        }
    }
}

TEST_CASE("vocab and corpus files round trip") {
    Vocab vocab = task_vocab(6);
    CHECK(vocab.size() == 10);
    CHECK(vocab.token(kEos) == "<eos>");
    CHECK(vocab.id("t3") == kReservedTokens + 2);
    CHECK(vocab.id("nonsense") == kUnk);

    TaskSpec spec;
    spec.vocab_tokens = 6;
    spec.min_len = 3;
    spec.max_len = 6;
    ParallelCorpus corpus = generate_task(spec, 12, 5);

    vocab.save("test_vocab.txt");
    save_corpus(corpus, vocab, "test_c.src", "test_c.tgt", "test_c.align.jsonl");
    Vocab loaded_vocab = Vocab::load("test_vocab.txt");
    CHECK(loaded_vocab.size() == vocab.size());
    ParallelCorpus loaded =
        load_corpus(loaded_vocab, "test_c.src", "test_c.tgt", "test_c.align.jsonl");
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded.pairs[i].source == corpus.pairs[i].source);
        CHECK(loaded.pairs[i].target == corpus.pairs[i].target);
        CHECK(loaded.pairs[i].alignment.pairs == corpus.pairs[i].alignment.pairs);
    }
    for (const char* f : {"test_vocab.txt", "test_c.src", "test_c.tgt", "test_c.align.jsonl"}) {
        std::remove(f);
    }
}

TEST_CASE("config files parse key=value lines") {
    {
        std::ofstream os("test_cfg.txt");
        os << "# comment\n";
        os << "model_dim = 32\n";
        os << "lr=5e-4\n";
        os << "\n";
        os << "allocation = max # trailing comment\n";
    }
    auto cfg = load_config_file("test_cfg.txt");
    CHECK(cfg.at("model_dim") == "32");
    CHECK(cfg.at("lr") == "5e-4");
    CHECK(cfg.at("allocation") == "max");
    std::remove("test_cfg.txt");
}

TEST_CASE("hypothesis alignment grounds only matching tokens") {
    SentencePair pair;
    pair.source = {4, 5, 6};
    pair.target = {4, 5, 6};
    pair.alignment.pairs = {{1, 1}, {2, 2}, {3, 3}};

    // perfect hypothesis: fully grounded
    AlignmentSet a = hypothesis_alignment(pair, {4, 5, 6});
    CHECK(hallucination_rate({4, 5, 6}, a) == doctest::Approx(0.0));

    // one wrong token: one third hallucinated
    AlignmentSet b = hypothesis_alignment(pair, {4, 9, 6});
    CHECK(hallucination_rate({4, 9, 6}, b) == doctest::Approx(1.0 / 3));

    // tokens past the reference length are ungrounded
    AlignmentSet c = hypothesis_alignment(pair, {4, 5, 6, 6, 6});
    CHECK(hallucination_rate({4, 5, 6, 6, 6}, c) == doctest::Approx(0.4));
}

TEST_CASE("evaluation smoke run: finite metrics and determinism") {
    ModelConfig cfg;
    cfg.vocab_size = 10;
    cfg.model_dim = 8;
    cfg.ffn_dim = 16;
    cfg.layers = 2;
    cfg.decision_layers = 1;
    cfg.max_source_len = 16;
    cfg.max_target_len = 16;
    cfg.seed = 3;
    Model model(cfg);

    TaskSpec spec;
    spec.vocab_tokens = 6;
    spec.min_len = 3;
    spec.max_len = 6;
    ParallelCorpus corpus = generate_task(spec, 8, 13);

    EvalOptions opt;
    opt.max_len = 12;
    EvalReport r1 = evaluate_at(model, corpus, 0.5, opt);
    EvalReport r2 = evaluate_at(model, corpus, 0.5, opt);
    CHECK(std::isfinite(r1.al));
    CHECK(r1.bleu >= 0.0);
    CHECK(r1.bleu <= 100.0);
    CHECK(r1.hr >= 0.0);
    CHECK(r1.hr <= 1.0);
    CHECK(r1.al == r2.al);
    CHECK(r1.bleu == r2.bleu);
    CHECK(r1.hr == r2.hr);
    REQUIRE(r1.sentences.size() == corpus.size());

    // the report serializes with the documented field names
    std::string json = report_to_json(r1);
    for (const char* key : {"delta_infer", "AL", "BLEU", "HR", "sentences", "\"g\"", "hyp"}) {
        CHECK(json.find(key) != std::string::npos);
    }

    // threaded evaluation produces identical numbers
    EvalOptions threaded = opt;
    threaded.threads = 3;
    EvalReport r3 = evaluate_at(model, corpus, 0.5, threaded);
    CHECK(r3.al == r1.al);
    CHECK(r3.bleu == r1.bleu);

    // vocabulary mismatch is rejected
    ParallelCorpus bad = corpus;
    bad.pairs[0].source[0] = 998;
    CHECK_THROWS_AS(evaluate_at(model, bad, 0.5, opt), std::invalid_argument);
}
