// Corpus and vocabulary handling plus the synthetic tasks used for training
// and evaluation. Synthetic pairs carry exact source-target alignments.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "simt/model.hpp"

namespace simt {

class Vocab {
public:
    // ids 0..3 are <pad>, <bos>, <eos>, <unk>
    Vocab();
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    int add(const std::string& token);
    int id(const std::string& token) const; // unk fallback
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(tokens_.size()); }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// 1-based (source j, target i) pairs, set semantics.
struct AlignmentSet {
    std::vector<std::pair<int, int>> pairs;

    bool aligned_target(int i) const {
        for (const auto& [j, t] : pairs) {
            if (t == i) return true;
        }
        return false;
    }
};

struct SentencePair {
    std::vector<TokenId> source;
    std::vector<TokenId> target;
    AlignmentSet alignment;
};

struct ParallelCorpus {
    std::vector<SentencePair> pairs;

    bool empty() const { return pairs.empty(); }
    size_t size() const { return pairs.size(); }
};

enum class TaskKind { copy, delayed_copy, local_reorder };

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    int shift = 3;        // delayed_copy: target i aligns to source i+shift
    int block = 2;        // local_reorder: width of swapped blocks
    int vocab_tokens = 20;
    int min_len = 5;
    int max_len = 15;
};

TaskKind task_kind_from_string(const std::string& s);
std::string task_kind_to_string(TaskKind k);

// Vocabulary for a task: reserved ids then t1..tN.
Vocab task_vocab(int vocab_tokens);

// Deterministic corpus with alignments (seeded).
ParallelCorpus generate_task(const TaskSpec& spec, int count, uint64_t seed);

// Parallel text files: one whitespace-tokenized sentence per line. Alignment
// file (optional) is JSON lines, one [[j, i], ...] array per sentence.
void save_corpus(const ParallelCorpus& corpus, const Vocab& vocab, const std::string& src_path,
                 const std::string& tgt_path, const std::string& align_path = "");
ParallelCorpus load_corpus(const Vocab& vocab, const std::string& src_path,
                           const std::string& tgt_path, const std::string& align_path = "");

// key=value config files; '#' starts a comment.
std::map<std::string, std::string> load_config_file(const std::string& path);

} // namespace simt
