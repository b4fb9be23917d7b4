#include "simt/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "simt/rng.hpp"

namespace simt {

Vocab::Vocab() {
    add("<pad>");
    add("<bos>");
    add("<eos>");
    add("<unk>");
}

int Vocab::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("vocab: id out of range");
    return tokens_[id];
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("vocab: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    if (lines.size() < kReservedTokens) throw std::runtime_error("vocab: missing reserved tokens");
    Vocab v;
    for (size_t i = kReservedTokens; i < lines.size(); ++i) {
        if (lines[i].empty()) throw std::runtime_error("vocab: empty token line");
        v.add(lines[i]);
    }
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("vocab: cannot open " + path + " for writing");
    for (const std::string& t : tokens_) os << t << "\n";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "delayed_copy") return TaskKind::delayed_copy;
    if (s == "local_reorder") return TaskKind::local_reorder;
    throw std::invalid_argument("unknown task kind: " + s);
}

std::string task_kind_to_string(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::delayed_copy: return "delayed_copy";
        case TaskKind::local_reorder: return "local_reorder";
    }
    return "copy";
}

Vocab task_vocab(int vocab_tokens) {
    if (vocab_tokens < 1) throw std::invalid_argument("task vocab: need at least one token");
    Vocab v;
    for (int i = 1; i <= vocab_tokens; ++i) v.add("t" + std::to_string(i));
    return v;
}

ParallelCorpus generate_task(const TaskSpec& spec, int count, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("generate_task: count must be positive");
    if (spec.min_len < 1 || spec.max_len < spec.min_len) {
        throw std::invalid_argument("generate_task: bad length range");
    }
    if (spec.kind == TaskKind::delayed_copy && spec.min_len <= spec.shift) {
        throw std::invalid_argument("generate_task: delayed_copy needs min_len > shift");
    }
    if (spec.kind == TaskKind::local_reorder && spec.block < 1) {
        throw std::invalid_argument("generate_task: block width must be positive");
    }

    Pcg32 rng(seed, 0x5851f42d4c957f2dULL);
    ParallelCorpus corpus;
    corpus.pairs.reserve(count);
    for (int n = 0; n < count; ++n) {
        int len = spec.min_len +
                  static_cast<int>(rng.next_below(static_cast<uint32_t>(spec.max_len - spec.min_len + 1)));
        SentencePair pair;
        pair.source.resize(len);
        for (int j = 0; j < len; ++j) {
            pair.source[j] = kReservedTokens + static_cast<int>(rng.next_below(spec.vocab_tokens));
        }
        switch (spec.kind) {
            case TaskKind::copy:
                pair.target = pair.source;
                for (int i = 1; i <= len; ++i) pair.alignment.pairs.emplace_back(i, i);
                break;
            case TaskKind::delayed_copy:
                // target token i is source token i+shift; early targets cannot
                // be produced before the source has run shift tokens ahead
                for (int i = 1; i + spec.shift <= len; ++i) {
                    pair.target.push_back(pair.source[i + spec.shift - 1]);
                    pair.alignment.pairs.emplace_back(i + spec.shift, i);
                }
                break;
            case TaskKind::local_reorder: {
                pair.target.resize(len);
                std::vector<int> src_of(len);
                int w = spec.block;
                int pos = 0;
                while (pos + 2 * w <= len) {
                    for (int t = 0; t < w; ++t) {
                        src_of[pos + t] = pos + w + t;
                        src_of[pos + w + t] = pos + t;
                    }
                    pos += 2 * w;
                }
                for (; pos < len; ++pos) src_of[pos] = pos;
                for (int i = 0; i < len; ++i) {
                    pair.target[i] = pair.source[src_of[i]];
                    pair.alignment.pairs.emplace_back(src_of[i] + 1, i + 1);
                }
                break;
            }
        }
        corpus.pairs.push_back(std::move(pair));
    }
    return corpus;
}

namespace {

std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("corpus: cannot open " + path);
    std::vector<std::vector<std::string>> lines;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::vector<std::string> toks;
        std::string t;
        while (ls >> t) toks.push_back(t);
        if (toks.empty()) throw std::invalid_argument("corpus: empty sentence in " + path);
        lines.push_back(std::move(toks));
    }
    return lines;
}

} // namespace

void save_corpus(const ParallelCorpus& corpus, const Vocab& vocab, const std::string& src_path,
                 const std::string& tgt_path, const std::string& align_path) {
    std::ofstream src(src_path), tgt(tgt_path);
    if (!src || !tgt) throw std::runtime_error("corpus: cannot open output files");
    std::ofstream align;
    if (!align_path.empty()) {
        align.open(align_path);
        if (!align) throw std::runtime_error("corpus: cannot open " + align_path);
    }
    for (const SentencePair& pair : corpus.pairs) {
        for (size_t j = 0; j < pair.source.size(); ++j) {
            src << (j ? " " : "") << vocab.token(pair.source[j]);
        }
        src << "\n";
        for (size_t i = 0; i < pair.target.size(); ++i) {
            tgt << (i ? " " : "") << vocab.token(pair.target[i]);
        }
        tgt << "\n";
        if (align.is_open()) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& [j, i] : pair.alignment.pairs) arr.push_back({j, i});
            align << arr.dump() << "\n";
        }
    }
}

ParallelCorpus load_corpus(const Vocab& vocab, const std::string& src_path,
                           const std::string& tgt_path, const std::string& align_path) {
    auto src_lines = read_token_lines(src_path);
    auto tgt_lines = read_token_lines(tgt_path);
    if (src_lines.size() != tgt_lines.size()) {
        throw std::invalid_argument("corpus: source/target line counts differ");
    }
    std::vector<std::string> align_lines;
    if (!align_path.empty()) {
        std::ifstream is(align_path);
        if (!is) throw std::runtime_error("corpus: cannot open " + align_path);
        std::string line;
        while (std::getline(is, line)) align_lines.push_back(line);
        if (align_lines.size() != src_lines.size()) {
            throw std::invalid_argument("corpus: alignment line count differs");
        }
    }
    ParallelCorpus corpus;
    corpus.pairs.resize(src_lines.size());
    for (size_t n = 0; n < src_lines.size(); ++n) {
        SentencePair& pair = corpus.pairs[n];
        for (const std::string& t : src_lines[n]) pair.source.push_back(vocab.id(t));
        for (const std::string& t : tgt_lines[n]) pair.target.push_back(vocab.id(t));
        if (!align_lines.empty()) {
            nlohmann::json arr = nlohmann::json::parse(align_lines[n]);
            for (const auto& e : arr) {
                pair.alignment.pairs.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
            }
        }
    }
    return corpus;
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::map<std::string, std::string> out;
    std::string line;
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(is, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) throw std::runtime_error("config: expected key=value, got: " + t);
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw std::runtime_error("config: empty key");
        out[key] = val;
    }
    return out;
}

} // namespace simt
