// SPDX-License-Identifier: Apache-2.0
#include "magent/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "magent/rng.hpp"

namespace fs = std::filesystem;

namespace magent {

Vocab::Vocab() {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    rebuild_index();
}

Vocab Vocab::synthetic(int size) {
    if (size <= kReserved) throw std::invalid_argument("vocab size must exceed reserved count");
    Vocab v;
    for (int i = kReserved; i < size; ++i) v.tokens_.push_back("t" + std::to_string(i));
    v.rebuild_index();
    return v;
}

Vocab Vocab::load(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open vocab file: " + file.string());
    Vocab v;
    v.tokens_.clear();
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.tokens_.push_back(line);
    }
    if (v.tokens_.size() < kReserved) throw std::runtime_error("vocab file too small: " + file.string());
    v.rebuild_index();
    return v;
}

void Vocab::save(const fs::path& file) const {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocab file: " + file.string());
    for (const auto& t : tokens_) out << t << "\n";
}

void Vocab::rebuild_index() {
    index_.clear();
    index_.reserve(tokens_.size());
    for (size_t i = 0; i < tokens_.size(); ++i) index_.emplace_back(tokens_[i], static_cast<int>(i));
    std::sort(index_.begin(), index_.end());
}

int Vocab::id(const std::string& token) const {
    auto it = std::lower_bound(index_.begin(), index_.end(), token,
                               [](const auto& p, const std::string& t) { return p.first < t; });
    if (it != index_.end() && it->first == token) return it->second;
    return kUnk;
}

int Vocab::add(const std::string& token) {
    const int existing = id(token);
    if (existing != kUnk || token == tokens_[kUnk]) return existing;
    tokens_.push_back(token);
    rebuild_index();
    return static_cast<int>(tokens_.size()) - 1;
}

std::vector<int> Vocab::encode_line(const std::string& line) const {
    std::vector<int> ids;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) ids.push_back(id(tok));
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += " ";
        out += token(ids[i]);
    }
    return out;
}

std::vector<int> Batch::src_row(int s) const {
    return std::vector<int>(src.begin() + static_cast<size_t>(s) * max_src,
                            src.begin() + static_cast<size_t>(s) * max_src + src_len[static_cast<size_t>(s)]);
}

std::vector<int> Batch::tgt_row(int s) const {
    return std::vector<int>(tgt.begin() + static_cast<size_t>(s) * max_tgt,
                            tgt.begin() + static_cast<size_t>(s) * max_tgt + tgt_len[static_cast<size_t>(s)]);
}

Batch make_batch(const std::vector<SentencePair>& pairs, const std::vector<int>& indices) {
    Batch b;
    b.size = static_cast<int>(indices.size());
    for (int idx : indices) {
        const auto& p = pairs[static_cast<size_t>(idx)];
        b.max_src = std::max(b.max_src, static_cast<int>(p.src.size()));
        b.max_tgt = std::max(b.max_tgt, static_cast<int>(p.tgt.size()));
    }
    b.src.assign(static_cast<size_t>(b.size) * b.max_src, Vocab::kPad);
    b.tgt.assign(static_cast<size_t>(b.size) * b.max_tgt, Vocab::kPad);
    b.src_mask.assign(b.src.size(), 0.0);
    b.tgt_mask.assign(b.tgt.size(), 0.0);
    for (int s = 0; s < b.size; ++s) {
        const auto& p = pairs[static_cast<size_t>(indices[static_cast<size_t>(s)])];
        b.src_len.push_back(static_cast<int>(p.src.size()));
        b.tgt_len.push_back(static_cast<int>(p.tgt.size()));
        for (size_t j = 0; j < p.src.size(); ++j) {
            b.src[static_cast<size_t>(s) * b.max_src + j] = p.src[j];
            b.src_mask[static_cast<size_t>(s) * b.max_src + j] = 1.0;
        }
        for (size_t j = 0; j < p.tgt.size(); ++j) {
            b.tgt[static_cast<size_t>(s) * b.max_tgt + j] = p.tgt[j];
            b.tgt_mask[static_cast<size_t>(s) * b.max_tgt + j] = 1.0;
        }
    }
    return b;
}

CorpusTask parse_task(const std::string& name) {
    if (name == "copy") return CorpusTask::Copy;
    if (name == "reverse") return CorpusTask::Reverse;
    if (name == "cipher") return CorpusTask::Cipher;
    if (name == "ambiguous_rewrite") return CorpusTask::AmbiguousRewrite;
    throw std::invalid_argument("unknown task: " + name);
}

std::string task_name(CorpusTask task) {
    switch (task) {
        case CorpusTask::Copy: return "copy";
        case CorpusTask::Reverse: return "reverse";
        case CorpusTask::Cipher: return "cipher";
        case CorpusTask::AmbiguousRewrite: return "ambiguous_rewrite";
    }
    return "?";
}

namespace {

// Substitution tables for cipher / ambiguous_rewrite, all seeded.
struct RewriteRules {
    std::vector<int> primary;    // payload id -> payload id
    std::vector<int> alternate;  // second choice for ambiguous tokens
    std::vector<bool> ambiguous;

    static RewriteRules build(int vocab_size, uint64_t seed, double ambiguous_fraction) {
        const int payload = vocab_size - Vocab::kReserved;
        RewriteRules r;
        r.primary.resize(static_cast<size_t>(vocab_size));
        r.alternate.resize(static_cast<size_t>(vocab_size));
        r.ambiguous.assign(static_cast<size_t>(vocab_size), false);

        // Seeded permutation of payload ids (Fisher-Yates).
        std::vector<int> perm(static_cast<size_t>(payload));
        for (int i = 0; i < payload; ++i) perm[static_cast<size_t>(i)] = Vocab::kReserved + i;
        rng::Stream sh(rng::derive(seed, 0x7065726dULL));
        for (int i = payload - 1; i > 0; --i) {
            const int j = static_cast<int>(sh.bits(static_cast<uint64_t>(i)) % static_cast<uint64_t>(i + 1));
            std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
        }
        for (int i = 0; i < payload; ++i) r.primary[static_cast<size_t>(Vocab::kReserved + i)] = perm[static_cast<size_t>(i)];

        const int n_ambiguous = static_cast<int>(payload * ambiguous_fraction);
        rng::Stream alt(rng::derive(seed, 0x616c74ULL));
        for (int i = 0; i < n_ambiguous; ++i) {
            const int tok = Vocab::kReserved + i * (payload / std::max(1, n_ambiguous));
            r.ambiguous[static_cast<size_t>(tok)] = true;
            // Alternate target differs from the primary one.
            int a = Vocab::kReserved +
                    static_cast<int>(alt.bits(static_cast<uint64_t>(tok)) % static_cast<uint64_t>(payload));
            if (a == r.primary[static_cast<size_t>(tok)]) a = Vocab::kReserved + (a - Vocab::kReserved + 1) % payload;
            r.alternate[static_cast<size_t>(tok)] = a;
        }
        return r;
    }
};

std::vector<int> rewrite_target(const std::vector<int>& src, CorpusTask task, const RewriteRules& rules) {
    std::vector<int> tgt;
    switch (task) {
        case CorpusTask::Copy:
            tgt = src;
            break;
        case CorpusTask::Reverse:
            tgt.assign(src.rbegin(), src.rend());
            break;
        case CorpusTask::Cipher:
            for (int t : src) tgt.push_back(rules.primary[static_cast<size_t>(t)]);
            break;
        case CorpusTask::AmbiguousRewrite:
            for (size_t i = 0; i < src.size(); ++i) {
                const int t = src[i];
                if (rules.ambiguous[static_cast<size_t>(t)]) {
                    // Context rule: parity of the left neighbour (0 when absent).
                    const int left = i > 0 ? src[i - 1] : 0;
                    tgt.push_back(left % 2 == 0 ? rules.primary[static_cast<size_t>(t)]
                                                : rules.alternate[static_cast<size_t>(t)]);
                } else {
                    tgt.push_back(rules.primary[static_cast<size_t>(t)]);
                }
            }
            break;
    }
    return tgt;
}

void write_split(const Vocab& vocab, const std::vector<SentencePair>& pairs, const fs::path& src_path,
                 const fs::path& tgt_path) {
    std::ofstream src(src_path, std::ios::binary), tgt(tgt_path, std::ios::binary);
    if (!src || !tgt) throw std::runtime_error("cannot write corpus files in " + src_path.parent_path().string());
    for (const auto& p : pairs) {
        src << vocab.decode(p.src) << "\n";
        tgt << vocab.decode(p.tgt) << "\n";
    }
}

}  // namespace

CorpusFiles gen_corpus(const GenConfig& cfg, const fs::path& out_dir) {
    if (cfg.vocab_size <= Vocab::kReserved) throw std::invalid_argument("gen_corpus: vocab too small");
    if (cfg.min_len < 1 || cfg.max_len < cfg.min_len) throw std::invalid_argument("gen_corpus: bad length range");
    if (cfg.n_pairs < 20) throw std::invalid_argument("gen_corpus: need at least 20 pairs");

    fs::create_directories(out_dir);
    const Vocab vocab = Vocab::synthetic(cfg.vocab_size);
    const RewriteRules rules = RewriteRules::build(cfg.vocab_size, cfg.seed, cfg.ambiguous_fraction);
    const int payload = cfg.vocab_size - Vocab::kReserved;

    // Every task maps src deterministically to tgt, so distinct sources give
    // distinct pairs; dedupe on src to make the splits disjoint.
    std::vector<SentencePair> pairs;
    std::set<std::vector<int>> seen;
    rng::Stream lens(rng::derive(cfg.seed, 0x6c656eULL));
    rng::Stream toks(rng::derive(cfg.seed, 0x746f6bULL));
    uint64_t counter = 0;
    while (static_cast<int>(pairs.size()) < cfg.n_pairs) {
        const int len = cfg.min_len +
                        static_cast<int>(lens.bits(counter) % static_cast<uint64_t>(cfg.max_len - cfg.min_len + 1));
        std::vector<int> src(static_cast<size_t>(len));
        for (int j = 0; j < len; ++j)
            src[static_cast<size_t>(j)] =
                Vocab::kReserved +
                static_cast<int>(toks.bits(counter * 64 + static_cast<uint64_t>(j)) % static_cast<uint64_t>(payload));
        ++counter;
        if (counter > static_cast<uint64_t>(cfg.n_pairs) * 1000)
            throw std::runtime_error("gen_corpus: could not generate enough distinct pairs");
        if (!seen.insert(src).second) continue;
        pairs.push_back({src, rewrite_target(src, cfg.task, rules)});
    }

    // Seeded shuffle then 90/5/5 split.
    rng::Stream sh(rng::derive(cfg.seed, 0x73706c69ULL));
    for (int i = static_cast<int>(pairs.size()) - 1; i > 0; --i) {
        const int j = static_cast<int>(sh.bits(static_cast<uint64_t>(i)) % static_cast<uint64_t>(i + 1));
        std::swap(pairs[static_cast<size_t>(i)], pairs[static_cast<size_t>(j)]);
    }
    const int n_valid = std::max(1, cfg.n_pairs / 20);
    const int n_test = std::max(1, cfg.n_pairs / 20);
    const int n_train = cfg.n_pairs - n_valid - n_test;
    std::vector<SentencePair> train(pairs.begin(), pairs.begin() + n_train);
    std::vector<SentencePair> valid(pairs.begin() + n_train, pairs.begin() + n_train + n_valid);
    std::vector<SentencePair> test(pairs.begin() + n_train + n_valid, pairs.end());

    CorpusFiles files;
    files.vocab = out_dir / "vocab.txt";
    files.train_src = out_dir / "train.src";
    files.train_tgt = out_dir / "train.tgt";
    files.valid_src = out_dir / "valid.src";
    files.valid_tgt = out_dir / "valid.tgt";
    files.test_src = out_dir / "test.src";
    files.test_tgt = out_dir / "test.tgt";
    vocab.save(files.vocab);
    write_split(vocab, train, files.train_src, files.train_tgt);
    write_split(vocab, valid, files.valid_src, files.valid_tgt);
    write_split(vocab, test, files.test_src, files.test_tgt);
    return files;
}

LoadResult load_parallel(const fs::path& src_path, const fs::path& tgt_path, const Vocab& vocab) {
    std::ifstream src(src_path), tgt(tgt_path);
    if (!src) throw std::runtime_error("cannot open source file: " + src_path.string());
    if (!tgt) throw std::runtime_error("cannot open target file: " + tgt_path.string());
    std::vector<std::string> src_lines, tgt_lines;
    std::string line;
    while (std::getline(src, line)) src_lines.push_back(line);
    while (std::getline(tgt, line)) tgt_lines.push_back(line);
    if (src_lines.size() != tgt_lines.size())
        throw std::runtime_error("parallel corpus line count mismatch: " + src_path.string() + " has " +
                                 std::to_string(src_lines.size()) + " lines, " + tgt_path.string() + " has " +
                                 std::to_string(tgt_lines.size()));
    LoadResult result;
    for (size_t i = 0; i < src_lines.size(); ++i) {
        SentencePair p{vocab.encode_line(src_lines[i]), vocab.encode_line(tgt_lines[i])};
        if (p.src.empty() || p.tgt.empty()) {
            ++result.skipped_empty;
            continue;
        }
        result.pairs.push_back(std::move(p));
    }
    return result;
}

BatchStream::BatchStream(std::vector<SentencePair> pairs, int batch_size, uint64_t seed, bool shuffle)
    : pairs_(std::move(pairs)), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
    if (batch_size_ < 1) throw std::invalid_argument("batch size must be >= 1");
    if (pairs_.empty()) throw std::invalid_argument("batch stream needs a nonempty corpus");
    batches_per_epoch_ = (static_cast<int64_t>(pairs_.size()) + batch_size_ - 1) / batch_size_;
}

std::vector<int> BatchStream::epoch_order(int64_t epoch) const {
    std::vector<int> order(pairs_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    if (!shuffle_) return order;
    rng::Stream sh(rng::derive(seed_, 0x65706f63ULL, static_cast<uint64_t>(epoch)));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
        const int j = static_cast<int>(sh.bits(static_cast<uint64_t>(i)) % static_cast<uint64_t>(i + 1));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    return order;
}

Batch BatchStream::at_step(int64_t global_step) const {
    const int64_t epoch = global_step / batches_per_epoch_;
    const int64_t slot = global_step % batches_per_epoch_;
    const std::vector<int> order = epoch_order(epoch);
    const size_t begin = static_cast<size_t>(slot) * static_cast<size_t>(batch_size_);
    const size_t end = std::min(order.size(), begin + static_cast<size_t>(batch_size_));
    return make_batch(pairs_, std::vector<int>(order.begin() + static_cast<int64_t>(begin),
                                               order.begin() + static_cast<int64_t>(end)));
}

}  // namespace magent
