// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace magent {

// Token/id bijection with fixed reserved ids.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kReserved = 4;

    Vocab();                                        // reserved tokens only
    static Vocab synthetic(int size);               // reserved + "t4".."t<size-1>"
    static Vocab load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
    int id(const std::string& token) const;  // kUnk when absent
    int add(const std::string& token);

    std::vector<int> encode_line(const std::string& line) const;
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> tokens_;
    std::vector<std::pair<std::string, int>> index_;  // sorted token -> id
    void rebuild_index();
};

struct SentencePair {
    std::vector<int> src;
    std::vector<int> tgt;
    bool operator==(const SentencePair&) const = default;
};

struct Batch {
    std::vector<int> src;        // [size, max_src] padded with kPad
    std::vector<double> src_mask;
    std::vector<int> tgt;        // [size, max_tgt]
    std::vector<double> tgt_mask;
    std::vector<int> src_len;
    std::vector<int> tgt_len;
    int size = 0;
    int max_src = 0;
    int max_tgt = 0;

    std::vector<int> src_row(int s) const;
    std::vector<int> tgt_row(int s) const;
};

Batch make_batch(const std::vector<SentencePair>& pairs, const std::vector<int>& indices);

enum class CorpusTask { Copy, Reverse, Cipher, AmbiguousRewrite };

CorpusTask parse_task(const std::string& name);
std::string task_name(CorpusTask task);

struct GenConfig {
    CorpusTask task = CorpusTask::AmbiguousRewrite;
    int n_pairs = 5000;
    int min_len = 5;
    int max_len = 20;
    int vocab_size = 64;
    uint64_t seed = 7;
    double ambiguous_fraction = 0.1;  // AmbiguousRewrite only
};

struct CorpusFiles {
    std::filesystem::path vocab;
    std::filesystem::path train_src, train_tgt;
    std::filesystem::path valid_src, valid_tgt;
    std::filesystem::path test_src, test_tgt;
};

// Deterministic synthetic parallel corpus; splits 90/5/5 with disjoint pairs.
CorpusFiles gen_corpus(const GenConfig& cfg, const std::filesystem::path& out_dir);

// Parallel file loader: whitespace tokens, OOV -> UNK, empty lines skipped.
struct LoadResult {
    std::vector<SentencePair> pairs;
    int skipped_empty = 0;
};
LoadResult load_parallel(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path,
                         const Vocab& vocab);

// Epoch-shuffled batch stream. The batch at global step s is a pure function
// of (pairs, batch_size, seed, s), which is what makes checkpoint resume and
// trajectory comparisons exact.
class BatchStream {
public:
    BatchStream(std::vector<SentencePair> pairs, int batch_size, uint64_t seed, bool shuffle);

    Batch at_step(int64_t global_step) const;
    int64_t batches_per_epoch() const { return batches_per_epoch_; }
    const std::vector<SentencePair>& pairs() const { return pairs_; }

private:
    std::vector<SentencePair> pairs_;
    int batch_size_;
    uint64_t seed_;
    bool shuffle_;
    int64_t batches_per_epoch_;
    std::vector<int> epoch_order(int64_t epoch) const;
};

}  // namespace magent
