// SPDX-License-Identifier: Apache-2.0
#include "magent/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace magent {

namespace {

constexpr int kMaxOrder = 4;

struct NgramCounts {
    // matches[n-1]: clipped n-gram matches, totals[n-1]: hypothesis n-grams
    std::array<int64_t, kMaxOrder> matches{};
    std::array<int64_t, kMaxOrder> totals{};
};

void accumulate(const std::vector<int>& hyp, const std::vector<int>& ref, NgramCounts& c) {
    for (int n = 1; n <= kMaxOrder; ++n) {
        const int hn = static_cast<int>(hyp.size()) - n + 1;
        if (hn <= 0) continue;
        std::map<std::vector<int>, int64_t> ref_counts;
        const int rn = static_cast<int>(ref.size()) - n + 1;
        for (int i = 0; i < rn; ++i)
            ++ref_counts[std::vector<int>(ref.begin() + i, ref.begin() + i + n)];
        std::map<std::vector<int>, int64_t> hyp_counts;
        for (int i = 0; i < hn; ++i)
            ++hyp_counts[std::vector<int>(hyp.begin() + i, hyp.begin() + i + n)];
        c.totals[static_cast<size_t>(n - 1)] += hn;
        for (const auto& [gram, count] : hyp_counts) {
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end())
                c.matches[static_cast<size_t>(n - 1)] += std::min(count, it->second);
        }
    }
}

double combine(const std::array<double, 4>& precisions, double bp, BleuScore& out) {
    out.precisions = precisions;
    out.brevity_penalty = bp;
    double log_sum = 0.0;
    for (double p : precisions) {
        if (p <= 0.0) {
            out.value = 0.0;
            return out.value;
        }
        log_sum += std::log(p);
    }
    out.value = 100.0 * bp * std::exp(log_sum / kMaxOrder);
    return out.value;
}

}  // namespace

BleuScore sentence_bleu(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (ref.empty()) throw std::invalid_argument("sentence_bleu: empty reference");
    BleuScore score;
    if (hyp.empty()) {
        score.value = 0.0;
        score.brevity_penalty = 0.0;
        return score;
    }
    NgramCounts c;
    accumulate(hyp, ref, c);
    std::array<double, 4> p{};
    for (int n = 1; n <= kMaxOrder; ++n) {
        const int64_t m = c.matches[static_cast<size_t>(n - 1)];
        const int64_t t = c.totals[static_cast<size_t>(n - 1)];
        if (n == 1)
            p[0] = t > 0 ? static_cast<double>(m) / static_cast<double>(t) : 0.0;
        else
            p[static_cast<size_t>(n - 1)] =
                static_cast<double>(m + 1) / static_cast<double>(t + 1);
    }
    const double bp = hyp.size() < ref.size()
                          ? std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size()))
                          : 1.0;
    combine(p, bp, score);
    return score;
}

BleuScore corpus_bleu(const std::vector<std::vector<int>>& hyps,
                      const std::vector<std::vector<int>>& refs) {
    if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hyp/ref count mismatch");
    if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
    NgramCounts c;
    int64_t hyp_len = 0, ref_len = 0;
    for (size_t i = 0; i < hyps.size(); ++i) {
        if (refs[i].empty()) throw std::invalid_argument("corpus_bleu: empty reference");
        hyp_len += static_cast<int64_t>(hyps[i].size());
        ref_len += static_cast<int64_t>(refs[i].size());
        accumulate(hyps[i], refs[i], c);
    }
    BleuScore score;
    if (hyp_len == 0) {
        score.brevity_penalty = 0.0;
        return score;
    }
    std::array<double, 4> p{};
    for (int n = 0; n < kMaxOrder; ++n)
        p[static_cast<size_t>(n)] = c.totals[static_cast<size_t>(n)] > 0
                                        ? static_cast<double>(c.matches[static_cast<size_t>(n)]) /
                                              static_cast<double>(c.totals[static_cast<size_t>(n)])
                                        : 0.0;
    const double bp =
        hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)) : 1.0;
    combine(p, bp, score);
    return score;
}

}  // namespace magent
