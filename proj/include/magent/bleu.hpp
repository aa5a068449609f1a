// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

namespace magent {

struct BleuScore {
    double value = 0.0;  // percentage, 0..100
    std::array<double, 4> precisions{0.0, 0.0, 0.0, 0.0};
    double brevity_penalty = 1.0;
};

// Sentence-level BLEU-4. Precisions for n >= 2 get add-one smoothing on both
// numerator and denominator so short hypotheses keep a usable signal; the
// unigram precision stays raw so a perfect score still requires a perfect
// hypothesis. Brevity penalty exp(1 - |ref|/|hyp|) applies when the
// hypothesis is shorter than the reference. Empty hypothesis scores 0.
BleuScore sentence_bleu(const std::vector<int>& hyp, const std::vector<int>& ref);

// Corpus-level BLEU-4 with aggregated counts and no smoothing; used for
// reporting only.
BleuScore corpus_bleu(const std::vector<std::vector<int>>& hyps,
                      const std::vector<std::vector<int>>& refs);

}  // namespace magent
