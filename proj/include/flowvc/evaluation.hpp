#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowvc/features.hpp"

namespace flowvc {

// ---------------------------------------------------------------------------
// Word error rate

struct WerCounts {
    size_t errors = 0;  // substitutions + insertions + deletions
    size_t words = 0;   // reference length

    double rate() const { return static_cast<double>(errors) / static_cast<double>(words); }
};

// Minimal edit distance by dynamic programming; unit costs.
WerCounts wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

// Case-folding and punctuation stripping applied before comparison.
std::vector<std::string> normalize_words(const std::vector<std::string>& words);

struct WerRow {
    std::string utterance_id;
    std::string system_id;
    std::vector<std::string> reference;
    std::vector<std::string> hypothesis;
};

struct WerSystemReport {
    std::string system_id;
    double pooled_rate = 0.0;  // total errors / total words
    size_t utterances = 0;
    double mean_rate = 0.0;  // mean of per-utterance rates
    std::optional<double> ci_halfwidth;  // 1.96 * sd / sqrt(n); absent when n < 2
};

std::vector<WerSystemReport> wer_aggregate(const std::vector<WerRow>& manifest);

// ---------------------------------------------------------------------------
// MUSHRA-style score statistics

struct ScoreRow {
    std::string screen_id;
    std::string system_id;
    std::string listener_id;
    double score = 0.0;  // 0..100
};

struct MushraSystemReport {
    std::string system_id;
    double mean = 0.0;
    double median = 0.0;
    size_t count = 0;
};

std::vector<MushraSystemReport> mushra_aggregate(const std::vector<ScoreRow>& manifest);

struct PairTestResult {
    std::string system_a;
    std::string system_b;
    size_t n = 0;
    double t_stat = 0.0;
    double p_value = 1.0;
    bool significant = false;
    bool degenerate = false;  // zero-variance difference vector
};

struct SignificanceReport {
    std::string method;
    double alpha = 0.05;
    std::vector<PairTestResult> pairs;
};

// All pairwise paired t-tests over (screen, listener) complete cases with
// Holm step-down correction.
SignificanceReport paired_t_holm(const std::vector<ScoreRow>& manifest, double alpha);

// Holm decisions for externally supplied p-values; exposed for oracle checks.
std::vector<bool> holm_decisions(std::vector<double> p_values, double alpha);
std::vector<bool> bonferroni_decisions(const std::vector<double>& p_values, double alpha);

// Two-sided p of a paired t statistic with df degrees of freedom.
double student_t_two_sided_p(double t, double df);

struct PreferenceResult {
    size_t wins_a = 0;
    size_t wins_b = 0;
    size_t ties = 0;
    double p_value = 1.0;
    bool significant = false;
    std::string preferred;  // empty when not significant or all ties
};

// Two-sided exact binomial test on per-screen wins, ties dropped; threshold
// alpha / m_comparisons (Bonferroni).
PreferenceResult binomial_preference(const std::vector<double>& scores_a,
                                     const std::vector<double>& scores_b, double alpha,
                                     int m_comparisons);

// Exact two-sided binomial p for wins (a, b) under fair-coin null.
double binomial_two_sided_p(size_t wins_a, size_t wins_b);

// ---------------------------------------------------------------------------
// Synthetic-corpus conversion metrics

struct ConversionMetrics {
    double speaker_accuracy = 0.0;   // frames classified as the labelled speaker
    double phoneme_retention = 0.0;  // frames classified as the source phoneme
    double f0_correlation = 0.0;     // Pearson, f0-linked component
    size_t frames = 0;
};

// Oracle Bayes classification of each frame against the generator's known
// speaker/phoneme means; utterance speaker_id is the label to match (for
// converted corpora that is the target speaker) and phoneme_ids are the
// retained source labels.
ConversionMetrics conversion_metrics(const Corpus& corpus, const SynthTruth& truth);

// Oracle frame classifiers, exposed for tests.
int oracle_speaker_classify(std::span<const double> frame, double f0_component,
                            const SynthTruth& truth);
int oracle_phoneme_classify(std::span<const double> frame, double f0_component,
                            const SynthTruth& truth);

// ---------------------------------------------------------------------------
// Manifest CSV IO

std::vector<WerRow> read_wer_manifest(const std::string& path);
std::vector<ScoreRow> read_score_manifest(const std::string& path);

}  // namespace flowvc
