#include "flowvc/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace flowvc {

// ---------------------------------------------------------------------------
// WER

WerCounts wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    if (ref.empty()) throw DomainError("wer: empty reference");
    const size_t n = ref.size(), m = hyp.size();
    std::vector<size_t> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = j;
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= m; ++j) {
            size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return {prev[m], n};
}

std::vector<std::string> normalize_words(const std::vector<std::string>& words) {
    std::vector<std::string> out;
    out.reserve(words.size());
    for (const auto& w : words) {
        std::string norm;
        for (char ch : w)
            if (!std::ispunct(static_cast<unsigned char>(ch)))
                norm.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        if (!norm.empty()) out.push_back(std::move(norm));
    }
    return out;
}

std::vector<WerSystemReport> wer_aggregate(const std::vector<WerRow>& manifest) {
    std::map<std::string, std::vector<double>> rates;
    std::map<std::string, std::pair<size_t, size_t>> pooled;  // errors, words
    for (const auto& row : manifest) {
        WerCounts c = wer(row.reference, row.hypothesis);
        rates[row.system_id].push_back(c.rate());
        pooled[row.system_id].first += c.errors;
        pooled[row.system_id].second += c.words;
    }
    std::vector<WerSystemReport> out;
    for (const auto& [system, rs] : rates) {
        WerSystemReport rep;
        rep.system_id = system;
        rep.utterances = rs.size();
        rep.pooled_rate = static_cast<double>(pooled[system].first) /
                          static_cast<double>(pooled[system].second);
        rep.mean_rate = std::accumulate(rs.begin(), rs.end(), 0.0) / rs.size();
        if (rs.size() >= 2) {
            double var = 0.0;
            for (double r : rs) var += (r - rep.mean_rate) * (r - rep.mean_rate);
            var /= static_cast<double>(rs.size() - 1);
            rep.ci_halfwidth = 1.96 * std::sqrt(var / static_cast<double>(rs.size()));
        }
        out.push_back(std::move(rep));
    }
    return out;
}

// ---------------------------------------------------------------------------
// MUSHRA aggregation

std::vector<MushraSystemReport> mushra_aggregate(const std::vector<ScoreRow>& manifest) {
    std::map<std::string, std::vector<double>> scores;
    for (const auto& row : manifest) {
        if (row.score < 0.0 || row.score > 100.0)
            throw DomainError("score outside [0, 100] for screen " + row.screen_id);
        scores[row.system_id].push_back(row.score);
    }
    std::vector<MushraSystemReport> out;
    for (auto& [system, vals] : scores) {
        MushraSystemReport rep;
        rep.system_id = system;
        rep.count = vals.size();
        rep.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
        std::sort(vals.begin(), vals.end());
        size_t mid = vals.size() / 2;
        rep.median = vals.size() % 2 ? vals[mid] : 0.5 * (vals[mid - 1] + vals[mid]);
        out.push_back(std::move(rep));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Student t two-sided p via the regularized incomplete beta function

namespace {

double beta_cont_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double reg_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log(1.0 - x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cont_fraction(a, b, x) / a;
    return 1.0 - front * beta_cont_fraction(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_two_sided_p(double t, double df) {
    if (df <= 0.0) throw DomainError("t test: df must be positive");
    double x = df / (df + t * t);
    return reg_incomplete_beta(0.5 * df, 0.5, x);
}

std::vector<bool> holm_decisions(std::vector<double> p_values, double alpha) {
    const size_t m = p_values.size();
    std::vector<size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return p_values[a] < p_values[b]; });
    std::vector<bool> significant(m, false);
    for (size_t i = 0; i < m; ++i) {
        double threshold = alpha / static_cast<double>(m - i);
        if (p_values[order[i]] > threshold) break;  // step-down stop
        significant[order[i]] = true;
    }
    return significant;
}

std::vector<bool> bonferroni_decisions(const std::vector<double>& p_values, double alpha) {
    std::vector<bool> out(p_values.size());
    for (size_t i = 0; i < p_values.size(); ++i)
        out[i] = p_values[i] <= alpha / static_cast<double>(p_values.size());
    return out;
}

SignificanceReport paired_t_holm(const std::vector<ScoreRow>& manifest, double alpha) {
    // score per (system, screen+listener case)
    std::map<std::string, std::map<std::string, double>> by_system;
    for (const auto& row : manifest) {
        std::string key = row.screen_id + "\x1f" + row.listener_id;
        auto [it, inserted] = by_system[row.system_id].emplace(key, row.score);
        if (!inserted)
            throw DomainError("duplicate score for system " + row.system_id + " on screen " +
                              row.screen_id + " listener " + row.listener_id);
    }
    std::vector<std::string> systems;
    for (const auto& [sys, _] : by_system) systems.push_back(sys);
    if (systems.size() < 2) throw DomainError("paired_t_holm: need at least 2 systems");

    SignificanceReport report;
    report.method = "paired-t + Holm-Bonferroni";
    report.alpha = alpha;

    for (size_t i = 0; i < systems.size(); ++i) {
        for (size_t j = i + 1; j < systems.size(); ++j) {
            PairTestResult pr;
            pr.system_a = systems[i];
            pr.system_b = systems[j];
            std::vector<double> diffs;
            for (const auto& [key, a_score] : by_system[systems[i]]) {
                auto it = by_system[systems[j]].find(key);
                if (it != by_system[systems[j]].end()) diffs.push_back(a_score - it->second);
            }
            pr.n = diffs.size();
            if (diffs.size() < 2) {
                pr.degenerate = true;
            } else {
                double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / diffs.size();
                double var = 0.0;
                for (double d : diffs) var += (d - mean) * (d - mean);
                var /= static_cast<double>(diffs.size() - 1);
                if (var <= 0.0) {
                    pr.degenerate = true;
                } else {
                    pr.t_stat = mean / std::sqrt(var / static_cast<double>(diffs.size()));
                    pr.p_value = student_t_two_sided_p(
                        pr.t_stat, static_cast<double>(diffs.size() - 1));
                }
            }
            report.pairs.push_back(std::move(pr));
        }
    }

    std::vector<double> ps;
    std::vector<size_t> idx;
    for (size_t k = 0; k < report.pairs.size(); ++k) {
        if (report.pairs[k].degenerate) continue;
        ps.push_back(report.pairs[k].p_value);
        idx.push_back(k);
    }
    auto decisions = holm_decisions(ps, alpha);
    for (size_t k = 0; k < idx.size(); ++k) report.pairs[idx[k]].significant = decisions[k];
    return report;
}

double binomial_two_sided_p(size_t wins_a, size_t wins_b) {
    const size_t n = wins_a + wins_b;
    if (n == 0) return 1.0;
    const size_t k = std::min(wins_a, wins_b);
    double tail = 0.0;
    const double log_half_n = -static_cast<double>(n) * std::numbers::ln2;
    for (size_t i = 0; i <= k; ++i) {
        double log_coeff = std::lgamma(static_cast<double>(n) + 1.0) -
                           std::lgamma(static_cast<double>(i) + 1.0) -
                           std::lgamma(static_cast<double>(n - i) + 1.0);
        tail += std::exp(log_coeff + log_half_n);
    }
    return std::min(1.0, 2.0 * tail);
}

PreferenceResult binomial_preference(const std::vector<double>& scores_a,
                                     const std::vector<double>& scores_b, double alpha,
                                     int m_comparisons) {
    if (scores_a.size() != scores_b.size())
        throw ShapeError("binomial_preference: unpaired screens");
    if (m_comparisons < 1) throw DomainError("binomial_preference: m_comparisons must be >= 1");
    PreferenceResult res;
    for (size_t i = 0; i < scores_a.size(); ++i) {
        if (scores_a[i] > scores_b[i])
            ++res.wins_a;
        else if (scores_b[i] > scores_a[i])
            ++res.wins_b;
        else
            ++res.ties;
    }
    if (res.wins_a + res.wins_b == 0) return res;  // all ties: no decision
    res.p_value = binomial_two_sided_p(res.wins_a, res.wins_b);
    res.significant = res.p_value <= alpha / static_cast<double>(m_comparisons);
    if (res.significant) res.preferred = res.wins_a > res.wins_b ? "A" : "B";
    return res;
}

// ---------------------------------------------------------------------------
// Oracle conversion metrics

namespace {

struct OracleContext {
    const SynthTruth& truth;

    // Joint nearest-mean classification over (speaker, phoneme).
    std::pair<int, int> classify(std::span<const double> frame, double f0_component) const {
        const int dim = truth.spec.mel_dim;
        double best = std::numeric_limits<double>::infinity();
        int best_s = -1, best_k = -1;
        for (int s = 0; s < truth.spec.n_speakers; ++s) {
            for (int k = 0; k < truth.spec.n_phonemes; ++k) {
                double dist = 0.0;
                for (int c = 0; c < dim; ++c) {
                    double mean = truth.phone_patterns[k][c] + truth.speaker_offsets[s][c] +
                                  f0_component * truth.f0_direction[c];
                    double r = frame[c] - mean;
                    dist += r * r;
                }
                if (dist < best) {
                    best = dist;
                    best_s = s;
                    best_k = k;
                }
            }
        }
        return {best_s, best_k};
    }
};

int speaker_index(const SynthTruth& truth, const std::string& speaker_id) {
    for (int s = 0; s < truth.spec.n_speakers; ++s)
        if (truth.speaker_name(s) == speaker_id) return s;
    throw LookupError("speaker '" + speaker_id + "' not in generator ground truth");
}

}  // namespace

int oracle_speaker_classify(std::span<const double> frame, double f0_component,
                            const SynthTruth& truth) {
    return OracleContext{truth}.classify(frame, f0_component).first;
}

int oracle_phoneme_classify(std::span<const double> frame, double f0_component,
                            const SynthTruth& truth) {
    return OracleContext{truth}.classify(frame, f0_component).second;
}

ConversionMetrics conversion_metrics(const Corpus& corpus, const SynthTruth& truth) {
    OracleContext oracle{truth};
    ConversionMetrics metrics;
    size_t speaker_hits = 0, phoneme_hits = 0;
    std::vector<double> proj, linked;
    const double f0_scale = truth.f0_component_scale();
    const int dim = truth.spec.mel_dim;

    for (const auto& u : corpus.utterances) {
        int s_label = speaker_index(truth, u.speaker_id);
        auto f0n = normalize_f0(interpolate_f0(u.f0_raw, u.vuv));
        std::vector<double> frame(dim);
        for (int t = 0; t < u.mel.frames; ++t) {
            for (int c = 0; c < dim; ++c) frame[c] = u.mel.at(c, t);
            double f0c = f0_scale * f0n[t];
            auto [s_pred, k_pred] = oracle.classify(frame, f0c);
            speaker_hits += (s_pred == s_label);
            phoneme_hits += (k_pred == static_cast<int>(u.phoneme_ids[t]));
            // f0-linked component: residual after removing the labelled
            // phone/speaker means, projected onto the f0 direction
            double residual_proj = 0.0;
            int k_label = static_cast<int>(u.phoneme_ids[t]);
            for (int c = 0; c < dim; ++c)
                residual_proj += (frame[c] - truth.phone_patterns[k_label][c] -
                                  truth.speaker_offsets[s_label][c]) *
                                 truth.f0_direction[c];
            proj.push_back(residual_proj);
            linked.push_back(f0_scale * f0n[t]);
            ++metrics.frames;
        }
    }
    if (metrics.frames == 0) throw DomainError("conversion_metrics: empty corpus");
    metrics.speaker_accuracy = static_cast<double>(speaker_hits) / metrics.frames;
    metrics.phoneme_retention = static_cast<double>(phoneme_hits) / metrics.frames;

    double mx = std::accumulate(proj.begin(), proj.end(), 0.0) / proj.size();
    double my = std::accumulate(linked.begin(), linked.end(), 0.0) / linked.size();
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (size_t i = 0; i < proj.size(); ++i) {
        sxy += (proj[i] - mx) * (linked[i] - my);
        sxx += (proj[i] - mx) * (proj[i] - mx);
        syy += (linked[i] - my) * (linked[i] - my);
    }
    metrics.f0_correlation = (sxx > 0.0 && syy > 0.0) ? sxy / std::sqrt(sxx * syy) : 0.0;
    return metrics;
}

// ---------------------------------------------------------------------------
// Manifest CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line, size_t expected,
                                        const std::string& path) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != expected)
        throw FormatError(path + ": expected " + std::to_string(expected) + " fields, got " +
                          std::to_string(fields.size()) + " in: " + line);
    return fields;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::stringstream ss(text);
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

}  // namespace

std::vector<WerRow> read_wer_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    std::vector<WerRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line.rfind("utterance_id", 0) == 0) continue;
        }
        auto fields = split_csv_line(line, 4, path);
        rows.push_back({fields[0], fields[1], normalize_words(split_words(fields[2])),
                        normalize_words(split_words(fields[3]))});
    }
    return rows;
}

std::vector<ScoreRow> read_score_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    std::vector<ScoreRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line.rfind("screen_id", 0) == 0) continue;
        }
        auto fields = split_csv_line(line, 4, path);
        rows.push_back({fields[0], fields[1], fields[2], std::stod(fields[3])});
    }
    return rows;
}

}  // namespace flowvc
