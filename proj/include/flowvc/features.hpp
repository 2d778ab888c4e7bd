#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowvc/numerics.hpp"

namespace flowvc {

struct Utterance {
    std::string id;
    std::string speaker_id;
    FrameMatrix mel;
    std::vector<double> f0_raw;   // Hz, 0 where unvoiced
    std::vector<uint8_t> vuv;     // 1 = voiced
    std::vector<uint32_t> phoneme_ids;
    std::vector<std::string> words;

    int frames() const { return mel.frames; }
    void validate(int n_phonemes) const;
};

struct SpeakerTable {
    std::map<std::string, std::vector<double>> embeddings;

    const std::vector<double>& lookup(const std::string& speaker_id) const;
    int dim() const;
};

struct ConditioningSet {
    std::vector<double> speaker;
    std::vector<double> f0_norm;  // mean-normalized interpolated log-f0
    std::vector<uint8_t> vuv;
    std::optional<std::vector<uint32_t>> phoneme_ids;  // text-conditioned mode only

    int frames() const { return static_cast<int>(f0_norm.size()); }
};

// Generator parameters for the synthetic ground-truth corpus.
struct SynthSpec {
    int n_speakers = 4;
    int n_phonemes = 10;
    int mel_dim = 8;
    int frames_per_phone_min = 4;
    int frames_per_phone_max = 8;
    int phones_per_utt_min = 4;
    int phones_per_utt_max = 8;
    int utterances_per_speaker = 15;
    int speaker_embed_dim = 8;
    double speaker_offset_scale = 1.5;
    double phone_pattern_scale = 1.0;
    double noise_scale = 0.1;
    double base_f0_min_hz = 80.0;
    double base_f0_max_hz = 260.0;
    uint64_t seed = 0;

    void validate() const;
};

// Everything the generator knows: enough to build exact Bayes classifiers
// over frames and to locate the f0-linked mel component.
struct SynthTruth {
    SynthSpec spec;
    std::vector<std::vector<double>> speaker_offsets;   // n_speakers x mel_dim
    std::vector<std::vector<double>> phone_patterns;    // n_phonemes x mel_dim
    std::vector<uint8_t> phone_voiced;                  // 1 = voiced phoneme
    std::vector<double> f0_direction;                   // unit vector, mel_dim
    std::vector<double> speaker_base_f0;                // Hz per speaker
    std::vector<std::vector<double>> embed_projection;  // embed_dim x mel_dim

    double f0_component_scale() const { return 0.5 * spec.phone_pattern_scale; }
    std::string speaker_name(int idx) const { return "spk" + std::to_string(idx); }
};

struct Corpus {
    std::vector<Utterance> utterances;
    SpeakerTable speakers;
    std::optional<SynthTruth> truth;

    const Utterance& by_id(const std::string& id) const;
};

// Log-f0 with unvoiced gaps linearly interpolated between flanking voiced
// frames; leading/trailing unvoiced runs hold the nearest voiced value.
std::vector<double> interpolate_f0(std::span<const double> f0_raw,
                                   std::span<const uint8_t> vuv);

// Sentence-level mean subtraction.
std::vector<double> normalize_f0(std::span<const double> logf0);

ConditioningSet build_conditioning(const Utterance& u, const SpeakerTable& table,
                                   bool text_conditioned);

Corpus generate_corpus(const SynthSpec& spec);

void write_corpus(const std::string& dir, const Corpus& corpus);
Corpus read_corpus(const std::string& dir);

void write_speaker_table(const std::string& path, const SpeakerTable& table);
SpeakerTable read_speaker_table(const std::string& path);

void write_truth(const std::string& path, const SynthTruth& truth);
SynthTruth read_truth(const std::string& path);

}  // namespace flowvc
