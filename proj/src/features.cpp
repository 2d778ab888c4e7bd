#include "flowvc/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

namespace flowvc {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void Utterance::validate(int n_phonemes) const {
    const size_t t = static_cast<size_t>(mel.frames);
    if (f0_raw.size() != t || vuv.size() != t || phoneme_ids.size() != t)
        throw ShapeError("utterance " + id + ": per-frame stream length mismatch");
    for (size_t i = 0; i < t; ++i) {
        if ((f0_raw[i] > 0.0) != (vuv[i] != 0))
            throw DomainError("utterance " + id + ": f0/vuv inconsistent at frame " +
                              std::to_string(i));
        if (n_phonemes > 0 && phoneme_ids[i] >= static_cast<uint32_t>(n_phonemes))
            throw DomainError("utterance " + id + ": phoneme id out of inventory");
    }
}

const std::vector<double>& SpeakerTable::lookup(const std::string& speaker_id) const {
    auto it = embeddings.find(speaker_id);
    if (it == embeddings.end()) throw LookupError("unknown speaker '" + speaker_id + "'");
    return it->second;
}

int SpeakerTable::dim() const {
    if (embeddings.empty()) return 0;
    return static_cast<int>(embeddings.begin()->second.size());
}

void SynthSpec::validate() const {
    if (n_speakers < 2 || n_phonemes < 2) throw ConfigError("need >= 2 speakers and phonemes");
    if (mel_dim <= 0) throw ConfigError("mel_dim must be positive");
    if (speaker_offset_scale < 0 || phone_pattern_scale < 0 || noise_scale < 0)
        throw ConfigError("scales must be non-negative");
    if (frames_per_phone_min <= 0 || frames_per_phone_max < frames_per_phone_min)
        throw ConfigError("bad frames_per_phone range");
    if (phones_per_utt_min <= 0 || phones_per_utt_max < phones_per_utt_min)
        throw ConfigError("bad phones_per_utt range");
    if (utterances_per_speaker <= 0) throw ConfigError("utterances_per_speaker must be positive");
}

const Utterance& Corpus::by_id(const std::string& id) const {
    for (const auto& u : utterances)
        if (u.id == id) return u;
    throw LookupError("unknown utterance '" + id + "'");
}

std::vector<double> interpolate_f0(std::span<const double> f0_raw,
                                   std::span<const uint8_t> vuv) {
    if (f0_raw.size() != vuv.size()) throw ShapeError("interpolate_f0: length mismatch");
    const int n = static_cast<int>(f0_raw.size());
    std::vector<int> voiced;
    for (int i = 0; i < n; ++i)
        if (vuv[i]) voiced.push_back(i);
    if (voiced.empty()) throw DomainError("interpolate_f0: all-unvoiced utterance is unusable");

    std::vector<double> out(n);
    for (int i : voiced) out[i] = std::log(f0_raw[i]);
    // leading/trailing runs hold the nearest voiced value
    for (int i = 0; i < voiced.front(); ++i) out[i] = out[voiced.front()];
    for (int i = voiced.back() + 1; i < n; ++i) out[i] = out[voiced.back()];
    // linear interpolation across interior gaps
    for (size_t k = 0; k + 1 < voiced.size(); ++k) {
        int a = voiced[k], b = voiced[k + 1];
        for (int i = a + 1; i < b; ++i) {
            double w = static_cast<double>(i - a) / (b - a);
            out[i] = (1.0 - w) * out[a] + w * out[b];
        }
    }
    return out;
}

std::vector<double> normalize_f0(std::span<const double> logf0) {
    if (logf0.empty()) throw ShapeError("normalize_f0: empty input");
    double mean = 0.0;
    for (double v : logf0) mean += v;
    mean /= static_cast<double>(logf0.size());
    std::vector<double> out(logf0.begin(), logf0.end());
    for (double& v : out) v -= mean;
    return out;
}

ConditioningSet build_conditioning(const Utterance& u, const SpeakerTable& table,
                                   bool text_conditioned) {
    ConditioningSet cond;
    cond.speaker = table.lookup(u.speaker_id);
    cond.f0_norm = normalize_f0(interpolate_f0(u.f0_raw, u.vuv));
    cond.vuv = u.vuv;
    if (text_conditioned) cond.phoneme_ids = u.phoneme_ids;
    return cond;
}

Corpus generate_corpus(const SynthSpec& spec) {
    spec.validate();
    SeededRng root(spec.seed);

    SynthTruth truth;
    truth.spec = spec;

    SeededRng spk_rng = root.child(1);
    for (int s = 0; s < spec.n_speakers; ++s) {
        std::vector<double> offset(spec.mel_dim);
        for (double& v : offset) v = spk_rng.next_normal() * spec.speaker_offset_scale;
        truth.speaker_offsets.push_back(std::move(offset));
        truth.speaker_base_f0.push_back(spec.base_f0_min_hz +
                                        spk_rng.next_uniform() *
                                            (spec.base_f0_max_hz - spec.base_f0_min_hz));
    }

    SeededRng ph_rng = root.child(2);
    for (int p = 0; p < spec.n_phonemes; ++p) {
        std::vector<double> pattern(spec.mel_dim);
        for (double& v : pattern) v = ph_rng.next_normal() * spec.phone_pattern_scale;
        truth.phone_patterns.push_back(std::move(pattern));
        // phoneme 0 is always voiced so every utterance can carry f0
        truth.phone_voiced.push_back(p == 0 ? 1 : (ph_rng.next_uniform() < 0.7 ? 1 : 0));
    }

    SeededRng dir_rng = root.child(3);
    truth.f0_direction.resize(spec.mel_dim);
    double norm = 0.0;
    for (double& v : truth.f0_direction) {
        v = dir_rng.next_normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : truth.f0_direction) v /= norm;

    SeededRng proj_rng = root.child(4);
    for (int e = 0; e < spec.speaker_embed_dim; ++e) {
        std::vector<double> row(spec.mel_dim);
        for (double& v : row) v = proj_rng.next_normal() / std::sqrt(spec.mel_dim);
        truth.embed_projection.push_back(std::move(row));
    }

    Corpus corpus;
    for (int s = 0; s < spec.n_speakers; ++s) {
        std::vector<double> embed(spec.speaker_embed_dim, 0.0);
        for (int e = 0; e < spec.speaker_embed_dim; ++e)
            for (int d = 0; d < spec.mel_dim; ++d)
                embed[e] += truth.embed_projection[e][d] * truth.speaker_offsets[s][d];
        corpus.speakers.embeddings[truth.speaker_name(s)] = embed;
    }

    SeededRng utt_rng = root.child(5);
    for (int s = 0; s < spec.n_speakers; ++s) {
        for (int k = 0; k < spec.utterances_per_speaker; ++k) {
            Utterance u;
            u.id = truth.speaker_name(s) + "_u" + std::to_string(k);
            u.speaker_id = truth.speaker_name(s);

            int n_phones = spec.phones_per_utt_min +
                           static_cast<int>(utt_rng.next_below(
                               spec.phones_per_utt_max - spec.phones_per_utt_min + 1));
            std::vector<int> phones(n_phones);
            bool any_voiced = false;
            for (int& p : phones) {
                p = static_cast<int>(utt_rng.next_below(spec.n_phonemes));
                any_voiced = any_voiced || truth.phone_voiced[p];
            }
            if (!any_voiced) phones[utt_rng.next_below(n_phones)] = 0;

            std::vector<int> durations(n_phones);
            int total = 0;
            for (int& d : durations) {
                d = spec.frames_per_phone_min +
                    static_cast<int>(utt_rng.next_below(
                        spec.frames_per_phone_max - spec.frames_per_phone_min + 1));
                total += d;
            }
            if (total == 0) throw ConfigError("degenerate spec: zero frames");

            u.mel = FrameMatrix(spec.mel_dim, total);
            u.f0_raw.resize(total);
            u.vuv.resize(total);
            u.phoneme_ids.resize(total);

            // slow sentence-level f0 drift in the log domain
            double drift_phase = utt_rng.next_uniform() * 2.0 * std::numbers::pi;
            double drift_depth = 0.05 + 0.05 * utt_rng.next_uniform();
            int t = 0;
            for (int pi = 0; pi < n_phones; ++pi) {
                int p = phones[pi];
                for (int d = 0; d < durations[pi]; ++d, ++t) {
                    u.phoneme_ids[t] = static_cast<uint32_t>(p);
                    u.vuv[t] = truth.phone_voiced[p];
                    if (u.vuv[t]) {
                        double drift = drift_depth *
                                       std::sin(drift_phase + 2.0 * std::numbers::pi * t / total);
                        u.f0_raw[t] = truth.speaker_base_f0[s] * std::exp(drift);
                    } else {
                        u.f0_raw[t] = 0.0;
                    }
                }
            }

            auto f0n = normalize_f0(interpolate_f0(u.f0_raw, u.vuv));
            const double f0_scale = truth.f0_component_scale();
            for (t = 0; t < total; ++t) {
                int p = static_cast<int>(u.phoneme_ids[t]);
                for (int c = 0; c < spec.mel_dim; ++c) {
                    u.mel.at(c, t) = truth.phone_patterns[p][c] + truth.speaker_offsets[s][c] +
                                     f0_scale * f0n[t] * truth.f0_direction[c] +
                                     spec.noise_scale * utt_rng.next_normal();
                }
            }

            u.words.reserve(n_phones);
            for (int p : phones) u.words.push_back("w" + std::to_string(p));
            corpus.utterances.push_back(std::move(u));
        }
    }

    corpus.truth = std::move(truth);
    return corpus;
}

namespace {

template <typename T>
void write_raw(std::ofstream& os, const T* data, size_t count) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
}

template <typename T>
void read_raw(std::ifstream& is, T* data, size_t count, const std::string& file,
              const std::string& field) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
    if (!is) throw FormatError(file + ": truncated while reading " + field);
}

constexpr char kUttMagic[4] = {'F', 'C', 'V', '1'};

}  // namespace

void write_corpus(const std::string& dir, const Corpus& corpus) {
    fs::create_directories(dir);
    ordered_json index = ordered_json::array();
    for (const auto& u : corpus.utterances) {
        index.push_back({{"id", u.id}, {"speaker_id", u.speaker_id}, {"words", u.words}});
        std::string path = dir + "/" + u.id + ".fcv";
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open " + path + " for writing");
        write_raw(os, kUttMagic, 4);
        uint32_t channels = static_cast<uint32_t>(u.mel.channels);
        uint32_t frames = static_cast<uint32_t>(u.mel.frames);
        write_raw(os, &channels, 1);
        write_raw(os, &frames, 1);
        write_raw(os, u.mel.values.data(), u.mel.values.size());
        write_raw(os, u.f0_raw.data(), u.f0_raw.size());
        write_raw(os, u.vuv.data(), u.vuv.size());
        write_raw(os, u.phoneme_ids.data(), u.phoneme_ids.size());
    }
    std::ofstream idx(dir + "/index.json");
    idx << index.dump(2) << "\n";
    write_speaker_table(dir + "/speakers.json", corpus.speakers);
    if (corpus.truth) write_truth(dir + "/truth.json", *corpus.truth);
}

Corpus read_corpus(const std::string& dir) {
    std::ifstream idx(dir + "/index.json");
    if (!idx) throw FormatError(dir + "/index.json: cannot open");
    ordered_json index = ordered_json::parse(idx, nullptr, true);

    Corpus corpus;
    for (const auto& row : index) {
        Utterance u;
        u.id = row.at("id").get<std::string>();
        u.speaker_id = row.at("speaker_id").get<std::string>();
        u.words = row.at("words").get<std::vector<std::string>>();

        std::string path = dir + "/" + u.id + ".fcv";
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError(path + ": cannot open");
        char magic[4];
        read_raw(is, magic, 4, path, "magic");
        if (std::memcmp(magic, kUttMagic, 4) != 0) throw FormatError(path + ": bad magic bytes");
        uint32_t channels = 0, frames = 0;
        read_raw(is, &channels, 1, path, "channels");
        read_raw(is, &frames, 1, path, "frames");
        if (channels == 0 || frames == 0)
            throw FormatError(path + ": zero dimension in header");
        u.mel = FrameMatrix(static_cast<int>(channels), static_cast<int>(frames));
        u.f0_raw.resize(frames);
        u.vuv.resize(frames);
        u.phoneme_ids.resize(frames);
        read_raw(is, u.mel.values.data(), u.mel.values.size(), path, "mel");
        read_raw(is, u.f0_raw.data(), frames, path, "f0_raw");
        read_raw(is, u.vuv.data(), frames, path, "vuv");
        read_raw(is, u.phoneme_ids.data(), frames, path, "phoneme_ids");
        corpus.utterances.push_back(std::move(u));
    }
    corpus.speakers = read_speaker_table(dir + "/speakers.json");
    if (fs::exists(dir + "/truth.json")) corpus.truth = read_truth(dir + "/truth.json");
    return corpus;
}

void write_speaker_table(const std::string& path, const SpeakerTable& table) {
    ordered_json j = ordered_json::object();
    for (const auto& [id, embed] : table.embeddings) j[id] = embed;
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
}

SpeakerTable read_speaker_table(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    ordered_json j = ordered_json::parse(is);
    SpeakerTable table;
    for (auto it = j.begin(); it != j.end(); ++it)
        table.embeddings[it.key()] = it.value().get<std::vector<double>>();
    int d = table.dim();
    for (const auto& [id, embed] : table.embeddings)
        if (static_cast<int>(embed.size()) != d)
            throw FormatError(path + ": embedding dim mismatch for '" + id + "'");
    return table;
}

void write_truth(const std::string& path, const SynthTruth& truth) {
    ordered_json j;
    j["spec"] = {{"n_speakers", truth.spec.n_speakers},
                 {"n_phonemes", truth.spec.n_phonemes},
                 {"mel_dim", truth.spec.mel_dim},
                 {"frames_per_phone_min", truth.spec.frames_per_phone_min},
                 {"frames_per_phone_max", truth.spec.frames_per_phone_max},
                 {"phones_per_utt_min", truth.spec.phones_per_utt_min},
                 {"phones_per_utt_max", truth.spec.phones_per_utt_max},
                 {"utterances_per_speaker", truth.spec.utterances_per_speaker},
                 {"speaker_embed_dim", truth.spec.speaker_embed_dim},
                 {"speaker_offset_scale", truth.spec.speaker_offset_scale},
                 {"phone_pattern_scale", truth.spec.phone_pattern_scale},
                 {"noise_scale", truth.spec.noise_scale},
                 {"base_f0_min_hz", truth.spec.base_f0_min_hz},
                 {"base_f0_max_hz", truth.spec.base_f0_max_hz},
                 {"seed", truth.spec.seed}};
    j["speaker_offsets"] = truth.speaker_offsets;
    j["phone_patterns"] = truth.phone_patterns;
    j["phone_voiced"] = truth.phone_voiced;
    j["f0_direction"] = truth.f0_direction;
    j["speaker_base_f0"] = truth.speaker_base_f0;
    j["embed_projection"] = truth.embed_projection;
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
}

SynthTruth read_truth(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    ordered_json j = ordered_json::parse(is);
    SynthTruth truth;
    const auto& s = j.at("spec");
    truth.spec.n_speakers = s.at("n_speakers").get<int>();
    truth.spec.n_phonemes = s.at("n_phonemes").get<int>();
    truth.spec.mel_dim = s.at("mel_dim").get<int>();
    truth.spec.frames_per_phone_min = s.at("frames_per_phone_min").get<int>();
    truth.spec.frames_per_phone_max = s.at("frames_per_phone_max").get<int>();
    truth.spec.phones_per_utt_min = s.at("phones_per_utt_min").get<int>();
    truth.spec.phones_per_utt_max = s.at("phones_per_utt_max").get<int>();
    truth.spec.utterances_per_speaker = s.at("utterances_per_speaker").get<int>();
    truth.spec.speaker_embed_dim = s.at("speaker_embed_dim").get<int>();
    truth.spec.speaker_offset_scale = s.at("speaker_offset_scale").get<double>();
    truth.spec.phone_pattern_scale = s.at("phone_pattern_scale").get<double>();
    truth.spec.noise_scale = s.at("noise_scale").get<double>();
    truth.spec.base_f0_min_hz = s.at("base_f0_min_hz").get<double>();
    truth.spec.base_f0_max_hz = s.at("base_f0_max_hz").get<double>();
    truth.spec.seed = s.at("seed").get<uint64_t>();
    truth.speaker_offsets = j.at("speaker_offsets").get<std::vector<std::vector<double>>>();
    truth.phone_patterns = j.at("phone_patterns").get<std::vector<std::vector<double>>>();
    truth.phone_voiced = j.at("phone_voiced").get<std::vector<uint8_t>>();
    truth.f0_direction = j.at("f0_direction").get<std::vector<double>>();
    truth.speaker_base_f0 = j.at("speaker_base_f0").get<std::vector<double>>();
    truth.embed_projection = j.at("embed_projection").get<std::vector<std::vector<double>>>();
    return truth;
}

}  // namespace flowvc
