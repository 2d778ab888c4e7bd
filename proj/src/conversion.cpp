#include "flowvc/conversion.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace flowvc {

using ordered_json = nlohmann::ordered_json;

FrameMatrix convert(Model& model, const Utterance& u, const std::string& target_speaker,
                    const SpeakerTable& table, int* trimmed_frames) {
    const bool text = model.cfg.flow.text_conditioned;
    ConditioningSet cond = build_conditioning(u, table, text);

    FrameMatrix mu_phone;
    if (text) mu_phone = model.encoder->forward_mu(model.store, u.phoneme_ids, nullptr);
    const FrameMatrix* mu_ptr = text ? &mu_phone : nullptr;

    FrameMatrix cond_src = model.stack.build_cond_matrix(cond, mu_ptr);
    EncodeResult enc = model.stack.encode(model.store, u.mel, cond_src);
    if (trimmed_frames) *trimmed_frames = enc.trimmed_frames;

    ConditioningSet cond_tgt = cond;
    cond_tgt.speaker = table.lookup(target_speaker);
    FrameMatrix cond_mat_tgt = model.stack.build_cond_matrix(cond_tgt, mu_ptr);
    return model.stack.decode(model.store, enc.bundle, cond_mat_tgt);
}

BatchConvertResult batch_convert(Model& model, const Corpus& corpus,
                                 const std::vector<ConversionRequest>& pairs) {
    BatchConvertResult result;
    result.converted.speakers = corpus.speakers;
    result.converted.truth = corpus.truth;
    for (const auto& req : pairs) {
        ConversionManifestRow row;
        row.source_id = req.utterance_id;
        row.target_speaker = req.target_speaker;
        row.output_id = req.utterance_id + "__to__" + req.target_speaker;
        try {
            const Utterance& src = corpus.by_id(req.utterance_id);
            row.source_speaker = src.speaker_id;
            int trimmed = 0;
            FrameMatrix out = convert(model, src, req.target_speaker, corpus.speakers, &trimmed);
            row.trimmed_frames = trimmed;

            Utterance conv;
            conv.id = row.output_id;
            conv.speaker_id = req.target_speaker;
            conv.mel = std::move(out);
            const size_t kept = static_cast<size_t>(conv.mel.frames);
            conv.f0_raw.assign(src.f0_raw.begin(), src.f0_raw.begin() + kept);
            conv.vuv.assign(src.vuv.begin(), src.vuv.begin() + kept);
            conv.phoneme_ids.assign(src.phoneme_ids.begin(), src.phoneme_ids.begin() + kept);
            conv.words = src.words;
            result.converted.utterances.push_back(std::move(conv));
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        result.manifest.push_back(std::move(row));
    }
    return result;
}

void write_batch_conversion(const std::string& out_dir, const BatchConvertResult& result) {
    std::filesystem::create_directories(out_dir);
    write_corpus(out_dir, result.converted);
    ordered_json manifest = ordered_json::array();
    for (const auto& row : result.manifest) {
        manifest.push_back({{"source_id", row.source_id},
                            {"source_speaker", row.source_speaker},
                            {"target_speaker", row.target_speaker},
                            {"output_id", row.output_id},
                            {"output_path", row.ok() ? row.output_id + ".fcv" : ""},
                            {"trimmed_frames", row.trimmed_frames},
                            {"error", row.error}});
    }
    std::ofstream os(out_dir + "/manifest.json");
    if (!os) throw FormatError("cannot open " + out_dir + "/manifest.json for writing");
    os << manifest.dump(2) << "\n";
}

std::vector<ConversionRequest> read_pairs_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(path + ": cannot open");
    std::vector<ConversionRequest> pairs;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first && line.rfind("utterance_id", 0) == 0) {
            first = false;
            continue;  // header
        }
        first = false;
        auto comma = line.find(',');
        if (comma == std::string::npos)
            throw FormatError(path + ": expected 'utterance_id,target_speaker' row: " + line);
        pairs.push_back({line.substr(0, comma), line.substr(comma + 1)});
    }
    return pairs;
}

}  // namespace flowvc
