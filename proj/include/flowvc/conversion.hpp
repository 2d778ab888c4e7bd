#pragma once

#include <string>
#include <vector>

#include "flowvc/model.hpp"
#include "flowvc/training.hpp"

namespace flowvc {

struct ConversionRequest {
    std::string utterance_id;
    std::string target_speaker;
};

struct ConversionManifestRow {
    std::string source_id;
    std::string source_speaker;
    std::string target_speaker;
    std::string output_id;
    int trimmed_frames = 0;
    std::string error;  // empty on success

    bool ok() const { return error.empty(); }
};

// Encode under source conditioning, decode with the speaker embedding swapped
// to the target; f0, vuv and (in text mode) phonemes stay from the source.
// Output frame count is the trimmed input frame count.
FrameMatrix convert(Model& model, const Utterance& u, const std::string& target_speaker,
                    const SpeakerTable& table, int* trimmed_frames = nullptr);

struct BatchConvertResult {
    Corpus converted;  // speaker_id = target; f0/vuv/phonemes from source
    std::vector<ConversionManifestRow> manifest;
};

// Converts every pair; failures are recorded per row and do not stop the run.
BatchConvertResult batch_convert(Model& model, const Corpus& corpus,
                                 const std::vector<ConversionRequest>& pairs);

// Writes the converted corpus in the standard container format plus
// manifest.json.
void write_batch_conversion(const std::string& out_dir, const BatchConvertResult& result);

std::vector<ConversionRequest> read_pairs_csv(const std::string& path);

}  // namespace flowvc
