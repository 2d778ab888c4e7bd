#pragma once

#include <optional>
#include <string>

#include "flowvc/flow.hpp"
#include "flowvc/priors.hpp"

namespace flowvc {

struct ModelConfig {
    FlowConfig flow;
    PriorMode mode = PriorMode::Fixed;
    std::optional<PhonemeEncoderConfig> encoder;

    // The encoder is needed for text conditioning and for phoneme priors.
    bool uses_encoder() const { return flow.text_conditioned || mode != PriorMode::Fixed; }
    void validate() const;
};

struct Model {
    ModelConfig cfg;
    ParamStore store;
    FlowStack stack;
    std::optional<PhonemeEncoder> encoder;
    int trained_steps = 0;

    static Model build(const ModelConfig& cfg, SeededRng& rng);
};

// "FCKP" container: magic, JSON config block (with a parameter manifest of
// name/shape/offset), then a little-endian f64 blob.  Write-then-read is
// bitwise identity.
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

// Encoder-only checkpoint (enc.* section of the container).
void save_encoder_checkpoint(const std::string& path, const ParamStore& store,
                             const PhonemeEncoderConfig& cfg);
// Copies enc.* parameter values into a model whose encoder matches the saved
// config; returns the saved config.
PhonemeEncoderConfig load_encoder_checkpoint(const std::string& path, Model& model);
PhonemeEncoderConfig peek_encoder_config(const std::string& path);

// FNV-1a over the raw parameter bytes; used for freeze checks and
// reproducibility assertions.
uint64_t param_hash(const ParamStore& store, const std::string& prefix = "");

}  // namespace flowvc
