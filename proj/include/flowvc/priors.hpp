#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowvc/flow.hpp"
#include "flowvc/nn.hpp"

namespace flowvc {

enum class PriorMode { Fixed, Pretrained, Joint };

std::string prior_mode_name(PriorMode mode);
PriorMode prior_mode_from_name(const std::string& name);

struct PhonemeEncoderConfig {
    int n_phonemes = 10;
    int embed_dim = 16;
    int hidden = 32;
    int mel_dim = 8;
    int kernel = 3;

    void validate() const;
};

struct PhonemeEncoderCache {
    std::vector<uint32_t> ids;
    FrameMatrix embedded;
    FrameMatrix pre1, h1, pre2, h2;
};

// Phoneme embedding table followed by a conv stack over time; emits per-frame
// mu_phone (and a log-sigma head used only while pre-training the variational
// prior).
struct PhonemeEncoder {
    PhonemeEncoderConfig cfg;
    size_t embed_off = 0;
    Conv1d conv1, conv2, head_mu, head_logsig;

    void build(ParamStore& store, const PhonemeEncoderConfig& config, SeededRng& rng);

    FrameMatrix forward_mu(const ParamStore& store, std::span<const uint32_t> phoneme_ids,
                           PhonemeEncoderCache* cache = nullptr) const;
    // Both heads, for pre-training.
    std::pair<FrameMatrix, FrameMatrix> forward_mu_logsig(const ParamStore& store,
                                                          std::span<const uint32_t> phoneme_ids,
                                                          PhonemeEncoderCache* cache) const;
    // Accumulates encoder parameter gradients from head gradients; dlogsig may
    // be null when only the mu head was used.
    void backward(ParamStore& store, const PhonemeEncoderCache& cache, const FrameMatrix& dmu,
                  const FrameMatrix* dlogsig) const;
};

// Per-element Gaussian prior parameters aligned with the LatentBundle layout.
// Sigma is fixed to 1 in every mode.
struct PriorField {
    LatentBundle mu;
    static constexpr double sigma = 1.0;

    size_t total_elements() const { return mu.total_elements(); }
};

PriorField fixed_prior(const LatentBundle& shape_like);

// mu_phone computed per original frame, then routed through the data path's
// squeeze/split permutation.
PriorField phoneme_prior_field(const PhonemeEncoder& enc, const ParamStore& store,
                               std::span<const uint32_t> phoneme_ids, const FlowStack& stack,
                               PhonemeEncoderCache* cache = nullptr);

double prior_log_density(const LatentBundle& z, const PriorField& field);

// dL/dz into dz (allocated to match), dL/dmu returned in bundle layout.
LatentBundle prior_log_density_backward(const LatentBundle& z, const PriorField& field,
                                        double coef, LatentBundle* dz);

struct PretrainConfig {
    int steps = 600;
    int batch_size = 8;
    double lr = 1e-3;
    double beta_max = 1e-2;  // KLD weight after warm-up
    double clip_norm = 5.0;
    uint64_t seed = 0;
};

struct PretrainResult {
    ParamStore store;  // enc.* (and dec.*) entries
    PhonemeEncoder encoder;
    std::vector<double> loss_history;
};

// Variational phoneme encoder + small frame decoder trained with
// reconstruction MSE and a linearly warmed-up KLD term.
PretrainResult pretrain_phoneme_prior(const Corpus& corpus, const PhonemeEncoderConfig& enc_cfg,
                                      const PretrainConfig& cfg);

}  // namespace flowvc
