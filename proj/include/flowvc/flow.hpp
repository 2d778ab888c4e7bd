#pragma once

#include <optional>
#include <vector>

#include "flowvc/features.hpp"
#include "flowvc/nn.hpp"
#include "flowvc/numerics.hpp"

namespace flowvc {

struct FlowConfig {
    int mel_dim = 80;
    int n_steps = 12;
    int squeeze_factor = 2;
    int split_every = 4;
    int split_channels = 16;
    int hidden_width = 32;
    int speaker_dim = 8;
    int coupling_kernel = 3;
    bool text_conditioned = false;

    int squeezed_channels() const { return mel_dim * squeeze_factor; }
    int cond_channels() const {
        return speaker_dim + 2 * squeeze_factor +
               (text_conditioned ? mel_dim * squeeze_factor : 0);
    }
    // 1-based step indices after which a split happens.
    std::vector<int> split_points() const;
    // Channel count entering each step, split part sizes, final channel count.
    std::vector<int> channels_per_step() const;
    int final_channels() const;
    void validate() const;
};

// Latents factored out at split points plus the final latent; element count
// always equals the (trimmed) input element count.
struct LatentBundle {
    std::vector<FrameMatrix> split_parts;
    FrameMatrix final_part;

    size_t total_elements() const;
    std::vector<double> flatten() const;
};

struct ActNormLayer {
    int channels = 0;
    size_t log_scale_off = 0;
    size_t bias_off = 0;
    bool initialized = false;

    void build(ParamStore& store, const std::string& name, int n_channels);
    // Data-dependent init: per-channel zero mean / unit variance on the batch.
    void data_init(ParamStore& store, const std::vector<const FrameMatrix*>& batch);

    FrameMatrix forward(const ParamStore& store, const FrameMatrix& x, double* logdet) const;
    FrameMatrix inverse(const ParamStore& store, const FrameMatrix& y) const;
    FrameMatrix backward(ParamStore& store, const FrameMatrix& x, const FrameMatrix& dy,
                         double logdet_coef) const;
};

struct InvLinearLayer {
    int channels = 0;
    size_t w_off = 0;

    void build(ParamStore& store, const std::string& name, int n_channels, SeededRng& rng);
    SquareMatrix weight(const ParamStore& store) const;

    FrameMatrix forward(const ParamStore& store, const FrameMatrix& x, double* logdet) const;
    FrameMatrix inverse(const ParamStore& store, const FrameMatrix& y) const;
    FrameMatrix backward(ParamStore& store, const FrameMatrix& x, const FrameMatrix& dy,
                         double logdet_coef) const;
    // Jitter toward +eps*I if the weight has drifted near singular.
    void ensure_nonsingular(ParamStore& store) const;
};

struct CouplingCache {
    FrameMatrix net_in;
    FrameMatrix pre1, h1, pre2, h2, out;
};

// Conditioned affine coupling: the conditioner half passes through unchanged,
// the other half gets y_b = exp(tanh(prescale)) * x_b + shift where
// (shift, prescale) come from a gated conv net over [x_a ; conditioning].
struct AffineCouplingLayer {
    int channels = 0;
    int cond_channels = 0;
    int ca = 0;  // pass-through half
    int cb = 0;  // transformed half
    bool flip = false;
    Conv1d conv1, conv2, conv_out;

    void build(ParamStore& store, const std::string& name, int n_channels, int n_cond,
               int hidden, int kernel, bool flip_halves, SeededRng& rng);

    FrameMatrix forward(const ParamStore& store, const FrameMatrix& x, const FrameMatrix& cond,
                        double* logdet, CouplingCache* cache) const;
    FrameMatrix inverse(const ParamStore& store, const FrameMatrix& y,
                        const FrameMatrix& cond) const;
    FrameMatrix backward(ParamStore& store, const FrameMatrix& x, const CouplingCache& cache,
                         const FrameMatrix& dy, double logdet_coef, FrameMatrix* dcond) const;
};

struct FlowStep {
    ActNormLayer actnorm;
    InvLinearLayer mix;
    AffineCouplingLayer coupling;
};

struct StepCache {
    FrameMatrix actnorm_in;
    FrameMatrix mix_in;
    FrameMatrix coupling_in;
    CouplingCache coupling;
};

struct EncodeCache {
    std::vector<StepCache> steps;
};

struct EncodeResult {
    LatentBundle bundle;
    double logdet = 0.0;
    int trimmed_frames = 0;  // trailing frames dropped for squeeze divisibility
};

FrameMatrix squeeze(const FrameMatrix& x, int factor);
FrameMatrix unsqueeze(const FrameMatrix& x, int factor);
// factored = last k channels, kept = the rest.
std::pair<FrameMatrix, FrameMatrix> split_channels(const FrameMatrix& x, int k);
FrameMatrix merge_channels(const FrameMatrix& kept, const FrameMatrix& factored);

class FlowStack {
  public:
    void build(ParamStore& store, const FlowConfig& cfg, SeededRng& rng);

    const FlowConfig& config() const { return cfg_; }
    std::vector<FlowStep>& steps() { return steps_; }
    const std::vector<FlowStep>& steps() const { return steps_; }

    // Conditioning matrix at the squeezed frame rate; mu_phone (mel_dim x
    // frames) is required iff the config is text-conditioned.
    FrameMatrix build_cond_matrix(const ConditioningSet& cond,
                                  const FrameMatrix* mu_phone) const;
    // Gradient of the phoneme-conditioning block, mapped back to per-frame
    // mu_phone layout (text-conditioned mode).
    FrameMatrix phoneme_cond_grad(const FrameMatrix& dcond) const;

    EncodeResult encode(const ParamStore& store, const FrameMatrix& x, const FrameMatrix& cond,
                        EncodeCache* cache = nullptr) const;
    FrameMatrix decode(const ParamStore& store, const LatentBundle& z,
                       const FrameMatrix& cond) const;

    // Reverse pass: accumulates parameter gradients, returns dL/dcond.
    // dbundle holds dL/dz in bundle layout; logdet_coef multiplies the total
    // log-determinant in the loss.  dx, when non-null, receives dL/dx.
    FrameMatrix backward(ParamStore& store, const EncodeCache& cache, const LatentBundle& dbundle,
                         double logdet_coef, FrameMatrix* dx = nullptr) const;

    // Route a per-frame field (mel_dim x frames) through the same squeeze and
    // split permutation as the data path; used to align prior means with the
    // latent layout.
    LatentBundle route_to_latent_layout(const FrameMatrix& field) const;
    // Inverse permutation (gradients of the routed field).
    FrameMatrix route_from_latent_layout(const LatentBundle& bundle) const;

    void data_dependent_init(ParamStore& store,
                             const std::vector<std::pair<const FrameMatrix*, const FrameMatrix*>>&
                                 batch /* (raw x, cond matrix) */);
    void ensure_nonsingular(ParamStore& store) const;
    bool is_initialized() const;
    void mark_initialized();

  private:
    FlowConfig cfg_;
    std::vector<FlowStep> steps_;
};

}  // namespace flowvc
