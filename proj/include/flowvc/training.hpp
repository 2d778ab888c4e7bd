#pragma once

#include <string>
#include <vector>

#include "flowvc/model.hpp"
#include "flowvc/optim.hpp"

namespace flowvc {

struct TrainConfig {
    int batch_size = 16;
    int steps = 1000;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;
    uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 = final checkpoint only

    void validate() const;
};

struct LossBreakdown {
    double nll = 0.0;           // -mean over batch of (prior term + logdet)
    double bits_per_dim = 0.0;  // total NLL / (total elements * ln 2)
    double prior_term = 0.0;    // mean over batch of log P_Z(z|c)
    double logdet_term = 0.0;   // mean over batch of total logdet
};

struct LossRecord {
    int step = 0;
    double nll = 0.0;
    double bits_per_dim = 0.0;
};

// Exact Eq.-of-change-of-variables NLL of a batch under the model's prior
// mode.  When accumulate_grads is true, analytic gradients of the NLL are
// accumulated into the model's parameter store.
LossBreakdown nll_loss(Model& model, const std::vector<const Utterance*>& batch,
                       const SpeakerTable& speakers, bool accumulate_grads);

struct TrainResult {
    std::vector<LossRecord> history;
    std::string checkpoint_path;
};

// Deterministic mini-batch training.  The batch schedule is a pure function
// of (seed, step) so a reloaded checkpoint resumes with an identical
// next-step loss.  In pretrained mode the encoder parameters are frozen.
TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::string& out_dir);

// Closed-form per-channel diagonal Gaussian baseline, in bits per dimension.
double diagonal_gaussian_bits_per_dim(const Corpus& corpus);

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history);

}  // namespace flowvc
