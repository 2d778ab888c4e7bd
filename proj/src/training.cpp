#include "flowvc/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

namespace flowvc {

void TrainConfig::validate() const {
    if (batch_size < 1 || steps < 0) throw ConfigError("train config: bad batch/steps");
    if (!(lr > 0.0)) throw ConfigError("train config: learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("train config: moment coefficients must be in [0, 1)");
}

namespace {

FrameMatrix pad_frames(const FrameMatrix& m, int frames) {
    if (m.frames == frames) return m;
    FrameMatrix out(m.channels, frames);
    for (int c = 0; c < m.channels; ++c)
        std::copy(m.row(c), m.row(c) + m.frames, out.row(c));
    return out;
}

// Per-utterance forward (+ optional backward) of the exact likelihood.
// Returns (log P_Z, logdet, latent element count).
struct UttLike {
    double prior_logp = 0.0;
    double logdet = 0.0;
    size_t elements = 0;
};

UttLike utterance_likelihood(Model& model, const Utterance& u, const SpeakerTable& speakers,
                             double grad_coef, bool accumulate_grads) {
    ConditioningSet cond =
        build_conditioning(u, speakers, model.cfg.flow.text_conditioned);

    PhonemeEncoderCache enc_cache;
    FrameMatrix mu_phone;
    if (model.cfg.flow.text_conditioned)
        mu_phone = model.encoder->forward_mu(model.store, u.phoneme_ids, &enc_cache);

    FrameMatrix condm = model.stack.build_cond_matrix(
        cond, model.cfg.flow.text_conditioned ? &mu_phone : nullptr);

    EncodeCache cache;
    EncodeResult enc = model.stack.encode(model.store, u.mel, condm,
                                          accumulate_grads ? &cache : nullptr);

    PriorField field;
    PhonemeEncoderCache prior_cache;
    if (model.cfg.mode == PriorMode::Fixed) {
        field = fixed_prior(enc.bundle);
    } else {
        field = phoneme_prior_field(*model.encoder, model.store, u.phoneme_ids, model.stack,
                                    &prior_cache);
    }

    UttLike out;
    out.prior_logp = prior_log_density(enc.bundle, field);
    out.logdet = enc.logdet;
    out.elements = enc.bundle.total_elements();

    if (accumulate_grads) {
        LatentBundle dz;
        LatentBundle dmu = prior_log_density_backward(enc.bundle, field, grad_coef, &dz);
        FrameMatrix dcond = model.stack.backward(model.store, cache, dz, grad_coef);
        if (model.cfg.flow.text_conditioned) {
            FrameMatrix dmu_phone =
                pad_frames(model.stack.phoneme_cond_grad(dcond), u.mel.frames);
            model.encoder->backward(model.store, enc_cache, dmu_phone, nullptr);
        }
        if (model.cfg.mode == PriorMode::Joint) {
            FrameMatrix dmu_phone =
                pad_frames(model.stack.route_from_latent_layout(dmu), u.mel.frames);
            model.encoder->backward(model.store, prior_cache, dmu_phone, nullptr);
        }
        // pretrained mode: encoder frozen, no gradient flows into it
    }
    return out;
}

}  // namespace

LossBreakdown nll_loss(Model& model, const std::vector<const Utterance*>& batch,
                       const SpeakerTable& speakers, bool accumulate_grads) {
    if (batch.empty()) throw TrainingError("nll_loss: empty batch");
    const double grad_coef = -1.0 / static_cast<double>(batch.size());
    LossBreakdown out;
    double total_logp = 0.0;
    size_t total_elements = 0;
    for (const Utterance* u : batch) {
        UttLike like = utterance_likelihood(model, *u, speakers, grad_coef, accumulate_grads);
        double logp = like.prior_logp + like.logdet;
        if (!std::isfinite(logp))
            throw TrainingError("non-finite likelihood for utterance '" + u->id + "'");
        out.prior_term += like.prior_logp / static_cast<double>(batch.size());
        out.logdet_term += like.logdet / static_cast<double>(batch.size());
        total_logp += logp;
        total_elements += like.elements;
    }
    out.nll = -total_logp / static_cast<double>(batch.size());
    out.bits_per_dim =
        -total_logp / (static_cast<double>(total_elements) * std::numbers::ln2);
    return out;
}

namespace {

// Bucket utterances by trimmed frame count, then shuffle deterministically.
// Pure function of (corpus, batch_size, seed, epoch).
std::vector<std::vector<size_t>> epoch_batches(const Corpus& corpus, int squeeze_factor,
                                               int batch_size, uint64_t seed, int epoch) {
    std::map<int, std::vector<size_t>> buckets;
    for (size_t i = 0; i < corpus.utterances.size(); ++i) {
        int frames = corpus.utterances[i].frames();
        buckets[frames - frames % squeeze_factor].push_back(i);
    }
    SeededRng rng = SeededRng(seed).child(0x5a5a5a5aULL + static_cast<uint64_t>(epoch));
    std::vector<std::vector<size_t>> batches;
    for (auto& [frames, ids] : buckets) {
        for (size_t i = ids.size(); i > 1; --i)
            std::swap(ids[i - 1], ids[rng.next_below(i)]);
        for (size_t start = 0; start < ids.size(); start += batch_size) {
            size_t end = std::min(ids.size(), start + batch_size);
            batches.emplace_back(ids.begin() + start, ids.begin() + end);
        }
    }
    for (size_t i = batches.size(); i > 1; --i)
        std::swap(batches[i - 1], batches[rng.next_below(i)]);
    return batches;
}

}  // namespace

TrainResult train(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::string& out_dir) {
    cfg.validate();
    if (corpus.utterances.empty()) throw TrainingError("train: empty corpus");
    if (model.cfg.mode == PriorMode::Pretrained) {
        // A freshly built encoder is all zeros in the conv biases but the
        // embed table is random; require the caller to have loaded one.
        if (!model.encoder) throw ConfigError("pretrained mode requires an encoder");
    }
    std::filesystem::create_directories(out_dir);

    std::vector<uint8_t> frozen(model.store.total_size(), 0);
    if (model.cfg.mode == PriorMode::Pretrained) {
        for (const auto& e : model.store.entries())
            if (e.name.rfind("enc.", 0) == 0)
                std::fill(frozen.begin() + e.offset, frozen.begin() + e.offset + e.size, 1);
    }

    AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm};
    AdamState adam;
    adam.init(model.store.total_size());

    TrainResult result;
    int batches_per_epoch = 0;
    std::vector<std::vector<size_t>> batches;
    int epoch = -1;

    auto batch_for_step = [&](int step) -> const std::vector<size_t>& {
        if (batches_per_epoch == 0) {
            batches = epoch_batches(corpus, model.cfg.flow.squeeze_factor, cfg.batch_size,
                                    cfg.seed, 0);
            batches_per_epoch = static_cast<int>(batches.size());
            epoch = 0;
        }
        int want_epoch = step / batches_per_epoch;
        if (want_epoch != epoch) {
            batches = epoch_batches(corpus, model.cfg.flow.squeeze_factor, cfg.batch_size,
                                    cfg.seed, want_epoch);
            epoch = want_epoch;
        }
        return batches[step % batches_per_epoch];
    };

    if (!model.stack.is_initialized()) {
        const auto& first = batch_for_step(model.trained_steps);
        std::vector<ConditioningSet> conds;
        std::vector<FrameMatrix> cond_mats;
        conds.reserve(first.size());
        for (size_t idx : first) {
            const Utterance& u = corpus.utterances[idx];
            conds.push_back(
                build_conditioning(u, corpus.speakers, model.cfg.flow.text_conditioned));
            FrameMatrix mu_phone;
            if (model.cfg.flow.text_conditioned)
                mu_phone = model.encoder->forward_mu(model.store, u.phoneme_ids, nullptr);
            cond_mats.push_back(model.stack.build_cond_matrix(
                conds.back(), model.cfg.flow.text_conditioned ? &mu_phone : nullptr));
        }
        std::vector<std::pair<const FrameMatrix*, const FrameMatrix*>> init_batch;
        for (size_t i = 0; i < first.size(); ++i)
            init_batch.emplace_back(&corpus.utterances[first[i]].mel, &cond_mats[i]);
        model.stack.data_dependent_init(model.store, init_batch);
    }

    const int start = model.trained_steps;
    for (int step = start; step < start + cfg.steps; ++step) {
        const auto& idxs = batch_for_step(step);
        std::vector<const Utterance*> batch;
        batch.reserve(idxs.size());
        for (size_t idx : idxs) batch.push_back(&corpus.utterances[idx]);

        model.store.zero_grads();
        LossBreakdown loss = nll_loss(model, batch, corpus.speakers, true);
        for (double g : model.store.flat_grads())
            if (!std::isfinite(g))
                throw TrainingError("non-finite gradient at step " + std::to_string(step));
        adam_step(adam, model.store.flat_values(), model.store.flat_grads(), adam_cfg,
                  &frozen);
        model.stack.ensure_nonsingular(model.store);
        model.trained_steps = step + 1;
        result.history.push_back({step, loss.nll, loss.bits_per_dim});

        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(out_dir + "/model_step" + std::to_string(step + 1) + ".fckp",
                            model);
    }

    result.checkpoint_path = out_dir + "/model.fckp";
    save_checkpoint(result.checkpoint_path, model);
    write_loss_csv(out_dir + "/loss.csv", result.history);
    return result;
}

double diagonal_gaussian_bits_per_dim(const Corpus& corpus) {
    if (corpus.utterances.empty()) throw ConfigError("empty corpus");
    const int dim = corpus.utterances.front().mel.channels;
    std::vector<double> mean(dim, 0.0), var(dim, 0.0);
    size_t frames = 0;
    for (const auto& u : corpus.utterances) {
        frames += static_cast<size_t>(u.mel.frames);
        for (int c = 0; c < dim; ++c) {
            const double* r = u.mel.row(c);
            for (int t = 0; t < u.mel.frames; ++t) mean[c] += r[t];
        }
    }
    for (int c = 0; c < dim; ++c) mean[c] /= static_cast<double>(frames);
    for (const auto& u : corpus.utterances)
        for (int c = 0; c < dim; ++c) {
            const double* r = u.mel.row(c);
            for (int t = 0; t < u.mel.frames; ++t) var[c] += (r[t] - mean[c]) * (r[t] - mean[c]);
        }
    double nll = 0.0;  // per frame
    for (int c = 0; c < dim; ++c) {
        var[c] /= static_cast<double>(frames);
        nll += 0.5 * std::log(2.0 * std::numbers::pi * var[c]) + 0.5;
    }
    return nll / (dim * std::numbers::ln2);
}

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << "step,nll,bits_per_dim\n";
    os.precision(17);
    for (const auto& r : history) os << r.step << "," << r.nll << "," << r.bits_per_dim << "\n";
}

}  // namespace flowvc
