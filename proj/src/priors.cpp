#include "flowvc/priors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowvc/optim.hpp"

namespace flowvc {

std::string prior_mode_name(PriorMode mode) {
    switch (mode) {
        case PriorMode::Fixed: return "fixed";
        case PriorMode::Pretrained: return "pretrained";
        case PriorMode::Joint: return "joint";
    }
    throw ConfigError("unknown prior mode");
}

PriorMode prior_mode_from_name(const std::string& name) {
    if (name == "fixed") return PriorMode::Fixed;
    if (name == "pretrained") return PriorMode::Pretrained;
    if (name == "joint") return PriorMode::Joint;
    throw ConfigError("unknown prior mode '" + name + "'");
}

void PhonemeEncoderConfig::validate() const {
    if (n_phonemes < 1 || embed_dim < 1 || hidden < 1 || mel_dim < 1 || kernel < 1)
        throw ConfigError("phoneme encoder config: all dims must be positive");
}

void PhonemeEncoder::build(ParamStore& store, const PhonemeEncoderConfig& config,
                           SeededRng& rng) {
    config.validate();
    cfg = config;
    embed_off = store.add("enc.embed", {cfg.n_phonemes, cfg.embed_dim});
    double* e = store.values(embed_off);
    for (int i = 0; i < cfg.n_phonemes * cfg.embed_dim; ++i) e[i] = 0.1 * rng.next_normal();
    conv1.init(store, "enc.conv1", cfg.embed_dim, cfg.hidden, cfg.kernel, rng, 1.0);
    conv2.init(store, "enc.conv2", cfg.hidden, cfg.hidden, cfg.kernel, rng, 1.0);
    head_mu.init(store, "enc.head_mu", cfg.hidden, cfg.mel_dim, 1, rng, 0.1);
    // sigma starts at 1
    head_logsig.init(store, "enc.head_logsig", cfg.hidden, cfg.mel_dim, 1, rng, 0.0);
}

namespace {

FrameMatrix tanh_forward(const FrameMatrix& pre) {
    FrameMatrix out(pre.channels, pre.frames);
    for (size_t i = 0; i < pre.values.size(); ++i) out.values[i] = std::tanh(pre.values[i]);
    return out;
}

FrameMatrix tanh_backward(const FrameMatrix& h, const FrameMatrix& dh) {
    FrameMatrix dpre(h.channels, h.frames);
    for (size_t i = 0; i < h.values.size(); ++i)
        dpre.values[i] = dh.values[i] * (1.0 - h.values[i] * h.values[i]);
    return dpre;
}

}  // namespace

std::pair<FrameMatrix, FrameMatrix> PhonemeEncoder::forward_mu_logsig(
    const ParamStore& store, std::span<const uint32_t> phoneme_ids,
    PhonemeEncoderCache* cache) const {
    const int T = static_cast<int>(phoneme_ids.size());
    if (T == 0) throw ShapeError("phoneme encoder: empty id sequence");
    FrameMatrix embedded(cfg.embed_dim, T);
    const double* table = store.values(embed_off);
    for (int t = 0; t < T; ++t) {
        uint32_t id = phoneme_ids[t];
        if (id >= static_cast<uint32_t>(cfg.n_phonemes))
            throw LookupError("phoneme id " + std::to_string(id) + " out of inventory");
        for (int e = 0; e < cfg.embed_dim; ++e)
            embedded.at(e, t) = table[static_cast<size_t>(id) * cfg.embed_dim + e];
    }
    FrameMatrix pre1 = conv1.forward(store, embedded);
    FrameMatrix h1 = tanh_forward(pre1);
    FrameMatrix pre2 = conv2.forward(store, h1);
    FrameMatrix h2 = tanh_forward(pre2);
    FrameMatrix mu = head_mu.forward(store, h2);
    FrameMatrix logsig = head_logsig.forward(store, h2);
    if (cache) {
        cache->ids.assign(phoneme_ids.begin(), phoneme_ids.end());
        cache->embedded = std::move(embedded);
        cache->pre1 = std::move(pre1);
        cache->h1 = std::move(h1);
        cache->pre2 = std::move(pre2);
        cache->h2 = std::move(h2);
    }
    return {std::move(mu), std::move(logsig)};
}

FrameMatrix PhonemeEncoder::forward_mu(const ParamStore& store,
                                       std::span<const uint32_t> phoneme_ids,
                                       PhonemeEncoderCache* cache) const {
    return forward_mu_logsig(store, phoneme_ids, cache).first;
}

void PhonemeEncoder::backward(ParamStore& store, const PhonemeEncoderCache& cache,
                              const FrameMatrix& dmu, const FrameMatrix* dlogsig) const {
    FrameMatrix dh2 = head_mu.backward(store, cache.h2, dmu);
    if (dlogsig) {
        FrameMatrix extra = head_logsig.backward(store, cache.h2, *dlogsig);
        for (size_t i = 0; i < dh2.values.size(); ++i) dh2.values[i] += extra.values[i];
    }
    FrameMatrix dpre2 = tanh_backward(cache.h2, dh2);
    FrameMatrix dh1 = conv2.backward(store, cache.h1, dpre2);
    FrameMatrix dpre1 = tanh_backward(cache.h1, dh1);
    FrameMatrix dembed = conv1.backward(store, cache.embedded, dpre1);
    double* ge = store.grads(embed_off);
    for (int t = 0; t < dembed.frames; ++t) {
        size_t base = static_cast<size_t>(cache.ids[t]) * cfg.embed_dim;
        for (int e = 0; e < cfg.embed_dim; ++e) ge[base + e] += dembed.at(e, t);
    }
}

PriorField fixed_prior(const LatentBundle& shape_like) {
    PriorField field;
    for (const auto& p : shape_like.split_parts)
        field.mu.split_parts.emplace_back(p.channels, p.frames);
    field.mu.final_part = FrameMatrix(shape_like.final_part.channels,
                                      shape_like.final_part.frames);
    return field;
}

PriorField phoneme_prior_field(const PhonemeEncoder& enc, const ParamStore& store,
                               std::span<const uint32_t> phoneme_ids, const FlowStack& stack,
                               PhonemeEncoderCache* cache) {
    FrameMatrix mu_phone = enc.forward_mu(store, phoneme_ids, cache);
    PriorField field;
    field.mu = stack.route_to_latent_layout(mu_phone);
    return field;
}

namespace {

double part_log_density(const FrameMatrix& z, const FrameMatrix& mu) {
    if (z.channels != mu.channels || z.frames != mu.frames)
        throw ShapeError("prior_log_density: latent/prior shape mismatch");
    constexpr double half_log_2pi = 0.9189385332046727;
    double acc = 0.0;
    for (size_t i = 0; i < z.values.size(); ++i) {
        double r = z.values[i] - mu.values[i];
        acc += -half_log_2pi - 0.5 * r * r;
    }
    return acc;
}

}  // namespace

double prior_log_density(const LatentBundle& z, const PriorField& field) {
    if (z.split_parts.size() != field.mu.split_parts.size())
        throw ShapeError("prior_log_density: split part count mismatch");
    double acc = part_log_density(z.final_part, field.mu.final_part);
    for (size_t i = 0; i < z.split_parts.size(); ++i)
        acc += part_log_density(z.split_parts[i], field.mu.split_parts[i]);
    return acc;
}

LatentBundle prior_log_density_backward(const LatentBundle& z, const PriorField& field,
                                        double coef, LatentBundle* dz) {
    LatentBundle dmu;
    auto one_part = [&](const FrameMatrix& zp, const FrameMatrix& mup, FrameMatrix* dzp) {
        FrameMatrix g(zp.channels, zp.frames);
        if (dzp) *dzp = FrameMatrix(zp.channels, zp.frames);
        for (size_t i = 0; i < zp.values.size(); ++i) {
            double r = zp.values[i] - mup.values[i];
            // d(logp)/dz = -r, d(logp)/dmu = +r
            if (dzp) dzp->values[i] = -coef * r;
            g.values[i] = coef * r;
        }
        return g;
    };
    if (dz) dz->split_parts.resize(z.split_parts.size());
    for (size_t i = 0; i < z.split_parts.size(); ++i)
        dmu.split_parts.push_back(one_part(z.split_parts[i], field.mu.split_parts[i],
                                           dz ? &dz->split_parts[i] : nullptr));
    dmu.final_part =
        one_part(z.final_part, field.mu.final_part, dz ? &dz->final_part : nullptr);
    return dmu;
}

PretrainResult pretrain_phoneme_prior(const Corpus& corpus, const PhonemeEncoderConfig& enc_cfg,
                                      const PretrainConfig& cfg) {
    if (corpus.utterances.empty()) throw TrainingError("pretrain: empty corpus");
    PretrainResult result;
    SeededRng rng(cfg.seed);
    SeededRng init_rng = rng.child(1);
    result.encoder.build(result.store, enc_cfg, init_rng);

    Conv1d dec1, dec2;
    dec1.init(result.store, "dec.conv1", enc_cfg.mel_dim, enc_cfg.hidden, 1, init_rng, 1.0);
    dec2.init(result.store, "dec.conv2", enc_cfg.hidden, enc_cfg.mel_dim, 1, init_rng, 1.0);

    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    adam_cfg.clip_norm = cfg.clip_norm;
    AdamState adam;
    adam.init(result.store.total_size());

    SeededRng order_rng = rng.child(2);
    SeededRng noise_rng = rng.child(3);
    std::vector<size_t> order(corpus.utterances.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // trigger shuffle on first use

    for (int step = 0; step < cfg.steps; ++step) {
        result.store.zero_grads();
        double beta = cfg.beta_max;
        int warmup = std::max(1, cfg.steps / 2);
        if (step < warmup) beta = cfg.beta_max * static_cast<double>(step) / warmup;

        std::vector<size_t> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                // Fisher-Yates with the seeded stream
                for (size_t i = order.size() - 1; i > 0; --i)
                    std::swap(order[i], order[order_rng.next_below(i + 1)]);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        double mse_acc = 0.0, kld_acc = 0.0;
        size_t elem_count = 0;
        for (size_t idx : batch) elem_count += corpus.utterances[idx].mel.size();
        const double inv_n = 1.0 / static_cast<double>(elem_count);

        for (size_t idx : batch) {
            const Utterance& u = corpus.utterances[idx];
            PhonemeEncoderCache cache;
            auto [mu, logsig] =
                result.encoder.forward_mu_logsig(result.store, u.phoneme_ids, &cache);

            FrameMatrix eps(mu.channels, mu.frames);
            for (double& v : eps.values) v = noise_rng.next_normal();
            FrameMatrix h(mu.channels, mu.frames);
            for (size_t i = 0; i < h.values.size(); ++i)
                h.values[i] = mu.values[i] + std::exp(logsig.values[i]) * eps.values[i];

            FrameMatrix d1pre = dec1.forward(result.store, h);
            FrameMatrix d1 = tanh_forward(d1pre);
            FrameMatrix out = dec2.forward(result.store, d1);

            FrameMatrix dout(out.channels, out.frames);
            for (size_t i = 0; i < out.values.size(); ++i) {
                double r = out.values[i] - u.mel.values[i];
                mse_acc += r * r * inv_n;
                dout.values[i] = 2.0 * r * inv_n;
            }
            FrameMatrix dd1 = dec2.backward(result.store, d1, dout);
            FrameMatrix dd1pre = tanh_backward(d1, dd1);
            FrameMatrix dh = dec1.backward(result.store, h, dd1pre);

            FrameMatrix dmu(mu.channels, mu.frames), dlogsig(mu.channels, mu.frames);
            for (size_t i = 0; i < mu.values.size(); ++i) {
                double sig = std::exp(logsig.values[i]);
                kld_acc += (0.5 * (mu.values[i] * mu.values[i] + sig * sig - 1.0) -
                            logsig.values[i]) * inv_n;
                dmu.values[i] = dh.values[i] + beta * mu.values[i] * inv_n;
                dlogsig.values[i] =
                    dh.values[i] * eps.values[i] * sig + beta * (sig * sig - 1.0) * inv_n;
            }
            result.encoder.backward(result.store, cache, dmu, &dlogsig);
        }

        double loss = mse_acc + beta * kld_acc;
        if (!std::isfinite(loss))
            throw TrainingError("pretrain diverged at step " + std::to_string(step));
        result.loss_history.push_back(loss);
        adam_step(adam, result.store.flat_values(), result.store.flat_grads(), adam_cfg);
    }
    return result;
}

}  // namespace flowvc
