// Acceptance suite: each criterion prints a single PASS/FAIL line with the
// measured quantities and its wall-clock runtime.  Run with a criterion
// number (1..9) to execute one criterion, or with no arguments for all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowvc/conversion.hpp"
#include "flowvc/evaluation.hpp"
#include "flowvc/features.hpp"
#include "flowvc/flow.hpp"
#include "flowvc/model.hpp"
#include "flowvc/priors.hpp"
#include "flowvc/training.hpp"
#include "test_util.hpp"

using namespace flowvc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path scratch_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("flowvc_accept_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Shared model helpers

FlowConfig small_flow(bool text = false) {
    FlowConfig cfg;
    cfg.mel_dim = 4;
    cfg.n_steps = 12;
    cfg.squeeze_factor = 2;
    cfg.split_every = 4;
    cfg.split_channels = 2;
    cfg.hidden_width = 8;
    cfg.speaker_dim = 3;
    cfg.text_conditioned = text;
    return cfg;
}

Model random_model(const ModelConfig& mc, uint64_t seed, double perturb) {
    SeededRng rng(seed);
    Model model = Model::build(mc, rng);
    SeededRng pert(seed + 1000);
    // Scale matrix perturbations by fan-in so the perturbed operator norm
    // stays O(perturb) regardless of channel count; otherwise deep wide
    // stacks amplify values past double round-trip precision.
    for (const auto& e : model.store.entries()) {
        double scale = perturb;
        if (e.shape.size() >= 2)
            scale /= std::sqrt(static_cast<double>(e.shape[1]) *
                               (e.shape.size() == 3 ? e.shape[2] : 1));
        double* v = model.store.values(e.offset);
        for (size_t i = 0; i < e.size; ++i) v[i] += scale * pert.next_normal();
    }
    testutil::mark_actnorms_initialized(model);
    return model;
}

// Training configuration shared by criteria 5-7 so all modes get an
// identical budget.
TrainConfig shared_budget(uint64_t seed) {
    TrainConfig tc;
    tc.steps = 2000;
    tc.batch_size = 16;
    tc.seed = seed;
    return tc;
}

ModelConfig corpus_model_config(const Corpus& corpus, PriorMode mode, bool text,
                                int n_phonemes) {
    ModelConfig mc;
    mc.flow.mel_dim = corpus.utterances.front().mel.channels;
    mc.flow.n_steps = 8;
    mc.flow.squeeze_factor = 2;
    mc.flow.split_every = 4;
    mc.flow.split_channels = 4;
    mc.flow.hidden_width = 24;
    mc.flow.speaker_dim = corpus.speakers.dim();
    mc.flow.text_conditioned = text;
    mc.mode = mode;
    if (mc.uses_encoder()) {
        PhonemeEncoderConfig ec;
        ec.n_phonemes = n_phonemes;
        ec.mel_dim = mc.flow.mel_dim;
        mc.encoder = ec;
    }
    return mc;
}

// Trains one model of the given mode on the corpus; for pretrained mode the
// encoder weights are installed from a prior pre-training run.
Model train_mode(const Corpus& corpus, PriorMode mode, bool text, uint64_t seed,
                 const fs::path& work) {
    ModelConfig mc = corpus_model_config(corpus, mode, text, 10);
    SeededRng rng(seed);
    Model model = Model::build(mc, rng);
    if (mode == PriorMode::Pretrained) {
        PretrainConfig pc;
        pc.seed = seed;
        PretrainResult pre = pretrain_phoneme_prior(corpus, *mc.encoder, pc);
        auto enc_path = (work / ("enc_" + std::to_string(seed) + ".fckp")).string();
        save_encoder_checkpoint(enc_path, pre.store, *mc.encoder);
        load_encoder_checkpoint(enc_path, model);
    }
    train(model, corpus, shared_budget(seed),
          (work / ("run_" + prior_mode_name(mode) + (text ? "_text" : "") + "_" +
                   std::to_string(seed)))
              .string());
    return model;
}

std::vector<ConversionRequest> full_grid(const Corpus& corpus) {
    std::vector<ConversionRequest> pairs;
    for (const auto& u : corpus.utterances)
        for (const auto& [spk, _] : corpus.speakers.embeddings)
            if (spk != u.speaker_id) pairs.push_back({u.id, spk});
    return pairs;
}

ConversionMetrics grid_metrics(Model& model, const Corpus& corpus) {
    BatchConvertResult res = batch_convert(model, corpus, full_grid(corpus));
    for (const auto& row : res.manifest)
        if (!row.ok()) throw TrainingError("grid conversion failed: " + row.error);
    return conversion_metrics(res.converted, *corpus.truth);
}

// ---------------------------------------------------------------------------
// Criterion 1: invertibility

bool criterion_1(std::string& detail) {
    auto t0 = Clock::now();
    double worst = 0.0;

    // Per-layer triples: fresh random parameters, input, conditioning each.
    for (int trial = 0; trial < 100; ++trial) {
        SeededRng rng(10'000 + trial);
        int channels = 2 + static_cast<int>(rng.next_below(11));  // 2..12
        int frames = 1 + static_cast<int>(rng.next_below(10));
        FrameMatrix x = testutil::random_frame_matrix(rng, channels, frames);

        ParamStore store;
        ActNormLayer act;
        act.build(store, "act", channels);
        for (auto& v : store.flat_values()) v = 0.4 * rng.next_normal();
        act.initialized = true;
        double ld = 0.0;
        worst = std::max(worst, testutil::max_abs_diff(
                                    act.inverse(store, act.forward(store, x, &ld)), x));

        ParamStore store2;
        InvLinearLayer mix;
        mix.build(store2, "mix", channels, rng);
        for (auto& v : store2.flat_values()) v += 0.1 * rng.next_normal();
        ld = 0.0;
        worst = std::max(worst, testutil::max_abs_diff(
                                    mix.inverse(store2, mix.forward(store2, x, &ld)), x));

        ParamStore store3;
        AffineCouplingLayer cpl;
        int n_cond = 3;
        cpl.build(store3, "cpl", channels, n_cond, 8, 3, trial % 2 == 1, rng);
        for (auto& v : store3.flat_values()) v += 0.5 * rng.next_normal();
        FrameMatrix cond = testutil::random_frame_matrix(rng, n_cond, frames);
        ld = 0.0;
        worst = std::max(
            worst, testutil::max_abs_diff(
                       cpl.inverse(store3, cpl.forward(store3, x, cond, &ld, nullptr), cond),
                       x));
    }

    // Full 12-step stacks at mel_dim 4 and 80, with splits.
    for (int mel : {4, 80}) {
        FlowConfig fc = small_flow();
        fc.mel_dim = mel;
        if (mel == 80) {
            fc.split_channels = 16;
            fc.hidden_width = 32;
            fc.speaker_dim = 8;
        }
        ModelConfig mc;
        mc.flow = fc;
        for (int trial = 0; trial < 100; ++trial) {
            Model model = random_model(mc, 20'000 + mel * 100 + trial, 0.3);
            SeededRng rng(30'000 + mel * 100 + trial);
            int frames = 4 + 2 * static_cast<int>(rng.next_below(4));  // even, 4..10
            FrameMatrix x = testutil::random_frame_matrix(rng, mel, frames);
            ConditioningSet cond = testutil::random_conditioning(rng, frames, fc.speaker_dim);
            FrameMatrix cm = model.stack.build_cond_matrix(cond, nullptr);
            EncodeResult enc = model.stack.encode(model.store, x, cm);
            FrameMatrix back = model.stack.decode(model.store, enc.bundle, cm);
            worst = std::max(worst, testutil::max_abs_diff(back, x));
        }
    }

    double secs = seconds_since(t0);
    detail = "max |decode(encode(x)) - x| = " + fmt(worst, 3) + " (limit 1e-8), " +
             fmt(secs, 3) + "s (limit 60s)";
    return worst <= 1e-8 && secs <= 60.0;
}

// ---------------------------------------------------------------------------
// Criterion 2: end-to-end Jacobian log-determinant

double jacobian_rel_err(Model& model, const FrameMatrix& cond_mat, SeededRng& rng) {
    const int mel = model.cfg.flow.mel_dim;
    const int frames = cond_mat.frames * model.cfg.flow.squeeze_factor;
    FrameMatrix x = testutil::random_frame_matrix(rng, mel, frames);
    const int dim = mel * frames;

    double logdet = 0.0;
    {
        EncodeResult enc = model.stack.encode(model.store, x, cond_mat);
        logdet = enc.logdet;
    }
    SquareMatrix jac(dim);
    const double h = 1e-5;
    for (int j = 0; j < dim; ++j) {
        FrameMatrix xp = x, xm = x;
        xp.values[j] += h;
        xm.values[j] -= h;
        auto zp = model.stack.encode(model.store, xp, cond_mat).bundle.flatten();
        auto zm = model.stack.encode(model.store, xm, cond_mat).bundle.flatten();
        for (int i = 0; i < dim; ++i) jac.at(i, j) = (zp[i] - zm[i]) / (2.0 * h);
    }
    return testutil::rel_err(logdet, logabsdet(jac));
}

bool criterion_2(std::string& detail) {
    auto t0 = Clock::now();
    double worst = 0.0;

    struct Case {
        int squeeze, n_steps, split_every, split_channels;
        bool text;
    };
    // Layer compositions: splits present/absent, squeeze 1 and 2, and the
    // text-conditioned conditioning stack.
    for (Case cs : {Case{2, 12, 4, 2, false}, Case{2, 3, 0, 0, false},
                    Case{1, 4, 2, 1, false}, Case{2, 12, 4, 2, true}}) {
        FlowConfig fc = small_flow(cs.text);
        fc.squeeze_factor = cs.squeeze;
        fc.n_steps = cs.n_steps;
        fc.split_every = cs.split_every;
        fc.split_channels = cs.split_channels;
        ModelConfig mc;
        mc.flow = fc;
        if (mc.uses_encoder()) {
            PhonemeEncoderConfig ec;
            ec.n_phonemes = 5;
            ec.embed_dim = 4;
            ec.hidden = 6;
            ec.mel_dim = fc.mel_dim;
            mc.encoder = ec;
        }
        Model model = random_model(mc, 40'000 + cs.n_steps + cs.squeeze, 0.3);
        SeededRng rng(41'000 + cs.n_steps);
        int squeezed_frames = 4 / cs.squeeze;
        ConditioningSet cond =
            testutil::random_conditioning(rng, 4, fc.speaker_dim);
        FrameMatrix mu = testutil::random_frame_matrix(rng, fc.mel_dim, 4);
        FrameMatrix cm =
            model.stack.build_cond_matrix(cond, cs.text ? &mu : nullptr);
        (void)squeezed_frames;
        for (int rep = 0; rep < 3; ++rep)
            worst = std::max(worst, jacobian_rel_err(model, cm, rng));
    }

    double secs = seconds_since(t0);
    detail = "max rel err(analytic logdet vs FD Jacobian logabsdet) = " + fmt(worst, 3) +
             " (limit 1e-5), " + fmt(secs, 3) + "s (limit 60s)";
    return worst <= 1e-5 && secs <= 60.0;
}

// ---------------------------------------------------------------------------
// Criterion 3: analytic gradients vs central finite differences

bool criterion_3(std::string& detail) {
    auto t0 = Clock::now();
    SeededRng data_rng(5);
    Utterance u = testutil::random_utterance(data_rng, "u", "s0", 4, 6, 5);
    Utterance w = testutil::random_utterance(data_rng, "w", "s1", 4, 6, 5);
    SpeakerTable table = testutil::random_speaker_table(data_rng, {"s0", "s1"}, 3);

    double worst = 0.0;
    bool frozen_ok = true;
    struct Case {
        PriorMode mode;
        bool text;
    };
    for (Case cs : {Case{PriorMode::Fixed, true}, Case{PriorMode::Pretrained, false},
                    Case{PriorMode::Joint, false}}) {
        FlowConfig fc = small_flow(cs.text);
        fc.n_steps = 3;
        fc.split_every = 2;
        ModelConfig mc;
        mc.flow = fc;
        mc.mode = cs.mode;
        if (mc.uses_encoder()) {
            PhonemeEncoderConfig ec;
            ec.n_phonemes = 5;
            ec.embed_dim = 4;
            ec.hidden = 6;
            ec.mel_dim = 4;
            mc.encoder = ec;
        }
        Model model = random_model(mc, 50'000 + static_cast<int>(cs.mode), 0.1);
        std::vector<const Utterance*> batch{&u, &w};

        model.store.zero_grads();
        (void)nll_loss(model, batch, table, true);
        std::vector<double> analytic = model.store.flat_grads();

        std::vector<double> params = model.store.flat_values();
        auto f = [&](std::span<const double> p) {
            std::vector<double> saved = model.store.flat_values();
            std::copy(p.begin(), p.end(), model.store.flat_values().begin());
            double nll = nll_loss(model, batch, table, false).nll;
            model.store.flat_values() = saved;
            return nll;
        };
        auto fd = finite_diff_grad(f, params, 1e-5);

        // Pretrained mode freezes the encoder: its analytic gradient must be
        // exactly zero, and the frozen entries are excluded from the FD
        // comparison.
        std::vector<double> analytic_cmp, fd_cmp;
        for (const auto& e : model.store.entries()) {
            bool frozen =
                cs.mode == PriorMode::Pretrained && e.name.rfind("enc.", 0) == 0;
            for (size_t i = e.offset; i < e.offset + e.size; ++i) {
                if (frozen) {
                    frozen_ok &= analytic[i] == 0.0;
                } else {
                    analytic_cmp.push_back(analytic[i]);
                    fd_cmp.push_back(fd[i]);
                }
            }
        }
        worst = std::max(worst, testutil::grad_rel_err(analytic_cmp, fd_cmp, 1e-5));
    }

    double secs = seconds_since(t0);
    detail = "max grad rel err = " + fmt(worst, 3) + " (limit 1e-4), frozen encoder grads " +
             (frozen_ok ? "zero" : "NONZERO") + ", " + fmt(secs, 3) + "s (limit 120s)";
    return worst <= 1e-4 && frozen_ok && secs <= 120.0;
}

// ---------------------------------------------------------------------------
// Criterion 4: density normalization on a 2-channel, 1-frame config

bool criterion_4(std::string& detail) {
    auto t0 = Clock::now();
    FlowConfig fc;
    fc.mel_dim = 2;
    fc.n_steps = 2;
    fc.squeeze_factor = 1;
    fc.split_every = 0;
    fc.hidden_width = 8;
    fc.speaker_dim = 3;
    fc.coupling_kernel = 1;
    ModelConfig mc;
    mc.flow = fc;
    Model model = random_model(mc, 60'000, 0.3);

    ConditioningSet cond;
    cond.speaker = {0.4, -0.2, 0.9};
    cond.f0_norm = {0.0};
    cond.vuv = {1};
    FrameMatrix cm = model.stack.build_cond_matrix(cond, nullptr);

    const double step = 0.05;
    const int n = static_cast<int>(std::lround(12.0 / step));
    double mass = 0.0;
    FrameMatrix x(2, 1);
    for (int i = 0; i < n; ++i) {
        x.values[0] = -6.0 + (i + 0.5) * step;
        for (int j = 0; j < n; ++j) {
            x.values[1] = -6.0 + (j + 0.5) * step;
            EncodeResult enc = model.stack.encode(model.store, x, cm);
            double logp =
                prior_log_density(enc.bundle, fixed_prior(enc.bundle)) + enc.logdet;
            mass += std::exp(logp) * step * step;
        }
    }

    double secs = seconds_since(t0);
    detail = "integral of exp(log P_X) over [-6,6]^2 = " + fmt(mass, 6) +
             " (limit 1 +/- 0.02), " + fmt(secs, 3) + "s (limit 60s)";
    return std::abs(mass - 1.0) <= 0.02 && secs <= 60.0;
}

// ---------------------------------------------------------------------------
// Criterion 5: likelihood learning beats the diagonal-Gaussian baseline

bool criterion_5(std::string& detail) {
    auto t0 = Clock::now();
    SynthSpec spec;  // 4 speakers, 10 phonemes, mel_dim 8
    spec.seed = 0;
    Corpus corpus = generate_corpus(spec);
    size_t total_frames = 0;
    for (const auto& u : corpus.utterances) total_frames += u.frames();

    double baseline = diagonal_gaussian_bits_per_dim(corpus);

    auto work = scratch_dir("crit5");
    Model model = train_mode(corpus, PriorMode::Joint, false, 0, work);

    std::vector<const Utterance*> all;
    for (const auto& u : corpus.utterances) all.push_back(&u);
    double trained = nll_loss(model, all, corpus.speakers, false).bits_per_dim;
    fs::remove_all(work);

    double secs = seconds_since(t0);
    detail = "corpus frames = " + std::to_string(total_frames) +
             " (need >= 2000), baseline = " + fmt(baseline) + " bits/dim, trained = " +
             fmt(trained) + " bits/dim, gain = " + fmt(baseline - trained) +
             " (need >= 0.3) in 2000 steps, " + fmt(secs, 1) + "s (limit 600s)";
    return total_frames >= 2000 && baseline - trained >= 0.3 && secs <= 600.0;
}

// ---------------------------------------------------------------------------
// Criterion 6: conversion efficacy of the trained text-free pretrained model

bool criterion_6(std::string& detail) {
    SynthSpec spec;
    spec.seed = 0;
    Corpus corpus = generate_corpus(spec);
    auto work = scratch_dir("crit6");
    Model model = train_mode(corpus, PriorMode::Pretrained, false, 0, work);

    auto t0 = Clock::now();  // budget applies after training
    ConversionMetrics m = grid_metrics(model, corpus);

    double worst_identity = 0.0;
    for (size_t i = 0; i < corpus.utterances.size(); i += 7) {
        const Utterance& u = corpus.utterances[i];
        FrameMatrix out = convert(model, u, u.speaker_id, corpus.speakers);
        FrameMatrix ref(u.mel.channels, out.frames);
        for (int c = 0; c < ref.channels; ++c)
            for (int t = 0; t < ref.frames; ++t) ref.at(c, t) = u.mel.at(c, t);
        worst_identity = std::max(worst_identity, testutil::max_abs_diff(out, ref));
    }
    fs::remove_all(work);

    double secs = seconds_since(t0);
    detail = "speaker accuracy = " + fmt(m.speaker_accuracy) +
             " (need >= 0.90), phoneme retention = " + fmt(m.phoneme_retention) +
             " (need >= 0.95), identity max err = " + fmt(worst_identity, 3) +
             " (limit 1e-8), " + fmt(secs, 1) + "s post-training (limit 120s)";
    return m.speaker_accuracy >= 0.90 && m.phoneme_retention >= 0.95 &&
           worst_identity <= 1e-8 && secs <= 120.0;
}

// ---------------------------------------------------------------------------
// Criterion 7: directional ordering across prior regimes, seeds {0,1,2}

bool criterion_7(std::string& detail) {
    auto t0 = Clock::now();
    SynthSpec spec;
    spec.seed = 0;
    Corpus corpus = generate_corpus(spec);
    auto work = scratch_dir("crit7");

    int pretrained_wins = 0;
    double sum_pre = 0.0, sum_text = 0.0;
    std::string per_seed;
    for (uint64_t seed : {0, 1, 2}) {
        Model text = train_mode(corpus, PriorMode::Fixed, true, seed, work);
        Model pre = train_mode(corpus, PriorMode::Pretrained, false, seed, work);
        Model joint = train_mode(corpus, PriorMode::Joint, false, seed, work);
        double acc_text = grid_metrics(text, corpus).speaker_accuracy;
        double acc_pre = grid_metrics(pre, corpus).speaker_accuracy;
        double acc_joint = grid_metrics(joint, corpus).speaker_accuracy;
        pretrained_wins += acc_pre >= acc_joint;
        sum_pre += acc_pre;
        sum_text += acc_text;
        per_seed += " [seed " + std::to_string(seed) + ": text " + fmt(acc_text) +
                    ", pretrained " + fmt(acc_pre) + ", joint " + fmt(acc_joint) + "]";
    }
    fs::remove_all(work);

    double gap = std::abs(sum_pre - sum_text) / 3.0;
    double secs = seconds_since(t0);
    detail = "pretrained >= joint in " + std::to_string(pretrained_wins) +
             "/3 seeds (need >= 2), |pretrained - text| mean gap = " + fmt(gap, 3) +
             " (limit 0.02)," + per_seed + ", " + fmt(secs, 1) + "s (limit 1800s)";
    return pretrained_wins >= 2 && gap <= 0.02 && secs <= 1800.0;
}

// ---------------------------------------------------------------------------
// Criterion 8: statistics oracles

// Memoized top-down exhaustive-alignment edit distance, independent of the
// bottom-up DP in the library.
size_t edit_oracle(const std::vector<std::string>& ref, const std::vector<std::string>& hyp,
                   size_t i, size_t j, std::vector<std::vector<size_t>>& memo) {
    if (memo[i][j] != static_cast<size_t>(-1)) return memo[i][j];
    size_t r;
    if (i == ref.size())
        r = hyp.size() - j;
    else if (j == hyp.size())
        r = ref.size() - i;
    else {
        size_t sub = edit_oracle(ref, hyp, i + 1, j + 1, memo) + (ref[i] != hyp[j] ? 1 : 0);
        size_t del = edit_oracle(ref, hyp, i + 1, j, memo) + 1;
        size_t ins = edit_oracle(ref, hyp, i, j + 1, memo) + 1;
        r = std::min({sub, del, ins});
    }
    memo[i][j] = r;
    return r;
}

// Pure exhaustive recursion (no memo) used to validate the memoized oracle on
// short inputs.
size_t edit_exhaustive(const std::vector<std::string>& ref,
                       const std::vector<std::string>& hyp, size_t i, size_t j) {
    if (i == ref.size()) return hyp.size() - j;
    if (j == hyp.size()) return ref.size() - i;
    size_t sub = edit_exhaustive(ref, hyp, i + 1, j + 1) + (ref[i] != hyp[j] ? 1 : 0);
    size_t del = edit_exhaustive(ref, hyp, i + 1, j) + 1;
    size_t ins = edit_exhaustive(ref, hyp, i, j + 1) + 1;
    return std::min({sub, del, ins});
}

std::vector<bool> holm_oracle(const std::vector<double>& p, double alpha) {
    size_t m = p.size();
    std::vector<size_t> order(m);
    for (size_t i = 0; i < m; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return p[a] < p[b]; });
    std::vector<bool> out(m, false);
    for (size_t k = 0; k < m; ++k) {
        if (p[order[k]] <= alpha / static_cast<double>(m - k))
            out[order[k]] = true;
        else
            break;
    }
    return out;
}

long double binom_oracle(size_t a, size_t b) {
    size_t n = a + b;
    if (n == 0) return 1.0L;
    size_t k = std::min(a, b);
    // C(n, i) / 2^n summed for i <= k, each tail, two-sided.
    long double tail = 0.0L;
    for (size_t i = 0; i <= k; ++i) {
        long double c = 1.0L;
        for (size_t j = 0; j < i; ++j)
            c = c * static_cast<long double>(n - j) / static_cast<long double>(j + 1);
        tail += c * std::pow(0.5L, static_cast<long double>(n));
    }
    long double p = 2.0L * tail;
    if (a == b) p -= 0.0L;  // both tails share the midpoint; capped below
    return std::min(p, 1.0L);
}

bool criterion_8(std::string& detail) {
    auto t0 = Clock::now();

    // Enumerate every word pair over {a, b} with reference length 1..8 and
    // hypothesis length 0..8.
    std::vector<std::vector<std::string>> seqs;
    seqs.push_back({});
    for (int len = 1; len <= 8; ++len) {
        for (int bits = 0; bits < (1 << len); ++bits) {
            std::vector<std::string> s(len);
            for (int i = 0; i < len; ++i) s[i] = (bits >> i) & 1 ? "b" : "a";
            seqs.push_back(std::move(s));
        }
    }
    size_t wer_pairs = 0, wer_mismatch = 0;
    for (const auto& ref : seqs) {
        if (ref.empty()) continue;
        for (const auto& hyp : seqs) {
            std::vector<std::vector<size_t>> memo(
                ref.size() + 1, std::vector<size_t>(hyp.size() + 1, static_cast<size_t>(-1)));
            size_t want = edit_oracle(ref, hyp, 0, 0, memo);
            WerCounts got = wer(ref, hyp);
            wer_mismatch += got.errors != want || got.words != ref.size();
            // Validate the memoized oracle itself against pure exhaustive
            // recursion on short pairs.
            if (ref.size() <= 4 && hyp.size() <= 4)
                wer_mismatch += want != edit_exhaustive(ref, hyp, 0, 0);
            ++wer_pairs;
        }
    }

    // Holm / Bonferroni on 20 random p-value sets.
    SeededRng rng(70'000);
    size_t mt_mismatch = 0;
    for (int set = 0; set < 20; ++set) {
        size_t m = 1 + rng.next_below(8);
        std::vector<double> p(m);
        for (auto& v : p) v = rng.next_uniform() * (set % 2 ? 0.1 : 1.0);
        double alpha = 0.05;
        auto got_h = holm_decisions(p, alpha);
        auto want_h = holm_oracle(p, alpha);
        auto got_b = bonferroni_decisions(p, alpha);
        for (size_t i = 0; i < m; ++i) {
            mt_mismatch += got_h[i] != want_h[i];
            mt_mismatch += got_b[i] != (p[i] <= alpha / static_cast<double>(m));
            mt_mismatch += got_b[i] && !got_h[i];  // Holm rejects a superset
        }
    }

    // Exact binomial p-values vs long-double closed form.
    double binom_err = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        size_t a = rng.next_below(30);
        size_t b = rng.next_below(30);
        binom_err = std::max(
            binom_err, std::abs(binomial_two_sided_p(a, b) -
                                static_cast<double>(binom_oracle(a, b))));
    }
    binom_err = std::max(
        binom_err, std::abs(binomial_two_sided_p(10, 0) - 2.0 * std::pow(0.5, 10)));

    double secs = seconds_since(t0);
    detail = std::to_string(wer_pairs) + " WER pairs, " + std::to_string(wer_mismatch) +
             " mismatches; " + std::to_string(mt_mismatch) +
             " Holm/Bonferroni mismatches over 20 sets; binomial max abs err = " +
             fmt(binom_err, 3) + " (limit 1e-12); " + fmt(secs, 3) + "s (limit 60s)";
    return wer_mismatch == 0 && mt_mismatch == 0 && binom_err <= 1e-12 && secs <= 60.0;
}

// ---------------------------------------------------------------------------
// Criterion 9: bitwise determinism of complete runs

void full_pipeline(const fs::path& dir) {
    SynthSpec spec;
    spec.seed = 0;
    Corpus corpus = generate_corpus(spec);
    write_corpus((dir / "corpus").string(), corpus);

    ModelConfig mc = corpus_model_config(corpus, PriorMode::Pretrained, false, 10);
    PretrainConfig pc;
    pc.steps = 200;
    pc.seed = 0;
    PretrainResult pre = pretrain_phoneme_prior(corpus, *mc.encoder, pc);
    save_encoder_checkpoint((dir / "enc.fckp").string(), pre.store, *mc.encoder);

    SeededRng rng(0);
    Model model = Model::build(mc, rng);
    load_encoder_checkpoint((dir / "enc.fckp").string(), model);
    TrainConfig tc;
    tc.steps = 300;
    tc.batch_size = 16;
    tc.seed = 0;
    train(model, corpus, tc, (dir / "train").string());

    BatchConvertResult res = batch_convert(model, corpus, full_grid(corpus));
    write_batch_conversion((dir / "converted").string(), res);

    ConversionMetrics m = conversion_metrics(res.converted, *corpus.truth);
    nlohmann::json report{{"frames", m.frames},
                          {"speaker_accuracy", m.speaker_accuracy},
                          {"phoneme_retention", m.phoneme_retention},
                          {"f0_correlation", m.f0_correlation}};
    std::ofstream((dir / "report.json").string()) << report.dump(2) << "\n";
}

bool criterion_9(std::string& detail) {
    auto t0 = Clock::now();
    auto a = scratch_dir("crit9_a");
    auto b = scratch_dir("crit9_b");
    full_pipeline(a);
    full_pipeline(b);

    // Compare the two trees file by file, bytewise.
    std::vector<std::string> rel_paths;
    for (const auto& entry : fs::recursive_directory_iterator(a))
        if (entry.is_regular_file())
            rel_paths.push_back(fs::relative(entry.path(), a).string());
    std::sort(rel_paths.begin(), rel_paths.end());

    size_t mismatches = 0;
    std::string first_bad;
    for (const auto& rel : rel_paths) {
        std::ifstream fa(a / rel, std::ios::binary);
        std::ifstream fb(b / rel, std::ios::binary);
        std::string ca((std::istreambuf_iterator<char>(fa)), {});
        std::string cb((std::istreambuf_iterator<char>(fb)), {});
        if (!fb || ca != cb) {
            ++mismatches;
            if (first_bad.empty()) first_bad = rel;
        }
    }
    size_t count_b = 0;
    for (const auto& entry : fs::recursive_directory_iterator(b))
        count_b += entry.is_regular_file();
    bool same_set = count_b == rel_paths.size();
    fs::remove_all(a);
    fs::remove_all(b);

    double secs = seconds_since(t0);
    detail = std::to_string(rel_paths.size()) + " files compared, " +
             std::to_string(mismatches) + " byte mismatches" +
             (first_bad.empty() ? "" : " (first: " + first_bad + ")") +
             (same_set ? "" : ", file sets differ") + ", " + fmt(secs, 1) + "s";
    return mismatches == 0 && same_set;
}

}  // namespace

int main(int argc, char** argv) {
    std::map<int, std::function<bool(std::string&)>> criteria{
        {1, criterion_1}, {2, criterion_2}, {3, criterion_3},
        {4, criterion_4}, {5, criterion_5}, {6, criterion_6},
        {7, criterion_7}, {8, criterion_8}, {9, criterion_9}};

    std::vector<int> to_run;
    if (argc > 1) {
        int n = std::atoi(argv[1]);
        if (!criteria.count(n)) {
            std::cerr << "usage: " << argv[0] << " [1..9]\n";
            return 2;
        }
        to_run.push_back(n);
    } else {
        for (const auto& [n, _] : criteria) to_run.push_back(n);
    }

    bool all_ok = true;
    for (int n : to_run) {
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[n](detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        std::cout << "criterion " << n << ": " << (ok ? "PASS" : "FAIL") << " — " << detail
                  << std::endl;
        all_ok &= ok;
    }
    return all_ok ? 0 : 1;
}
