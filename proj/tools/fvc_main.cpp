// fvc: corpus generation, prior pre-training, flow training, conversion and
// evaluation statistics for the flow-based voice conversion library.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flowvc/conversion.hpp"
#include "flowvc/evaluation.hpp"
#include "flowvc/model.hpp"
#include "flowvc/training.hpp"

using namespace flowvc;
using ordered_json = nlohmann::ordered_json;

namespace {

struct TrainCli {
    std::string corpus_dir;
    std::string mode = "free-pretrain";
    std::string config_path;
    std::string out_dir;
    std::string encoder_path;
    uint64_t seed = 0;
};

void apply_flow_json(const ordered_json& j, FlowConfig& f) {
    if (j.contains("mel_dim")) f.mel_dim = j["mel_dim"].get<int>();
    if (j.contains("n_steps")) f.n_steps = j["n_steps"].get<int>();
    if (j.contains("squeeze_factor")) f.squeeze_factor = j["squeeze_factor"].get<int>();
    if (j.contains("split_every")) f.split_every = j["split_every"].get<int>();
    if (j.contains("split_channels")) f.split_channels = j["split_channels"].get<int>();
    if (j.contains("hidden_width")) f.hidden_width = j["hidden_width"].get<int>();
    if (j.contains("speaker_dim")) f.speaker_dim = j["speaker_dim"].get<int>();
    if (j.contains("coupling_kernel")) f.coupling_kernel = j["coupling_kernel"].get<int>();
}

void apply_train_json(const ordered_json& j, TrainConfig& t) {
    if (j.contains("batch_size")) t.batch_size = j["batch_size"].get<int>();
    if (j.contains("steps")) t.steps = j["steps"].get<int>();
    if (j.contains("lr")) t.lr = j["lr"].get<double>();
    if (j.contains("beta1")) t.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) t.beta2 = j["beta2"].get<double>();
    if (j.contains("eps")) t.eps = j["eps"].get<double>();
    if (j.contains("clip_norm")) t.clip_norm = j["clip_norm"].get<double>();
    if (j.contains("checkpoint_every")) t.checkpoint_every = j["checkpoint_every"].get<int>();
}

void apply_encoder_json(const ordered_json& j, PhonemeEncoderConfig& e) {
    if (j.contains("n_phonemes")) e.n_phonemes = j["n_phonemes"].get<int>();
    if (j.contains("embed_dim")) e.embed_dim = j["embed_dim"].get<int>();
    if (j.contains("hidden")) e.hidden = j["hidden"].get<int>();
    if (j.contains("kernel")) e.kernel = j["kernel"].get<int>();
}

int run_train(const TrainCli& cli) {
    Corpus corpus = read_corpus(cli.corpus_dir);

    ModelConfig mc;
    mc.flow.mel_dim = corpus.utterances.front().mel.channels;
    mc.flow.speaker_dim = corpus.speakers.dim();
    TrainConfig tc;
    tc.seed = cli.seed;

    PhonemeEncoderConfig ec;
    uint32_t max_id = 0;
    for (const auto& u : corpus.utterances)
        for (uint32_t id : u.phoneme_ids) max_id = std::max(max_id, id);
    ec.n_phonemes = static_cast<int>(max_id) + 1;

    if (!cli.config_path.empty()) {
        std::ifstream is(cli.config_path);
        if (!is) throw ConfigError("cannot open config " + cli.config_path);
        ordered_json j = ordered_json::parse(is);
        if (j.contains("flow")) apply_flow_json(j["flow"], mc.flow);
        if (j.contains("train")) apply_train_json(j["train"], tc);
        if (j.contains("encoder")) apply_encoder_json(j["encoder"], ec);
    }
    ec.mel_dim = mc.flow.mel_dim;

    if (cli.mode == "text-cond") {
        mc.mode = PriorMode::Fixed;
        mc.flow.text_conditioned = true;
    } else if (cli.mode == "free-pretrain") {
        mc.mode = PriorMode::Pretrained;
    } else if (cli.mode == "free-joint") {
        mc.mode = PriorMode::Joint;
    } else {
        throw ConfigError("unknown mode '" + cli.mode + "'");
    }
    if (mc.uses_encoder()) mc.encoder = ec;

    SeededRng rng(cli.seed);
    Model model = Model::build(mc, rng);
    if (mc.mode == PriorMode::Pretrained) {
        if (cli.encoder_path.empty())
            throw ConfigError("free-pretrain mode requires --encoder CHECKPOINT");
        load_encoder_checkpoint(cli.encoder_path, model);
    }

    TrainResult result = train(model, corpus, tc, cli.out_dir);
    std::cout << "trained " << tc.steps << " steps; final nll=" << result.history.back().nll
              << " bits/dim=" << result.history.back().bits_per_dim << "\n"
              << "checkpoint: " << result.checkpoint_path << "\n";
    return 0;
}

void write_report(const std::string& path, const ordered_json& j) {
    if (path.empty()) return;
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flow-based voice conversion toolkit"};
    app.require_subcommand(1);

    // gen-corpus
    SynthSpec spec;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic ground-truth corpus");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--speakers", spec.n_speakers);
    gen->add_option("--phonemes", spec.n_phonemes);
    gen->add_option("--mel-dim", spec.mel_dim);
    gen->add_option("--utts-per-speaker", spec.utterances_per_speaker);
    gen->add_option("--embed-dim", spec.speaker_embed_dim);
    gen->add_option("--offset-scale", spec.speaker_offset_scale);
    gen->add_option("--pattern-scale", spec.phone_pattern_scale);
    gen->add_option("--noise-scale", spec.noise_scale);
    gen->add_option("--seed", spec.seed);

    // pretrain-prior
    std::string pre_corpus, pre_out;
    PretrainConfig pre_cfg;
    PhonemeEncoderConfig pre_enc;
    auto* pre = app.add_subcommand("pretrain-prior", "pre-train the variational phoneme prior");
    pre->add_option("--corpus", pre_corpus, "corpus directory")->required();
    pre->add_option("--out", pre_out, "encoder checkpoint path")->required();
    pre->add_option("--steps", pre_cfg.steps);
    pre->add_option("--batch", pre_cfg.batch_size);
    pre->add_option("--lr", pre_cfg.lr);
    pre->add_option("--beta-max", pre_cfg.beta_max);
    pre->add_option("--seed", pre_cfg.seed);
    pre->add_option("--embed-dim", pre_enc.embed_dim);
    pre->add_option("--hidden", pre_enc.hidden);

    // train
    TrainCli train_cli;
    auto* tr = app.add_subcommand("train", "train a flow model by exact likelihood");
    tr->add_option("--corpus", train_cli.corpus_dir)->required();
    tr->add_option("--mode", train_cli.mode, "text-cond | free-pretrain | free-joint")
        ->required();
    tr->add_option("--config", train_cli.config_path, "JSON config overrides");
    tr->add_option("--out", train_cli.out_dir)->required();
    tr->add_option("--encoder", train_cli.encoder_path, "pre-trained encoder checkpoint");
    tr->add_option("--seed", train_cli.seed);

    // convert
    std::string cv_ckpt, cv_corpus, cv_pairs, cv_out;
    auto* cv = app.add_subcommand("convert", "batch speaker conversion");
    cv->add_option("--checkpoint", cv_ckpt)->required();
    cv->add_option("--corpus", cv_corpus)->required();
    cv->add_option("--pairs", cv_pairs, "CSV utterance_id,target_speaker")->required();
    cv->add_option("--out", cv_out)->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluation statistics");
    ev->require_subcommand(1);
    std::string wer_manifest, wer_out;
    auto* ev_wer = ev->add_subcommand("wer", "word error rate with confidence intervals");
    ev_wer->add_option("--manifest", wer_manifest)->required();
    ev_wer->add_option("--out", wer_out, "JSON report path");
    std::string mu_manifest, mu_out;
    double mu_alpha = 0.05;
    auto* ev_mu = ev->add_subcommand("mushra", "score aggregation and significance tests");
    ev_mu->add_option("--manifest", mu_manifest)->required();
    ev_mu->add_option("--alpha", mu_alpha);
    ev_mu->add_option("--out", mu_out, "JSON report path");
    std::string cm_converted, cm_truth, cm_out;
    auto* ev_cm = ev->add_subcommand("convert-metrics", "oracle conversion metrics");
    ev_cm->add_option("--converted", cm_converted)->required();
    ev_cm->add_option("--truth", cm_truth, "generator ground truth JSON")->required();
    ev_cm->add_option("--out", cm_out, "JSON report path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            Corpus corpus = generate_corpus(spec);
            write_corpus(gen_out, corpus);
            std::cout << "wrote " << corpus.utterances.size() << " utterances to " << gen_out
                      << "\n";
        } else if (pre->parsed()) {
            Corpus corpus = read_corpus(pre_corpus);
            pre_enc.mel_dim = corpus.utterances.front().mel.channels;
            uint32_t max_id = 0;
            for (const auto& u : corpus.utterances)
                for (uint32_t id : u.phoneme_ids) max_id = std::max(max_id, id);
            pre_enc.n_phonemes = static_cast<int>(max_id) + 1;
            PretrainResult result = pretrain_phoneme_prior(corpus, pre_enc, pre_cfg);
            save_encoder_checkpoint(pre_out, result.store, pre_enc);
            std::cout << "pretrained prior; final loss=" << result.loss_history.back()
                      << "; wrote " << pre_out << "\n";
        } else if (tr->parsed()) {
            return run_train(train_cli);
        } else if (cv->parsed()) {
            Model model = load_checkpoint(cv_ckpt);
            Corpus corpus = read_corpus(cv_corpus);
            auto pairs = read_pairs_csv(cv_pairs);
            BatchConvertResult result = batch_convert(model, corpus, pairs);
            write_batch_conversion(cv_out, result);
            size_t failed = 0;
            for (const auto& row : result.manifest)
                if (!row.ok()) ++failed;
            std::cout << "converted " << (result.manifest.size() - failed) << "/"
                      << result.manifest.size() << " pairs into " << cv_out << "\n";
        } else if (ev_wer->parsed()) {
            auto rows = read_wer_manifest(wer_manifest);
            auto reports = wer_aggregate(rows);
            ordered_json j = ordered_json::array();
            std::cout << "system                      WER        95% CI\n";
            for (const auto& r : reports) {
                printf("%-26s %6.2f%%   ", r.system_id.c_str(), 100.0 * r.pooled_rate);
                if (r.ci_halfwidth)
                    printf("±%.2f\n", 100.0 * *r.ci_halfwidth);
                else
                    printf("n/a\n");
                j.push_back({{"system_id", r.system_id},
                             {"pooled_rate", r.pooled_rate},
                             {"mean_rate", r.mean_rate},
                             {"utterances", r.utterances},
                             {"ci_halfwidth",
                              r.ci_halfwidth ? ordered_json(*r.ci_halfwidth)
                                             : ordered_json(nullptr)}});
            }
            write_report(wer_out, j);
        } else if (ev_mu->parsed()) {
            auto rows = read_score_manifest(mu_manifest);
            auto agg = mushra_aggregate(rows);
            SignificanceReport sig = paired_t_holm(rows, mu_alpha);
            ordered_json j;
            j["systems"] = ordered_json::array();
            std::cout << "system                      mean   median\n";
            for (const auto& r : agg) {
                printf("%-26s %6.2f %6.1f\n", r.system_id.c_str(), r.mean, r.median);
                j["systems"].push_back({{"system_id", r.system_id},
                                        {"mean", r.mean},
                                        {"median", r.median},
                                        {"count", r.count}});
            }
            j["significance"] = ordered_json::array();
            std::cout << "\npairwise paired t-tests (" << sig.method << ", alpha=" << sig.alpha
                      << ")\n";
            for (const auto& p : sig.pairs) {
                printf("%-20s vs %-20s p=%.4g %s\n", p.system_a.c_str(), p.system_b.c_str(),
                       p.p_value,
                       p.degenerate ? "degenerate" : (p.significant ? "significant" : "-"));
                j["significance"].push_back({{"system_a", p.system_a},
                                             {"system_b", p.system_b},
                                             {"n", p.n},
                                             {"t", p.t_stat},
                                             {"p", p.p_value},
                                             {"significant", p.significant},
                                             {"degenerate", p.degenerate}});
            }
            write_report(mu_out, j);
        } else if (ev_cm->parsed()) {
            Corpus converted = read_corpus(cm_converted);
            SynthTruth truth = read_truth(cm_truth);
            ConversionMetrics m = conversion_metrics(converted, truth);
            printf("frames             %zu\n", m.frames);
            printf("speaker accuracy   %.4f\n", m.speaker_accuracy);
            printf("phoneme retention  %.4f\n", m.phoneme_retention);
            printf("f0 correlation     %.4f\n", m.f0_correlation);
            write_report(cm_out, ordered_json{{"frames", m.frames},
                                              {"speaker_accuracy", m.speaker_accuracy},
                                              {"phoneme_retention", m.phoneme_retention},
                                              {"f0_correlation", m.f0_correlation}});
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
