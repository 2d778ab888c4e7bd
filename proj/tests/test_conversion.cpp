#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "flowvc/conversion.hpp"
#include "test_util.hpp"

using namespace flowvc;
using testutil::max_abs_diff;

namespace {

FlowConfig tiny_flow(bool text = false) {
    FlowConfig cfg;
    cfg.mel_dim = 4;
    cfg.n_steps = 3;
    cfg.squeeze_factor = 2;
    cfg.split_every = 2;
    cfg.split_channels = 2;
    cfg.hidden_width = 8;
    cfg.speaker_dim = 3;
    cfg.text_conditioned = text;
    return cfg;
}

Model tiny_model(PriorMode mode, bool text, uint64_t seed) {
    ModelConfig mc;
    mc.flow = tiny_flow(text);
    mc.mode = mode;
    if (mc.uses_encoder()) {
        PhonemeEncoderConfig ec;
        ec.n_phonemes = 5;
        ec.embed_dim = 4;
        ec.hidden = 6;
        ec.mel_dim = 4;
        mc.encoder = ec;
    }
    SeededRng rng(seed);
    Model model = Model::build(mc, rng);
    SeededRng pert(seed + 50);
    testutil::randomize_params(model, pert, 0.2);
    testutil::mark_actnorms_initialized(model);
    return model;
}

std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("flowvc_conv_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("identity conversion reconstructs the input in all modes") {
    SeededRng rng(1);
    SpeakerTable table = testutil::random_speaker_table(rng, {"s0", "s1"}, 3);
    for (auto [mode, text] : {std::pair{PriorMode::Fixed, false},
                              std::pair{PriorMode::Fixed, true},
                              std::pair{PriorMode::Pretrained, false},
                              std::pair{PriorMode::Joint, false}}) {
        Model model = tiny_model(mode, text, 2);
        Utterance u = testutil::random_utterance(rng, "u", "s0", 4, 10, 5);
        int trimmed = -1;
        FrameMatrix out = convert(model, u, "s0", table, &trimmed);
        CHECK(trimmed == 0);
        CHECK(out.frames == 10);
        CHECK(max_abs_diff(out, u.mel) <= 1e-8);
    }
}

TEST_CASE("conversion output has the trimmed frame count") {
    SeededRng rng(3);
    SpeakerTable table = testutil::random_speaker_table(rng, {"s0", "s1"}, 3);
    Model model = tiny_model(PriorMode::Fixed, false, 4);
    Utterance u = testutil::random_utterance(rng, "u", "s0", 4, 11, 5);
    int trimmed = 0;
    FrameMatrix out = convert(model, u, "s1", table, &trimmed);
    CHECK(trimmed == 1);
    CHECK(out.frames == 10);
}

TEST_CASE("unknown target speaker raises a lookup error") {
    SeededRng rng(5);
    SpeakerTable table = testutil::random_speaker_table(rng, {"s0"}, 3);
    Model model = tiny_model(PriorMode::Fixed, false, 6);
    Utterance u = testutil::random_utterance(rng, "u", "s0", 4, 8, 5);
    CHECK_THROWS_AS((void)convert(model, u, "ghost", table), LookupError);
}

TEST_CASE("cycle conversion returns the input through exact invertibility") {
    SeededRng rng(7);
    SpeakerTable table = testutil::random_speaker_table(rng, {"s0", "s1"}, 3);
    Model model = tiny_model(PriorMode::Joint, false, 8);
    Utterance u = testutil::random_utterance(rng, "u", "s0", 4, 12, 5);

    FrameMatrix forward = convert(model, u, "s1", table);
    Utterance as_target = u;
    as_target.speaker_id = "s1";
    as_target.mel = forward;
    FrameMatrix back = convert(model, as_target, "s0", table);
    CHECK(max_abs_diff(back, u.mel) <= 1e-6);
}

TEST_CASE("text-free conversion never reads phoneme labels") {
    SeededRng rng(9);
    SpeakerTable table = testutil::random_speaker_table(rng, {"s0", "s1"}, 3);
    Model model = tiny_model(PriorMode::Pretrained, false, 10);
    Utterance u = testutil::random_utterance(rng, "u", "s0", 4, 10, 5);

    FrameMatrix a = convert(model, u, "s1", table);
    Utterance permuted = u;
    for (auto& id : permuted.phoneme_ids) id = (id + 1) % 5;
    FrameMatrix b = convert(model, permuted, "s1", table);
    CHECK(a.values == b.values);
}

TEST_CASE("batch conversion manifest bookkeeping") {
    SeededRng rng(11);
    Model model = tiny_model(PriorMode::Fixed, false, 12);
    Corpus corpus = testutil::random_corpus(rng, 2, 3, 4, 8, 12, 5, 3);

    // Empty pair list -> empty manifest.
    BatchConvertResult empty = batch_convert(model, corpus, {});
    CHECK(empty.manifest.empty());
    CHECK(empty.converted.utterances.empty());

    std::vector<ConversionRequest> pairs{
        {"s0_u0", "s1"}, {"missing", "s1"}, {"s1_u1", "s0"}, {"s0_u1", "ghost"}};
    BatchConvertResult res = batch_convert(model, corpus, pairs);
    REQUIRE(res.manifest.size() == 4);  // N pairs -> N rows, order preserved
    CHECK(res.manifest[0].source_id == "s0_u0");
    CHECK(res.manifest[0].ok());
    CHECK(res.manifest[0].output_id == "s0_u0__to__s1");
    CHECK_FALSE(res.manifest[1].ok());  // unknown utterance recorded, run continued
    CHECK(res.manifest[2].ok());
    CHECK_FALSE(res.manifest[3].ok());  // unknown speaker
    CHECK(res.converted.utterances.size() == 2);
    CHECK(res.converted.utterances[0].speaker_id == "s1");
    CHECK(res.converted.utterances[0].words == corpus.by_id("s0_u0").words);
}

TEST_CASE("all-pairs grid over 4 speakers x 5 utterances gives 60 conversions") {
    SeededRng rng(13);
    Model model = tiny_model(PriorMode::Fixed, false, 14);
    Corpus corpus = testutil::random_corpus(rng, 4, 5, 4, 8, 12, 5, 3);

    std::vector<ConversionRequest> pairs;
    for (const auto& u : corpus.utterances)
        for (const auto& [spk, _] : corpus.speakers.embeddings)
            if (spk != u.speaker_id) pairs.push_back({u.id, spk});
    CHECK(pairs.size() == 60);
    BatchConvertResult res = batch_convert(model, corpus, pairs);
    CHECK(res.manifest.size() == 60);
    size_t ok = 0;
    for (const auto& row : res.manifest) ok += row.ok();
    CHECK(ok == 60);
}

TEST_CASE("written conversions round-trip through the corpus container") {
    SeededRng rng(15);
    Model model = tiny_model(PriorMode::Fixed, false, 16);
    Corpus corpus = testutil::random_corpus(rng, 2, 2, 4, 8, 12, 5, 3);
    std::vector<ConversionRequest> pairs{{"s0_u0", "s1"}, {"s1_u0", "s0"}};
    BatchConvertResult res = batch_convert(model, corpus, pairs);

    auto dir = temp_dir("write");
    write_batch_conversion(dir.string(), res);
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    Corpus back = read_corpus(dir.string());
    REQUIRE(back.utterances.size() == 2);
    CHECK(back.by_id("s0_u0__to__s1").mel.values ==
          res.converted.utterances[0].mel.values);
    std::filesystem::remove_all(dir);
}

TEST_CASE("pairs CSV parsing") {
    auto dir = temp_dir("pairs");
    auto path = (dir / "pairs.csv").string();
    {
        std::ofstream os(path);
        os << "utterance_id,target_speaker\nu1,spkA\nu2,spkB\n\nu3,spkA\n";
    }
    auto pairs = read_pairs_csv(path);
    REQUIRE(pairs.size() == 3);
    CHECK(pairs[0].utterance_id == "u1");
    CHECK(pairs[0].target_speaker == "spkA");
    CHECK(pairs[2].utterance_id == "u3");

    auto bad = (dir / "bad.csv").string();
    {
        std::ofstream os(bad);
        os << "no-comma-here\n";
    }
    CHECK_THROWS_AS((void)read_pairs_csv(bad), FormatError);
    CHECK_THROWS_AS((void)read_pairs_csv((dir / "absent.csv").string()), FormatError);
    std::filesystem::remove_all(dir);
}
