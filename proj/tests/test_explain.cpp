#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dtdy/errors.hpp"
#include "dtdy/explain.hpp"
#include "dtdy/synth.hpp"
#include "dtdy/training.hpp"
#include "test_util.hpp"

using namespace dtdy;
using testutil::bit_identical;
using testutil::randn;

namespace {

Model tiny_model(std::uint64_t seed, std::int64_t mel_bins = 64) {
    ModelConfig cfg;
    cfg.conv_kind = ConvKind::vanilla;
    cfg.custom_channels = {4, 4, 8, 8};
    cfg.stage_blocks = {1, 1, 1, 1};
    cfg.emb_dim = 16;
    cfg.input_mel_bins = mel_bins;
    Rng rng(seed);
    Model m = build_model(cfg, rng);
    m.train_mode = false;
    return m;
}

const std::string& fixture_dir() {
    static std::string dir = [] {
        const auto d = (std::filesystem::temp_directory_path() / "dtdy_explain_fixture").string();
        SynthSpec spec;
        spec.n_speakers = 3;
        spec.utterances_per_speaker = 4;
        spec.utterance_seconds = 2.0;
        synth_dataset(spec, 55, d);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("compute_sam: shape, range, zero-input guard and bad-speaker error") {
    Model m = tiny_model(150);
    attach_classifier(m, 4);
    Rng rng(151);
    for (auto& v : m.cls_w.data()) v = rng.uniform(-0.5, 0.5);

    Tensor x = randn({1, 1, 64, 40}, 152, false, 0.5);
    auto sam = compute_sam(m, x, 2);
    CHECK(sam.values.shape() == Shape{64, 40});
    double mx = 0.0;
    for (double v : sam.values.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
    }
    CHECK(mx == 1.0);  // normalized by max

    Tensor zero({1, 1, 64, 40}, 0.0);
    auto zs = compute_sam(m, zero, 2);
    for (double v : zs.values.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(compute_sam(m, x, 4), std::invalid_argument);
    CHECK_THROWS_AS(compute_sam(m, x, -1), std::invalid_argument);
    CHECK_THROWS_AS(compute_sam(m, x, 0, "stage9.block9"), std::invalid_argument);
}

TEST_CASE("compute_sam is exactly invariant to doubling the speaker logit") {
    Model m = tiny_model(153);
    attach_classifier(m, 3);
    Rng rng(154);
    for (auto& v : m.cls_w.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = randn({1, 1, 64, 32}, 155, false, 0.5);
    auto before = compute_sam(m, x, 1);
    for (std::int64_t d = 0; d < m.cfg.emb_dim; ++d)
        m.cls_w.data()[static_cast<std::size_t>(1 * m.cfg.emb_dim + d)] *= 2.0;
    m.cls_b.data()[1] *= 2.0;
    auto after = compute_sam(m, x, 1);
    CHECK(bit_identical(before.values, after.values));
}

TEST_CASE("compute_sam differs between target speakers and supports block taps") {
    Model m = tiny_model(156);
    attach_classifier(m, 3);
    Rng rng(157);
    for (auto& v : m.cls_w.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = randn({1, 1, 64, 32}, 158, false, 0.5);
    auto s0 = compute_sam(m, x, 0);
    auto s1 = compute_sam(m, x, 1);
    CHECK(testutil::max_abs_diff(s0.values, s1.values) > 0.0);

    auto blk = compute_sam(m, x, 0, "stage1.block0");
    CHECK(blk.values.shape() == Shape{64, 32});  // stage 1 keeps the input grid
    CHECK(blk.source_layer == "stage1.block0");
}

TEST_CASE("SAM CSV carries the documented header and full grid") {
    Model m = tiny_model(159);
    attach_classifier(m, 2);
    Rng rng(160);
    for (auto& v : m.cls_w.data()) v = rng.uniform(-0.5, 0.5);
    Tensor x = randn({1, 1, 64, 12}, 161, false, 0.5);
    auto sam = compute_sam(m, x, 1, "stem", "spk001");
    const auto p = (std::filesystem::temp_directory_path() / "dtdy_sam.csv").string();
    write_sam_csv(p, sam);
    std::ifstream in(p);
    std::string header;
    REQUIRE(std::getline(in, header));
    CHECK(header == "# speaker=spk001 layer=stem F=64 T=12");
    std::string row;
    int rows = 0;
    while (std::getline(in, row)) {
        CHECK(std::count(row.begin(), row.end(), ',') == 11);
        ++rows;
    }
    CHECK(rows == 64);
}

TEST_CASE("train_classifier_head freezes the backbone and is seed-deterministic") {
    const auto manifest = read_manifest(fixture_dir() + "/manifest.csv");
    Model m = tiny_model(162);
    auto before_params = parameters(m);
    std::vector<std::vector<double>> before;
    for (auto& p : before_params) before.push_back(p.tensor.data());

    const auto r1 = train_classifier_head(m, manifest, 3, 1, 9, 40);
    auto after_params = parameters(m);
    std::size_t checked = 0;
    for (auto& p : after_params) {
        if (p.name.rfind("cls.", 0) == 0) continue;
        CHECK(p.tensor.data() == before[checked]);
        ++checked;
    }
    CHECK(checked == before.size());
    CHECK(r1.n_train == 9);
    CHECK(r1.n_test == 3);

    Model m2 = tiny_model(162);
    const auto r2 = train_classifier_head(m2, manifest, 3, 1, 9, 40);
    CHECK(r1.accuracy == r2.accuracy);
    CHECK(m.cls_w.data() == m2.cls_w.data());

    Model m3 = tiny_model(162);
    CHECK_THROWS_WITH_AS(train_classifier_head(m3, manifest, 4, 1, 9, 10), doctest::Contains("spk000"), Error);
}

TEST_CASE("utterance_reference_embedding: identity, count audit and exclusion") {
    const auto manifest = read_manifest(fixture_dir() + "/manifest.csv");
    Model m = tiny_model(163);
    std::vector<Waveform> utts;
    for (int i = 0; i < 4; ++i) utts.push_back(read_wav(manifest[static_cast<std::size_t>(i)].path));

    // identical utterances: reference equals the single embedding
    std::vector<Waveform> same(3, utts[0]);
    Tensor ref_same = utterance_reference_embedding(m, same, 0);
    Tensor e0 = embed_utterance(m, utts[0]);
    CHECK(testutil::max_abs_diff(ref_same, e0) < 1e-12);

    // mean of exactly the other embeddings
    Tensor ref = utterance_reference_embedding(m, utts, 1);
    std::vector<double> manual(static_cast<std::size_t>(m.cfg.emb_dim), 0.0);
    int n = 0;
    for (int i = 0; i < 4; ++i) {
        if (i == 1) continue;
        Tensor e = embed_utterance(m, utts[static_cast<std::size_t>(i)]);
        for (std::size_t d = 0; d < manual.size(); ++d) manual[d] += e.data()[d];
        ++n;
    }
    CHECK(n == 3);
    for (std::size_t d = 0; d < manual.size(); ++d)
        CHECK(ref.data()[d] == doctest::Approx(manual[d] / 3.0).epsilon(1e-12));

    std::vector<Waveform> single = {utts[0]};
    CHECK_THROWS_AS(utterance_reference_embedding(m, single, 0), std::invalid_argument);
}

TEST_CASE("frame analysis: stride-8 group assignment audit and order independence") {
    // hand-built corpus: one speaker, two 2 s utterances with a three-part alignment
    const auto dir = (std::filesystem::temp_directory_path() / "dtdy_frames_fixture").string();
    std::filesystem::create_directories(dir);
    Rng rng(164);
    std::vector<ManifestEntry> manifest;
    for (int u = 0; u < 2; ++u) {
        Waveform w;
        w.sample_rate = 16000;
        for (int i = 0; i < 32000; ++i) w.samples.push_back(0.3 * std::sin(0.07 * i + u) + 0.02 * rng.gaussian());
        const auto wav = dir + "/u" + std::to_string(u) + ".wav";
        write_wav(wav, w);
        // input frames: [0,80) vowels, [80,88) fricatives, [88,200) stops
        write_alignment(alignment_path_for(wav), {{0, 80, "aa", "vowels"},
                                                  {80, 88, "s", "fricatives"},
                                                  {88, 200, "t", "stops"}});
        manifest.push_back({"spk000", wav});
    }
    Model m = tiny_model(165);
    auto fa = frame_similarity_analysis(m, manifest);
    // model frame t' covers input frames [8t', 8t'+8): centers 4, 12, ..., 196
    // vowels: t' 0..9 (10 frames), fricatives: exactly t' = 10 (center 84), stops: t' 11..24
    REQUIRE(fa.scores.count("vowels"));
    REQUIRE(fa.scores.count("fricatives"));
    REQUIRE(fa.scores.count("stops"));
    CHECK(fa.scores["vowels"].size() == 20);      // 10 frames x 2 utterances
    CHECK(fa.scores["fricatives"].size() == 2);   // the frame containing input frame 83
    CHECK(fa.scores["stops"].size() == 28);
    CHECK(fa.scores.count("other") == 0);

    std::vector<ManifestEntry> reversed = {manifest[1], manifest[0]};
    auto fb = frame_similarity_analysis(m, reversed);
    for (const auto& [group, scores] : fa.scores) {
        auto sorted_a = scores;
        auto sorted_b = fb.scores[group];
        std::sort(sorted_a.begin(), sorted_a.end());
        std::sort(sorted_b.begin(), sorted_b.end());
        CHECK(sorted_a == sorted_b);
    }

    const auto out = dir + "/analysis";
    write_frame_analysis(out, fa);
    std::ifstream sf(out + "/frames_summary.csv");
    std::string header;
    REQUIRE(std::getline(sf, header));
    CHECK(header == "group,n_frames,mean,median,q25,q75");
}

TEST_CASE("alignment files round-trip and reject bad headers") {
    const auto p = (std::filesystem::temp_directory_path() / "dtdy_align.csv").string();
    std::vector<AlignmentRow> rows = {{0, 12, "aa", "vowels"}, {12, 30, "s", "fricatives"}};
    write_alignment(p, rows);
    auto back = read_alignment(p);
    REQUIRE(back.size() == 2);
    CHECK(back[1].start_frame == 12);
    CHECK(back[1].group == "fricatives");

    std::ofstream bad(p);
    bad << "nope\n";
    bad.close();
    CHECK_THROWS_AS(read_alignment(p), Error);
}

TEST_CASE("alignment path convention") {
    CHECK(alignment_path_for("/data/x.wav") == "/data/x.align.csv");
    CHECK(alignment_path_for("noext") == "noext.align.csv");
}
