#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dtdy/audio.hpp"
#include "dtdy/config.hpp"
#include "dtdy/errors.hpp"
#include "dtdy/evaluation.hpp"
#include "dtdy/explain.hpp"
#include "dtdy/model.hpp"
#include "dtdy/synth.hpp"
#include "dtdy/training.hpp"

namespace {

using namespace dtdy;

ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig mc;
    mc.conv_kind = conv_kind_from_string(cfg.get("model.conv"));
    mc.width_mult = cfg.get_double("model.width");
    mc.r = cfg.get_double("model.r");
    mc.basis_count = cfg.get_int("model.basis");
    mc.pooling = pooling_from_string(cfg.get("model.pooling"));
    mc.emb_dim = cfg.get_int("model.emb_dim");
    mc.input_mel_bins = cfg.get_int("model.mel_bins");
    mc.stage_blocks.clear();
    std::stringstream ss(cfg.get("model.blocks"));
    std::string item;
    while (std::getline(ss, item, ',')) mc.stage_blocks.push_back(std::stoll(item));
    return mc;
}

TrainConfig train_config_from(const RunConfig& cfg) {
    TrainConfig tc;
    tc.epochs = cfg.get_int("train.epochs");
    tc.plan.speakers_per_batch = cfg.get_int("train.speakers_per_batch");
    tc.base_lr = cfg.get_double("train.base_lr");
    tc.lr_decay = cfg.get_double("train.lr_decay");
    tc.lr_step_epochs = cfg.get_int("train.lr_step");
    tc.adam.weight_decay = cfg.get_double("train.weight_decay");
    tc.checkpoint_every = cfg.get_int("train.checkpoint_every");
    tc.seed = cfg.get_seed();
    tc.out_dir = cfg.get("out_dir");
    return tc;
}

std::vector<ManifestEntry> manifest_from(const RunConfig& cfg) {
    if (cfg.empty("data.manifest")) throw config_error("data.manifest is not set");
    return read_manifest(cfg.get("data.manifest"));
}

Model model_from(const RunConfig& cfg) {
    if (cfg.empty("eval.checkpoint")) throw config_error("eval.checkpoint is not set");
    return model_from_checkpoint(read_checkpoint(cfg.get("eval.checkpoint")));
}

void dump_effective(const RunConfig& cfg) {
    const auto out = cfg.get("out_dir");
    std::filesystem::create_directories(out);
    cfg.dump(out + "/config.effective");
}

int cmd_synth(const RunConfig& cfg) {
    SynthSpec spec;
    spec.n_speakers = cfg.get_int("synth.speakers");
    spec.utterances_per_speaker = cfg.get_int("synth.utterances");
    spec.utterance_seconds = cfg.get_double("synth.seconds");
    dump_effective(cfg);
    const auto res = synth_dataset(spec, cfg.get_seed(), cfg.get("out_dir"));
    std::cerr << "# wrote " << res.n_wavs << " wavs, manifest " << res.manifest_path << "\n";
    std::cout << res.manifest_path << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const auto manifest = manifest_from(cfg);
    dump_effective(cfg);
    Model model = [&] {
        if (!cfg.empty("eval.checkpoint")) return model_from(cfg);
        Rng rng(mix64(cfg.get_seed(), 0x30DE1u));
        return build_model(model_config_from(cfg), rng);
    }();
    TrainConfig tc = train_config_from(cfg);
    const Checkpoint* resume = nullptr;
    Checkpoint ck;
    if (!cfg.empty("eval.checkpoint")) {
        ck = read_checkpoint(cfg.get("eval.checkpoint"));
        if (ck.has_optim) resume = &ck;
    }
    const auto res = train(model, manifest, tc, resume);
    std::cerr << "# trained " << res.steps << " steps, checkpoint " << res.last_checkpoint << "\n";
    std::cout << res.last_checkpoint << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    if (cfg.empty("eval.trials")) throw config_error("eval.trials is not set");
    Model model = model_from(cfg);
    const auto trials = read_trials(cfg.get("eval.trials"));
    dump_effective(cfg);
    const auto rep = evaluate(model, trials, cfg.get("out_dir"), static_cast<int>(cfg.get_int("threads")));
    std::printf("eer=%.9f eer_threshold=%.9f min_dcf=%.9f dcf_threshold=%.9f targets=%lld nontargets=%lld\n",
                rep.eer, rep.eer_threshold, rep.min_dcf, rep.dcf_threshold, static_cast<long long>(rep.n_target),
                static_cast<long long>(rep.n_nontarget));
    return 0;
}

int cmd_embed(const RunConfig& cfg) {
    if (cfg.empty("embed.wav")) throw config_error("embed.wav is not set");
    Model model = model_from(cfg);
    dump_effective(cfg);
    Tensor emb = embed_utterance(model, read_wav(cfg.get("embed.wav")));
    const auto path = cfg.get("out_dir") + "/embedding.csv";
    std::ofstream os(path);
    if (!os) throw io_error("cannot write " + path);
    char buf[32];
    for (std::int64_t i = 0; i < emb.numel(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g", emb.data()[static_cast<std::size_t>(i)]);
        os << (i ? "," : "") << buf;
    }
    os << "\n";
    std::cerr << "# wrote " << path << "\n";
    return 0;
}

int cmd_params(const RunConfig& cfg) {
    dump_effective(cfg);
    Rng rng(1);
    std::string csv;
    for (auto kind : {ConvKind::vanilla, ConvKind::tdy, ConvKind::dtdy}) {
        ModelConfig mc = model_config_from(cfg);
        mc.conv_kind = kind;
        Model m = build_model(mc, rng);
        const auto line = mc.name() + "," + std::to_string(count_params(m));
        std::cout << line << "\n";
        csv += line + "\n";
    }
    std::ofstream os(cfg.get("out_dir") + "/params.csv");
    os << csv;
    return 0;
}

int cmd_sam(const RunConfig& cfg) {
    if (cfg.empty("sam.wav")) throw config_error("sam.wav is not set");
    const auto manifest = manifest_from(cfg);
    Model model = model_from(cfg);
    dump_effective(cfg);
    const auto ids = speaker_ids(manifest);

    if (!model.has_classifier()) {
        const auto head = train_classifier_head(model, manifest, cfg.get_int("head.train_per_speaker"),
                                                cfg.get_int("head.test_per_speaker"), cfg.get_seed(),
                                                cfg.get_int("head.epochs"), cfg.get_double("head.lr"));
        std::cerr << "# classifier head accuracy " << head.accuracy << " on " << head.n_test << " held-out\n";
        Checkpoint ck = snapshot(model);
        save_checkpoint(cfg.get("out_dir") + "/model_with_head.ckpt", ck);
    }

    std::string speaker = cfg.get("sam.speaker");
    if (speaker.empty()) {
        for (const auto& e : manifest)
            if (e.path == cfg.get("sam.wav")) speaker = e.speaker_id;
        if (speaker.empty()) throw config_error("sam.speaker not set and sam.wav not found in the manifest");
    }
    const auto it = std::find(ids.begin(), ids.end(), speaker);
    std::int64_t index;
    if (it != ids.end()) {
        index = it - ids.begin();
    } else {
        try {
            index = std::stoll(speaker);
        } catch (const std::exception&) {
            throw config_error("unknown speaker '" + speaker + "'");
        }
    }

    Tensor x = stack_segments({normalize(log_mel(read_wav(cfg.get("sam.wav"))))});
    const auto sam = compute_sam(model, x, index, cfg.get("sam.layer"),
                                 it != ids.end() ? speaker : std::to_string(index));
    const auto path = cfg.get("out_dir") + "/sam.csv";
    write_sam_csv(path, sam);
    std::cerr << "# wrote " << path << "\n";
    return 0;
}

int cmd_frames(const RunConfig& cfg) {
    const auto manifest = manifest_from(cfg);
    Model model = model_from(cfg);
    dump_effective(cfg);
    const auto fa = frame_similarity_analysis(model, manifest);
    write_frame_analysis(cfg.get("out_dir"), fa);
    for (const auto& s : fa.summary)
        std::printf("%s n=%lld mean=%.6f median=%.6f\n", s.group.c_str(), static_cast<long long>(s.n_frames),
                    s.mean, s.median);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"decomposed temporal dynamic convolution toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir;
    std::int64_t seed = -1, threads = -1;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "config file (key = value lines)");
    app.add_option("--seed", seed, "override config seed");
    app.add_option("--out", out_dir, "override output directory");
    app.add_option("--threads", threads, "override worker thread count");
    app.add_option("--set", sets, "override any config key (key=value)")->take_all();

    std::string manifest_path, trials_path, checkpoint_path, wav_path, speaker;
    auto* synth = app.add_subcommand("synth", "generate a synthetic speaker corpus");
    auto* train = app.add_subcommand("train", "train a speaker embedding model");
    auto* evalc = app.add_subcommand("eval", "score a trial list and report EER/minDCF");
    auto* embed = app.add_subcommand("embed", "write the embedding of one utterance");
    auto* sam = app.add_subcommand("sam", "compute a speaker activation map");
    auto* params = app.add_subcommand("params", "print parameter counts per convolution kind");
    auto* frames = app.add_subcommand("frames", "frame-level similarity analysis by phoneme group");
    for (auto* c : {train, sam, frames}) c->add_option("--manifest", manifest_path, "manifest CSV");
    evalc->add_option("--trials", trials_path, "trial list file");
    for (auto* c : {train, evalc, embed, sam, frames}) c->add_option("--checkpoint", checkpoint_path, "model checkpoint");
    for (auto* c : {embed, sam}) c->add_option("--wav", wav_path, "input utterance");
    sam->add_option("--speaker", speaker, "target speaker id");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        dtdy::RunConfig cfg = dtdy::RunConfig::defaults();
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const auto& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw dtdy::usage_error("--set expects key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (seed >= 0) cfg.set("seed", std::to_string(seed));
        if (threads >= 0) cfg.set("threads", std::to_string(threads));
        if (!out_dir.empty()) cfg.set("out_dir", out_dir);
        if (!manifest_path.empty()) cfg.set("data.manifest", manifest_path);
        if (!trials_path.empty()) cfg.set("eval.trials", trials_path);
        if (!checkpoint_path.empty()) cfg.set("eval.checkpoint", checkpoint_path);
        if (!wav_path.empty()) {
            cfg.set("embed.wav", wav_path);
            cfg.set("sam.wav", wav_path);
        }
        if (!speaker.empty()) cfg.set("sam.speaker", speaker);

        if (synth->parsed()) return cmd_synth(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (evalc->parsed()) return cmd_eval(cfg);
        if (embed->parsed()) return cmd_embed(cfg);
        if (sam->parsed()) return cmd_sam(cfg);
        if (params->parsed()) return cmd_params(cfg);
        if (frames->parsed()) return cmd_frames(cfg);
        return 2;
    } catch (const dtdy::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(dtdy::ErrorCode::numeric);
    }
}
