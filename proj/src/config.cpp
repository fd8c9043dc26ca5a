#include "dtdy/config.hpp"

#include <algorithm>
#include <fstream>

#include "dtdy/errors.hpp"

namespace dtdy {

const std::vector<ConfigKey>& RunConfig::schema() {
    static const std::vector<ConfigKey> kSchema = {
        {"seed", "1", "seed for all randomness"},
        {"threads", "1", "worker threads for trial scoring (1 = fully sequential)"},
        {"out_dir", "out", "artifact output directory"},
        {"model.conv", "dtdy", "convolution kind: vanilla|tdy|dtdy"},
        {"model.width", "0.25", "channel width multiplier of the ResNet-34 backbone"},
        {"model.blocks", "3,4,6,3", "residual blocks per stage"},
        {"model.r", "0.125", "reduction ratio of the dynamic kernel generator"},
        {"model.basis", "6", "TDY basis kernel count"},
        {"model.pooling", "tap", "temporal pooling: tap|asp"},
        {"model.emb_dim", "512", "speaker embedding dimension"},
        {"model.mel_bins", "64", "input Mel bins"},
        {"train.epochs", "30", "training epochs"},
        {"train.speakers_per_batch", "16", "speakers per batch (two utterances each)"},
        {"train.base_lr", "0.001", "initial learning rate"},
        {"train.lr_decay", "0.75", "learning-rate decay factor"},
        {"train.lr_step", "10", "epochs between decay steps"},
        {"train.weight_decay", "5e-5", "Adam coupled weight decay"},
        {"train.checkpoint_every", "1", "epochs between checkpoints"},
        {"data.manifest", "", "manifest CSV (speaker_id,utterance_path)"},
        {"eval.trials", "", "trial list (label path_a path_b)"},
        {"eval.checkpoint", "", "model checkpoint to load"},
        {"sam.layer", "stem", "SAM tap: stem or stage<i>.block<j>"},
        {"sam.wav", "", "utterance for the SAM command"},
        {"sam.speaker", "", "target speaker id (default: the utterance's own)"},
        {"head.train_per_speaker", "8", "classifier-head training utterances per speaker"},
        {"head.test_per_speaker", "2", "classifier-head held-out utterances per speaker"},
        {"head.epochs", "100", "classifier-head training steps"},
        {"head.lr", "0.01", "classifier-head learning rate"},
        {"embed.wav", "", "utterance for the embed command"},
        {"synth.speakers", "20", "synthetic speakers"},
        {"synth.utterances", "10", "utterances per synthetic speaker"},
        {"synth.seconds", "3.0", "seconds per synthetic utterance"},
    };
    return kSchema;
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    for (const auto& k : schema()) c.values_[k.key] = k.default_value;
    return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw config_error("unknown config key '" + key + "'");
    it->second = value;
}

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("malformed line " + std::to_string(lineno) + " in " + path + " (expected key = value)");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw config_error("unknown config key '" + key + "'");
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t pos = 0;
        const auto r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "' is not an integer: '" + v + "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t pos = 0;
        const auto r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "' is not a number: '" + v + "'");
    }
}

std::uint64_t RunConfig::get_seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

void RunConfig::dump(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write config dump: " + path);
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    if (!os) throw io_error("failed writing config dump: " + path);
}

}  // namespace dtdy
