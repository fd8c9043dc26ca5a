#include "dtdy/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dtdy/errors.hpp"
#include "dtdy/training.hpp"

namespace dtdy {

SpeakerActivationMap compute_sam(Model& m, const Tensor& x, std::int64_t speaker,
                                 const std::string& source_layer, const std::string& speaker_name) {
    if (!m.has_classifier()) throw std::invalid_argument("compute_sam: model has no classifier head");
    if (speaker < 0 || speaker >= m.n_classes())
        throw std::invalid_argument("compute_sam: speaker id " + std::to_string(speaker) + " out of range [0," +
                                    std::to_string(m.n_classes()) + ")");
    m.train_mode = false;

    ForwardProbe probe;
    probe.layer = source_layer;
    Tape tape;
    Tensor logits = forward_logits(m, x, &probe);
    if (!probe.activation.defined())
        throw std::invalid_argument("compute_sam: unknown source layer '" + source_layer + "'");
    Tensor target = reshape(slice(logits, 1, speaker, 1), {1});
    tape.backward(target);

    const Tensor& act = probe.activation;  // [1, C, F, T]
    const auto C = act.dim(1), F = act.dim(2), T = act.dim(3);
    const auto& g = act.grad();
    const auto& a = act.data();
    const auto plane = static_cast<std::size_t>(F * T);
    std::vector<double> map(plane, 0.0);
    for (std::int64_t c = 0; c < C; ++c) {
        double alpha = 0.0;
        const double* gc = g.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) alpha += gc[i];
        alpha /= static_cast<double>(plane);
        const double* ac = a.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) map[i] += alpha * ac[i];
    }
    double mx = 0.0;
    for (auto& v : map) {
        v = std::max(v, 0.0);
        mx = std::max(mx, v);
    }
    if (mx > 0.0)
        for (auto& v : map) v /= mx;

    SpeakerActivationMap sam;
    sam.values = Tensor({F, T}, std::move(map));
    sam.target_speaker = speaker_name.empty() ? std::to_string(speaker) : speaker_name;
    sam.source_layer = source_layer;
    return sam;
}

void write_sam_csv(const std::string& path, const SpeakerActivationMap& sam) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write SAM: " + path);
    const auto F = sam.values.dim(0), T = sam.values.dim(1);
    os << "# speaker=" << sam.target_speaker << " layer=" << sam.source_layer << " F=" << F << " T=" << T << "\n";
    char buf[32];
    for (std::int64_t f = 0; f < F; ++f) {
        for (std::int64_t t = 0; t < T; ++t) {
            std::snprintf(buf, sizeof(buf), "%.9f", sam.values.data()[static_cast<std::size_t>(f * T + t)]);
            os << (t ? "," : "") << buf;
        }
        os << "\n";
    }
    if (!os) throw io_error("failed writing SAM: " + path);
}

Tensor embed_utterance(Model& m, const Waveform& w) {
    m.train_mode = false;
    Tensor feat = normalize(log_mel(w));
    Tensor emb = forward_embedding(m, stack_segments({feat}));
    return reshape(emb, {emb.dim(1)}).detached();
}

HeadTrainResult train_classifier_head(Model& m, const std::vector<ManifestEntry>& manifest,
                                      std::int64_t train_per_speaker, std::int64_t test_per_speaker,
                                      std::uint64_t seed, std::int64_t epochs, double lr) {
    const auto ids = speaker_ids(manifest);
    if (ids.size() < 2) throw config_error("train_classifier_head: need at least 2 speakers");
    std::map<std::string, std::vector<std::string>> utts;
    for (const auto& e : manifest) utts[e.speaker_id].push_back(e.path);
    std::vector<std::string> short_speakers;
    for (const auto& id : ids)
        if (static_cast<std::int64_t>(utts[id].size()) < train_per_speaker + test_per_speaker)
            short_speakers.push_back(id);
    if (!short_speakers.empty()) {
        std::string msg = "speakers with fewer than " + std::to_string(train_per_speaker + test_per_speaker) +
                          " utterances:";
        for (const auto& s : short_speakers) msg += " " + s;
        throw config_error(msg);
    }

    m.train_mode = false;
    std::vector<Tensor> train_emb, test_emb;
    std::vector<std::int64_t> train_lab, test_lab;
    for (std::size_t si = 0; si < ids.size(); ++si) {
        auto order = utts[ids[si]];
        Rng rng(mix64(mix64(seed, 0xC1A55u), si));
        rng.shuffle(order);
        for (std::int64_t j = 0; j < train_per_speaker + test_per_speaker; ++j) {
            Tensor e = embed_utterance(m, read_wav(order[static_cast<std::size_t>(j)]));
            if (j < train_per_speaker) {
                train_emb.push_back(e);
                train_lab.push_back(static_cast<std::int64_t>(si));
            } else {
                test_emb.push_back(e);
                test_lab.push_back(static_cast<std::int64_t>(si));
            }
        }
    }
    const auto D = m.cfg.emb_dim;
    auto pack = [D](const std::vector<Tensor>& rows) {
        std::vector<double> v;
        for (const auto& r : rows) v.insert(v.end(), r.data().begin(), r.data().end());
        return Tensor({static_cast<std::int64_t>(rows.size()), D}, std::move(v));
    };
    Tensor xtr = pack(train_emb), xte = pack(test_emb);

    attach_classifier(m, static_cast<std::int64_t>(ids.size()));
    std::vector<NamedTensor> head = {{"cls.w", m.cls_w}, {"cls.b", m.cls_b}};
    AdamState state;
    state.init(head);
    AdamConfig acfg;
    acfg.weight_decay = 0.0;
    for (std::int64_t e = 0; e < epochs; ++e) {
        Tape tape;
        Tensor loss = softmax_cross_entropy(affine(xtr, m.cls_w, m.cls_b), train_lab);
        for (auto& p : head) p.tensor.zero_grad();
        tape.backward(loss);
        adam_step(head, state, acfg, lr);
    }

    HeadTrainResult res;
    res.n_train = static_cast<std::int64_t>(train_lab.size());
    res.n_test = static_cast<std::int64_t>(test_lab.size());
    Tensor logits = affine(xte, m.cls_w, m.cls_b);
    const auto n = logits.dim(1);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < test_lab.size(); ++i) {
        std::int64_t arg = 0;
        double best = logits.data()[i * static_cast<std::size_t>(n)];
        for (std::int64_t j = 1; j < n; ++j) {
            const double v = logits.data()[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
            if (v > best) {
                best = v;
                arg = j;
            }
        }
        if (arg == test_lab[i]) ++correct;
    }
    res.accuracy = res.n_test > 0 ? static_cast<double>(correct) / static_cast<double>(res.n_test) : 0.0;
    return res;
}

Tensor utterance_reference_embedding(Model& m, const std::vector<Waveform>& utts, std::int64_t exclude) {
    if (utts.size() < 2)
        throw std::invalid_argument("utterance_reference_embedding: need at least 2 utterances");
    if (exclude < 0 || exclude >= static_cast<std::int64_t>(utts.size()))
        throw std::invalid_argument("utterance_reference_embedding: exclude index out of range");
    Tensor sum;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < utts.size(); ++i) {
        if (static_cast<std::int64_t>(i) == exclude) continue;
        Tensor e = embed_utterance(m, utts[i]);
        sum = sum.defined() ? add(sum, e) : e;
        ++n;
    }
    return scale(sum, 1.0 / static_cast<double>(n));
}

std::vector<AlignmentRow> read_alignment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open alignment: " + path);
    std::string line;
    if (!std::getline(in, line)) throw config_error("empty alignment: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "start_frame,end_frame,phoneme,group")
        throw config_error("alignment header must be 'start_frame,end_frame,phoneme,group': " + path);
    std::vector<AlignmentRow> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f0, f1, ph, gr;
        if (!std::getline(ss, f0, ',') || !std::getline(ss, f1, ',') || !std::getline(ss, ph, ',') ||
            !std::getline(ss, gr))
            throw config_error("malformed alignment row in " + path + ": " + line);
        rows.push_back(AlignmentRow{std::stoll(f0), std::stoll(f1), ph, gr});
    }
    return rows;
}

void write_alignment(const std::string& path, const std::vector<AlignmentRow>& rows) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write alignment: " + path);
    os << "start_frame,end_frame,phoneme,group\n";
    for (const auto& r : rows)
        os << r.start_frame << "," << r.end_frame << "," << r.phoneme << "," << r.group << "\n";
}

std::string alignment_path_for(const std::string& wav_path) {
    const auto dot = wav_path.rfind(".wav");
    if (dot == std::string::npos || dot + 4 != wav_path.size()) return wav_path + ".align.csv";
    return wav_path.substr(0, dot) + ".align.csv";
}

namespace {

double quantile(std::vector<double> v, double q) {
    // linear interpolation between order statistics
    std::sort(v.begin(), v.end());
    if (v.size() == 1) return v[0];
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double d = std::sqrt(na) * std::sqrt(nb);
    return d > 0.0 ? dot / d : 0.0;
}

}  // namespace

FrameAnalysis frame_similarity_analysis(Model& m, const std::vector<ManifestEntry>& manifest) {
    m.train_mode = false;
    std::map<std::string, std::vector<std::string>> utts;
    for (const auto& e : manifest) utts[e.speaker_id].push_back(e.path);

    FrameAnalysis fa;
    const auto stride = m.time_stride();
    for (const auto& [speaker, paths] : utts) {
        if (paths.size() < 2)
            throw config_error("frame_similarity_analysis: speaker '" + speaker + "' has fewer than 2 utterances");
        std::vector<Waveform> wavs;
        wavs.reserve(paths.size());
        for (const auto& p : paths) wavs.push_back(read_wav(p));
        std::vector<Tensor> embs;
        embs.reserve(paths.size());
        for (const auto& w : wavs) embs.push_back(embed_utterance(m, w));

        for (std::size_t ui = 0; ui < paths.size(); ++ui) {
            // leave-one-out reference
            std::vector<double> ref(static_cast<std::size_t>(m.cfg.emb_dim), 0.0);
            for (std::size_t vj = 0; vj < embs.size(); ++vj) {
                if (vj == ui) continue;
                for (std::size_t d = 0; d < ref.size(); ++d) ref[d] += embs[vj].data()[d];
            }
            for (auto& x : ref) x /= static_cast<double>(embs.size() - 1);

            const auto rows = read_alignment(alignment_path_for(paths[ui]));
            Tensor feat = normalize(log_mel(wavs[ui]));
            Tensor fr = forward_frame_embeddings(m, stack_segments({feat}));  // [1,T',D]
            const auto T = fr.dim(1), D = fr.dim(2);
            for (std::int64_t t = 0; t < T; ++t) {
                const std::int64_t center = t * stride + stride / 2;
                std::string group = "other";
                for (const auto& r : rows)
                    if (center >= r.start_frame && center < r.end_frame) {
                        group = r.group;
                        break;
                    }
                std::vector<double> e(fr.data().begin() + static_cast<std::ptrdiff_t>(t * D),
                                      fr.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * D));
                fa.scores[group].push_back(cosine(e, ref));
            }
        }
    }

    for (const auto& g : {"vowels", "semivowels", "nasals", "fricatives", "stops"}) {
        auto it = fa.scores.find(g);
        if (it == fa.scores.end() || it->second.empty()) continue;
        GroupStats s;
        s.group = g;
        s.n_frames = static_cast<std::int64_t>(it->second.size());
        double sum = 0.0;
        for (double v : it->second) sum += v;
        s.mean = sum / static_cast<double>(s.n_frames);
        s.median = quantile(it->second, 0.5);
        s.q25 = quantile(it->second, 0.25);
        s.q75 = quantile(it->second, 0.75);
        fa.summary.push_back(std::move(s));
    }
    return fa;
}

void write_frame_analysis(const std::string& dir, const FrameAnalysis& fa) {
    std::filesystem::create_directories(dir);
    char buf[160];
    {
        std::ofstream os(dir + "/frames_summary.csv");
        if (!os) throw io_error("cannot write frame summary under " + dir);
        os << "group,n_frames,mean,median,q25,q75\n";
        for (const auto& s : fa.summary) {
            std::snprintf(buf, sizeof(buf), "%s,%lld,%.9f,%.9f,%.9f,%.9f\n", s.group.c_str(),
                          static_cast<long long>(s.n_frames), s.mean, s.median, s.q25, s.q75);
            os << buf;
        }
    }
    {
        std::ofstream os(dir + "/frames_scores.csv");
        os << "group,score\n";
        for (const auto& [group, scores] : fa.scores)
            for (double v : scores) {
                std::snprintf(buf, sizeof(buf), "%s,%.9f\n", group.c_str(), v);
                os << buf;
            }
    }
}

}  // namespace dtdy
