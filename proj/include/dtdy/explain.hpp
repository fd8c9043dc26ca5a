#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dtdy/audio.hpp"
#include "dtdy/model.hpp"

namespace dtdy {

struct SpeakerActivationMap {
    Tensor values;  // [F, T] in [0, 1], aligned to the input log-Mel grid
    std::string target_speaker;
    std::string source_layer;
};

/// Grad-CAM against the speaker logit: gradients of y_s w.r.t. the tapped
/// post-activation map A give channel weights (global average), the map is
/// relu(sum_c alpha_c * A_c) normalized by its max (all-zero maps stay zero).
/// Requires an attached, trained classifier; x: [1, 1, F, T].
SpeakerActivationMap compute_sam(Model& m, const Tensor& x, std::int64_t speaker,
                                 const std::string& source_layer = "stem",
                                 const std::string& speaker_name = "");

/// First row `# speaker=<id> layer=<name> F=<F> T=<T>`, then F rows of T values.
void write_sam_csv(const std::string& path, const SpeakerActivationMap& sam);

struct HeadTrainResult {
    double accuracy = 0.0;
    std::int64_t n_train = 0;
    std::int64_t n_test = 0;
};

/// Trains only the classification head on frozen-backbone embeddings
/// (train_per + test_per utterances per speaker, deterministic split) and
/// reports held-out accuracy.
HeadTrainResult train_classifier_head(Model& m, const std::vector<ManifestEntry>& manifest,
                                      std::int64_t train_per_speaker, std::int64_t test_per_speaker,
                                      std::uint64_t seed, std::int64_t epochs = 100, double lr = 1e-2);

/// Mean of the embeddings of all utterances except `exclude`.
Tensor utterance_reference_embedding(Model& m, const std::vector<Waveform>& utts, std::int64_t exclude);

/// Whole-utterance embedding (eval mode, full log-Mel).
Tensor embed_utterance(Model& m, const Waveform& w);

struct AlignmentRow {
    std::int64_t start_frame = 0;  // input log-Mel frames, end exclusive
    std::int64_t end_frame = 0;
    std::string phoneme;
    std::string group;  // vowels|semivowels|nasals|fricatives|stops
};

/// CSV `start_frame,end_frame,phoneme,group` with header.
std::vector<AlignmentRow> read_alignment(const std::string& path);
void write_alignment(const std::string& path, const std::vector<AlignmentRow>& rows);

/// `x.wav` -> `x.align.csv`.
std::string alignment_path_for(const std::string& wav_path);

struct GroupStats {
    std::string group;
    std::int64_t n_frames = 0;
    double mean = 0.0, median = 0.0, q25 = 0.0, q75 = 0.0;
};

struct FrameAnalysis {
    std::map<std::string, std::vector<double>> scores;  // per group, incl. "other"
    std::vector<GroupStats> summary;                    // the five named groups
};

/// Cosine similarity of each frame-level embedding against the speaker's
/// leave-one-out reference, stratified by the phoneme group containing the
/// model frame's center (input frame t'*stride + stride/2).
FrameAnalysis frame_similarity_analysis(Model& m, const std::vector<ManifestEntry>& manifest);

void write_frame_analysis(const std::string& dir, const FrameAnalysis& fa);

}  // namespace dtdy
