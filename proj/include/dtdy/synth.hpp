#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtdy/audio.hpp"
#include "dtdy/rng.hpp"

namespace dtdy {

/// Per-speaker voice: fundamental, three formant centers (snapped to
/// harmonics of F0 so spectral peaks land on Mel bins predictably), spectral
/// tilt, and a fricative noise band center.
struct VoiceParams {
    double f0 = 120.0;          // 80-300 Hz
    double formants[3] = {500.0, 1500.0, 2800.0};
    double tilt = 0.85;         // per-harmonic amplitude decay
    double fricative_hz = 4500.0;
};

struct SynthSpec {
    std::int64_t n_speakers = 20;
    std::int64_t utterances_per_speaker = 10;
    double utterance_seconds = 3.0;
    int sample_rate = 16000;
    // distinct speakers must differ by at least one of these margins
    double min_f0_margin = 8.0;
    double min_formant_margin = 60.0;
};

/// Deterministic per-speaker voices satisfying the pairwise margin.
std::vector<VoiceParams> synth_voices(const SynthSpec& spec, std::uint64_t seed);

/// Canonical vowel segment (harmonic source shaped by the voice's formants);
/// shared with tests that audit spectral peaks.
std::vector<double> render_vowel(const VoiceParams& v, double f1_scale, std::int64_t n_samples, int sample_rate,
                                 Rng& rng);

struct SynthResult {
    std::string manifest_path;
    std::vector<VoiceParams> voices;
    std::int64_t n_wavs = 0;
};

/// Writes 16 kHz mono WAVs, per-utterance alignment CSVs (five phoneme
/// groups), a manifest and a speakers.csv under out_dir. Byte-deterministic
/// for a given seed.
SynthResult synth_dataset(const SynthSpec& spec, std::uint64_t seed, const std::string& out_dir);

}  // namespace dtdy
