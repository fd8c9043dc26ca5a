#pragma once

#include <string>
#include <vector>

#include "dtdy/rng.hpp"
#include "dtdy/tensor.hpp"

namespace dtdy {

struct Waveform {
    std::vector<double> samples;  // in [-1, 1]
    int sample_rate = 16000;

    double seconds() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

/// PCM WAV, format tag 1, 16-bit signed LE, mono. Samples scale by 1/32768.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

inline constexpr int kMelBins = 64;
inline constexpr int kFrameLen = 400;  // 25 ms at 16 kHz
inline constexpr int kFrameHop = 160;  // 10 ms
inline constexpr int kFftSize = 512;
inline constexpr int kSpectrumBins = kFftSize / 2 + 1;
inline constexpr double kMelLoHz = 20.0;
inline constexpr double kMelHiHz = 7600.0;
inline constexpr double kLogFloor = 1e-6;

/// [F=64, T] matrix of log-Mel energies.
using LogMelSegment = Tensor;

/// Centered framing (reflect pad of kFrameLen/2 each side), T = floor(len/hop),
/// Hamming window, 512-point FFT power spectrum, 64 HTK-scale triangular Mel
/// filters over 20-7600 Hz, log(power + 1e-6). Requires 16 kHz input.
LogMelSegment log_mel(const Waveform& w);

/// Per frequency row: subtract mean, divide by population std (guarded away
/// from zero); constant rows map to exactly zero. Requires T >= 2.
LogMelSegment normalize(const LogMelSegment& m);

/// [64][257] filter weights; exposed so tests can audit coverage.
std::vector<std::vector<double>> mel_filterbank();

/// Random 2 s crop; shorter utterances are tiled to 2 s first.
Waveform sample_train_segment(const Waveform& w, Rng& rng);

/// Ten 4 s crops at evenly spaced starts i*(len-64000)/9; shorter utterances
/// are tiled to 4 s, which makes all ten identical.
std::vector<Waveform> sample_eval_segments(const Waveform& w);

struct ManifestEntry {
    std::string speaker_id;
    std::string path;
};

/// UTF-8 CSV with header `speaker_id,utterance_path`.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

}  // namespace dtdy
