#include "dtdy/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dtdy/errors.hpp"
#include "dtdy/explain.hpp"

namespace dtdy {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double snap_to_harmonic(double hz, double f0) { return std::max(1.0, std::round(hz / f0)) * f0; }

// Harmonic amplitude: spectral tilt plus Gaussian formant resonances.
double harmonic_amp(double hz, const VoiceParams& v, const double* formants, double tilt_pow) {
    double a = 0.08 * tilt_pow;
    for (int i = 0; i < 3; ++i) {
        const double d = (hz - formants[i]) / 130.0;
        a += tilt_pow * std::exp(-0.5 * d * d);
    }
    (void)v;
    return a;
}

// Additive harmonic segment with linearly gliding formants.
std::vector<double> render_harmonic(const VoiceParams& v, const double* f_start, const double* f_end,
                                    std::int64_t n, int rate, Rng& rng) {
    const int n_harm = std::max(1, static_cast<int>(7600.0 / v.f0));
    std::vector<double> phase(static_cast<std::size_t>(n_harm));
    for (auto& p : phase) p = rng.uniform(0.0, kTwoPi);
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t t = 0; t < n; ++t) {
        const double u = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 0.0;
        double f[3];
        for (int i = 0; i < 3; ++i) f[i] = f_start[i] + u * (f_end[i] - f_start[i]);
        double s = 0.0;
        double tilt_pow = 1.0;
        for (int h = 1; h <= n_harm; ++h) {
            const double hz = h * v.f0;
            if (hz > 7800.0) break;
            s += harmonic_amp(hz, v, f, tilt_pow) *
                 std::sin(kTwoPi * hz * static_cast<double>(t) / rate + phase[static_cast<std::size_t>(h - 1)]);
            tilt_pow *= v.tilt;
        }
        out[static_cast<std::size_t>(t)] = s;
    }
    return out;
}

std::vector<double> render_noise_band(double center_hz, double width_hz, std::int64_t n, int rate, Rng& rng) {
    // white noise through an RBJ bandpass biquad
    const double w0 = kTwoPi * center_hz / rate;
    const double q = std::max(0.5, center_hz / std::max(width_hz, 1.0));
    const double alpha = std::sin(w0) / (2.0 * q);
    const double b0 = alpha, b1 = 0.0, b2 = -alpha;
    const double a0 = 1.0 + alpha, a1 = -2.0 * std::cos(w0), a2 = 1.0 - alpha;
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (std::int64_t t = 0; t < n; ++t) {
        const double x = rng.gaussian();
        const double y = (b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        out[static_cast<std::size_t>(t)] = y;
    }
    return out;
}

void apply_envelope(std::vector<double>& seg, int rate) {
    const auto ramp = static_cast<std::int64_t>(0.010 * rate);
    const auto n = static_cast<std::int64_t>(seg.size());
    for (std::int64_t t = 0; t < std::min(ramp, n); ++t) {
        const double g = static_cast<double>(t) / static_cast<double>(ramp);
        seg[static_cast<std::size_t>(t)] *= g;
        seg[static_cast<std::size_t>(n - 1 - t)] *= g;
    }
}

void scale_rms(std::vector<double>& seg, double target) {
    double ss = 0.0;
    for (double x : seg) ss += x * x;
    const double rms = std::sqrt(ss / static_cast<double>(seg.size()));
    if (rms > 0.0)
        for (auto& x : seg) x *= target / rms;
}

struct Segment {
    std::vector<double> samples;
    std::string phoneme;
    std::string group;
};

Segment render_segment(const VoiceParams& v, const std::string& group, int rate, Rng& rng) {
    Segment seg;
    seg.group = group;
    if (group == "vowels") {
        static const struct { const char* ph; double f1_scale; } kVowels[] =
            {{"aa", 1.0}, {"iy", 0.7}, {"uw", 0.8}, {"eh", 1.15}};
        const auto& vo = kVowels[rng.uniform_int(4)];
        seg.phoneme = vo.ph;
        const auto n = static_cast<std::int64_t>(rng.uniform(0.15, 0.30) * rate);
        seg.samples = render_vowel(v, vo.f1_scale, n, rate, rng);
    } else if (group == "semivowels") {
        static const char* kPh[] = {"w", "l", "r", "y"};
        seg.phoneme = kPh[rng.uniform_int(4)];
        const auto n = static_cast<std::int64_t>(rng.uniform(0.12, 0.25) * rate);
        double fs[3], fe[3];
        for (int i = 0; i < 3; ++i) {
            fs[i] = snap_to_harmonic(v.formants[i] * 0.85, v.f0);
            fe[i] = snap_to_harmonic(v.formants[i] * 1.15, v.f0);
        }
        seg.samples = render_harmonic(v, fs, fe, n, rate, rng);
        scale_rms(seg.samples, 0.13);
    } else if (group == "nasals") {
        static const char* kPh[] = {"m", "n", "ng"};
        seg.phoneme = kPh[rng.uniform_int(3)];
        const auto n = static_cast<std::int64_t>(rng.uniform(0.10, 0.25) * rate);
        // murmur: energy concentrated under ~500 Hz
        double fs[3] = {snap_to_harmonic(250.0, v.f0), snap_to_harmonic(v.formants[0] * 0.6, v.f0), 7000.0};
        seg.samples = render_harmonic(v, fs, fs, n, rate, rng);
        scale_rms(seg.samples, 0.10);
    } else if (group == "fricatives") {
        static const char* kPh[] = {"s", "sh", "f", "z"};
        seg.phoneme = kPh[rng.uniform_int(4)];
        const auto n = static_cast<std::int64_t>(rng.uniform(0.10, 0.25) * rate);
        seg.samples = render_noise_band(v.fricative_hz, 1500.0, n, rate, rng);
        scale_rms(seg.samples, 0.08);
    } else {  // stops
        static const char* kPh[] = {"p", "t", "k", "b"};
        seg.phoneme = kPh[rng.uniform_int(4)];
        const auto closure = static_cast<std::int64_t>(rng.uniform(0.04, 0.08) * rate);
        const auto burst = static_cast<std::int64_t>(rng.uniform(0.02, 0.04) * rate);
        seg.samples.assign(static_cast<std::size_t>(closure), 0.0);
        auto b = render_noise_band(3000.0, 2500.0, burst, rate, rng);
        scale_rms(b, 0.09);
        seg.samples.insert(seg.samples.end(), b.begin(), b.end());
    }
    apply_envelope(seg.samples, rate);
    return seg;
}

}  // namespace

std::vector<double> render_vowel(const VoiceParams& v, double f1_scale, std::int64_t n_samples, int sample_rate,
                                 Rng& rng) {
    double f[3] = {snap_to_harmonic(v.formants[0] * f1_scale, v.f0), v.formants[1], v.formants[2]};
    auto out = render_harmonic(v, f, f, n_samples, sample_rate, rng);
    scale_rms(out, 0.15);
    return out;
}

std::vector<VoiceParams> synth_voices(const SynthSpec& spec, std::uint64_t seed) {
    std::vector<VoiceParams> voices;
    Rng rng(mix64(seed, 0x501CEu));
    for (std::int64_t i = 0; i < spec.n_speakers; ++i) {
        VoiceParams v;
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            v.f0 = rng.uniform(80.0, 300.0);
            v.formants[0] = snap_to_harmonic(rng.uniform(300.0, 900.0), v.f0);
            v.formants[1] = snap_to_harmonic(rng.uniform(1000.0, 2400.0), v.f0);
            v.formants[2] = snap_to_harmonic(rng.uniform(2500.0, 3500.0), v.f0);
            v.tilt = rng.uniform(0.80, 0.96);
            v.fricative_hz = rng.uniform(3000.0, 6500.0);
            ok = true;
            for (const auto& u : voices) {
                const bool f0_close = std::abs(u.f0 - v.f0) < spec.min_f0_margin;
                const bool formant_close = std::abs(u.formants[0] - v.formants[0]) < spec.min_formant_margin;
                if (f0_close && formant_close) {
                    ok = false;
                    break;
                }
            }
        }
        if (!ok) throw config_error("synth_voices: could not place " + std::to_string(spec.n_speakers) +
                                    " speakers with the required margins");
        voices.push_back(v);
    }
    return voices;
}

SynthResult synth_dataset(const SynthSpec& spec, std::uint64_t seed, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir + "/wav", ec);
    if (ec || !fs::is_directory(out_dir + "/wav")) throw io_error("cannot create output directory: " + out_dir);

    SynthResult res;
    res.voices = synth_voices(spec, seed);
    const int rate = spec.sample_rate;
    const auto total = static_cast<std::int64_t>(spec.utterance_seconds * rate);
    static const char* kGroups[] = {"vowels", "semivowels", "nasals", "fricatives", "stops"};
    // vowels weighted up: speech is mostly voiced
    static const int kGroupDraw[] = {0, 0, 0, 1, 2, 3, 3, 4};

    std::vector<ManifestEntry> manifest;
    for (std::int64_t s = 0; s < spec.n_speakers; ++s) {
        char sid[32];
        std::snprintf(sid, sizeof(sid), "spk%03lld", static_cast<long long>(s));
        for (std::int64_t u = 0; u < spec.utterances_per_speaker; ++u) {
            Rng rng(mix64(mix64(seed, 0x077u), static_cast<std::uint64_t>(s) * 100003u + static_cast<std::uint64_t>(u)));
            std::vector<double> samples;
            samples.reserve(static_cast<std::size_t>(total));
            std::vector<AlignmentRow> rows;
            while (static_cast<std::int64_t>(samples.size()) < total) {
                const auto* group = kGroups[kGroupDraw[rng.uniform_int(8)]];
                Segment seg = render_segment(res.voices[static_cast<std::size_t>(s)], group, rate, rng);
                const auto start = static_cast<std::int64_t>(samples.size());
                samples.insert(samples.end(), seg.samples.begin(), seg.samples.end());
                const auto end = std::min<std::int64_t>(static_cast<std::int64_t>(samples.size()), total);
                AlignmentRow row;
                row.start_frame = start / kFrameHop;
                row.end_frame = end / kFrameHop;
                row.phoneme = seg.phoneme;
                row.group = group;
                if (row.end_frame > row.start_frame) rows.push_back(std::move(row));
            }
            samples.resize(static_cast<std::size_t>(total));
            // low-level noise floor so no row of the spectrogram is constant
            for (auto& x : samples) x += 1e-3 * rng.gaussian();
            double peak = 0.0;
            for (double x : samples) peak = std::max(peak, std::abs(x));
            if (peak > 0.0)
                for (auto& x : samples) x *= 0.5 / peak;

            char name[64];
            std::snprintf(name, sizeof(name), "%s_utt%02lld.wav", sid, static_cast<long long>(u));
            const std::string wav_path = out_dir + "/wav/" + name;
            Waveform w;
            w.sample_rate = rate;
            w.samples = std::move(samples);
            write_wav(wav_path, w);
            write_alignment(alignment_path_for(wav_path), rows);
            manifest.push_back(ManifestEntry{sid, wav_path});
            ++res.n_wavs;
        }
    }
    res.manifest_path = out_dir + "/manifest.csv";
    write_manifest(res.manifest_path, manifest);
    {
        std::ofstream os(out_dir + "/speakers.csv");
        os << "speaker_id,f0,f1,f2,f3,tilt,fricative_hz\n";
        char buf[160];
        for (std::int64_t s = 0; s < spec.n_speakers; ++s) {
            const auto& v = res.voices[static_cast<std::size_t>(s)];
            std::snprintf(buf, sizeof(buf), "spk%03lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", static_cast<long long>(s),
                          v.f0, v.formants[0], v.formants[1], v.formants[2], v.tilt, v.fricative_hz);
            os << buf;
        }
    }
    return res;
}

}  // namespace dtdy
