#include "dtdy/audio.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dtdy/errors.hpp"

namespace dtdy {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff), static_cast<char>((v >> 16) & 0xff),
                 static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    out.write(b, 2);
}

// In-place iterative radix-2 FFT, n a power of two.
void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Reflect (mirror without edge repeat), bouncing for short signals.
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

}  // namespace

Waveform read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open WAV file: " + path);
    char tag[5] = {0};
    in.read(tag, 4);
    if (!in || std::strncmp(tag, "RIFF", 4) != 0) throw io_error("not a RIFF file: " + path);
    read_u32(in);  // riff size
    in.read(tag, 4);
    if (!in || std::strncmp(tag, "WAVE", 4) != 0) throw io_error("not a WAVE file: " + path);

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    std::vector<double> samples;
    bool have_data = false;
    while (in.read(tag, 4)) {
        const std::uint32_t size = read_u32(in);
        if (!in) break;
        if (std::strncmp(tag, "fmt ", 4) == 0) {
            format = read_u16(in);
            channels = read_u16(in);
            rate = read_u32(in);
            read_u32(in);  // byte rate
            read_u16(in);  // block align
            bits = read_u16(in);
            if (size > 16) in.seekg(size - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::strncmp(tag, "data", 4) == 0) {
            if (!have_fmt) throw io_error("WAV data chunk before fmt chunk: " + path);
            if (format != 1) throw io_error("unsupported WAV encoding (format tag " + std::to_string(format) +
                                            ", expected PCM): " + path);
            if (bits != 16) throw io_error("unsupported WAV bit depth " + std::to_string(bits) + " (expected 16): " + path);
            if (channels != 1)
                throw io_error("multichannel WAV not supported (" + std::to_string(channels) + " channels): " + path);
            const std::size_t n = size / 2;
            samples.resize(n);
            std::vector<char> raw(size);
            in.read(raw.data(), static_cast<std::streamsize>(size));
            if (!in) throw io_error("truncated WAV data: " + path);
            for (std::size_t i = 0; i < n; ++i) {
                const auto lo = static_cast<unsigned char>(raw[2 * i]);
                const auto hi = static_cast<unsigned char>(raw[2 * i + 1]);
                const auto s = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
                samples[i] = static_cast<double>(s) / 32768.0;
            }
            have_data = true;
        } else {
            in.seekg(size + (size & 1), std::ios::cur);
        }
    }
    if (!have_fmt || !have_data) throw io_error("missing fmt or data chunk: " + path);
    if (samples.empty()) throw io_error("empty WAV file: " + path);
    Waveform w;
    w.samples = std::move(samples);
    w.sample_rate = static_cast<int>(rate);
    return w;
}

void write_wav(const std::string& path, const Waveform& w) {
    if (w.samples.empty()) throw std::invalid_argument("write_wav: empty waveform");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write WAV file: " + path);
    const auto n = static_cast<std::uint32_t>(w.samples.size());
    out.write("RIFF", 4);
    write_u32(out, 36 + 2 * n);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    write_u32(out, 16);
    write_u16(out, 1);  // PCM
    write_u16(out, 1);  // mono
    write_u32(out, static_cast<std::uint32_t>(w.sample_rate));
    write_u32(out, static_cast<std::uint32_t>(w.sample_rate * 2));
    write_u16(out, 2);
    write_u16(out, 16);
    out.write("data", 4);
    write_u32(out, 2 * n);
    for (double x : w.samples) {
        double s = std::round(x * 32768.0);
        s = std::min(32767.0, std::max(-32768.0, s));
        write_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
    }
    if (!out) throw io_error("failed writing WAV file: " + path);
}

std::vector<std::vector<double>> mel_filterbank() {
    std::vector<std::vector<double>> fb(kMelBins, std::vector<double>(kSpectrumBins, 0.0));
    const double mlo = hz_to_mel(kMelLoHz), mhi = hz_to_mel(kMelHiHz);
    std::vector<double> edges(kMelBins + 2);
    for (int i = 0; i < kMelBins + 2; ++i)
        edges[static_cast<std::size_t>(i)] = mel_to_hz(mlo + (mhi - mlo) * i / (kMelBins + 1));
    for (int m = 0; m < kMelBins; ++m) {
        const double f0 = edges[static_cast<std::size_t>(m)];
        const double f1 = edges[static_cast<std::size_t>(m + 1)];
        const double f2 = edges[static_cast<std::size_t>(m + 2)];
        for (int k = 0; k < kSpectrumBins; ++k) {
            const double f = static_cast<double>(k) * 16000.0 / kFftSize;
            double w = 0.0;
            if (f > f0 && f < f2) w = std::min((f - f0) / (f1 - f0), (f2 - f) / (f2 - f1));
            fb[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] = std::max(0.0, w);
        }
    }
    return fb;
}

LogMelSegment log_mel(const Waveform& w) {
    if (w.sample_rate != 16000)
        throw Error(ErrorCode::config,
                    "log_mel: expected 16000 Hz input, got " + std::to_string(w.sample_rate) + " (no resampling)");
    const auto len = static_cast<std::int64_t>(w.samples.size());
    if (len < kFrameHop) throw std::invalid_argument("log_mel: waveform shorter than one hop");
    const std::int64_t T = len / kFrameHop;
    const std::int64_t half = kFrameLen / 2;

    static const auto fb = mel_filterbank();
    std::vector<double> window(kFrameLen);
    for (int i = 0; i < kFrameLen; ++i)
        window[static_cast<std::size_t>(i)] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (kFrameLen - 1));

    std::vector<double> bins(static_cast<std::size_t>(kMelBins * T));
    std::vector<std::complex<double>> buf(kFftSize);
    std::vector<double> power(kSpectrumBins);
    for (std::int64_t t = 0; t < T; ++t) {
        for (int i = 0; i < kFrameLen; ++i) {
            // frame t is centered at sample t*hop; padded coords start at -half
            const std::int64_t src = reflect_index(t * kFrameHop - half + i, len);
            buf[static_cast<std::size_t>(i)] = w.samples[static_cast<std::size_t>(src)] * window[static_cast<std::size_t>(i)];
        }
        for (int i = kFrameLen; i < kFftSize; ++i) buf[static_cast<std::size_t>(i)] = 0.0;
        fft(buf);
        for (int k = 0; k < kSpectrumBins; ++k) power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
        for (int m = 0; m < kMelBins; ++m) {
            double e = 0.0;
            const auto& row = fb[static_cast<std::size_t>(m)];
            for (int k = 0; k < kSpectrumBins; ++k) e += row[static_cast<std::size_t>(k)] * power[static_cast<std::size_t>(k)];
            bins[static_cast<std::size_t>(m * T + t)] = std::log(e + kLogFloor);
        }
    }
    return Tensor(Shape{kMelBins, T}, std::move(bins));
}

LogMelSegment normalize(const LogMelSegment& m) {
    if (m.rank() != 2) throw std::invalid_argument("normalize: expected [F,T] matrix");
    const auto F = m.dim(0), T = m.dim(1);
    if (T < 2) throw std::invalid_argument("normalize: need at least 2 frames, got " + std::to_string(T));
    std::vector<double> out(static_cast<std::size_t>(F * T));
    const double* p = m.data().data();
    for (std::int64_t f = 0; f < F; ++f) {
        const double* row = p + f * T;
        double mean = 0.0;
        for (std::int64_t t = 0; t < T; ++t) mean += row[t];
        mean /= static_cast<double>(T);
        double var = 0.0;
        for (std::int64_t t = 0; t < T; ++t) var += (row[t] - mean) * (row[t] - mean);
        var /= static_cast<double>(T);
        const double sd = std::max(std::sqrt(var), 1e-8);
        double* q = out.data() + f * T;
        for (std::int64_t t = 0; t < T; ++t) q[t] = (row[t] - mean) / sd;
    }
    return Tensor(Shape{F, T}, std::move(out));
}

Waveform sample_train_segment(const Waveform& w, Rng& rng) {
    if (w.samples.empty()) throw std::invalid_argument("sample_train_segment: empty waveform");
    const std::int64_t need = 2 * w.sample_rate;
    const auto len = static_cast<std::int64_t>(w.samples.size());
    Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.resize(static_cast<std::size_t>(need));
    if (len < need) {
        for (std::int64_t i = 0; i < need; ++i)
            out.samples[static_cast<std::size_t>(i)] = w.samples[static_cast<std::size_t>(i % len)];
    } else {
        const std::int64_t start = rng.uniform_int(len - need + 1);
        std::copy(w.samples.begin() + start, w.samples.begin() + start + need, out.samples.begin());
    }
    return out;
}

std::vector<Waveform> sample_eval_segments(const Waveform& w) {
    if (w.samples.empty()) throw std::invalid_argument("sample_eval_segments: empty waveform");
    const std::int64_t need = 4 * w.sample_rate;
    const auto len = static_cast<std::int64_t>(w.samples.size());
    std::vector<double> src;
    if (len < need) {
        src.resize(static_cast<std::size_t>(need));
        for (std::int64_t i = 0; i < need; ++i) src[static_cast<std::size_t>(i)] = w.samples[static_cast<std::size_t>(i % len)];
    } else {
        src = w.samples;
    }
    const auto slen = static_cast<std::int64_t>(src.size());
    std::vector<Waveform> out;
    out.reserve(10);
    for (int i = 0; i < 10; ++i) {
        const auto start = static_cast<std::int64_t>(std::llround(static_cast<double>(i) * (slen - need) / 9.0));
        Waveform seg;
        seg.sample_rate = w.sample_rate;
        seg.samples.assign(src.begin() + start, src.begin() + start + need);
        out.push_back(std::move(seg));
    }
    return out;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(in, line)) throw config_error("empty manifest: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "speaker_id,utterance_path")
        throw config_error("manifest header must be 'speaker_id,utterance_path': " + path);
    std::vector<ManifestEntry> entries;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 >= line.size())
            throw config_error("malformed manifest row " + std::to_string(lineno) + " in " + path);
        entries.push_back(ManifestEntry{line.substr(0, comma), line.substr(comma + 1)});
    }
    return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write manifest: " + path);
    out << "speaker_id,utterance_path\n";
    for (const auto& e : entries) out << e.speaker_id << "," << e.path << "\n";
    if (!out) throw io_error("failed writing manifest: " + path);
}

}  // namespace dtdy
