#include "chunklm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <stdexcept>

#include "chunklm/io.hpp"

namespace chunklm {

namespace {

constexpr double kModDepth = 0.5;
constexpr int kFormantCount = 4;
constexpr double kBaseGain = 0.05;
constexpr double kMaxGainCosine = 0.9;

int nearest_band(double freq_hz, const std::vector<double>& centers) {
    const double lf = std::log(freq_hz);
    int best = 0;
    double best_dist = std::fabs(lf - std::log(centers[0]));
    for (size_t i = 1; i < centers.size(); ++i) {
        const double d = std::fabs(lf - std::log(centers[i]));
        if (d < best_dist) {
            best_dist = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

int32_t draw_from_cdf(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.next_unit();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int32_t>(i);
    }
    return static_cast<int32_t>(probs.size()) - 1;
}

} // namespace

double gain_cosine(const SpeakerSpec& a, const SpeakerSpec& b) {
    if (a.band_gains.size() != b.band_gains.size()) {
        throw std::invalid_argument("gain_cosine: band counts differ");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.band_gains.size(); ++i) {
        dot += a.band_gains[i] * b.band_gains[i];
        na += a.band_gains[i] * a.band_gains[i];
        nb += b.band_gains[i] * b.band_gains[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("gain_cosine: zero gain vector");
    return dot / std::sqrt(na * nb);
}

std::vector<SpeakerSpec> make_speakers(int32_t count, int32_t bands, uint64_t seed) {
    if (count <= 0) throw std::invalid_argument("make_speakers: count must be positive");
    if (bands < kFormantCount) {
        throw std::invalid_argument("make_speakers: need at least " +
                                    std::to_string(kFormantCount) + " bands");
    }
    Rng rng(seed, {0x7370656bull});
    std::vector<SpeakerSpec> speakers;
    speakers.reserve(count);
    for (int32_t i = 0; i < count; ++i) {
        SpeakerSpec spec;
        bool accepted = false;
        for (int attempt = 0; attempt < 1000 && !accepted; ++attempt) {
            spec.id = i;
            spec.f0_hz = 90.0 + 190.0 * rng.next_unit();
            spec.mod_rate_hz = 2.0 + 6.0 * rng.next_unit();
            spec.band_gains.assign(bands, kBaseGain);
            int placed = 0;
            while (placed < kFormantCount) {
                const int64_t band = static_cast<int64_t>(rng.next_below(bands));
                if (spec.band_gains[band] > kBaseGain) continue;
                spec.band_gains[band] = 0.6 + 0.4 * rng.next_unit();
                ++placed;
            }
            accepted = true;
            for (const SpeakerSpec& other : speakers) {
                if (gain_cosine(spec, other) >= kMaxGainCosine) {
                    accepted = false;
                    break;
                }
            }
        }
        if (!accepted) {
            throw std::runtime_error("make_speakers: could not place a dissimilar speaker");
        }
        speakers.push_back(std::move(spec));
    }
    return speakers;
}

std::vector<double> synth_waveform(const SpeakerSpec& speaker, double seconds,
                                   int32_t sample_rate_hz, uint64_t seed) {
    if (!(seconds > 0.0)) throw std::invalid_argument("synth_waveform: seconds must be positive");
    if (sample_rate_hz <= 0) throw std::invalid_argument("synth_waveform: bad sample rate");
    if (speaker.band_gains.empty() || speaker.f0_hz <= 0.0) {
        throw std::invalid_argument("synth_waveform: malformed speaker");
    }
    const int64_t n = static_cast<int64_t>(std::llround(seconds * sample_rate_hz));
    const std::vector<double> centers = band_centers(static_cast<int32_t>(speaker.band_gains.size()));
    const double top_hz = std::min(centers.back() * 1.05, 0.45 * sample_rate_hz);

    // One phasor per harmonic plus one for its amplitude modulation; exact
    // per-sample rotation replaces trig calls in the inner loop.
    struct Osc {
        double amp;
        double c, s;       // carrier phasor
        double cw, sw;     // carrier rotation per sample
        double mc, ms;     // modulator phasor
        double mcw, msw;   // modulator rotation per sample
    };
    Rng rng(seed, {0x77617665ull});
    std::vector<Osc> oscs;
    double amp_sum = 0.0;
    for (int k = 1; k * speaker.f0_hz <= top_hz; ++k) {
        Osc o;
        o.amp = speaker.band_gains[nearest_band(k * speaker.f0_hz, centers)];
        const double w = 2.0 * std::numbers::pi * k * speaker.f0_hz / sample_rate_hz;
        const double mw = 2.0 * std::numbers::pi * speaker.mod_rate_hz / sample_rate_hz;
        const double phase = 2.0 * std::numbers::pi * rng.next_unit();
        const double mphase = 2.0 * std::numbers::pi * rng.next_unit();
        o.c = std::cos(phase);
        o.s = std::sin(phase);
        o.cw = std::cos(w);
        o.sw = std::sin(w);
        o.mc = std::cos(mphase);
        o.ms = std::sin(mphase);
        o.mcw = std::cos(mw);
        o.msw = std::sin(mw);
        amp_sum += o.amp * (1.0 + kModDepth);
        oscs.push_back(o);
    }
    if (oscs.empty()) throw std::invalid_argument("synth_waveform: fundamental above band range");

    const double scale = 0.5 / amp_sum;
    std::vector<double> wave(n);
    for (int64_t t = 0; t < n; ++t) {
        double acc = 0.0;
        for (Osc& o : oscs) {
            acc += o.amp * (1.0 + kModDepth * o.ms) * o.s;
            const double ns = o.s * o.cw + o.c * o.sw;
            const double nc = o.c * o.cw - o.s * o.sw;
            o.s = ns;
            o.c = nc;
            const double nms = o.ms * o.mcw + o.mc * o.msw;
            const double nmc = o.mc * o.mcw - o.ms * o.msw;
            o.ms = nms;
            o.mc = nmc;
        }
        wave[t] = acc * scale;
    }
    return wave;
}

std::vector<Utterance> make_corpus(const std::vector<SpeakerSpec>& speakers, double hours,
                                   uint64_t seed, const std::string& out_dir,
                                   int32_t sample_rate_hz) {
    if (speakers.empty()) throw std::invalid_argument("make_corpus: no speakers");
    if (!(hours > 0.0)) throw std::invalid_argument("make_corpus: hours must be positive");
    std::filesystem::create_directories(out_dir);

    Rng rng(seed, {0x636f7270ull});
    std::vector<Utterance> utterances;
    double remaining = hours * 3600.0;
    int index = 0;
    while (remaining >= 3.0) {
        double secs = 3.0 + 7.0 * rng.next_unit();
        secs = std::min(secs, remaining);
        const SpeakerSpec& spk = speakers[rng.next_below(speakers.size())];
        const uint64_t utt_seed = rng.next_u64();

        char id[32];
        std::snprintf(id, sizeof(id), "utt_%05d", index);
        Utterance u;
        u.id = id;
        u.speaker_id = spk.id;
        u.seconds = secs;
        u.seed = utt_seed;
        u.path = out_dir + "/" + u.id + ".wav";
        write_wav(u.path, synth_waveform(spk, secs, sample_rate_hz, utt_seed), sample_rate_hz);

        remaining -= secs;
        ++index;
        utterances.push_back(std::move(u));
    }
    if (utterances.empty()) {
        throw std::invalid_argument("make_corpus: corpus too short for a single utterance");
    }
    write_manifest(out_dir + "/manifest.csv", utterances);
    return utterances;
}

void write_manifest(const std::string& path, const std::vector<Utterance>& utterances) {
    std::string text = "utterance_id, speaker_id, seconds, seed, path\n";
    char line[512];
    for (const Utterance& u : utterances) {
        std::snprintf(line, sizeof(line), "%s, %d, %.6f, %llu, %s\n", u.id.c_str(), u.speaker_id,
                      u.seconds, static_cast<unsigned long long>(u.seed), u.path.c_str());
        text += line;
    }
    write_text_file(path, text);
}

std::vector<Utterance> read_manifest(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<Utterance> utterances;
    size_t start = 0;
    int lineno = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        if (lineno == 1 && !f.empty() && f[0] == "utterance_id") continue;
        if (f.size() != 5) {
            throw std::runtime_error(path + ": manifest line " + std::to_string(lineno) +
                                     " has " + std::to_string(f.size()) + " fields, expected 5");
        }
        Utterance u;
        u.id = f[0];
        u.speaker_id = std::stoi(f[1]);
        u.seconds = std::stod(f[2]);
        u.seed = std::stoull(f[3]);
        u.path = f[4];
        utterances.push_back(std::move(u));
    }
    return utterances;
}

std::vector<EvalPair> make_eval_pairs(const MarkovSource& source, PairFamily family, int64_t n,
                                      const TokenPairConfig& config, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("make_eval_pairs: need at least one pair");
    if (family == PairFamily::speaker_swap) {
        throw std::invalid_argument(
            "make_eval_pairs: speaker-swap pairs need speakers and a codec");
    }
    if (config.stream_len < 2) {
        throw std::invalid_argument("make_eval_pairs: stream length too short");
    }

    std::vector<double> marginal;
    if (family == PairFamily::content_corrupt) {
        if (config.corrupt_span < 1 || config.corrupt_span > config.stream_len) {
            throw std::invalid_argument("make_eval_pairs: corrupt span out of range");
        }
        marginal = source.stationary_direct();
    } else {
        if (config.prompt_len < 1 || config.prompt_len >= config.stream_len) {
            throw std::invalid_argument("make_eval_pairs: prompt length out of range");
        }
    }

    Rng rng(seed, {0x70616972ull});
    std::vector<EvalPair> pairs;
    pairs.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        Rng child = rng.fork(static_cast<uint64_t>(i));
        EvalPair pair;
        pair.family = family;
        if (family == PairFamily::content_corrupt) {
            pair.positive = source.sample(config.stream_len, child);
            pair.negative = pair.positive;
            const int64_t start =
                static_cast<int64_t>(child.next_below(config.stream_len - config.corrupt_span + 1));
            for (int64_t t = start; t < start + config.corrupt_span; ++t) {
                pair.negative[t] = source.token_of(draw_from_cdf(marginal, child));
            }
            pair.prompt_len = 0;
        } else {
            pair.positive = source.sample(config.stream_len, child);
            const int64_t cont_len = config.stream_len - config.prompt_len;
            Rng alt = child.fork(1);
            const std::vector<int32_t> other = source.sample(cont_len, alt);
            pair.negative.assign(pair.positive.begin(), pair.positive.begin() + config.prompt_len);
            pair.negative.insert(pair.negative.end(), other.begin(), other.end());
            pair.prompt_len = config.prompt_len;
        }
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

std::vector<EvalPair> make_eval_pairs(const std::vector<SpeakerSpec>& speakers, const Codec& codec,
                                      PairFamily family, int64_t n, double seconds, uint64_t seed) {
    if (family != PairFamily::speaker_swap) {
        throw std::invalid_argument("make_eval_pairs: this overload builds speaker-swap pairs");
    }
    if (speakers.size() < 2) {
        throw std::invalid_argument("make_eval_pairs: speaker swap needs at least two speakers");
    }
    if (n < 1) throw std::invalid_argument("make_eval_pairs: need at least one pair");
    if (!(seconds > 0.0)) throw std::invalid_argument("make_eval_pairs: seconds must be positive");

    const int32_t hop = codec.config().hop();
    const int64_t half_samples =
        std::max<int64_t>(hop, static_cast<int64_t>(seconds / 2.0 * codec.config().sample_rate_hz) /
                                   hop * hop);
    const double half_seconds = static_cast<double>(half_samples) / codec.config().sample_rate_hz;

    Rng rng(seed, {0x70616972ull});
    std::vector<EvalPair> pairs;
    pairs.reserve(n);
    for (int64_t i = 0; i < n; ++i) {
        Rng child = rng.fork(static_cast<uint64_t>(i));
        const size_t a = static_cast<size_t>(child.next_below(speakers.size()));
        size_t b = a;
        while (b == a) b = static_cast<size_t>(child.next_below(speakers.size()));
        const uint64_t seed_head = child.next_u64();
        const uint64_t seed_tail = child.next_u64();

        std::vector<double> head =
            synth_waveform(speakers[a], half_seconds, codec.config().sample_rate_hz, seed_head);
        const std::vector<double> tail_pos =
            synth_waveform(speakers[a], half_seconds, codec.config().sample_rate_hz, seed_tail);
        const std::vector<double> tail_neg =
            synth_waveform(speakers[b], half_seconds, codec.config().sample_rate_hz, seed_tail);

        std::vector<double> wave_pos = head;
        wave_pos.insert(wave_pos.end(), tail_pos.begin(), tail_pos.end());
        std::vector<double> wave_neg = std::move(head);
        wave_neg.insert(wave_neg.end(), tail_neg.begin(), tail_neg.end());

        EvalPair pair;
        pair.family = family;
        pair.positive = codec.encode(wave_pos);
        pair.negative = codec.encode(wave_neg);
        pair.prompt_len = half_samples / hop;
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

double oracle_pair_accuracy(const std::vector<EvalPair>& pairs, const MarkovSource& source) {
    if (pairs.empty()) throw std::invalid_argument("oracle_pair_accuracy: no pairs");
    int64_t correct = 0;
    for (const EvalPair& pair : pairs) {
        if (source.log_likelihood(pair.positive) > source.log_likelihood(pair.negative)) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

} // namespace chunklm
