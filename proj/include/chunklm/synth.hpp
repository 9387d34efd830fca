#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/codec.hpp"
#include "chunklm/markov.hpp"
#include "chunklm/rng.hpp"
#include "chunklm/tokens.hpp"

namespace chunklm {

// A synthetic voice: a harmonic stack at f0 whose per-harmonic amplitudes
// are sampled from a formant-like spectral envelope, plus slow amplitude
// modulation. Speakers are distinguishable through the envelope alone.
struct SpeakerSpec {
    int32_t id = 0;
    double f0_hz = 0.0;
    std::vector<double> band_gains;
    double mod_rate_hz = 0.0;
};

double gain_cosine(const SpeakerSpec& a, const SpeakerSpec& b);

// Deterministically draws `count` speakers whose band-gain vectors are
// pairwise dissimilar (cosine < 0.9), by rejection.
std::vector<SpeakerSpec> make_speakers(int32_t count, int32_t bands, uint64_t seed);

std::vector<double> synth_waveform(const SpeakerSpec& speaker, double seconds,
                                   int32_t sample_rate_hz, uint64_t seed);

struct Utterance {
    std::string id;
    int32_t speaker_id = 0;
    double seconds = 0.0;
    uint64_t seed = 0;
    std::string path;
};

// Writes WAV files plus a manifest into out_dir and returns the utterance
// list. The (speakers, hours, seed) triple fully determines every byte.
std::vector<Utterance> make_corpus(const std::vector<SpeakerSpec>& speakers, double hours,
                                   uint64_t seed, const std::string& out_dir,
                                   int32_t sample_rate_hz);

void write_manifest(const std::string& path, const std::vector<Utterance>& utterances);
std::vector<Utterance> read_manifest(const std::string& path);

struct TokenPairConfig {
    int64_t stream_len = 256;
    int64_t prompt_len = 128;
    int64_t corrupt_span = 48;
};

// Token-level families drawn from a Markov source: content-corrupt replaces
// a span of the positive with draws from the stationary marginal;
// continuation swaps in an independently sampled continuation after a
// shared prompt.
std::vector<EvalPair> make_eval_pairs(const MarkovSource& source, PairFamily family, int64_t n,
                                      const TokenPairConfig& config, uint64_t seed);

// Waveform-level speaker-swap family: both candidates share the first half
// exactly; the negative switches to a different speaker at the midpoint.
std::vector<EvalPair> make_eval_pairs(const std::vector<SpeakerSpec>& speakers, const Codec& codec,
                                      PairFamily family, int64_t n, double seconds, uint64_t seed);

// Fraction of pairs a likelihood-ratio classifier using the true source
// decides correctly (ties count as wrong, matching the scoring tie rule).
double oracle_pair_accuracy(const std::vector<EvalPair>& pairs, const MarkovSource& source);

} // namespace chunklm
