#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/tensor.hpp"
#include "chunklm/tokens.hpp"

namespace chunklm {

struct CodecConfig {
    int32_t frame_rate_hz = 50;
    int32_t chunk_tokens = 4;
    int32_t code_bits = 11;
    int32_t feature_dim = 32;
    int32_t sample_rate_hz = 16000;

    void validate() const;
    int64_t vocab() const { return int64_t{1} << code_bits; }
    int32_t hop() const { return sample_rate_hz / frame_rate_hz; }
    double chunk_latency_ms() const { return 1000.0 * chunk_tokens / frame_rate_hz; }
};

// Sign quantizer over the unit hypersphere: bit i of the token is set iff
// latent component i is strictly positive, bit 0 least significant. Positive
// scaling never changes the sign pattern, so quantize is scale invariant and
// the all-zero latent maps to token 0.
int32_t quantize_latent(const std::vector<double>& latent);
std::vector<double> dequantize_token(int64_t token, int32_t code_bits);

// Framed causal feature extraction, a linear compressor fit on data, the
// sign quantizer above, and a least-squares decompressor back to feature
// space. Stateless after construction.
class Codec {
public:
    Codec(CodecConfig config, Tensor compressor, Tensor decompressor);

    // Fits the compressor to the top principal directions of the uncentered
    // feature second moment and the decompressor by least squares from
    // quantized codewords back to features.
    static Codec fit(const CodecConfig& config, const std::vector<std::vector<double>>& waveforms);

    const CodecConfig& config() const { return config_; }
    const Tensor& compressor() const { return compressor_; }
    const Tensor& decompressor() const { return decompressor_; }
    int32_t silence_token() const { return silence_token_; }

    // One row per full hop of input; each frame reads only its own hop of
    // samples, so no frame depends on samples past its right edge.
    Tensor extract_features(const std::vector<double>& waveform) const;
    Tensor compress(const Tensor& features) const;
    TokenStream encode(const std::vector<double>& waveform) const;
    Tensor decompress(const TokenStream& tokens) const;

    void save(const std::string& path) const;
    static Codec load(const std::string& path);

private:
    CodecConfig config_;
    Tensor compressor_;   // feature_dim x code_bits
    Tensor decompressor_; // code_bits x feature_dim
    int32_t silence_token_ = 0;
};

// Right-pads with the silence token up to the next multiple of chunk_tokens.
TokenStream pad_to_chunk(TokenStream tokens, int32_t chunk_tokens, int32_t silence_token);

// Filter-bank center frequencies in Hz, geometrically spaced over the band
// the synthetic corpus occupies.
std::vector<double> band_centers(int32_t bands);

} // namespace chunklm
