#include "chunklm/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "chunklm/io.hpp"

namespace chunklm {

namespace {

constexpr double kLogFloor = 1e-6;
constexpr double kMinCenterHz = 100.0;
constexpr double kMaxCenterHz = 7000.0;
constexpr uint32_t kCodecFileVersion = 1;

double to_float_grid(double x) { return static_cast<double>(static_cast<float>(x)); }

void round_tensor_to_float_grid(Tensor& t) {
    for (double& x : t.data) x = to_float_grid(x);
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
// eigenvalues and the matching eigenvectors as columns of v.
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigenvalues,
                  std::vector<double>& v) {
    v.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
    auto at = [&](std::vector<double>& m, int r, int c) -> double& {
        return m[static_cast<size_t>(r) * n + c];
    };
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += at(a, p, q) * at(a, p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(a, p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(a, k, p), akq = at(a, k, q);
                    at(a, k, p) = c * akp - s * akq;
                    at(a, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(a, p, k), aqk = at(a, q, k);
                    at(a, p, k) = c * apk - s * aqk;
                    at(a, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = at(v, k, p), vkq = at(v, k, q);
                    at(v, k, p) = c * vkp - s * vkq;
                    at(v, k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    eigenvalues.resize(n);
    for (int i = 0; i < n; ++i) eigenvalues[i] = a[static_cast<size_t>(i) * n + i];
}

// Solves a (possibly near-singular) symmetric system G x = r column by
// column with partial pivoting; a tiny ridge keeps degenerate codeword
// statistics solvable.
Tensor solve_gram(std::vector<double> g, int d, const Tensor& rhs) {
    const int cols = static_cast<int>(rhs.dims[1]);
    double trace = 0.0;
    for (int i = 0; i < d; ++i) trace += g[static_cast<size_t>(i) * d + i];
    const double ridge = 1e-9 * (trace / d + 1.0);
    for (int i = 0; i < d; ++i) g[static_cast<size_t>(i) * d + i] += ridge;

    Tensor x = Tensor::zeros({d, cols});
    std::vector<double> aug(static_cast<size_t>(d) * (d + cols));
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) aug[static_cast<size_t>(i) * (d + cols) + j] = g[static_cast<size_t>(i) * d + j];
        for (int j = 0; j < cols; ++j)
            aug[static_cast<size_t>(i) * (d + cols) + d + j] = rhs.data[static_cast<size_t>(i) * cols + j];
    }
    const int width = d + cols;
    for (int col = 0; col < d; ++col) {
        int pivot = col;
        for (int r = col + 1; r < d; ++r) {
            if (std::fabs(aug[static_cast<size_t>(r) * width + col]) >
                std::fabs(aug[static_cast<size_t>(pivot) * width + col]))
                pivot = r;
        }
        if (std::fabs(aug[static_cast<size_t>(pivot) * width + col]) < 1e-300) {
            throw std::runtime_error("codec fit: singular codeword Gram matrix");
        }
        if (pivot != col) {
            for (int j = 0; j < width; ++j)
                std::swap(aug[static_cast<size_t>(col) * width + j],
                          aug[static_cast<size_t>(pivot) * width + j]);
        }
        const double diag = aug[static_cast<size_t>(col) * width + col];
        for (int r = 0; r < d; ++r) {
            if (r == col) continue;
            const double f = aug[static_cast<size_t>(r) * width + col] / diag;
            if (f == 0.0) continue;
            for (int j = col; j < width; ++j)
                aug[static_cast<size_t>(r) * width + j] -= f * aug[static_cast<size_t>(col) * width + j];
        }
    }
    for (int i = 0; i < d; ++i) {
        const double diag = aug[static_cast<size_t>(i) * width + i];
        for (int j = 0; j < cols; ++j)
            x.data[static_cast<size_t>(i) * cols + j] = aug[static_cast<size_t>(i) * width + d + j] / diag;
    }
    return x;
}

std::vector<double> compress_row(const Tensor& compressor, const double* feature_row) {
    const int64_t bands = compressor.dims[0];
    const int64_t d = compressor.dims[1];
    std::vector<double> latent(d, 0.0);
    for (int64_t i = 0; i < bands; ++i) {
        const double f = feature_row[i];
        if (f == 0.0) continue;
        const double* row = &compressor.data[static_cast<size_t>(i) * d];
        for (int64_t j = 0; j < d; ++j) latent[j] += f * row[j];
    }
    return latent;
}

} // namespace

void CodecConfig::validate() const {
    if (frame_rate_hz <= 0) throw std::invalid_argument("codec config: frame rate must be positive");
    if (chunk_tokens <= 0) throw std::invalid_argument("codec config: chunk size must be positive");
    if (code_bits != 11 && code_bits != 12 && code_bits != 16) {
        throw std::invalid_argument("codec config: code bits must be 11, 12, or 16");
    }
    if (feature_dim <= 0) throw std::invalid_argument("codec config: feature dim must be positive");
    if (sample_rate_hz <= 0) throw std::invalid_argument("codec config: sample rate must be positive");
    if (sample_rate_hz % frame_rate_hz != 0) {
        throw std::invalid_argument("codec config: frame hop must divide the sample rate exactly");
    }
    const double latency = chunk_latency_ms();
    if (!(latency > 0.0) || latency != 1000.0 * chunk_tokens / frame_rate_hz) {
        throw std::invalid_argument("codec config: inconsistent chunk latency");
    }
}

int32_t quantize_latent(const std::vector<double>& latent) {
    if (latent.empty() || latent.size() > 31) {
        throw std::invalid_argument("quantize: latent width must be in [1, 31]");
    }
    for (double x : latent) {
        if (!std::isfinite(x)) throw std::invalid_argument("quantize: latent must be finite");
    }
    int32_t token = 0;
    for (size_t i = 0; i < latent.size(); ++i) {
        if (latent[i] > 0.0) token |= (int32_t{1} << i);
    }
    return token;
}

std::vector<double> dequantize_token(int64_t token, int32_t code_bits) {
    if (code_bits <= 0 || code_bits > 31) {
        throw std::invalid_argument("dequantize: code bits must be in [1, 31]");
    }
    if (token < 0 || token >= (int64_t{1} << code_bits)) {
        throw std::invalid_argument("dequantize: token " + std::to_string(token) +
                                    " out of range for " + std::to_string(code_bits) + " bits");
    }
    const double mag = 1.0 / std::sqrt(static_cast<double>(code_bits));
    std::vector<double> code(code_bits);
    for (int32_t i = 0; i < code_bits; ++i) {
        code[i] = (token >> i) & 1 ? mag : -mag;
    }
    return code;
}

std::vector<double> band_centers(int32_t bands) {
    if (bands <= 0) throw std::invalid_argument("band_centers: band count must be positive");
    std::vector<double> centers(bands);
    if (bands == 1) {
        centers[0] = kMinCenterHz;
        return centers;
    }
    const double ratio = kMaxCenterHz / kMinCenterHz;
    for (int32_t i = 0; i < bands; ++i) {
        centers[i] = kMinCenterHz * std::pow(ratio, static_cast<double>(i) / (bands - 1));
    }
    return centers;
}

Codec::Codec(CodecConfig config, Tensor compressor, Tensor decompressor)
    : config_(config), compressor_(std::move(compressor)), decompressor_(std::move(decompressor)) {
    config_.validate();
    if (compressor_.dims != std::vector<int64_t>{config_.feature_dim, config_.code_bits}) {
        throw std::invalid_argument("codec: compressor shape " + compressor_.shape_str() +
                                    " does not match config");
    }
    if (decompressor_.dims != std::vector<int64_t>{config_.code_bits, config_.feature_dim}) {
        throw std::invalid_argument("codec: decompressor shape " + decompressor_.shape_str() +
                                    " does not match config");
    }
    const std::vector<double> silent_row(config_.feature_dim, std::log(kLogFloor));
    silence_token_ = quantize_latent(compress_row(compressor_, silent_row.data()));
}

Tensor Codec::extract_features(const std::vector<double>& waveform) const {
    const int32_t hop = config_.hop();
    const int32_t bands = config_.feature_dim;
    const int64_t frames = static_cast<int64_t>(waveform.size()) / hop;
    Tensor features = Tensor::zeros({frames, bands});
    if (frames == 0) return features;
    for (double s : waveform) {
        if (!std::isfinite(s)) throw std::invalid_argument("extract_features: samples must be finite");
    }

    const std::vector<double> centers = band_centers(bands);
    std::vector<double> cos_table(static_cast<size_t>(bands) * hop);
    std::vector<double> sin_table(static_cast<size_t>(bands) * hop);
    for (int32_t b = 0; b < bands; ++b) {
        const double w = 2.0 * std::numbers::pi * centers[b] / config_.sample_rate_hz;
        for (int32_t n = 0; n < hop; ++n) {
            cos_table[static_cast<size_t>(b) * hop + n] = std::cos(w * n);
            sin_table[static_cast<size_t>(b) * hop + n] = std::sin(w * n);
        }
    }

    for (int64_t f = 0; f < frames; ++f) {
        const double* window = waveform.data() + f * hop;
        double* out = &features.data[static_cast<size_t>(f) * bands];
        for (int32_t b = 0; b < bands; ++b) {
            const double* ct = &cos_table[static_cast<size_t>(b) * hop];
            const double* st = &sin_table[static_cast<size_t>(b) * hop];
            double re = 0.0, im = 0.0;
            for (int32_t n = 0; n < hop; ++n) {
                re += window[n] * ct[n];
                im -= window[n] * st[n];
            }
            const double mag = std::sqrt(re * re + im * im) / hop;
            out[b] = std::log(mag + kLogFloor);
        }
    }
    return features;
}

Tensor Codec::compress(const Tensor& features) const {
    if (features.dims.size() != 2 || features.dims[1] != config_.feature_dim) {
        throw std::invalid_argument("compress: features " + features.shape_str() +
                                    " do not match feature dim " +
                                    std::to_string(config_.feature_dim));
    }
    const int64_t frames = features.dims[0];
    const int64_t d = config_.code_bits;
    Tensor latents = Tensor::zeros({frames, d});
    for (int64_t f = 0; f < frames; ++f) {
        const std::vector<double> z =
            compress_row(compressor_, &features.data[static_cast<size_t>(f) * config_.feature_dim]);
        std::copy(z.begin(), z.end(), latents.data.begin() + f * d);
    }
    return latents;
}

TokenStream Codec::encode(const std::vector<double>& waveform) const {
    const Tensor latents = compress(extract_features(waveform));
    const int64_t d = config_.code_bits;
    TokenStream tokens(latents.dims[0]);
    std::vector<double> row(d);
    for (int64_t f = 0; f < latents.dims[0]; ++f) {
        std::copy_n(latents.data.begin() + f * d, d, row.begin());
        tokens[f] = quantize_latent(row);
    }
    return tokens;
}

Tensor Codec::decompress(const TokenStream& tokens) const {
    const int64_t d = config_.code_bits;
    const int64_t bands = config_.feature_dim;
    Tensor features = Tensor::zeros({static_cast<int64_t>(tokens.size()), bands});
    for (size_t f = 0; f < tokens.size(); ++f) {
        const std::vector<double> code = dequantize_token(tokens[f], config_.code_bits);
        double* out = &features.data[f * bands];
        for (int64_t i = 0; i < d; ++i) {
            const double* row = &decompressor_.data[static_cast<size_t>(i) * bands];
            for (int64_t j = 0; j < bands; ++j) out[j] += code[i] * row[j];
        }
    }
    return features;
}

Codec Codec::fit(const CodecConfig& config, const std::vector<std::vector<double>>& waveforms) {
    config.validate();
    const int32_t bands = config.feature_dim;
    const int32_t d = config.code_bits;
    if (d > bands) {
        throw std::invalid_argument("codec fit: code bits exceed feature dim");
    }

    Codec probe(config, Tensor::zeros({bands, d}), Tensor::zeros({d, bands}));
    std::vector<Tensor> feature_mats;
    int64_t total_frames = 0;
    for (const auto& wave : waveforms) {
        Tensor f = probe.extract_features(wave);
        total_frames += f.dims[0];
        feature_mats.push_back(std::move(f));
    }
    if (total_frames < d) {
        throw std::invalid_argument("codec fit: need at least " + std::to_string(d) + " frames");
    }

    std::vector<double> moment(static_cast<size_t>(bands) * bands, 0.0);
    for (const Tensor& f : feature_mats) {
        for (int64_t r = 0; r < f.dims[0]; ++r) {
            const double* row = &f.data[static_cast<size_t>(r) * bands];
            for (int32_t i = 0; i < bands; ++i) {
                for (int32_t j = i; j < bands; ++j) {
                    moment[static_cast<size_t>(i) * bands + j] += row[i] * row[j];
                }
            }
        }
    }
    for (int32_t i = 0; i < bands; ++i) {
        for (int32_t j = 0; j < i; ++j) {
            moment[static_cast<size_t>(i) * bands + j] = moment[static_cast<size_t>(j) * bands + i];
        }
    }
    for (double& m : moment) m /= static_cast<double>(total_frames);

    std::vector<double> eigenvalues, vectors;
    jacobi_eigen(moment, bands, eigenvalues, vectors);
    std::vector<int> order(bands);
    for (int32_t i = 0; i < bands; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return eigenvalues[a] > eigenvalues[b]; });

    Tensor compressor = Tensor::zeros({bands, d});
    for (int32_t j = 0; j < d; ++j) {
        const int col = order[j];
        double largest = 0.0;
        for (int32_t i = 0; i < bands; ++i) {
            const double v = vectors[static_cast<size_t>(i) * bands + col];
            if (std::fabs(v) > std::fabs(largest)) largest = v;
        }
        const double sign = largest < 0.0 ? -1.0 : 1.0;
        for (int32_t i = 0; i < bands; ++i) {
            compressor.at(i, j) = sign * vectors[static_cast<size_t>(i) * bands + col];
        }
    }
    round_tensor_to_float_grid(compressor);

    std::vector<double> gram(static_cast<size_t>(d) * d, 0.0);
    Tensor rhs = Tensor::zeros({d, bands});
    std::vector<double> code_buf;
    for (const Tensor& f : feature_mats) {
        for (int64_t r = 0; r < f.dims[0]; ++r) {
            const double* row = &f.data[static_cast<size_t>(r) * bands];
            const std::vector<double> z = compress_row(compressor, row);
            code_buf = dequantize_token(quantize_latent(z), d);
            for (int32_t i = 0; i < d; ++i) {
                for (int32_t j = 0; j < d; ++j) {
                    gram[static_cast<size_t>(i) * d + j] += code_buf[i] * code_buf[j];
                }
                for (int32_t j = 0; j < bands; ++j) {
                    rhs.at(i, j) += code_buf[i] * row[j];
                }
            }
        }
    }
    Tensor decompressor = solve_gram(std::move(gram), d, rhs);
    round_tensor_to_float_grid(decompressor);

    return Codec(config, std::move(compressor), std::move(decompressor));
}

void Codec::save(const std::string& path) const {
    BinaryWriter w(path);
    w.bytes("WCDC", 4);
    w.u32(kCodecFileVersion);
    w.u32(static_cast<uint32_t>(config_.frame_rate_hz));
    w.u32(static_cast<uint32_t>(config_.chunk_tokens));
    w.u32(static_cast<uint32_t>(config_.code_bits));
    w.u32(static_cast<uint32_t>(config_.feature_dim));
    w.u32(static_cast<uint32_t>(config_.sample_rate_hz));
    w.u32(static_cast<uint32_t>(silence_token_));
    w.u32(2);
    auto write_matrix = [&](const std::string& name, const Tensor& t) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.dims[0]));
        w.u32(static_cast<uint32_t>(t.dims[1]));
        for (double x : t.data) w.f32(static_cast<float>(x));
    };
    write_matrix("compressor", compressor_);
    write_matrix("decompressor", decompressor_);
    w.close();
}

Codec Codec::load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("WCDC", "codec parameter");
    const uint32_t version = r.u32();
    if (version != kCodecFileVersion) {
        throw std::runtime_error(path + ": unsupported codec file version " +
                                 std::to_string(version));
    }
    CodecConfig config;
    config.frame_rate_hz = static_cast<int32_t>(r.u32());
    config.chunk_tokens = static_cast<int32_t>(r.u32());
    config.code_bits = static_cast<int32_t>(r.u32());
    config.feature_dim = static_cast<int32_t>(r.u32());
    config.sample_rate_hz = static_cast<int32_t>(r.u32());
    const int32_t stored_silence = static_cast<int32_t>(r.u32());
    config.validate();

    const uint32_t matrix_count = r.u32();
    Tensor compressor, decompressor;
    bool have_comp = false, have_decomp = false;
    for (uint32_t m = 0; m < matrix_count; ++m) {
        const std::string name = r.str();
        const int64_t rows = r.u32();
        const int64_t cols = r.u32();
        Tensor t = Tensor::zeros({rows, cols});
        for (double& x : t.data) x = static_cast<double>(r.f32());
        if (name == "compressor") {
            compressor = std::move(t);
            have_comp = true;
        } else if (name == "decompressor") {
            decompressor = std::move(t);
            have_decomp = true;
        } else {
            throw std::runtime_error(path + ": unknown codec matrix '" + name + "'");
        }
    }
    if (!have_comp || !have_decomp) {
        throw std::runtime_error(path + ": codec file missing compressor or decompressor");
    }
    Codec codec(config, std::move(compressor), std::move(decompressor));
    if (codec.silence_token() != stored_silence) {
        throw std::runtime_error(path + ": stored silence token " +
                                 std::to_string(stored_silence) + " does not match parameters");
    }
    return codec;
}

TokenStream pad_to_chunk(TokenStream tokens, int32_t chunk_tokens, int32_t silence_token) {
    if (chunk_tokens <= 0) throw std::invalid_argument("pad_to_chunk: chunk size must be positive");
    while (tokens.size() % static_cast<size_t>(chunk_tokens) != 0) {
        tokens.push_back(silence_token);
    }
    return tokens;
}

} // namespace chunklm
