#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace chunklm {

// Little-endian binary file helpers. All multi-byte values are written byte
// by byte so the format does not depend on host endianness.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path);

    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void bytes(const void* p, size_t n);
    void str(const std::string& s);
    void close();

private:
    std::ofstream out_;
    std::string path_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path);

    uint32_t u32();
    uint64_t u64();
    float f32();
    void bytes(void* p, size_t n);
    std::string str();
    void expect_magic(const char magic[4], const std::string& what);
    bool at_end();

private:
    std::ifstream in_;
    std::string path_;
};

// 16 kHz mono 16-bit PCM RIFF containers. Samples are doubles in [-1, 1];
// values outside that range are clamped on write.
void write_wav(const std::string& path, const std::vector<double>& samples, int sample_rate_hz);

struct WavData {
    std::vector<double> samples;
    int sample_rate_hz = 0;
};
WavData read_wav(const std::string& path);

// Token-stream files: magic "WTOK", version, vocab, frame rate, chunk size,
// count, then one u32 per token.
struct TokenFile {
    uint32_t vocab = 0;
    uint32_t frame_rate_hz = 0;
    uint32_t chunk_tokens = 0;
    std::vector<int32_t> tokens;
};
void write_token_file(const std::string& path, const TokenFile& file);
TokenFile read_token_file(const std::string& path);

// UTF-8 key=value config text: one pair per line, '#' starts a comment,
// blank lines ignored. Later keys override earlier ones.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> read_kv_file(const std::string& path);
void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

std::vector<std::string> split_csv_line(const std::string& line);

} // namespace chunklm
