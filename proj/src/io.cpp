#include "chunklm/io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace chunklm {

namespace {

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error(path + ": truncated file");
    }
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

} // namespace

BinaryWriter::BinaryWriter(const std::string& path)
    : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw std::runtime_error(path + ": cannot open for writing");
}

void BinaryWriter::u32(uint32_t v) { put_u32(out_, v); }

void BinaryWriter::u64(uint64_t v) {
    put_u32(out_, static_cast<uint32_t>(v & 0xffffffffu));
    put_u32(out_, static_cast<uint32_t>(v >> 32));
}

void BinaryWriter::f32(float v) { put_u32(out_, std::bit_cast<uint32_t>(v)); }

void BinaryWriter::bytes(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void BinaryWriter::str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
}

void BinaryWriter::close() {
    out_.flush();
    if (!out_) throw std::runtime_error(path_ + ": write failed");
    out_.close();
}

BinaryReader::BinaryReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error(path + ": cannot open for reading");
}

uint32_t BinaryReader::u32() { return get_u32(in_, path_); }

uint64_t BinaryReader::u64() {
    const uint64_t lo = get_u32(in_, path_);
    const uint64_t hi = get_u32(in_, path_);
    return lo | (hi << 32);
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

void BinaryReader::bytes(void* p, size_t n) {
    if (!in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) {
        throw std::runtime_error(path_ + ": truncated file");
    }
}

std::string BinaryReader::str() {
    const uint32_t n = u32();
    if (n > (1u << 20)) throw std::runtime_error(path_ + ": unreasonable string length");
    std::string s(n, '\0');
    if (n > 0) bytes(s.data(), n);
    return s;
}

void BinaryReader::expect_magic(const char magic[4], const std::string& what) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, magic, 4) != 0) {
        throw std::runtime_error(path_ + ": not a " + what + " file (bad magic)");
    }
}

bool BinaryReader::at_end() {
    return in_.peek() == std::char_traits<char>::eof();
}

void write_wav(const std::string& path, const std::vector<double>& samples, int sample_rate_hz) {
    if (sample_rate_hz <= 0) throw std::invalid_argument("write_wav: sample rate must be positive");
    BinaryWriter w(path);
    const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
    w.bytes("RIFF", 4);
    w.u32(36 + data_bytes);
    w.bytes("WAVE", 4);
    w.bytes("fmt ", 4);
    w.u32(16);
    w.u32(1u | (1u << 16));                         // PCM format, mono
    w.u32(static_cast<uint32_t>(sample_rate_hz));
    w.u32(static_cast<uint32_t>(sample_rate_hz * 2)); // byte rate
    w.u32(2u | (16u << 16));                        // block align, bits per sample
    w.bytes("data", 4);
    w.u32(data_bytes);
    for (double s : samples) {
        double c = s;
        if (c > 1.0) c = 1.0;
        if (c < -1.0) c = -1.0;
        const int16_t q = static_cast<int16_t>(std::lrint(c * 32767.0));
        const unsigned char b[2] = {static_cast<unsigned char>(q & 0xff),
                                    static_cast<unsigned char>((q >> 8) & 0xff)};
        w.bytes(b, 2);
    }
    w.close();
}

WavData read_wav(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("RIFF", "RIFF/WAVE");
    r.u32();
    char wave[4];
    r.bytes(wave, 4);
    if (std::memcmp(wave, "WAVE", 4) != 0) {
        throw std::runtime_error(path + ": not a RIFF/WAVE file");
    }
    WavData out;
    bool have_fmt = false;
    while (!r.at_end()) {
        char id[4];
        r.bytes(id, 4);
        const uint32_t size = r.u32();
        if (std::memcmp(id, "fmt ", 4) == 0) {
            const uint32_t fmt_channels = r.u32();
            const uint32_t rate = r.u32();
            r.u32();
            const uint32_t align_bits = r.u32();
            if ((fmt_channels & 0xffff) != 1 || (fmt_channels >> 16) != 1 ||
                (align_bits >> 16) != 16) {
                throw std::runtime_error(path + ": only mono 16-bit PCM is supported");
            }
            out.sample_rate_hz = static_cast<int>(rate);
            have_fmt = true;
            for (uint32_t skip = 16; skip < size; ++skip) {
                char c;
                r.bytes(&c, 1);
            }
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) throw std::runtime_error(path + ": data chunk before fmt chunk");
            const uint32_t count = size / 2;
            out.samples.resize(count);
            for (uint32_t i = 0; i < count; ++i) {
                unsigned char b[2];
                r.bytes(b, 2);
                const int16_t q = static_cast<int16_t>(static_cast<uint16_t>(b[0]) |
                                                       (static_cast<uint16_t>(b[1]) << 8));
                out.samples[i] = static_cast<double>(q) / 32767.0;
            }
            return out;
        } else {
            std::vector<char> skip(size);
            if (size > 0) r.bytes(skip.data(), size);
        }
    }
    throw std::runtime_error(path + ": no data chunk found");
}

namespace {
constexpr uint32_t kTokenFileVersion = 1;
}

void write_token_file(const std::string& path, const TokenFile& file) {
    for (size_t i = 0; i < file.tokens.size(); ++i) {
        const int32_t t = file.tokens[i];
        if (t < 0 || static_cast<uint32_t>(t) >= file.vocab) {
            throw std::invalid_argument("write_token_file: token out of range at position " +
                                        std::to_string(i));
        }
    }
    BinaryWriter w(path);
    w.bytes("WTOK", 4);
    w.u32(kTokenFileVersion);
    w.u32(file.vocab);
    w.u32(file.frame_rate_hz);
    w.u32(file.chunk_tokens);
    w.u64(file.tokens.size());
    for (int32_t t : file.tokens) w.u32(static_cast<uint32_t>(t));
    w.close();
}

TokenFile read_token_file(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("WTOK", "token stream");
    const uint32_t version = r.u32();
    if (version != kTokenFileVersion) {
        throw std::runtime_error(path + ": unsupported token file version " +
                                 std::to_string(version));
    }
    TokenFile f;
    f.vocab = r.u32();
    f.frame_rate_hz = r.u32();
    f.chunk_tokens = r.u32();
    const uint64_t count = r.u64();
    f.tokens.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t t = r.u32();
        if (t >= f.vocab) {
            throw std::runtime_error(path + ": token out of range at position " +
                                     std::to_string(i));
        }
        f.tokens[i] = static_cast<int32_t>(t);
    }
    return f;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key=value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    return parse_kv_text(read_text_file(path));
}

void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv) {
    std::string text;
    for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
    write_text_file(path, text);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << text;
    out.flush();
    if (!out) throw std::runtime_error(path + ": write failed");
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
        const size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            fields.push_back(trim(line.substr(start)));
            break;
        }
        fields.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return fields;
}

} // namespace chunklm
