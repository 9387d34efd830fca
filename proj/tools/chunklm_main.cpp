#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chunklm/codec.hpp"
#include "chunklm/eval.hpp"
#include "chunklm/generator.hpp"
#include "chunklm/io.hpp"
#include "chunklm/model.hpp"
#include "chunklm/synth.hpp"
#include "chunklm/trainer.hpp"

namespace chunklm {
namespace {

namespace fs = std::filesystem;

constexpr const char* kOutEnvVar = "CHUNKLM_OUT";

const char* kUsage = R"(usage: chunklm <subcommand> [flags]

subcommands:
  synth      write a synthetic speech corpus (wav files + manifest.csv)
  fit-codec  fit the tokenizer codec on a corpus and save it
  tokenize   encode a corpus into token files (one .wtok per utterance)
  train      train a model on token files, writing checkpoint + loss csv
  generate   stream continuations of a token prompt, with timing stats
  eval       score positive/negative pair files with a checkpoint
  sweep      train and measure one model per (window, chunk) grid cell

flags:
  --config PATH     load key=value defaults from a file
  --set KEY=VALUE   override one config key (repeatable)
  --KEY VALUE       shorthand for --set KEY=VALUE (e.g. --seed 3, --out DIR)

Precedence is defaults, then the config file, then command-line flags in
order. Every run echoes its resolved configuration into the output
directory. The output directory comes from --out or the environment
variable CHUNKLM_OUT.

exit codes: 0 success, 1 usage or configuration error, 2 execution failure.
)";

using Config = std::map<std::string, std::string>;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Removes everything this run added to the output directory unless the
// command reached commit(). Files that were already present are kept.
class OutputGuard {
public:
    explicit OutputGuard(const std::string& dir) : dir_(dir) {
        fs::create_directories(dir_);
        for (const auto& entry : fs::directory_iterator(dir_))
            preexisting_.insert(entry.path().string());
    }
    ~OutputGuard() {
        if (committed_) return;
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(dir_, ec))
            if (!preexisting_.contains(entry.path().string()))
                fs::remove_all(entry.path(), ec);
    }
    void commit() { committed_ = true; }

private:
    std::string dir_;
    std::set<std::string> preexisting_;
    bool committed_ = false;
};

const std::string& require_key(const Config& cfg, const std::string& key) {
    const auto it = cfg.find(key);
    if (it == cfg.end() || it->second.empty())
        throw UsageError("missing required config key '" + key + "'");
    return it->second;
}

int64_t cfg_int(const Config& cfg, const std::string& key) {
    const std::string& text = require_key(cfg, key);
    size_t used = 0;
    int64_t value = 0;
    try {
        value = std::stoll(text, &used);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': '" + text + "' is not an integer");
    }
    if (used != text.size())
        throw UsageError("config key '" + key + "': '" + text + "' is not an integer");
    return value;
}

double cfg_double(const Config& cfg, const std::string& key) {
    const std::string& text = require_key(cfg, key);
    size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': '" + text + "' is not a number");
    }
    if (used != text.size())
        throw UsageError("config key '" + key + "': '" + text + "' is not a number");
    return value;
}

bool cfg_bool(const Config& cfg, const std::string& key) {
    const std::string& text = require_key(cfg, key);
    if (text == "0" || text == "false") return false;
    if (text == "1" || text == "true") return true;
    throw UsageError("config key '" + key + "': '" + text + "' is not 0/1/true/false");
}

std::string out_dir(const Config& cfg) {
    auto it = cfg.find("out");
    if (it != cfg.end() && !it->second.empty()) return it->second;
    if (const char* env = std::getenv(kOutEnvVar); env && *env) return env;
    throw UsageError(std::string("no output directory: pass --out or set ") + kOutEnvVar);
}

void require_input(const std::string& path, const std::string& what) {
    if (!fs::exists(path))
        throw std::runtime_error(what + " not found: " + path);
}

void echo_config(const Config& cfg, const std::string& subcommand, const std::string& dir) {
    Config resolved = cfg;
    resolved["subcommand"] = subcommand;
    resolved["out"] = dir;
    write_kv_file((fs::path(dir) / (subcommand + ".config")).string(), resolved);
}

CodecConfig codec_config_from(const Config& cfg) {
    CodecConfig c;
    c.frame_rate_hz = static_cast<int32_t>(cfg_int(cfg, "frame_rate"));
    c.chunk_tokens = static_cast<int32_t>(cfg_int(cfg, "chunk_tokens"));
    c.code_bits = static_cast<int32_t>(cfg_int(cfg, "code_bits"));
    c.feature_dim = static_cast<int32_t>(cfg_int(cfg, "feature_dim"));
    c.sample_rate_hz = static_cast<int32_t>(cfg_int(cfg, "sample_rate"));
    c.validate();
    return c;
}

struct TokenCorpus {
    std::vector<TokenStream> streams;
    std::vector<std::string> ids;
    uint32_t vocab = 0;
    uint32_t frame_rate_hz = 0;
};

TokenCorpus load_token_corpus(const std::string& csv_path) {
    require_input(csv_path, "token manifest");
    const fs::path base = fs::path(csv_path).parent_path();
    std::istringstream in(read_text_file(csv_path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("utterance_id", 0) != 0)
        throw std::runtime_error("token manifest " + csv_path + ": missing header");
    TokenCorpus corpus;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 4)
            throw std::runtime_error("token manifest " + csv_path + " line " +
                                     std::to_string(line_no) + ": expected 4 fields");
        const TokenFile file = read_token_file((base / fields[2]).string());
        if (corpus.streams.empty()) {
            corpus.vocab = file.vocab;
            corpus.frame_rate_hz = file.frame_rate_hz;
        } else if (file.vocab != corpus.vocab) {
            throw std::runtime_error("token manifest " + csv_path + ": utterance " + fields[0] +
                                     " has vocab " + std::to_string(file.vocab) + ", expected " +
                                     std::to_string(corpus.vocab));
        }
        corpus.ids.push_back(fields[0]);
        corpus.streams.push_back(file.tokens);
    }
    if (corpus.streams.empty())
        throw std::runtime_error("token manifest " + csv_path + ": no utterances");
    return corpus;
}

ModelConfig model_config_from(const Config& cfg, int64_t vocab) {
    ModelConfig mc;
    mc.vocab = vocab;
    mc.chunk = cfg_int(cfg, "chunk");
    mc.window = cfg_int(cfg, "window");
    mc.layers = cfg_int(cfg, "layers");
    mc.heads = cfg_int(cfg, "heads");
    mc.model_dim = cfg_int(cfg, "model_dim");
    mc.validate();
    return mc;
}

TrainConfig train_config_from(const Config& cfg, int64_t frame_rate_hz) {
    TrainConfig tc;
    tc.batch_size = cfg_int(cfg, "batch_size");
    tc.learning_rate = cfg_double(cfg, "learning_rate");
    tc.weight_decay = cfg_double(cfg, "weight_decay");
    tc.clip_norm = cfg_double(cfg, "clip_norm");
    tc.plateau_factor = cfg_double(cfg, "plateau_factor");
    tc.plateau_min_delta = cfg_double(cfg, "plateau_min_delta");
    tc.segment_seconds = cfg_double(cfg, "segment_seconds");
    tc.patience_epochs = cfg_int(cfg, "patience_epochs");
    tc.lr_reset_enabled = cfg_bool(cfg, "lr_reset");
    tc.max_epochs = cfg_int(cfg, "max_epochs");
    tc.steps_per_epoch = cfg_int(cfg, "steps_per_epoch");
    tc.frame_rate_hz = frame_rate_hz;
    tc.seed = static_cast<uint64_t>(cfg_int(cfg, "seed"));
    tc.validate();
    return tc;
}

int cmd_synth(const Config& cfg) {
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "synth", dir);
    const int64_t speaker_count = cfg_int(cfg, "speakers");
    const double hours = cfg_double(cfg, "hours");
    const uint64_t seed = static_cast<uint64_t>(cfg_int(cfg, "seed"));
    const int32_t bands = static_cast<int32_t>(cfg_int(cfg, "feature_dim"));
    const int32_t sample_rate = static_cast<int32_t>(cfg_int(cfg, "sample_rate"));

    const std::vector<SpeakerSpec> speakers =
        make_speakers(static_cast<int32_t>(speaker_count), bands, seed);
    const std::vector<Utterance> utterances =
        make_corpus(speakers, hours, seed, dir, sample_rate);

    // Round-trip validation: the manifest must describe real readable audio.
    const std::vector<Utterance> loaded =
        read_manifest((fs::path(dir) / "manifest.csv").string());
    if (loaded.size() != utterances.size())
        throw std::runtime_error("corpus validation failed: manifest row count mismatch");
    double seconds = 0.0;
    for (const Utterance& u : loaded) {
        const WavData wav = read_wav(u.path);
        if (wav.sample_rate_hz != sample_rate)
            throw std::runtime_error("corpus validation failed: bad sample rate in " + u.path);
        seconds += u.seconds;
    }
    std::printf("wrote %zu utterances (%.2f hours) from %lld speakers to %s\n", loaded.size(),
                seconds / 3600.0, static_cast<long long>(speaker_count), dir.c_str());
    guard.commit();
    return 0;
}

int cmd_fit_codec(const Config& cfg) {
    const std::string manifest = require_key(cfg, "corpus");
    require_input(manifest, "corpus manifest");
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "fit-codec", dir);
    const CodecConfig codec_config = codec_config_from(cfg);
    const int64_t fit_utterances = cfg_int(cfg, "fit_utterances");

    const std::vector<Utterance> utterances = read_manifest(manifest);
    std::vector<std::vector<double>> waveforms;
    for (const Utterance& u : utterances) {
        if (static_cast<int64_t>(waveforms.size()) >= fit_utterances) break;
        waveforms.push_back(read_wav(u.path).samples);
    }
    const Codec codec = Codec::fit(codec_config, waveforms);

    const std::string path = (fs::path(dir) / "codec.wcdc").string();
    codec.save(path);
    const Codec loaded = Codec::load(path);
    if (loaded.silence_token() != codec.silence_token())
        throw std::runtime_error("codec validation failed: silence token changed on reload");
    std::printf("fit codec on %zu utterances: vocab %lld, %d tokens/s, silence token %d -> %s\n",
                waveforms.size(), static_cast<long long>(codec_config.vocab()),
                codec_config.frame_rate_hz, codec.silence_token(), path.c_str());
    guard.commit();
    return 0;
}

int cmd_tokenize(const Config& cfg) {
    const std::string manifest = require_key(cfg, "corpus");
    const std::string codec_path = require_key(cfg, "codec");
    require_input(manifest, "corpus manifest");
    require_input(codec_path, "codec file");
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "tokenize", dir);

    const Codec codec = Codec::load(codec_path);
    const std::vector<Utterance> utterances = read_manifest(manifest);
    std::ostringstream csv;
    csv << "utterance_id,speaker_id,path,tokens\n";
    int64_t total_tokens = 0;
    for (const Utterance& u : utterances) {
        const TokenStream tokens = codec.encode(read_wav(u.path).samples);
        const std::string name = u.id + ".wtok";
        TokenFile file;
        file.vocab = static_cast<uint32_t>(codec.config().vocab());
        file.frame_rate_hz = static_cast<uint32_t>(codec.config().frame_rate_hz);
        file.chunk_tokens = static_cast<uint32_t>(codec.config().chunk_tokens);
        file.tokens = tokens;
        write_token_file((fs::path(dir) / name).string(), file);
        csv << u.id << "," << u.speaker_id << "," << name << "," << tokens.size() << "\n";
        total_tokens += static_cast<int64_t>(tokens.size());
    }
    const std::string csv_path = (fs::path(dir) / "tokens.csv").string();
    write_text_file(csv_path, csv.str());

    const TokenCorpus loaded = load_token_corpus(csv_path);
    if (loaded.streams.size() != utterances.size())
        throw std::runtime_error("tokenize validation failed: token manifest count mismatch");
    std::printf("tokenized %zu utterances (%lld tokens at %d/s) to %s\n", utterances.size(),
                static_cast<long long>(total_tokens), codec.config().frame_rate_hz, dir.c_str());
    guard.commit();
    return 0;
}

int cmd_train(const Config& cfg) {
    const std::string tokens_path = require_key(cfg, "tokens");
    const std::string codec_path = require_key(cfg, "codec");
    require_input(tokens_path, "token manifest");
    require_input(codec_path, "codec file");
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "train", dir);

    const Codec codec = Codec::load(codec_path);
    const TokenCorpus corpus = load_token_corpus(tokens_path);
    if (corpus.vocab != static_cast<uint32_t>(codec.config().vocab()))
        throw std::runtime_error("token files use vocab " + std::to_string(corpus.vocab) +
                                 " but the codec defines " +
                                 std::to_string(codec.config().vocab()));
    const std::string vocab_text = require_key(cfg, "vocab");
    if (vocab_text != "auto" && cfg_int(cfg, "vocab") != codec.config().vocab())
        throw std::runtime_error("requested vocab " + vocab_text + " does not match the codec (" +
                                 std::to_string(codec.config().vocab()) + ")");

    TrainerState state = [&] {
        const auto resume = cfg.find("resume");
        if (resume != cfg.end() && !resume->second.empty()) {
            require_input(resume->second, "checkpoint");
            TrainerState s = load_checkpoint(resume->second);
            s.config.max_epochs = cfg_int(cfg, "max_epochs");
            return s;
        }
        const ModelConfig mc = model_config_from(cfg, codec.config().vocab());
        const TrainConfig tc = train_config_from(cfg, codec.config().frame_rate_hz);
        return make_trainer(ModelParams::init(mc, tc.seed), tc, codec.silence_token());
    }();

    const TrainResult result = run_training(state, corpus.streams);
    for (const EpochRow& row : result.curve)
        std::printf("epoch %lld  train_nll %.6f  val_nll %.6f  lr %.8g\n",
                    static_cast<long long>(row.epoch), row.train_nll, row.val_nll, row.lr);
    if (result.early_stopped) std::printf("stopped early after %lld epochs without improvement\n",
                                          static_cast<long long>(state.config.patience_epochs));

    const std::string ckpt = (fs::path(dir) / "checkpoint.wslm").string();
    save_checkpoint(ckpt, state);
    write_loss_curve((fs::path(dir) / "loss_curve.csv").string(), state.curve);

    const TrainerState reloaded = load_checkpoint(ckpt);
    if (reloaded.epoch != state.epoch || reloaded.opt.step != state.opt.step)
        throw std::runtime_error("checkpoint validation failed: reload mismatch");
    std::printf("saved checkpoint after epoch %lld to %s\n",
                static_cast<long long>(state.epoch), ckpt.c_str());
    guard.commit();
    return 0;
}

int cmd_generate(const Config& cfg) {
    const std::string ckpt_path = require_key(cfg, "checkpoint");
    const std::string codec_path = require_key(cfg, "codec");
    require_input(ckpt_path, "checkpoint");
    require_input(codec_path, "codec file");
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "generate", dir);

    const Codec codec = Codec::load(codec_path);
    const TrainerState state = load_checkpoint(ckpt_path);
    const ModelParams& params = state.params;

    TokenStream prompt;
    const auto prompt_it = cfg.find("prompt");
    if (prompt_it != cfg.end() && !prompt_it->second.empty()) {
        require_input(prompt_it->second, "prompt token file");
        prompt = read_token_file(prompt_it->second).tokens;
        prompt = pad_to_chunk(std::move(prompt), static_cast<int32_t>(params.config.chunk),
                              codec.silence_token());
    }

    const std::string tokens_text = require_key(cfg, "tokens");
    const int64_t n_tokens = tokens_text == "auto"
                                 ? (prompt.empty() ? 250 : static_cast<int64_t>(prompt.size()))
                                 : cfg_int(cfg, "tokens");
    SamplerConfig sampler;
    sampler.top_k = cfg_int(cfg, "top_k");
    sampler.temperature = cfg_double(cfg, "temperature");
    const int64_t samples = cfg_int(cfg, "samples");
    const uint64_t seed = static_cast<uint64_t>(cfg_int(cfg, "seed"));
    const double frame_rate = codec.config().frame_rate_hz;

    std::ostringstream stats;
    stats << "sample,tokens,decode_steps,wall_seconds,audio_seconds,rtf\n";
    const Rng parent(seed, {0x636f6e74ull});
    for (int64_t i = 0; i < samples; ++i) {
        StreamSession session(params, prompt, sampler, parent.fork(static_cast<uint64_t>(i)));
        const auto start = std::chrono::steady_clock::now();
        const TokenStream continuation = generate_tokens(session, n_tokens);
        const Tensor features = codec.decompress(continuation);
        const auto stop = std::chrono::steady_clock::now();
        if (features.dims[0] != n_tokens)
            throw std::runtime_error("generation validation failed: feature row count mismatch");
        const double wall = std::chrono::duration<double>(stop - start).count();
        const double audio_seconds = static_cast<double>(n_tokens) / frame_rate;
        char name[64];
        std::snprintf(name, sizeof(name), "continuation_%03lld.wtok", static_cast<long long>(i));
        TokenFile file;
        file.vocab = static_cast<uint32_t>(params.config.vocab);
        file.frame_rate_hz = static_cast<uint32_t>(codec.config().frame_rate_hz);
        file.chunk_tokens = static_cast<uint32_t>(params.config.chunk);
        file.tokens = continuation;
        write_token_file((fs::path(dir) / name).string(), file);
        stats << i << "," << n_tokens << "," << session.decode_steps() << "," << wall << ","
              << audio_seconds << "," << (audio_seconds / wall) << "\n";
    }
    write_text_file((fs::path(dir) / "stats.csv").string(), stats.str());

    for (int64_t i = 0; i < samples; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "continuation_%03lld.wtok", static_cast<long long>(i));
        const TokenFile check = read_token_file((fs::path(dir) / name).string());
        if (static_cast<int64_t>(check.tokens.size()) != n_tokens)
            throw std::runtime_error("generation validation failed: bad token count in " +
                                     std::string(name));
    }
    std::printf("generated %lld continuations of %lld tokens (%.2f s audio each) to %s\n",
                static_cast<long long>(samples), static_cast<long long>(n_tokens),
                static_cast<double>(n_tokens) / frame_rate, dir.c_str());
    guard.commit();
    return 0;
}

int cmd_eval(const Config& cfg) {
    const std::string ckpt_path = require_key(cfg, "checkpoint");
    const std::string pairs_path = require_key(cfg, "pairs");
    require_input(ckpt_path, "checkpoint");
    require_input(pairs_path, "pair manifest");
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "eval", dir);

    const PairFamily family = pair_family_from_string(require_key(cfg, "family"));
    const bool exclude_prompt = cfg_bool(cfg, "exclude_prompt");
    const TrainerState state = load_checkpoint(ckpt_path);
    const std::vector<EvalPair> pairs = read_pair_files(pairs_path, family);

    SuiteRow row;
    row.family = to_string(family);
    row.report = score_pairs(state.params, pairs, exclude_prompt);

    const std::string report_path = (fs::path(dir) / "report.csv").string();
    write_suite_csv(report_path, {row});
    const std::string summary = suite_summary({row});
    write_text_file((fs::path(dir) / "summary.txt").string(), summary);

    // Validation: the emitted report must parse back to the same counts.
    std::istringstream parsed(read_text_file(report_path));
    std::string line;
    std::getline(parsed, line);
    std::getline(parsed, line);
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != 6 || std::stoll(fields[1]) != row.report.pairs)
        throw std::runtime_error("eval validation failed: report does not round-trip");
    std::fputs(summary.c_str(), stdout);
    guard.commit();
    return 0;
}

int cmd_sweep(const Config& cfg) {
    const std::string tokens_path = require_key(cfg, "tokens");
    const std::string codec_path = require_key(cfg, "codec");
    require_input(tokens_path, "token manifest");
    require_input(codec_path, "codec file");
    const std::string dir = out_dir(cfg);
    OutputGuard guard(dir);
    echo_config(cfg, "sweep", dir);

    const Codec codec = Codec::load(codec_path);
    const TokenCorpus corpus = load_token_corpus(tokens_path);
    if (corpus.vocab != static_cast<uint32_t>(codec.config().vocab()))
        throw std::runtime_error("token files use vocab " + std::to_string(corpus.vocab) +
                                 " but the codec defines " +
                                 std::to_string(codec.config().vocab()));
    SamplerConfig sampler;
    sampler.top_k = cfg_int(cfg, "top_k");
    sampler.temperature = cfg_double(cfg, "temperature");
    const int64_t probe_tokens = cfg_int(cfg, "probe_tokens");

    std::ostringstream csv;
    csv << "window,chunk,val_nll,perplexity,decode_steps,wall_seconds,rtf\n";
    for (const SweepCell& cell : default_sweep_grid()) {
        Config cell_cfg = cfg;
        cell_cfg["window"] = std::to_string(cell.window);
        cell_cfg["chunk"] = std::to_string(cell.chunk);
        const ModelConfig mc = model_config_from(cell_cfg, codec.config().vocab());
        const TrainConfig tc = train_config_from(cell_cfg, codec.config().frame_rate_hz);
        TrainerState state = make_trainer(ModelParams::init(mc, tc.seed), tc,
                                          codec.silence_token());
        const TrainResult result = run_training(state, corpus.streams);
        const double val_nll = result.curve.back().val_nll;

        StreamSession session(state.params, {}, sampler,
                              Rng(tc.seed, {0x7377656570ull}).fork(
                                  static_cast<uint64_t>(cell.window * 100 + cell.chunk)));
        const auto start = std::chrono::steady_clock::now();
        generate_tokens(session, probe_tokens);
        const auto stop = std::chrono::steady_clock::now();
        const double wall = std::chrono::duration<double>(stop - start).count();
        const double audio_seconds =
            static_cast<double>(probe_tokens) / codec.config().frame_rate_hz;

        char row[256];
        std::snprintf(row, sizeof(row), "%lld,%lld,%.6f,%.6f,%lld,%.6f,%.6f",
                      static_cast<long long>(cell.window), static_cast<long long>(cell.chunk),
                      val_nll, std::exp(val_nll), static_cast<long long>(session.decode_steps()),
                      wall, audio_seconds / wall);
        csv << row << "\n";
        std::printf("cell window %lld chunk %lld: val_nll %.4f, %lld steps, rtf %.3f\n",
                    static_cast<long long>(cell.window), static_cast<long long>(cell.chunk),
                    val_nll, static_cast<long long>(session.decode_steps()),
                    audio_seconds / wall);
    }
    const std::string csv_path = (fs::path(dir) / "sweep.csv").string();
    write_text_file(csv_path, csv.str());

    std::istringstream parsed(read_text_file(csv_path));
    std::string line;
    int rows = 0;
    while (std::getline(parsed, line))
        if (!line.empty()) ++rows;
    if (rows != 6) throw std::runtime_error("sweep validation failed: expected 6 csv rows");
    std::printf("wrote sweep grid to %s\n", csv_path.c_str());
    guard.commit();
    return 0;
}

Config defaults_for(const std::string& subcommand) {
    Config cfg;
    cfg["seed"] = "0";
    cfg["out"] = "";
    if (subcommand == "synth") {
        cfg["hours"] = "0.5";
        cfg["speakers"] = "16";
        cfg["feature_dim"] = "32";
        cfg["sample_rate"] = "16000";
    } else if (subcommand == "fit-codec") {
        cfg["corpus"] = "";
        cfg["code_bits"] = "11";
        cfg["feature_dim"] = "32";
        cfg["frame_rate"] = "50";
        cfg["chunk_tokens"] = "4";
        cfg["sample_rate"] = "16000";
        cfg["fit_utterances"] = "16";
    } else if (subcommand == "tokenize") {
        cfg["corpus"] = "";
        cfg["codec"] = "";
    } else if (subcommand == "train" || subcommand == "sweep") {
        cfg["tokens"] = "";
        cfg["codec"] = "";
        cfg["vocab"] = "auto";
        cfg["chunk"] = "4";
        cfg["window"] = "512";
        cfg["layers"] = "4";
        cfg["heads"] = "4";
        cfg["model_dim"] = "256";
        cfg["batch_size"] = "16";
        cfg["learning_rate"] = "0.0001";
        cfg["weight_decay"] = "0.01";
        cfg["clip_norm"] = "5.0";
        cfg["plateau_factor"] = "0.9";
        cfg["plateau_min_delta"] = "0.0025";
        cfg["segment_seconds"] = "30";
        cfg["patience_epochs"] = "5";
        cfg["lr_reset"] = "0";
        cfg["max_epochs"] = "50";
        cfg["steps_per_epoch"] = "20";
        if (subcommand == "train") {
            cfg["resume"] = "";
        } else {
            cfg["top_k"] = "30";
            cfg["temperature"] = "0.8";
            cfg["probe_tokens"] = "256";
        }
    } else if (subcommand == "generate") {
        cfg["checkpoint"] = "";
        cfg["codec"] = "";
        cfg["prompt"] = "";
        cfg["samples"] = "5";
        cfg["tokens"] = "auto";
        cfg["top_k"] = "30";
        cfg["temperature"] = "0.8";
    } else if (subcommand == "eval") {
        cfg["checkpoint"] = "";
        cfg["pairs"] = "";
        cfg["family"] = "content-corrupt";
        cfg["exclude_prompt"] = "0";
    } else {
        throw UsageError("unknown subcommand '" + subcommand + "'");
    }
    return cfg;
}

void apply_override(Config& cfg, const std::string& key, const std::string& value,
                    const std::string& source) {
    if (cfg.find(key) == cfg.end())
        throw UsageError("unknown config key '" + key + "' (" + source + ")");
    cfg[key] = value;
}

int run(int argc, char** argv) {
    if (argc < 2 || std::string(argv[1]) == "--help" || std::string(argv[1]) == "-h") {
        std::fputs(kUsage, argc < 2 ? stderr : stdout);
        return argc < 2 ? 1 : 0;
    }
    const std::string subcommand = argv[1];
    Config cfg = defaults_for(subcommand);

    // First pass: an optional config file provides the middle layer.
    std::vector<std::pair<std::string, std::string>> overrides;
    for (int i = 2; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--config") {
            if (i + 1 >= argc) throw UsageError("--config needs a path");
            const std::string path = argv[++i];
            require_input(path, "config file");
            for (const auto& [key, value] : read_kv_file(path))
                apply_override(cfg, key, value, "config file " + path);
        } else if (arg == "--set") {
            if (i + 1 >= argc) throw UsageError("--set needs KEY=VALUE");
            const std::string pair = argv[++i];
            const size_t eq = pair.find('=');
            if (eq == std::string::npos) throw UsageError("--set needs KEY=VALUE, got " + pair);
            overrides.emplace_back(pair.substr(0, eq), pair.substr(eq + 1));
        } else if (arg.rfind("--", 0) == 0) {
            if (i + 1 >= argc) throw UsageError(arg + " needs a value");
            overrides.emplace_back(arg.substr(2), argv[++i]);
        } else {
            throw UsageError("unexpected argument '" + arg + "'");
        }
    }
    for (const auto& [key, value] : overrides) apply_override(cfg, key, value, "command line");

    if (subcommand == "synth") return cmd_synth(cfg);
    if (subcommand == "fit-codec") return cmd_fit_codec(cfg);
    if (subcommand == "tokenize") return cmd_tokenize(cfg);
    if (subcommand == "train") return cmd_train(cfg);
    if (subcommand == "generate") return cmd_generate(cfg);
    if (subcommand == "eval") return cmd_eval(cfg);
    if (subcommand == "sweep") return cmd_sweep(cfg);
    throw UsageError("unknown subcommand '" + subcommand + "'");
}

} // namespace
} // namespace chunklm

int main(int argc, char** argv) {
    try {
        return chunklm::run(argc, argv);
    } catch (const chunklm::UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
