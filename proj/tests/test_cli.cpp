#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "chunklm/eval.hpp"
#include "chunklm/io.hpp"
#include "chunklm/synth.hpp"
#include "chunklm/tokens.hpp"
#include "chunklm/trainer.hpp"

namespace {

namespace fs = std::filesystem;

std::string g_binary;
std::string g_root;

struct CliResult {
    int code = -1;
    std::string output;
};

// Runs the tool under test through the shell, merging stderr into stdout.
CliResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string cmd = env_prefix + g_binary + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult result;
    char buffer[4096];
    size_t n = 0;
    while ((n = fread(buffer, 1, sizeof(buffer), pipe)) > 0) result.output.append(buffer, n);
    const int status = pclose(pipe);
    result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string path_in(const std::string& name) { return (fs::path(g_root) / name).string(); }

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::vector<std::string> csv_lines(const std::string& path) {
    std::istringstream in(chunklm::read_text_file(path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

// Shared pipeline artifacts, built once: a tiny corpus, codec, token files,
// and a trained checkpoint that later cases reuse.
struct Pipeline {
    std::string corpus;
    std::string codec_dir;
    std::string codec;
    std::string tokens_dir;
    std::string tokens;
    std::string run_dir;
    std::string checkpoint;
    std::string first_wtok;
};

const char* kTinyTrain =
    " --model_dim 16 --layers 1 --heads 2 --window 16 --batch_size 2 --steps_per_epoch 2"
    " --segment_seconds 0.64 --learning_rate 0.001 --seed 5";

const Pipeline& pipeline() {
    static const Pipeline p = [] {
        Pipeline out;
        out.corpus = path_in("corpus");
        out.codec_dir = path_in("codec");
        out.tokens_dir = path_in("tokens");
        out.run_dir = path_in("run");

        CliResult r = run_cli("synth --out " + out.corpus + " --hours 0.003 --speakers 4 --seed 3");
        REQUIRE_MESSAGE(r.code == 0, r.output);
        r = run_cli("fit-codec --corpus " + out.corpus + "/manifest.csv --out " + out.codec_dir +
                    " --fit_utterances 2 --seed 3");
        REQUIRE_MESSAGE(r.code == 0, r.output);
        out.codec = out.codec_dir + "/codec.wcdc";
        r = run_cli("tokenize --corpus " + out.corpus + "/manifest.csv --codec " + out.codec +
                    " --out " + out.tokens_dir);
        REQUIRE_MESSAGE(r.code == 0, r.output);
        out.tokens = out.tokens_dir + "/tokens.csv";
        r = run_cli("train --tokens " + out.tokens + " --codec " + out.codec + " --out " +
                    out.run_dir + kTinyTrain + " --max_epochs 2");
        REQUIRE_MESSAGE(r.code == 0, r.output);
        out.checkpoint = out.run_dir + "/checkpoint.wslm";

        const std::vector<std::string> rows = csv_lines(out.tokens);
        REQUIRE(rows.size() >= 2);
        out.first_wtok =
            (fs::path(out.tokens_dir) / chunklm::split_csv_line(rows[1])[2]).string();
        return out;
    }();
    return p;
}

} // namespace

TEST_CASE("usage and argument errors exit with code 1") {
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("").code == 1);
    CHECK(run_cli("frobnicate").code == 1);

    const CliResult unknown_key = run_cli("synth --bogus 3 --out " + path_in("x1"));
    CHECK(unknown_key.code == 1);
    CHECK(unknown_key.output.find("bogus") != std::string::npos);

    CHECK(run_cli("synth --set nonsense --out " + path_in("x2")).code == 1);
    CHECK(run_cli("synth --seed").code == 1);
    CHECK(run_cli("synth --seed abc --out " + path_in("x3")).code == 1);
}

TEST_CASE("pipeline artifacts load back through their own readers") {
    const Pipeline& p = pipeline();

    const auto utterances = chunklm::read_manifest(p.corpus + "/manifest.csv");
    CHECK(utterances.size() >= 2);
    for (const auto& u : utterances) CHECK(chunklm::read_wav(u.path).sample_rate_hz == 16000);

    const auto codec = chunklm::Codec::load(p.codec);
    CHECK(codec.config().vocab() == 2048);

    const chunklm::TokenFile first = chunklm::read_token_file(p.first_wtok);
    CHECK(first.vocab == 2048);
    CHECK(first.frame_rate_hz == 50);
    CHECK(!first.tokens.empty());

    const chunklm::TrainerState state = chunklm::load_checkpoint(p.checkpoint);
    CHECK(state.epoch == 2);
    CHECK(state.params.config.model_dim == 16);
    CHECK(state.curve.size() == 2);

    const auto curve = csv_lines(p.run_dir + "/loss_curve.csv");
    CHECK(curve.size() == 3);
    CHECK(curve[0] == "epoch,train_nll,val_nll,lr");

    // Every run echoes its resolved configuration next to its outputs.
    const auto echoed = chunklm::read_kv_file(p.run_dir + "/train.config");
    CHECK(echoed.at("subcommand") == "train");
    CHECK(echoed.at("model_dim") == "16");
    CHECK(echoed.at("chunk") == "4");
    CHECK(echoed.at("window") == "16");
}

TEST_CASE("generate emits one validated continuation per sample") {
    const Pipeline& p = pipeline();
    const std::string dir = path_in("gen");
    const CliResult r = run_cli("generate --checkpoint " + p.checkpoint + " --codec " + p.codec +
                                " --prompt " + p.first_wtok + " --out " + dir +
                                " --samples 2 --tokens 16 --seed 9");
    REQUIRE_MESSAGE(r.code == 0, r.output);

    for (const char* name : {"continuation_000.wtok", "continuation_001.wtok"}) {
        const chunklm::TokenFile file = chunklm::read_token_file((fs::path(dir) / name).string());
        CHECK(file.tokens.size() == 16);
        CHECK(file.vocab == 2048);
    }
    const auto stats = csv_lines(dir + "/stats.csv");
    REQUIRE(stats.size() == 3);
    CHECK(stats[0] == "sample,tokens,decode_steps,wall_seconds,audio_seconds,rtf");
    const auto fields = chunklm::split_csv_line(stats[1]);
    REQUIRE(fields.size() == 6);
    CHECK(fields[1] == "16");
    CHECK(fields[2] == "4");
    CHECK(std::stod(fields[4]) == doctest::Approx(16.0 / 50.0));
}

TEST_CASE("generation is deterministic for a fixed seed") {
    const Pipeline& p = pipeline();
    const std::string one = path_in("gen_seed3_a");
    const std::string two = path_in("gen_seed3_b");
    const std::string args = "generate --checkpoint " + p.checkpoint + " --codec " + p.codec +
                             " --prompt " + p.first_wtok + " --samples 1 --tokens 16 --seed 3";
    REQUIRE(run_cli(args + " --out " + one).code == 0);
    REQUIRE(run_cli(args + " --out " + two).code == 0);
    CHECK(file_bytes(one + "/continuation_000.wtok") == file_bytes(two + "/continuation_000.wtok"));

    const std::string other = path_in("gen_seed4");
    REQUIRE(run_cli("generate --checkpoint " + p.checkpoint + " --codec " + p.codec +
                    " --prompt " + p.first_wtok + " --samples 1 --tokens 16 --seed 4 --out " +
                    other)
                .code == 0);
    CHECK(file_bytes(one + "/continuation_000.wtok") != file_bytes(other + "/continuation_000.wtok"));
}

TEST_CASE("synthesis is deterministic for a fixed seed") {
    const std::string one = path_in("corpus_b");
    REQUIRE(run_cli("synth --out " + one + " --hours 0.003 --speakers 4 --seed 3").code == 0);

    // Manifests embed their own directory, so compare fields and audio bytes.
    const auto original = chunklm::read_manifest(pipeline().corpus + "/manifest.csv");
    const auto rerun = chunklm::read_manifest(one + "/manifest.csv");
    REQUIRE(rerun.size() == original.size());
    for (size_t i = 0; i < rerun.size(); ++i) {
        CHECK(rerun[i].id == original[i].id);
        CHECK(rerun[i].speaker_id == original[i].speaker_id);
        CHECK(rerun[i].seconds == original[i].seconds);
        CHECK(rerun[i].seed == original[i].seed);
        CHECK(file_bytes(rerun[i].path) == file_bytes(original[i].path));
    }
}

TEST_CASE("config file values sit between defaults and flags") {
    const std::string cfg_path = path_in("synth.cfg");
    chunklm::write_text_file(cfg_path, "hours=0.003\nspeakers=4\nseed=11\n");
    const std::string dir = path_in("corpus_cfg");
    const CliResult r =
        run_cli("synth --config " + cfg_path + " --out " + dir + " --set speakers=2");
    REQUIRE_MESSAGE(r.code == 0, r.output);

    const auto echoed = chunklm::read_kv_file(dir + "/synth.config");
    CHECK(echoed.at("speakers") == "2");
    CHECK(echoed.at("hours") == "0.003");
    CHECK(echoed.at("seed") == "11");
    CHECK(echoed.at("sample_rate") == "16000");

    CHECK(run_cli("synth --config " + path_in("nope.cfg") + " --out " + dir).code == 2);
}

TEST_CASE("output root falls back to the environment variable") {
    const std::string dir = path_in("corpus_env");
    const CliResult r = run_cli("synth --hours 0.003 --speakers 4 --seed 3",
                                "CHUNKLM_OUT=" + dir + " ");
    REQUIRE_MESSAGE(r.code == 0, r.output);
    CHECK(fs::exists(dir + "/manifest.csv"));

    const CliResult none = run_cli("synth --hours 0.003", "CHUNKLM_OUT= ");
    CHECK(none.code == 1);
    CHECK(none.output.find("CHUNKLM_OUT") != std::string::npos);
}

TEST_CASE("missing inputs fail with the offending path and leave no outputs") {
    const Pipeline& p = pipeline();
    const std::string missing = path_in("not_there.csv");
    const std::string dir = path_in("run_bad");

    const CliResult r =
        run_cli("train --tokens " + missing + " --codec " + p.codec + " --out " + dir);
    CHECK(r.code == 2);
    CHECK(r.output.find("not_there.csv") != std::string::npos);
    CHECK(!fs::exists(dir + "/checkpoint.wslm"));

    // Failure after the run has started must sweep its partial outputs.
    const std::string empty_manifest = path_in("empty_tokens.csv");
    chunklm::write_text_file(empty_manifest, "utterance_id,speaker_id,path,tokens\n");
    const CliResult late =
        run_cli("train --tokens " + empty_manifest + " --codec " + p.codec + " --out " + dir);
    CHECK(late.code == 2);
    CHECK(fs::is_empty(dir));
}

TEST_CASE("a vocab override that contradicts the codec is rejected") {
    const Pipeline& p = pipeline();
    const CliResult r = run_cli("train --tokens " + p.tokens + " --codec " + p.codec + " --out " +
                                path_in("run_vocab") + kTinyTrain +
                                " --max_epochs 1 --set vocab=123");
    CHECK(r.code == 2);
    CHECK(r.output.find("vocab") != std::string::npos);
    CHECK(r.output.find("2048") != std::string::npos);
}

TEST_CASE("one second of audio becomes one frame rate worth of tokens") {
    const Pipeline& p = pipeline();
    const std::string dir = path_in("second");
    fs::create_directories(dir);
    std::vector<double> wave(16000);
    for (size_t i = 0; i < wave.size(); ++i)
        wave[i] = 0.4 * std::sin(2.0 * 3.14159265358979 * 220.0 * static_cast<double>(i) / 16000.0);
    chunklm::write_wav(dir + "/one_second.wav", wave, 16000);
    chunklm::Utterance u;
    u.id = "one_second";
    u.speaker_id = 0;
    u.seconds = 1.0;
    u.path = dir + "/one_second.wav";
    chunklm::write_manifest(dir + "/manifest.csv", {u});

    const std::string out = path_in("second_tokens");
    REQUIRE(run_cli("tokenize --corpus " + dir + "/manifest.csv --codec " + p.codec + " --out " +
                    out)
                .code == 0);
    const chunklm::TokenFile file = chunklm::read_token_file(out + "/one_second.wtok");
    CHECK(file.tokens.size() == 50);
}

TEST_CASE("resuming reproduces the uninterrupted run exactly") {
    const Pipeline& p = pipeline();
    const std::string straight = path_in("run_straight");
    const std::string resumed = path_in("run_resumed");
    REQUIRE(run_cli("train --tokens " + p.tokens + " --codec " + p.codec + " --out " + straight +
                    kTinyTrain + " --max_epochs 4")
                .code == 0);
    REQUIRE(run_cli("train --tokens " + p.tokens + " --codec " + p.codec + " --out " + resumed +
                    " --resume " + p.checkpoint + " --max_epochs 4")
                .code == 0);

    CHECK(file_bytes(straight + "/loss_curve.csv") == file_bytes(resumed + "/loss_curve.csv"));
    CHECK(file_bytes(straight + "/checkpoint.wslm") == file_bytes(resumed + "/checkpoint.wslm"));
}

TEST_CASE("eval scores a pair manifest and writes a parsable report") {
    const Pipeline& p = pipeline();
    const chunklm::TokenFile first = chunklm::read_token_file(p.first_wtok);
    REQUIRE(first.tokens.size() >= 96);

    // Hand-built content corruptions: splice a shuffled span into the tail.
    std::vector<chunklm::EvalPair> pairs;
    for (int i = 0; i < 6; ++i) {
        chunklm::EvalPair pair;
        pair.family = chunklm::PairFamily::content_corrupt;
        pair.prompt_len = 32;
        pair.positive.assign(first.tokens.begin(), first.tokens.begin() + 64);
        pair.negative = pair.positive;
        for (int j = 0; j < 16; ++j)
            pair.negative[40 + j] = first.tokens[(i * 17 + j * 5) % first.tokens.size()];
        pairs.push_back(std::move(pair));
    }
    const std::string pair_dir = path_in("pairs");
    chunklm::write_pair_files(pair_dir, pairs, 2048, 50, 4);

    const std::string dir = path_in("eval_out");
    const CliResult r = run_cli("eval --checkpoint " + p.checkpoint + " --pairs " + pair_dir +
                                "/pairs.csv --family content-corrupt --out " + dir);
    REQUIRE_MESSAGE(r.code == 0, r.output);
    CHECK(r.output.find("content-corrupt") != std::string::npos);

    const auto report = csv_lines(dir + "/report.csv");
    REQUIRE(report.size() == 2);
    const auto fields = chunklm::split_csv_line(report[1]);
    REQUIRE(fields.size() == 6);
    CHECK(fields[0] == "content-corrupt");
    CHECK(std::stoll(fields[1]) == 6);
    const double accuracy = std::stod(fields[2]);
    CHECK(accuracy >= 0.0);
    CHECK(accuracy <= 1.0);
    CHECK(!chunklm::read_text_file(dir + "/summary.txt").empty());
}

TEST_CASE("sweep writes one row per grid cell") {
    const Pipeline& p = pipeline();
    const std::string dir = path_in("sweep_out");
    const CliResult r = run_cli(
        "sweep --tokens " + p.tokens + " --codec " + p.codec + " --out " + dir +
        " --model_dim 16 --layers 1 --heads 2 --batch_size 2 --steps_per_epoch 1"
        " --max_epochs 1 --segment_seconds 0.64 --probe_tokens 32 --seed 5");
    REQUIRE_MESSAGE(r.code == 0, r.output);

    const auto rows = csv_lines(dir + "/sweep.csv");
    REQUIRE(rows.size() == 6);
    CHECK(rows[0] == "window,chunk,val_nll,perplexity,decode_steps,wall_seconds,rtf");
    const char* cells[] = {"512,4,", "1024,4,", "2048,4,", "512,8,", "512,16,"};
    for (int i = 0; i < 5; ++i) CHECK(rows[i + 1].rfind(cells[i], 0) == 0);

    // Chunk 8 halves the decode steps of chunk 4; chunk 16 halves them again.
    CHECK(chunklm::split_csv_line(rows[1])[4] == "8");
    CHECK(chunklm::split_csv_line(rows[4])[4] == "4");
    CHECK(chunklm::split_csv_line(rows[5])[4] == "2");
}

int main(int argc, char** argv) {
    std::vector<char*> doctest_args{argv[0]};
    for (int i = 1; i < argc; ++i) {
        if (g_binary.empty() && argv[i][0] != '-') {
            g_binary = argv[i];
        } else {
            doctest_args.push_back(argv[i]);
        }
    }
    if (g_binary.empty()) {
        std::fprintf(stderr, "usage: test_cli <path-to-chunklm-binary> [doctest flags]\n");
        return 1;
    }

    std::string root = (fs::temp_directory_path() / "chunklm_cli_XXXXXX").string();
    if (!mkdtemp(root.data())) {
        std::fprintf(stderr, "could not create scratch directory\n");
        return 1;
    }
    g_root = root;

    doctest::Context context;
    context.applyCommandLine(static_cast<int>(doctest_args.size()), doctest_args.data());
    const int rc = context.run();
    if (rc == 0) {
        std::error_code ec;
        fs::remove_all(g_root, ec);
    }
    return rc;
}
