#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "chunklm/eval.hpp"
#include "chunklm/io.hpp"
#include "chunklm/markov.hpp"
#include "chunklm/synth.hpp"

using namespace chunklm;

namespace {

ModelConfig small_config(int64_t vocab, int64_t chunk, int64_t window, int64_t layers,
                         int64_t heads, int64_t dim) {
    ModelConfig c;
    c.vocab = vocab;
    c.chunk = chunk;
    c.window = window;
    c.layers = layers;
    c.heads = heads;
    c.model_dim = dim;
    return c;
}

TokenStream random_stream(int64_t length, int64_t vocab, Rng& rng) {
    TokenStream out;
    for (int64_t i = 0; i < length; ++i)
        out.push_back(static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(vocab))));
    return out;
}

std::string temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    return dir.string();
}

} // namespace

TEST_CASE("identical candidates tie and the tie counts against the model") {
    const ModelParams params = ModelParams::init(small_config(16, 4, 16, 1, 2, 16), 3);
    Rng rng(1);
    const TokenStream stream = random_stream(20, 16, rng);
    EvalPair pair;
    pair.positive = stream;
    pair.negative = stream;
    pair.family = PairFamily::content_corrupt;

    const PairScore score = score_pair(params, pair, false);
    CHECK(score.gap == 0.0);
    CHECK_FALSE(score.correct);
    CHECK(score.positive_nll == score.negative_nll);
}

TEST_CASE("swapping the candidates negates the gap and flips the decision") {
    const ModelParams params = ModelParams::init(small_config(16, 4, 16, 1, 2, 16), 5);
    Rng rng(2);
    EvalPair pair;
    pair.positive = random_stream(24, 16, rng);
    pair.negative = random_stream(24, 16, rng);
    pair.family = PairFamily::content_corrupt;

    EvalPair swapped;
    swapped.positive = pair.negative;
    swapped.negative = pair.positive;
    swapped.family = pair.family;

    const PairScore forward = score_pair(params, pair, false);
    const PairScore reverse = score_pair(params, swapped, false);
    CHECK(forward.gap == -reverse.gap);
    REQUIRE(forward.gap != 0.0);
    CHECK(forward.correct != reverse.correct);
}

TEST_CASE("a shared prompt cancels exactly out of the gap") {
    // Tokens after a predictor's own chunk cannot reach its logits, so the
    // prompt region scores identically for both candidates and full scoring
    // equals prompt-excluded scoring to the last bit.
    const ModelParams params = ModelParams::init(small_config(16, 4, 16, 2, 2, 16), 7);
    Rng rng(3);
    const TokenStream prompt = random_stream(8, 16, rng);
    EvalPair pair;
    pair.positive = prompt;
    pair.negative = prompt;
    pair.prompt_len = 8;
    pair.family = PairFamily::continuation;
    const TokenStream tail_a = random_stream(16, 16, rng);
    const TokenStream tail_b = random_stream(16, 16, rng);
    pair.positive.insert(pair.positive.end(), tail_a.begin(), tail_a.end());
    pair.negative.insert(pair.negative.end(), tail_b.begin(), tail_b.end());

    // Prompt-region predictions are bitwise identical across the candidates.
    const NllResult pos_nll = stream_nll(params, pair.positive);
    const NllResult neg_nll = stream_nll(params, pair.negative);
    for (int64_t t = 0; t < 8 - params.config.chunk; ++t)
        CHECK(pos_nll.per_position[static_cast<size_t>(t)] ==
              neg_nll.per_position[static_cast<size_t>(t)]);

    const PairScore full = score_pair(params, pair, false);
    const PairScore tail_only = score_pair(params, pair, true);
    CHECK(full.gap == doctest::Approx(tail_only.gap).epsilon(1e-12));
    CHECK(full.positive_nll > tail_only.positive_nll);

    // The excluded part is exactly the prompt-region sum.
    double prefix = 0.0;
    for (int64_t t = 0; t < 8 - params.config.chunk; ++t)
        prefix += pos_nll.per_position[static_cast<size_t>(t)];
    CHECK(full.positive_nll == doctest::Approx(tail_only.positive_nll + prefix).epsilon(1e-12));
}

TEST_CASE("prompt exclusion must leave something to score") {
    const ModelParams params = ModelParams::init(small_config(16, 4, 16, 1, 2, 16), 9);
    Rng rng(4);
    EvalPair pair;
    pair.positive = random_stream(12, 16, rng);
    pair.negative = random_stream(12, 16, rng);
    pair.prompt_len = 12;
    CHECK_THROWS_AS(score_pair(params, pair, true), std::invalid_argument);
    pair.prompt_len = 0;
    const PairScore excluded = score_pair(params, pair, true);
    const PairScore full = score_pair(params, pair, false);
    CHECK(excluded.gap == full.gap);
    pair.prompt_len = -1;
    CHECK_THROWS_AS(score_pair(params, pair, true), std::invalid_argument);
}

TEST_CASE("wilson interval matches the frozen 95% case and clamps the edges") {
    const WilsonInterval mid = wilson_interval(1000, 2000);
    CHECK(mid.point == 0.5);
    CHECK(mid.lower == doctest::Approx(0.478108).epsilon(1e-4));
    CHECK(mid.upper == doctest::Approx(0.521892).epsilon(1e-4));
    CHECK(0.5 * (mid.lower + mid.upper) == doctest::Approx(0.5).epsilon(1e-12));

    const WilsonInterval none = wilson_interval(0, 50);
    CHECK(none.point == 0.0);
    CHECK(none.lower < 1e-12);  // algebraically zero at zero successes
    CHECK(none.upper > 0.0);
    const WilsonInterval all = wilson_interval(50, 50);
    CHECK(all.upper == 1.0);
    CHECK(all.lower < 1.0);

    const WilsonInterval wide = wilson_interval(250, 500);
    CHECK(wide.upper - wide.lower > mid.upper - mid.lower);

    CHECK_THROWS_AS(wilson_interval(1, 0), std::invalid_argument);
    CHECK_THROWS_AS(wilson_interval(5, 4), std::invalid_argument);
}

TEST_CASE("mann-whitney statistics match hand-computed cases") {
    SUBCASE("clean separation of two small samples") {
        const MannWhitneyResult r = mann_whitney({10.0, 20.0, 30.0}, {1.0, 2.0, 3.0});
        CHECK(r.u == 9.0);
        CHECK(r.z == doctest::Approx(4.5 / std::sqrt(5.25)).epsilon(1e-12));
        CHECK(r.p == doctest::Approx(0.0495).epsilon(2e-2));

        const MannWhitneyResult s = mann_whitney({1.0, 2.0, 3.0}, {10.0, 20.0, 30.0});
        CHECK(s.u == 0.0);
        CHECK(s.z == doctest::Approx(-r.z).epsilon(1e-12));
        CHECK(s.p == doctest::Approx(r.p).epsilon(1e-12));
    }

    SUBCASE("average ranks are used inside tie groups") {
        const MannWhitneyResult r = mann_whitney({1.0, 2.0}, {2.0, 3.0});
        // ranks: 1, {2,3} -> 2.5 each, 4; R1 = 3.5, U = 0.5
        CHECK(r.u == 0.5);
        CHECK(r.z == doctest::Approx(-1.224745).epsilon(1e-5));
        CHECK(r.p == doctest::Approx(0.2207).epsilon(1e-2));
    }

    SUBCASE("fully tied samples are maximally insignificant") {
        const MannWhitneyResult r = mann_whitney({5.0, 5.0}, {5.0, 5.0});
        CHECK(r.z == 0.0);
        CHECK(r.p == 1.0);
    }

    SUBCASE("well-separated large samples cross the acceptance threshold") {
        std::vector<double> xs, ys;
        Rng rng(17);
        for (int i = 0; i < 200; ++i) {
            xs.push_back(rng.next_normal() + 1.0);
            ys.push_back(rng.next_normal());
        }
        const MannWhitneyResult r = mann_whitney(xs, ys);
        CHECK(r.p < 0.01);
        CHECK(r.z > 0.0);
    }

    SUBCASE("rejects empty or non-finite samples") {
        CHECK_THROWS_AS(mann_whitney({}, {1.0}), std::invalid_argument);
        CHECK_THROWS_AS(mann_whitney({1.0}, {std::nan("")}), std::invalid_argument);
    }
}

TEST_CASE("all-zero parameters give exactly the uniform perplexity") {
    ModelParams params = ModelParams::init(small_config(32, 4, 16, 1, 2, 16), 11);
    for (Tensor& t : params.values) std::fill(t.data.begin(), t.data.end(), 0.0);
    Rng rng(5);
    const std::vector<TokenStream> streams{random_stream(20, 32, rng), random_stream(12, 32, rng)};
    CHECK(token_perplexity(params, streams) == doctest::Approx(32.0).epsilon(1e-12));
}

TEST_CASE("speaker proxy is the cosine of mean decompressed features") {
    CodecConfig config;
    config.feature_dim = 32;
    config.code_bits = 11;
    // Compressor embeds the first 11 feature axes; decompressor mirrors it.
    Tensor compressor = Tensor::zeros({32, 11});
    Tensor decompressor = Tensor::zeros({11, 32});
    for (int64_t i = 0; i < 11; ++i) {
        compressor.at(i, i) = 1.0;
        decompressor.at(i, i) = 1.0;
    }
    const Codec codec(config, compressor, decompressor);

    const TokenStream a{0b101, 0b101};
    const TokenStream flipped{static_cast<int32_t>(0b11111111010)};
    const auto same = speaker_consistency_proxy(codec, a, a);
    REQUIRE(same.has_value());
    CHECK(*same == doctest::Approx(1.0).epsilon(1e-12));

    const auto opposite = speaker_consistency_proxy(codec, a, flipped);
    REQUIRE(opposite.has_value());
    CHECK(*opposite == doctest::Approx(-1.0).epsilon(1e-12));

    const auto ab = speaker_consistency_proxy(codec, a, flipped);
    const auto ba = speaker_consistency_proxy(codec, flipped, a);
    CHECK(*ab == *ba);

    CHECK_FALSE(speaker_consistency_proxy(codec, {}, a).has_value());

    const Codec dead(config, compressor, Tensor::zeros({11, 32}));
    CHECK_FALSE(speaker_consistency_proxy(dead, a, a).has_value());
}

TEST_CASE("pair files round-trip through the manifest") {
    Rng rng(6);
    std::vector<EvalPair> pairs;
    for (int i = 0; i < 3; ++i) {
        EvalPair pair;
        pair.positive = random_stream(16, 64, rng);
        pair.negative = random_stream(16, 64, rng);
        pair.prompt_len = 8;
        pair.family = PairFamily::continuation;
        pairs.push_back(std::move(pair));
    }
    const std::string dir = temp_dir("eval_pairs_roundtrip");
    write_pair_files(dir, pairs, 64, 50, 4);

    const std::string csv = (std::filesystem::path(dir) / "pairs.csv").string();
    const std::vector<EvalPair> loaded = read_pair_files(csv, PairFamily::continuation);
    REQUIRE(loaded.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(loaded[i].positive == pairs[i].positive);
        CHECK(loaded[i].negative == pairs[i].negative);
        CHECK(loaded[i].prompt_len == 8);
        CHECK(loaded[i].family == PairFamily::continuation);
    }

    write_text_file(csv, "not,a,header\n0,x,y,8\n");
    CHECK_THROWS_AS(read_pair_files(csv, PairFamily::continuation), std::runtime_error);
}

TEST_CASE("an untrained model decides pairs at chance") {
    const MarkovSource src = MarkovSource::noisy_cycle(16, 0.5, 21);
    TokenPairConfig pair_config;
    pair_config.stream_len = 64;
    pair_config.prompt_len = 32;
    pair_config.corrupt_span = 16;
    const std::vector<EvalPair> pairs =
        make_eval_pairs(src, PairFamily::content_corrupt, 400, pair_config, 23);
    const ModelParams params = ModelParams::init(small_config(16, 4, 16, 1, 2, 32), 13);

    const PairSetReport report = score_pairs(params, pairs, false);
    CHECK(report.pairs == 400);
    // 3 sigma around a fair coin at n=400 is 0.075.
    CHECK(std::fabs(report.accuracy - 0.5) < 0.075);
    CHECK(report.interval.lower < 0.5);
    CHECK(report.interval.upper > 0.5);
}

TEST_CASE("the default sweep grid fixes three windows and three chunks") {
    const std::vector<SweepCell> grid = default_sweep_grid();
    REQUIRE(grid.size() == 5);
    CHECK(grid[0].window == 512);
    CHECK(grid[0].chunk == 4);
    CHECK(grid[1].window == 1024);
    CHECK(grid[1].chunk == 4);
    CHECK(grid[2].window == 2048);
    CHECK(grid[2].chunk == 4);
    CHECK(grid[3].window == 512);
    CHECK(grid[3].chunk == 8);
    CHECK(grid[4].window == 512);
    CHECK(grid[4].chunk == 16);
}

TEST_CASE("suite reports format as csv and readable text") {
    SuiteRow row;
    row.family = "content-corrupt";
    row.report.pairs = 400;
    row.report.correct = 340;
    row.report.accuracy = 0.85;
    row.report.interval = wilson_interval(340, 400);
    row.report.mean_gap = 12.25;

    const std::string csv = suite_csv({row});
    CHECK(csv.find("family,pairs,accuracy,wilson_lower,wilson_upper,mean_gap\n") == 0);
    CHECK(csv.find("content-corrupt,400,0.850000,") != std::string::npos);

    const std::string text = suite_summary({row});
    CHECK(text.find("content-corrupt") != std::string::npos);
    CHECK(text.find("over 400 pairs") != std::string::npos);
}
