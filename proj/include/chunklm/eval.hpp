#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chunklm/codec.hpp"
#include "chunklm/model.hpp"
#include "chunklm/tokens.hpp"

namespace chunklm {

// A pair is decided by total NLL: the true candidate must score strictly
// lower, so exact ties count against the model. With exclude_prompt set,
// only predictions of tokens at or past prompt_len contribute.
struct PairScore {
    double positive_nll = 0.0;
    double negative_nll = 0.0;
    double gap = 0.0;  // negative_nll - positive_nll
    bool correct = false;
};

PairScore score_pair(const ModelParams& params, const EvalPair& pair, bool exclude_prompt);

struct WilsonInterval {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

// 95% score interval by default (z covers 0.975 of the normal).
WilsonInterval wilson_interval(int64_t successes, int64_t trials,
                               double z = 1.959963984540054);

struct PairSetReport {
    int64_t pairs = 0;
    int64_t correct = 0;
    double accuracy = 0.0;
    WilsonInterval interval;
    double mean_gap = 0.0;
};

PairSetReport score_pairs(const ModelParams& params, const std::vector<EvalPair>& pairs,
                          bool exclude_prompt);

// exp of the mean NLL pooled over every valid position of every stream.
double token_perplexity(const ModelParams& params, const std::vector<TokenStream>& streams);

// Cosine between the mean decompressed feature vectors of two token streams;
// empty when either mean has no direction to compare.
std::optional<double> speaker_consistency_proxy(const Codec& codec, const TokenStream& a,
                                                const TokenStream& b);

struct MannWhitneyResult {
    double u = 0.0;  // U statistic of the first sample
    double z = 0.0;
    double p = 1.0;  // two-sided, normal approximation with tie correction
};

MannWhitneyResult mann_whitney(const std::vector<double>& xs, const std::vector<double>& ys);

struct SweepCell {
    int64_t window = 0;
    int64_t chunk = 0;
};

// Three window sizes at the base chunk plus two longer chunks at the base
// window; the corner cell is shared.
std::vector<SweepCell> default_sweep_grid();

struct SuiteRow {
    std::string family;
    PairSetReport report;
};

std::string suite_csv(const std::vector<SuiteRow>& rows);
std::string suite_summary(const std::vector<SuiteRow>& rows);
void write_suite_csv(const std::string& path, const std::vector<SuiteRow>& rows);

// Pair sets persist as one csv (pair_id, positive_path, negative_path,
// prompt_len) plus two token files per pair next to it.
void write_pair_files(const std::string& dir, const std::vector<EvalPair>& pairs, int64_t vocab,
                      int32_t frame_rate_hz, int32_t chunk_tokens);
std::vector<EvalPair> read_pair_files(const std::string& csv_path, PairFamily family);

} // namespace chunklm
