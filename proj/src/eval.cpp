#include "chunklm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "chunklm/io.hpp"

namespace chunklm {

namespace {

double scored_total(const ModelParams& params, const TokenStream& tokens, int64_t first_target) {
    const NllResult nll = stream_nll(params, tokens);
    const int64_t first_predictor = std::max<int64_t>(0, first_target - params.config.chunk);
    if (first_predictor >= nll.valid_count)
        throw std::invalid_argument("score_pair: prompt of " + std::to_string(first_target) +
                                    " tokens leaves nothing to score in a candidate of " +
                                    std::to_string(tokens.size()));
    double total = 0.0;
    for (int64_t t = first_predictor; t < nll.valid_count; ++t)
        total += nll.per_position[static_cast<size_t>(t)];
    return total;
}

} // namespace

PairScore score_pair(const ModelParams& params, const EvalPair& pair, bool exclude_prompt) {
    if (pair.prompt_len < 0) throw std::invalid_argument("score_pair: negative prompt length");
    const int64_t first_target = exclude_prompt ? pair.prompt_len : 0;
    PairScore score;
    score.positive_nll = scored_total(params, pair.positive, first_target);
    score.negative_nll = scored_total(params, pair.negative, first_target);
    score.gap = score.negative_nll - score.positive_nll;
    score.correct = score.positive_nll < score.negative_nll;
    return score;
}

WilsonInterval wilson_interval(int64_t successes, int64_t trials, double z) {
    if (trials < 1) throw std::invalid_argument("wilson_interval: trials must be positive");
    if (successes < 0 || successes > trials)
        throw std::invalid_argument("wilson_interval: successes outside [0, trials]");
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2.0 * n)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    WilsonInterval w;
    w.point = p;
    w.lower = std::max(0.0, center - half);
    w.upper = std::min(1.0, center + half);
    return w;
}

PairSetReport score_pairs(const ModelParams& params, const std::vector<EvalPair>& pairs,
                          bool exclude_prompt) {
    if (pairs.empty()) throw std::invalid_argument("score_pairs: no pairs");
    PairSetReport report;
    report.pairs = static_cast<int64_t>(pairs.size());
    double gap_total = 0.0;
    for (const EvalPair& pair : pairs) {
        const PairScore score = score_pair(params, pair, exclude_prompt);
        if (score.correct) report.correct += 1;
        gap_total += score.gap;
    }
    report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.pairs);
    report.interval = wilson_interval(report.correct, report.pairs);
    report.mean_gap = gap_total / static_cast<double>(report.pairs);
    return report;
}

double token_perplexity(const ModelParams& params, const std::vector<TokenStream>& streams) {
    if (streams.empty()) throw std::invalid_argument("token_perplexity: no streams");
    double total = 0.0;
    int64_t count = 0;
    for (const TokenStream& stream : streams) {
        const NllResult nll = stream_nll(params, stream);
        total += nll.total;
        count += nll.valid_count;
    }
    return std::exp(total / static_cast<double>(count));
}

std::optional<double> speaker_consistency_proxy(const Codec& codec, const TokenStream& a,
                                                const TokenStream& b) {
    if (a.empty() || b.empty()) return std::nullopt;
    const int64_t dim = codec.config().feature_dim;
    std::vector<double> mean_a(static_cast<size_t>(dim), 0.0);
    std::vector<double> mean_b(static_cast<size_t>(dim), 0.0);
    for (int side = 0; side < 2; ++side) {
        const TokenStream& tokens = side == 0 ? a : b;
        std::vector<double>& mean = side == 0 ? mean_a : mean_b;
        const Tensor features = codec.decompress(tokens);
        for (int64_t r = 0; r < features.dims[0]; ++r)
            for (int64_t c = 0; c < dim; ++c)
                mean[static_cast<size_t>(c)] += features.at(r, c);
        for (double& x : mean) x /= static_cast<double>(features.dims[0]);
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t c = 0; c < dim; ++c) {
        dot += mean_a[static_cast<size_t>(c)] * mean_b[static_cast<size_t>(c)];
        na += mean_a[static_cast<size_t>(c)] * mean_a[static_cast<size_t>(c)];
        nb += mean_b[static_cast<size_t>(c)] * mean_b[static_cast<size_t>(c)];
    }
    if (na < 1e-24 || nb < 1e-24) return std::nullopt;
    return dot / std::sqrt(na * nb);
}

MannWhitneyResult mann_whitney(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.empty() || ys.empty())
        throw std::invalid_argument("mann_whitney: both samples must be non-empty");
    const int64_t n1 = static_cast<int64_t>(xs.size());
    const int64_t n2 = static_cast<int64_t>(ys.size());
    const int64_t n = n1 + n2;

    struct Entry {
        double value;
        bool first;
    };
    std::vector<Entry> pool;
    pool.reserve(static_cast<size_t>(n));
    for (double x : xs) pool.push_back({x, true});
    for (double y : ys) pool.push_back({y, false});
    for (const Entry& e : pool)
        if (!std::isfinite(e.value))
            throw std::invalid_argument("mann_whitney: non-finite sample value");
    std::sort(pool.begin(), pool.end(),
              [](const Entry& a, const Entry& b) { return a.value < b.value; });

    double rank_sum_first = 0.0;
    double tie_term = 0.0;
    size_t i = 0;
    while (i < pool.size()) {
        size_t j = i;
        while (j < pool.size() && pool[j].value == pool[i].value) ++j;
        // Average rank of a tie group spanning 1-based ranks [i+1, j].
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        for (size_t k = i; k < j; ++k)
            if (pool[k].first) rank_sum_first += avg_rank;
        i = j;
    }

    MannWhitneyResult result;
    result.u = rank_sum_first - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1);
    const double mean_u = 0.5 * static_cast<double>(n1) * static_cast<double>(n2);
    const double nn = static_cast<double>(n);
    const double var = static_cast<double>(n1) * static_cast<double>(n2) / 12.0 *
                       ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if (var <= 0.0) {
        result.z = 0.0;
        result.p = 1.0;
        return result;
    }
    result.z = (result.u - mean_u) / std::sqrt(var);
    result.p = std::erfc(std::fabs(result.z) / std::sqrt(2.0));
    return result;
}

std::vector<SweepCell> default_sweep_grid() {
    return {{512, 4}, {1024, 4}, {2048, 4}, {512, 8}, {512, 16}};
}

namespace {

std::string format_row(const SuiteRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%lld,%.6f,%.6f,%.6f,%.6f", row.family.c_str(),
                  static_cast<long long>(row.report.pairs), row.report.accuracy,
                  row.report.interval.lower, row.report.interval.upper, row.report.mean_gap);
    return buf;
}

} // namespace

std::string suite_csv(const std::vector<SuiteRow>& rows) {
    std::ostringstream out;
    out << "family,pairs,accuracy,wilson_lower,wilson_upper,mean_gap\n";
    for (const SuiteRow& row : rows) out << format_row(row) << "\n";
    return out.str();
}

std::string suite_summary(const std::vector<SuiteRow>& rows) {
    std::ostringstream out;
    for (const SuiteRow& row : rows) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "%-16s accuracy %.3f [%.3f, %.3f] over %lld pairs, mean gap %.3f\n",
                      row.family.c_str(), row.report.accuracy, row.report.interval.lower,
                      row.report.interval.upper, static_cast<long long>(row.report.pairs),
                      row.report.mean_gap);
        out << buf;
    }
    return out.str();
}

void write_suite_csv(const std::string& path, const std::vector<SuiteRow>& rows) {
    write_text_file(path, suite_csv(rows));
}

void write_pair_files(const std::string& dir, const std::vector<EvalPair>& pairs, int64_t vocab,
                      int32_t frame_rate_hz, int32_t chunk_tokens) {
    if (pairs.empty()) throw std::invalid_argument("write_pair_files: no pairs");
    std::filesystem::create_directories(dir);
    std::ostringstream csv;
    csv << "pair_id,positive_path,negative_path,prompt_len\n";
    for (size_t i = 0; i < pairs.size(); ++i) {
        char pos_name[64], neg_name[64];
        std::snprintf(pos_name, sizeof(pos_name), "pair_%05zu_pos.wtok", i);
        std::snprintf(neg_name, sizeof(neg_name), "pair_%05zu_neg.wtok", i);
        TokenFile file;
        file.vocab = static_cast<uint32_t>(vocab);
        file.frame_rate_hz = static_cast<uint32_t>(frame_rate_hz);
        file.chunk_tokens = static_cast<uint32_t>(chunk_tokens);
        file.tokens = pairs[i].positive;
        write_token_file((std::filesystem::path(dir) / pos_name).string(), file);
        file.tokens = pairs[i].negative;
        write_token_file((std::filesystem::path(dir) / neg_name).string(), file);
        csv << i << "," << pos_name << "," << neg_name << "," << pairs[i].prompt_len << "\n";
    }
    write_text_file((std::filesystem::path(dir) / "pairs.csv").string(), csv.str());
}

std::vector<EvalPair> read_pair_files(const std::string& csv_path, PairFamily family) {
    const std::filesystem::path base = std::filesystem::path(csv_path).parent_path();
    std::istringstream in(read_text_file(csv_path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("pair_id", 0) != 0)
        throw std::runtime_error("pair manifest " + csv_path + ": missing header");
    std::vector<EvalPair> pairs;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != 4)
            throw std::runtime_error("pair manifest " + csv_path + " line " +
                                     std::to_string(line_no) + ": expected 4 fields, got " +
                                     std::to_string(fields.size()));
        EvalPair pair;
        pair.family = family;
        pair.positive = read_token_file((base / fields[1]).string()).tokens;
        pair.negative = read_token_file((base / fields[2]).string()).tokens;
        pair.prompt_len = std::stoll(fields[3]);
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

} // namespace chunklm
