#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flexi/error.hpp"

namespace flexi {

enum class MetricKind { token_f1, answer_accuracy };

inline std::string_view metric_name(MetricKind m) {
    return m == MetricKind::token_f1 ? "token-F1" : "answer-accuracy";
}

inline MetricKind parse_metric(std::string_view s) {
    if (s == "token-F1") return MetricKind::token_f1;
    if (s == "answer-accuracy") return MetricKind::answer_accuracy;
    throw ValueError("unknown metric kind '" + std::string(s) + "'");
}

inline std::vector<std::string> whitespace_tokens(std::string_view s) {
    std::vector<std::string> out;
    std::istringstream is{std::string(s)};
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

// Multiset-overlap F1 over whitespace tokens.
inline double metric_token_f1(std::string_view prediction, std::string_view gold) {
    const auto p = whitespace_tokens(prediction);
    const auto g = whitespace_tokens(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& t : g) ++counts[t];
    int overlap = 0;
    for (const auto& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    return 2 * precision * recall / (precision + recall);
}

// trim, collapse internal whitespace, lowercase
inline std::string normalize_answer(std::string_view s) {
    std::string out;
    for (const auto& t : whitespace_tokens(s)) {
        if (!out.empty()) out += ' ';
        for (char c : t) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline double metric_exact_match(std::string_view prediction, std::string_view gold) {
    return normalize_answer(prediction) == normalize_answer(gold) ? 1.0 : 0.0;
}

// Last run of decimal digits (with an optional leading minus) in `s`.
inline std::optional<long long> last_integer(std::string_view s) {
    std::optional<long long> found;
    std::size_t i = 0;
    while (i < s.size()) {
        if (std::isdigit(static_cast<unsigned char>(s[i]))) {
            const bool neg = i > 0 && s[i - 1] == '-';
            std::size_t j = i;
            long long v = 0;
            while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) {
                if (v < 100000000000000LL) v = v * 10 + (s[j] - '0');
                ++j;
            }
            found = neg ? -v : v;
            i = j;
        } else {
            ++i;
        }
    }
    return found;
}

inline double metric_answer_accuracy(std::string_view prediction, std::string_view gold) {
    const auto g = normalize_answer(gold);
    const auto gv = last_integer(g);
    if (!gv || g.find_first_not_of("-0123456789") != std::string::npos)
        throw ValueError("answer-accuracy: gold '" + std::string(gold) + "' is not an integer");
    const auto pv = last_integer(prediction);
    return pv && *pv == *gv ? 1.0 : 0.0;
}

inline double score(MetricKind m, std::string_view prediction, std::string_view gold) {
    return m == MetricKind::token_f1 ? metric_token_f1(prediction, gold) : metric_answer_accuracy(prediction, gold);
}

}  // namespace flexi
