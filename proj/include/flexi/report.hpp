#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "flexi/methods.hpp"

namespace flexi {

struct ReportRow {
    std::string family;
    PolicySpec policy;
    EvalSummary eval;
};

// Same adapters evaluated with the native and with the mismatched inference behaviour.
struct ConsistencyRow {
    std::string family;
    std::string trained;   // training behaviour, e.g. "random 1-8"
    std::string native;    // inference behaviour matching training
    std::string mismatch;  // other inference behaviour on the same adapters
    double native_metric = 0;
    double mismatch_metric = 0;
    double gap() const { return native_metric - mismatch_metric; }
};

struct Report {
    std::string csv;          // one row per (family, method)
    std::string text;         // human-readable tables
    std::string pareto;       // params,metric pairs
    std::string consistency;  // consistency gaps
};

namespace detail {
inline std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string histogram_str(const std::map<int, std::size_t>& h) {
    std::string s;
    for (const auto& [r, n] : h) s += (s.empty() ? "" : " ") + std::to_string(r) + ":" + std::to_string(n);
    return s;
}

inline std::string pad(const std::string& s, std::size_t w, bool right = false) {
    if (s.size() >= w) return s;
    return right ? std::string(w - s.size(), ' ') + s : s + std::string(w - s.size(), ' ');
}

inline std::string table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w;
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (w.size() <= c) w.push_back(0);
            w[c] = std::max(w[c], r[c].size());
        }
    std::string out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::string line;
        for (std::size_t c = 0; c < rows[i].size(); ++c) line += (c ? "  " : "") + pad(rows[i][c], w[c], c > 1);
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
        if (i == 0) {
            std::size_t total = 0;
            for (auto x : w) total += x;
            out += std::string(total + 2 * (w.size() - 1), '-') + "\n";
        }
    }
    return out;
}
}  // namespace detail

// Metrics are printed in percent with two decimals; every number comes from
// fixed-order sums, so equal inputs give byte-identical output.
inline Report emit_report(const std::vector<ReportRow>& rows, const std::vector<ConsistencyRow>& gaps,
                          std::size_t router_params = 0) {
    if (rows.empty()) throw ValueError("emit_report: no evaluated methods");
    using detail::fixed;
    Report r;
    r.csv = "task,method,policy,metric,capacity_params,expected_active_params,score,exact_match,easy_score,hard_score,"
            "easy_n,hard_n,n,rank_histogram\n";
    r.pareto = "task,method,expected_active_params,score\n";
    std::vector<std::vector<std::string>> tab{{"task", "method", "#params", "E[active]", "metric", "score", "EM",
                                               "easy", "hard", "ranks"}};
    for (const auto& row : rows) {
        const auto& e = row.eval;
        const auto hist = detail::histogram_str(e.rank_histogram);
        r.csv += row.family + "," + row.policy.label() + "," + row.policy.str() + "," + std::string(metric_name(e.metric)) +
                 "," + std::to_string(e.capacity_params) + "," + fixed(e.expected_active_params, 2) + "," +
                 fixed(100 * e.mean, 2) + "," + fixed(100 * e.mean_em, 2) + "," + fixed(100 * e.easy.mean(), 2) + "," +
                 fixed(100 * e.hard.mean(), 2) + "," + std::to_string(e.easy.count) + "," +
                 std::to_string(e.hard.count) + "," + std::to_string(e.n) + "," + hist + "\n";
        r.pareto += row.family + "," + row.policy.label() + "," + fixed(e.expected_active_params, 2) + "," +
                    fixed(100 * e.mean, 2) + "\n";
        tab.push_back({row.family, row.policy.label(), std::to_string(e.capacity_params),
                       fixed(e.expected_active_params, 0), std::string(metric_name(e.metric)), fixed(100 * e.mean, 2),
                       fixed(100 * e.mean_em, 2), fixed(100 * e.easy.mean(), 2), fixed(100 * e.hard.mean(), 2), hist});
    }
    r.text = "Method comparison (scores in %, #params = adapter capacity, E[active] = expected active params)\n\n" +
             detail::table(tab);
    if (router_params) r.text += "\nrouter parameters (not counted above): " + std::to_string(router_params) + "\n";

    r.consistency = "task,trained,native,mismatched,native_score,mismatched_score,gap\n";
    if (!gaps.empty()) {
        std::vector<std::vector<std::string>> ct{{"task", "trained", "native", "mismatched", "native", "mismatched", "gap"}};
        for (const auto& g : gaps) {
            r.consistency += g.family + "," + g.trained + "," + g.native + "," + g.mismatch + "," +
                             fixed(100 * g.native_metric, 2) + "," + fixed(100 * g.mismatch_metric, 2) + "," +
                             fixed(100 * g.gap(), 2) + "\n";
            ct.push_back({g.family, g.trained, g.native, g.mismatch, fixed(100 * g.native_metric, 2),
                          fixed(100 * g.mismatch_metric, 2), fixed(100 * g.gap(), 2)});
        }
        r.text += "\nTraining/inference consistency (same adapters, gap = native - mismatched)\n\n" + detail::table(ct);
    }
    return r;
}

}  // namespace flexi
