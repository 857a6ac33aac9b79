#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flexi/methods.hpp"

namespace flexi {

// Line-delimited JSON records. The first line of every file is a header
// {"format": "<kind>", "version": N}; each following line is one record.
inline constexpr int kRecordVersion = 1;

using Json = nlohmann::ordered_json;

namespace detail {
inline std::vector<Json> read_jsonl(const std::string& path, const std::string& kind) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path);
    std::vector<Json> out;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const std::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!header) {
            if (!j.contains("format") || j["format"] != kind)
                throw FormatError(path + ": expected a '" + kind + "' record file");
            if (!j.contains("version") || j["version"] != kRecordVersion)
                throw FormatError(path + ": unsupported " + kind + " version");
            header = true;
            continue;
        }
        out.push_back(std::move(j));
    }
    if (!header) throw FormatError(path + ": empty record file");
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    const auto tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp);
        f << text;
        if (!f) throw Error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot rename " + tmp);
}

}  // namespace detail

inline void write_dataset(const std::string& path, const std::vector<Sample>& data) {
    std::string text = Json{{"format", "dataset"}, {"version", kRecordVersion}}.dump() + "\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& s = data[i];
        text += Json{{"id", i},
                     {"family", family_name(s.family)},
                     {"knob", s.knob},
                     {"split", s.hard ? "hard" : "easy"},
                     {"prompt", s.prompt},
                     {"gold", s.gold}}
                    .dump() +
                "\n";
    }
    detail::write_text(path, text);
}

inline std::vector<Sample> read_dataset(const std::string& path) {
    std::vector<Sample> out;
    for (const auto& j : detail::read_jsonl(path, "dataset")) {
        try {
            Sample s;
            s.family = parse_family(j.at("family").get<std::string>());
            s.knob = j.at("knob").get<int>();
            s.hard = j.at("split").get<std::string>() == "hard";
            s.prompt = j.at("prompt").get<std::string>();
            s.gold = j.at("gold").get<std::string>();
            out.push_back(std::move(s));
        } catch (const Json::exception& e) {
            throw FormatError(path + ": bad dataset record: " + e.what());
        }
    }
    return out;
}

inline void write_labels(const std::string& path, const std::vector<DifficultyLabel>& labels) {
    std::string text = Json{{"format", "labels"}, {"version", kRecordVersion}}.dump() + "\n";
    for (const auto& l : labels)
        text += Json{{"id", l.sample_id},
                     {"metric", metric_name(l.kind)},
                     {"value", l.metric},
                     {"class", difficulty_name(l.label)}}
                    .dump() +
                "\n";
    detail::write_text(path, text);
}

inline std::vector<DifficultyLabel> read_labels(const std::string& path) {
    std::vector<DifficultyLabel> out;
    for (const auto& j : detail::read_jsonl(path, "labels")) {
        try {
            DifficultyLabel l;
            l.sample_id = j.at("id").get<std::size_t>();
            l.kind = parse_metric(j.at("metric").get<std::string>());
            l.metric = j.at("value").get<double>();
            const auto c = j.at("class").get<std::string>();
            if (c != "easy" && c != "hard") throw FormatError(path + ": unknown class '" + c + "'");
            l.label = c == "easy" ? Difficulty::easy : Difficulty::hard;
            out.push_back(l);
        } catch (const Json::exception& e) {
            throw FormatError(path + ": bad label record: " + e.what());
        }
    }
    return out;
}

// Wall-clock time is left out so that identical runs produce identical files.
inline Json finetune_json(const FinetuneReport& r) {
    Json hist = Json::object();
    for (const auto& [rank, n] : r.train_rank_histogram) hist[std::to_string(rank)] = n;
    return Json{{"format", "finetune"},      {"version", kRecordVersion}, {"policy", r.policy},
                {"seed", r.seed},            {"steps", r.steps},          {"adapters", r.adapter_ref},
                {"train_ranks", hist},       {"loss", r.loss_trace}};
}

inline FinetuneReport finetune_from_json(const Json& j, const std::string& where) {
    if (!j.contains("format") || j["format"] != "finetune" || j.value("version", 0) != kRecordVersion)
        throw FormatError(where + ": not a finetune record");
    try {
        FinetuneReport r;
        r.policy = j.at("policy").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.steps = j.at("steps").get<std::size_t>();
        r.adapter_ref = j.at("adapters").get<std::string>();
        for (const auto& [k, v] : j.at("train_ranks").items()) r.train_rank_histogram[std::stoi(k)] = v.get<std::size_t>();
        r.loss_trace = j.at("loss").get<std::vector<double>>();
        return r;
    } catch (const Json::exception& e) {
        throw FormatError(where + ": bad finetune record: " + e.what());
    }
}

inline Json eval_json(const EvalSummary& s) {
    Json hist = Json::object();
    for (const auto& [rank, n] : s.rank_histogram) hist[std::to_string(rank)] = n;
    Json samples = Json::array();
    for (std::size_t i = 0; i < s.n; ++i)
        samples.push_back(Json{{"id", i}, {"rank", s.ranks[i]}, {"prediction", s.predictions[i]}, {"score", s.scores[i]}});
    return Json{{"format", "eval"},
                {"version", kRecordVersion},
                {"policy", s.policy},
                {"metric", metric_name(s.metric)},
                {"n", s.n},
                {"mean", s.mean},
                {"exact_match", s.mean_em},
                {"easy", {{"n", s.easy.count}, {"sum", s.easy.sum}}},
                {"hard", {{"n", s.hard.count}, {"sum", s.hard.sum}}},
                {"ranks", hist},
                {"expected_active_params", s.expected_active_params},
                {"capacity_params", s.capacity_params},
                {"samples", samples}};
}

inline EvalSummary eval_from_json(const Json& j, const std::string& where) {
    if (!j.contains("format") || j["format"] != "eval" || j.value("version", 0) != kRecordVersion)
        throw FormatError(where + ": not an eval record");
    try {
        EvalSummary s;
        s.policy = j.at("policy").get<std::string>();
        s.metric = parse_metric(j.at("metric").get<std::string>());
        s.n = j.at("n").get<std::size_t>();
        s.mean = j.at("mean").get<double>();
        s.mean_em = j.at("exact_match").get<double>();
        s.easy = {j.at("easy").at("sum").get<double>(), j.at("easy").at("n").get<std::size_t>()};
        s.hard = {j.at("hard").at("sum").get<double>(), j.at("hard").at("n").get<std::size_t>()};
        for (const auto& [k, v] : j.at("ranks").items()) s.rank_histogram[std::stoi(k)] = v.get<std::size_t>();
        s.expected_active_params = j.at("expected_active_params").get<double>();
        s.capacity_params = j.at("capacity_params").get<std::size_t>();
        for (const auto& x : j.at("samples")) {
            s.ranks.push_back(x.at("rank").get<int>());
            s.predictions.push_back(x.at("prediction").get<std::string>());
            s.scores.push_back(x.at("score").get<double>());
        }
        if (s.ranks.size() != s.n) throw FormatError(where + ": sample count mismatch");
        return s;
    } catch (const Json::exception& e) {
        throw FormatError(where + ": bad eval record: " + e.what());
    }
}

inline void write_json(const std::string& path, const Json& j) { detail::write_text(path, j.dump(1) + "\n"); }

inline Json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path);
    try {
        return Json::parse(f);
    } catch (const std::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

}  // namespace flexi
