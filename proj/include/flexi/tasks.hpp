#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "flexi/error.hpp"
#include "flexi/rng.hpp"

namespace flexi {

enum class Family { copy, kv_recall, mod_chain };

inline std::string_view family_name(Family f) {
    switch (f) {
        case Family::copy: return "copy";
        case Family::kv_recall: return "kv_recall";
        case Family::mod_chain: return "mod_chain";
    }
    return "?";
}

inline Family parse_family(std::string_view s) {
    if (s == "copy") return Family::copy;
    if (s == "kv_recall") return Family::kv_recall;
    if (s == "mod_chain") return Family::mod_chain;
    throw ValueError("unknown task family '" + std::string(s) + "'");
}

struct Sample {
    std::string prompt;
    std::string gold;
    int knob = 0;
    Family family = Family::copy;
    bool hard = false;  // member of the high-knob split
};

inline constexpr int kKvMaxPairs = 12;
inline constexpr int kChainMaxLength = 8;
inline constexpr int kChainModulus = 10;
inline constexpr int kCopyMaxLength = 10;
inline constexpr std::string_view kKvKeys = "abcdefghijklmnop";

// Every character any generator can emit, in ascending order.
inline std::string task_alphabet() {
    std::string s = " *+-0123456789:=?abcdefghijklmnop|";
    std::sort(s.begin(), s.end());
    return s;
}

// "a:37 k:05 z:91?k=" -> "05". Distinct keys; difficulty = number of pairs.
inline Sample make_kv_recall(int pairs, RngStream& rng) {
    if (pairs < 1 || pairs > kKvMaxPairs)
        throw ValueError("kv_recall: pair count " + std::to_string(pairs) + " outside [1," +
                         std::to_string(kKvMaxPairs) + "]");
    std::string keys(kKvKeys);
    rng.shuffle(std::span<char>(keys.data(), keys.size()));
    Sample s;
    s.family = Family::kv_recall;
    s.knob = pairs;
    std::vector<std::string> values;
    for (int i = 0; i < pairs; ++i) {
        const int v = static_cast<int>(rng.below(100));
        std::string val = {static_cast<char>('0' + v / 10), static_cast<char>('0' + v % 10)};
        if (i) s.prompt += ' ';
        s.prompt += keys[static_cast<std::size_t>(i)];
        s.prompt += ':';
        s.prompt += val;
        values.push_back(val);
    }
    const auto q = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(pairs)));
    s.prompt += '?';
    s.prompt += keys[q];
    s.prompt += '=';
    s.gold = values[q];
    return s;
}

// "3+4*2=?" evaluated strictly left to right mod 10 -> "4". Difficulty = number of operations.
inline Sample make_mod_chain(int length, RngStream& rng) {
    if (length < 1 || length > kChainMaxLength)
        throw ValueError("mod_chain: chain length " + std::to_string(length) + " outside [1," +
                         std::to_string(kChainMaxLength) + "]");
    static constexpr char ops[] = {'+', '-', '*'};
    Sample s;
    s.family = Family::mod_chain;
    s.knob = length;
    int acc = static_cast<int>(rng.below(10));
    s.prompt += static_cast<char>('0' + acc);
    for (int i = 0; i < length; ++i) {
        const char op = ops[rng.below(3)];
        const int a = static_cast<int>(rng.below(10));
        s.prompt += op;
        s.prompt += static_cast<char>('0' + a);
        if (op == '+') acc = (acc + a) % kChainModulus;
        else if (op == '-') acc = (acc - a + kChainModulus) % kChainModulus;
        else acc = (acc * a) % kChainModulus;
    }
    s.prompt += "=?";
    s.gold = std::string(1, static_cast<char>('0' + acc));
    return s;
}

// "a3f|" -> "a3f". Warm-up task used only for pretraining.
inline Sample make_copy(int length, RngStream& rng) {
    if (length < 1 || length > kCopyMaxLength) throw ValueError("copy: length out of range");
    static constexpr std::string_view chars = "0123456789abcdefghijklmnop";
    Sample s;
    s.family = Family::copy;
    s.knob = length;
    for (int i = 0; i < length; ++i) s.gold += chars[rng.below(chars.size())];
    s.prompt = s.gold + "|";
    return s;
}

inline Sample make_sample(Family f, int knob, RngStream& rng) {
    switch (f) {
        case Family::kv_recall: return make_kv_recall(knob, rng);
        case Family::mod_chain: return make_mod_chain(knob, rng);
        case Family::copy: return make_copy(knob, rng);
    }
    throw ValueError("unknown family");
}

inline int max_knob(Family f) {
    switch (f) {
        case Family::kv_recall: return kKvMaxPairs;
        case Family::mod_chain: return kChainMaxLength;
        case Family::copy: return kCopyMaxLength;
    }
    return 0;
}

// Mixed-difficulty split description. Knobs are drawn uniformly from the
// easy list for the first half of a split and from the hard list for the rest.
struct TaskSpec {
    Family family = Family::mod_chain;
    std::vector<int> easy_knobs{1, 2};
    std::vector<int> hard_knobs{6, 7, 8};
    std::size_t train_size = 2000;
    std::size_t eval_size = 400;
    std::uint64_t seed = 0;

    void validate() const {
        if (easy_knobs.empty() || hard_knobs.empty()) throw ValueError("task: knob lists must be nonempty");
        for (int k : easy_knobs)
            if (k < 1 || k > max_knob(family)) throw ValueError("task: easy knob " + std::to_string(k) + " out of range");
        for (int k : hard_knobs)
            if (k < 1 || k > max_knob(family)) throw ValueError("task: hard knob " + std::to_string(k) + " out of range");
    }
};

// Uniform knob draws from `knobs`; pure function of (knobs, count, rng state).
inline std::vector<Sample> generate(Family f, const std::vector<int>& knobs, std::size_t count, RngStream& rng) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const int k = knobs[rng.below(knobs.size())];
        out.push_back(make_sample(f, k, rng));
    }
    return out;
}

inline std::vector<Sample> gen_kv_recall(const std::vector<int>& knobs, std::size_t count, std::uint64_t seed) {
    RngStream rng(seed, "tasks.kv_recall");
    return generate(Family::kv_recall, knobs, count, rng);
}

inline std::vector<Sample> gen_mod_chain(const std::vector<int>& knobs, std::size_t count, std::uint64_t seed) {
    RngStream rng(seed, "tasks.mod_chain");
    return generate(Family::mod_chain, knobs, count, rng);
}

// Half easy, half hard, interleaved by a deterministic shuffle.
inline std::vector<Sample> make_split(const TaskSpec& spec, std::string_view split, std::size_t size) {
    spec.validate();
    RngStream rng(spec.seed, "tasks." + std::string(family_name(spec.family)) + "." + std::string(split));
    const std::size_t n_easy = size / 2;
    auto easy = generate(spec.family, spec.easy_knobs, n_easy, rng);
    auto hard = generate(spec.family, spec.hard_knobs, size - n_easy, rng);
    for (auto& s : hard) s.hard = true;
    easy.insert(easy.end(), hard.begin(), hard.end());
    rng.shuffle(std::span<Sample>(easy));
    return easy;
}

}  // namespace flexi
