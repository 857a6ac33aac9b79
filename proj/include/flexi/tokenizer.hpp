#pragma once

#include <algorithm>
#include <array>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "flexi/error.hpp"

namespace flexi {

// Character-level vocabulary. Ids 0..2 are PAD, BOS, EOS; the corpus
// characters follow in ascending byte order.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSpecials = 3;

    static Tokenizer build(const std::vector<std::string>& corpus) {
        std::set<unsigned char> chars;
        for (const auto& s : corpus)
            for (unsigned char c : s) chars.insert(c);
        if (chars.empty()) throw ValueError("build_tokenizer: empty corpus");
        Tokenizer t;
        t.to_id_.fill(-1);
        int id = kSpecials;
        for (unsigned char c : chars) {
            t.to_id_[c] = id++;
            t.chars_.push_back(static_cast<char>(c));
        }
        return t;
    }

    std::size_t vocab_size() const noexcept { return chars_.size() + kSpecials; }
    const std::string& characters() const noexcept { return chars_; }

    int id_of(char c) const {
        const int id = to_id_[static_cast<unsigned char>(c)];
        if (id < 0) throw ValueError(std::string("encode: character '") + c + "' (byte " +
                                     std::to_string(static_cast<unsigned char>(c)) + ") is not in the vocabulary");
        return id;
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (char c : text) ids.push_back(id_of(c));
        return ids;
    }

    // Specials decode to nothing.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id < kSpecials) continue;
            const auto i = static_cast<std::size_t>(id - kSpecials);
            if (i >= chars_.size()) throw ValueError("decode: id " + std::to_string(id) + " out of range");
            out += chars_[i];
        }
        return out;
    }

private:
    std::array<int, 256> to_id_{};
    std::string chars_;
};

}  // namespace flexi
