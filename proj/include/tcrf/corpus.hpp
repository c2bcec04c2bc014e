#pragma once

// Two-column CoNLL corpora, vocabularies, splits and label statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tcrf/errors.hpp"
#include "tcrf/labels.hpp"
#include "tcrf/rng.hpp"

namespace tcrf {

struct Sentence {
    std::vector<std::string> tokens;
    LabelSequence gold;

    std::size_t size() const { return tokens.size(); }
    friend bool operator==(const Sentence&, const Sentence&) = default;
};

struct Dataset {
    std::string name;
    std::vector<Sentence> sentences;

    std::size_t size() const { return sentences.size(); }
    bool empty() const { return sentences.empty(); }
    std::size_t token_count() const {
        std::size_t n = 0;
        for (const auto& s : sentences) n += s.size();
        return n;
    }
};

inline bool is_valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t extra;
        std::uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            extra = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= s.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        // overlong forms, surrogates, out of range
        if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
            (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
            return false;
        }
        i += extra + 1;
    }
    return true;
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
        if (i > start) fields.push_back(line.substr(start, i - start));
    }
    return fields;
}

inline bool is_blank(std::string_view line) {
    return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t'; });
}

}  // namespace detail

// Each non-blank line is "<token> <label>"; blank lines end sentences.
inline Dataset read_conll(std::istream& in, std::string name = {}) {
    Dataset d;
    d.name = std::move(name);
    Sentence current;
    std::string line;
    std::size_t lineno = 0;
    auto flush = [&] {
        if (!current.tokens.empty()) d.sentences.push_back(std::move(current));
        current = {};
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!is_valid_utf8(line)) throw ParseError(lineno, "invalid UTF-8");
        if (detail::is_blank(line)) {
            flush();
            continue;
        }
        const auto fields = detail::split_ws(line);
        if (fields.size() != 2) {
            throw ParseError(lineno, "expected '<token> <label>', got " + std::to_string(fields.size()) + " fields");
        }
        auto label = parse_label(fields[1]);
        if (!label) throw ParseError(lineno, "unparseable label '" + std::string(fields[1]) + "'");
        current.tokens.emplace_back(fields[0]);
        current.gold.push_back(*label);
    }
    flush();
    return d;
}

inline Dataset read_conll_file(const std::string& path, std::string name = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    try {
        return read_conll(in, name.empty() ? path : std::move(name));
    } catch (const ParseError& e) {
        throw ParseError(e.line(), e.detail(), path);
    }
}

// Canonical form: single space separator, blank line after every sentence.
inline void write_conll(std::ostream& out, const Dataset& d) {
    for (const auto& s : d.sentences) {
        for (std::size_t i = 0; i < s.size(); ++i) out << s.tokens[i] << ' ' << s.gold[i].str() << '\n';
        out << '\n';
    }
}

inline void write_conll_file(const std::string& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    write_conll(out, d);
    if (!out) throw Error("write failed: " + path);
}

// Sentence-level split. Both halves keep the input order.
inline std::pair<Dataset, Dataset> split_train_dev(const Dataset& d, double dev_fraction, std::uint64_t seed) {
    if (!(dev_fraction > 0.0 && dev_fraction < 1.0)) throw ValidationError("dev_fraction must be in (0, 1)");
    const std::size_t n = d.size();
    const auto dev_n = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(n)));
    if (dev_n == 0 || dev_n >= n) {
        throw ValidationError("dev split of size " + std::to_string(dev_n) + " out of " + std::to_string(n));
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<bool> is_dev(n, false);
    for (std::size_t i = 0; i < dev_n; ++i) is_dev[order[i]] = true;

    Dataset train{"train", {}}, dev{"dev", {}};
    for (std::size_t i = 0; i < n; ++i) (is_dev[i] ? dev : train).sentences.push_back(d.sentences[i]);
    return {std::move(train), std::move(dev)};
}

class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnknown = 1;

    Vocabulary() : tokens_{"<pad>", "<unk>"} {}

    // Tokens must be listed in id order, starting after the two reserved ids.
    explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
        for (const auto& t : tokens) add(t);
    }

    std::size_t size() const { return tokens_.size(); }

    std::size_t lookup(std::string_view token) const {
        auto it = ids_.find(std::string(token));
        return it == ids_.end() ? kUnknown : it->second;
    }

    bool contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

    const std::string& token(std::size_t id) const { return tokens_.at(id); }

    // Non-reserved tokens in id order.
    std::vector<std::string> entries() const { return {tokens_.begin() + 2, tokens_.end()}; }

    std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
        std::vector<std::size_t> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(lookup(t));
        return ids;
    }

private:
    void add(const std::string& t) {
        if (ids_.count(t)) throw ValidationError("duplicate vocabulary entry '" + t + "'");
        ids_.emplace(t, tokens_.size());
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
};

// Ids assigned by descending frequency, ties broken lexicographically.
inline Vocabulary build_vocabulary(const Dataset& d, std::size_t min_frequency) {
    if (min_frequency < 1) throw ValidationError("min_frequency must be >= 1");
    if (d.empty()) throw ValidationError("cannot build a vocabulary from an empty dataset");
    std::map<std::string, std::size_t> freq;
    for (const auto& s : d.sentences)
        for (const auto& t : s.tokens) ++freq[t];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : freq)
        if (n >= min_frequency) kept.emplace_back(tok, n);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [tok, n] : kept) tokens.push_back(tok);
    return Vocabulary(tokens);
}

struct SplitDistribution {
    std::string split;
    std::array<std::size_t, kNumLabels> counts{};
    std::size_t total = 0;

    double percent(std::size_t label_index) const {
        return total == 0 ? 0.0 : 100.0 * static_cast<double>(counts[label_index]) / static_cast<double>(total);
    }
};

struct LabelDistribution {
    std::vector<SplitDistribution> splits;
};

inline LabelDistribution label_distribution(std::span<const Dataset> splits) {
    LabelDistribution dist;
    for (const auto& d : splits) {
        SplitDistribution sd;
        sd.split = d.name;
        for (const auto& s : d.sentences) {
            for (Label l : s.gold) ++sd.counts[l.index()];
            sd.total += s.size();
        }
        dist.splits.push_back(std::move(sd));
    }
    return dist;
}

// CSV "split,label,count,percent"; one row per split and label.
inline void write_distribution_csv(std::ostream& out, const LabelDistribution& dist) {
    out << "split,label,count,percent\n";
    for (const auto& sd : dist.splits) {
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            out << sd.split << ',' << Label::from_index(i).str() << ',' << sd.counts[i] << ','
                << std::fixed << std::setprecision(4) << sd.percent(i) << '\n';
        }
    }
    out.unsetf(std::ios::floatfield);
}

// Chunk boundaries [begin, end) covering [0, length) with at most max_len each.
inline std::vector<std::pair<std::size_t, std::size_t>> window_bounds(std::size_t length, std::size_t max_len) {
    if (max_len == 0) throw ValidationError("window length must be >= 1");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t b = 0; b < length; b += max_len) out.emplace_back(b, std::min(length, b + max_len));
    return out;
}

// Labels of [begin, end) re-encoded so that spans crossing the window edge
// are clipped to it; the chunk stays grammatical.
inline LabelSequence clip_labels(std::span<const Label> labels, std::size_t begin, std::size_t end) {
    SpanSet clipped;
    for (const Span& s : labels_to_spans(labels, DecodeMode::lenient)) {
        const std::size_t a = std::max(s.start, begin), b = std::min(s.end, end);
        if (a < b) clipped.push_back({s.category, a - begin, b - begin});
    }
    return spans_to_labels(clipped, end - begin);
}

// Splits over-length sentences into consecutive chunks of at most max_len.
inline std::vector<Sentence> window_sentence(const Sentence& s, std::size_t max_len) {
    std::vector<Sentence> out;
    if (s.size() <= max_len) {
        out.push_back(s);
        return out;
    }
    for (auto [b, e] : window_bounds(s.size(), max_len)) {
        Sentence chunk;
        chunk.tokens.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(b),
                            s.tokens.begin() + static_cast<std::ptrdiff_t>(e));
        chunk.gold = clip_labels(s.gold, b, e);
        out.push_back(std::move(chunk));
    }
    return out;
}

}  // namespace tcrf
