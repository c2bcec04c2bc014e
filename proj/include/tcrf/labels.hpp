#pragma once

// Clinical BIOES label universe: nine categories, four span positions, and O.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tcrf/errors.hpp"

namespace tcrf {

// Alphabetical, which is also the index order of the label set.
enum class Category : std::uint8_t { ADE, Dosage, Drug, Duration, Form, Frequency, Reason, Route, Strength };

inline constexpr std::size_t kNumCategories = 9;

inline constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "ADE", "Dosage", "Drug", "Duration", "Form", "Frequency", "Reason", "Route", "Strength"};

inline constexpr std::array<Category, kNumCategories> kAllCategories = {
    Category::ADE,  Category::Dosage,    Category::Drug,   Category::Duration, Category::Form,
    Category::Frequency, Category::Reason, Category::Route, Category::Strength};

enum class Position : std::uint8_t { B, I, E, S };

inline constexpr std::size_t kNumLabels = 4 * kNumCategories + 1;

inline std::string_view category_name(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

inline std::optional<Category> parse_category(std::string_view name) {
    for (std::size_t i = 0; i < kNumCategories; ++i) {
        if (kCategoryNames[i] == name) return static_cast<Category>(i);
    }
    return std::nullopt;
}

// A label is stored as its index in the canonical label set: 0 is O, then
// 1 + 4*category + position.
class Label {
public:
    constexpr Label() = default;
    constexpr Label(Position pos, Category cat)
        : id_(static_cast<std::uint8_t>(1 + 4 * static_cast<int>(cat) + static_cast<int>(pos))) {}

    static constexpr Label outside() { return Label(); }

    static Label from_index(std::size_t index) {
        if (index >= kNumLabels) {
            throw ValidationError("label index " + std::to_string(index) + " out of range");
        }
        Label l;
        l.id_ = static_cast<std::uint8_t>(index);
        return l;
    }

    constexpr std::size_t index() const { return id_; }
    constexpr bool is_outside() const { return id_ == 0; }
    // Only meaningful when !is_outside().
    constexpr Position position() const { return static_cast<Position>((id_ - 1) % 4); }
    constexpr Category category() const { return static_cast<Category>((id_ - 1) / 4); }

    std::string str() const {
        if (is_outside()) return "O";
        static constexpr char kPos[] = {'B', 'I', 'E', 'S'};
        std::string s(1, kPos[static_cast<int>(position())]);
        s += '-';
        s += category_name(category());
        return s;
    }

    friend constexpr bool operator==(Label a, Label b) { return a.id_ == b.id_; }
    friend constexpr auto operator<=>(Label a, Label b) { return a.id_ <=> b.id_; }

private:
    std::uint8_t id_ = 0;
};

using LabelSequence = std::vector<Label>;

// Accepts exactly "O" or "<B|I|E|S>-<Category>".
inline std::optional<Label> parse_label(std::string_view s) {
    if (s == "O") return Label::outside();
    if (s.size() < 3 || s[1] != '-') return std::nullopt;
    Position pos;
    switch (s[0]) {
        case 'B': pos = Position::B; break;
        case 'I': pos = Position::I; break;
        case 'E': pos = Position::E; break;
        case 'S': pos = Position::S; break;
        default: return std::nullopt;
    }
    auto cat = parse_category(s.substr(2));
    if (!cat) return std::nullopt;
    return Label(pos, *cat);
}

inline Label label_from_string(std::string_view s) {
    auto l = parse_label(s);
    if (!l) throw ValidationError("invalid label string '" + std::string(s) + "'");
    return *l;
}

// The ordered, closed set of 37 labels. Column order of every lattice and
// confusion matrix follows this indexing.
class LabelSet {
public:
    LabelSet() {
        for (std::size_t i = 0; i < kNumLabels; ++i) labels_[i] = Label::from_index(i);
    }

    static const LabelSet& standard() {
        static const LabelSet set;
        return set;
    }

    std::size_t size() const { return kNumLabels; }
    Label at(std::size_t index) const { return Label::from_index(index); }
    std::size_t index_of(Label l) const { return l.index(); }
    std::span<const Label> labels() const { return labels_; }

    std::string joined(char sep = ',') const {
        std::string out;
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            if (i) out += sep;
            out += labels_[i].str();
        }
        return out;
    }

private:
    std::array<Label, kNumLabels> labels_{};
};

// Token span [start, end) carrying one category.
struct Span {
    Category category{};
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t length() const { return end - start; }
    std::string str() const {
        return std::string(category_name(category)) + "[" + std::to_string(start) + "," +
               std::to_string(end) + ")";
    }

    friend bool operator==(const Span&, const Span&) = default;
    friend auto operator<=>(const Span& a, const Span& b) {
        if (auto c = a.start <=> b.start; c != 0) return c;
        if (auto c = a.end <=> b.end; c != 0) return c;
        return a.category <=> b.category;
    }
};

using SpanSet = std::vector<Span>;  // sorted by start

// Adjacency rule of the BIOES grammar.
inline constexpr bool is_valid_transition(Label from, Label to) {
    const bool from_open = !from.is_outside() &&
                           (from.position() == Position::B || from.position() == Position::I);
    if (!from_open) {
        return to.is_outside() || to.position() == Position::B || to.position() == Position::S;
    }
    if (to.is_outside() || to.category() != from.category()) return false;
    return to.position() == Position::I || to.position() == Position::E;
}

inline constexpr bool is_valid_start(Label l) {
    return l.is_outside() || l.position() == Position::B || l.position() == Position::S;
}

inline constexpr bool is_valid_end(Label l) {
    return l.is_outside() || l.position() == Position::E || l.position() == Position::S;
}

// Index of the first grammar violation, or nullopt. A violation at the
// implicit end boundary is reported as labels.size().
inline std::optional<std::size_t> first_invalid_position(std::span<const Label> labels) {
    if (labels.empty()) return std::nullopt;
    if (!is_valid_start(labels[0])) return 0;
    for (std::size_t i = 1; i < labels.size(); ++i) {
        if (!is_valid_transition(labels[i - 1], labels[i])) return i;
    }
    if (!is_valid_end(labels.back())) return labels.size();
    return std::nullopt;
}

inline std::size_t count_invalid_transitions(std::span<const Label> labels) {
    std::size_t n = 0;
    for (std::size_t i = 1; i < labels.size(); ++i) {
        if (!is_valid_transition(labels[i - 1], labels[i])) ++n;
    }
    return n;
}

inline LabelSequence spans_to_labels(std::span<const Span> spans, std::size_t length) {
    SpanSet sorted(spans.begin(), spans.end());
    std::sort(sorted.begin(), sorted.end());
    LabelSequence out(length, Label::outside());
    std::size_t covered_until = 0;
    for (const Span& s : sorted) {
        if (s.start >= s.end || s.end > length) {
            throw ValidationError("span " + s.str() + " out of range for length " +
                                  std::to_string(length));
        }
        if (s.start < covered_until) throw ValidationError("span " + s.str() + " overlaps a previous span");
        covered_until = s.end;
        if (s.length() == 1) {
            out[s.start] = Label(Position::S, s.category);
            continue;
        }
        out[s.start] = Label(Position::B, s.category);
        for (std::size_t i = s.start + 1; i + 1 < s.end; ++i) out[i] = Label(Position::I, s.category);
        out[s.end - 1] = Label(Position::E, s.category);
    }
    return out;
}

enum class DecodeMode { strict, lenient };

namespace detail {

inline SpanSet decode_strict(std::span<const Label> labels) {
    SpanSet spans;
    std::optional<std::size_t> open;
    Category open_cat{};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Label l = labels[i];
        if (l.is_outside()) {
            if (open) throw GrammarError(i, "O inside an open " + std::string(category_name(open_cat)) + " span");
            continue;
        }
        const Category c = l.category();
        switch (l.position()) {
            case Position::B:
                if (open) throw GrammarError(i, "B-" + std::string(category_name(c)) + " inside an open span");
                open = i;
                open_cat = c;
                break;
            case Position::I:
                if (!open || open_cat != c) throw GrammarError(i, l.str() + " without a matching open span");
                break;
            case Position::E:
                if (!open || open_cat != c) throw GrammarError(i, l.str() + " without a matching open span");
                spans.push_back({c, *open, i + 1});
                open.reset();
                break;
            case Position::S:
                if (open) throw GrammarError(i, l.str() + " inside an open span");
                spans.push_back({c, i, i + 1});
                break;
        }
    }
    if (open) throw GrammarError(labels.size(), "span opened at " + std::to_string(*open) + " is never closed");
    return spans;
}

inline SpanSet decode_lenient(std::span<const Label> labels) {
    SpanSet spans;
    std::optional<std::size_t> open;
    Category open_cat{};
    auto close_at = [&](std::size_t end) {
        if (open) spans.push_back({open_cat, *open, end});
        open.reset();
    };
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const Label l = labels[i];
        if (l.is_outside()) {
            close_at(i);
            continue;
        }
        const Category c = l.category();
        const bool continues = open && open_cat == c;
        switch (l.position()) {
            case Position::B:
                close_at(i);
                open = i;
                open_cat = c;
                break;
            case Position::I:
                if (!continues) {
                    close_at(i);
                    open = i;
                    open_cat = c;
                }
                break;
            case Position::E:
                if (!continues) {
                    close_at(i);
                    open = i;
                    open_cat = c;
                }
                close_at(i + 1);
                break;
            case Position::S:
                close_at(i);
                spans.push_back({c, i, i + 1});
                break;
        }
    }
    close_at(labels.size());
    return spans;
}

}  // namespace detail

// Strict decoding is the exact inverse of spans_to_labels and throws
// GrammarError on the first violation. Lenient decoding never throws: orphan
// I/E tokens open a span, unclosed spans end at the last same-category token.
inline SpanSet labels_to_spans(std::span<const Label> labels, DecodeMode mode) {
    return mode == DecodeMode::strict ? detail::decode_strict(labels) : detail::decode_lenient(labels);
}

}  // namespace tcrf
