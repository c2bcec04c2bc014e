#pragma once

// Entity-, token-, BIOES- and binary-level scoring plus confusion matrices,
// and their CSV renderings.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tcrf/corpus.hpp"
#include "tcrf/errors.hpp"
#include "tcrf/labels.hpp"

namespace tcrf {

inline double safe_ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline double harmonic_f1(double pre, double rec) { return pre + rec == 0.0 ? 0.0 : 2.0 * pre * rec / (pre + rec); }

// Precision/recall/F1 from raw counts; every rate is 0 when its denominator is.
struct Score {
    std::size_t correct = 0;
    std::size_t predicted = 0;
    std::size_t gold = 0;

    double pre() const { return safe_ratio(correct, predicted); }
    double rec() const { return safe_ratio(correct, gold); }
    double f1() const { return harmonic_f1(pre(), rec()); }

    Score& operator+=(const Score& o) {
        correct += o.correct;
        predicted += o.predicted;
        gold += o.gold;
        return *this;
    }
};

struct EntityReport {
    Score overall;  // overall.correct is Corr
    std::size_t tokens = 0;
    std::size_t tokens_correct = 0;
    std::array<Score, kNumCategories> per_category{};  // predicted is "found"

    double acc() const { return safe_ratio(tokens_correct, tokens); }
    std::size_t corr() const { return overall.correct; }
};

struct TokenReport {
    std::array<Score, kNumCategories> per_category{};  // gold is the support
};

struct BioesReport {
    std::array<Score, kNumLabels> per_label{};
};

struct BinaryReport {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

    double pre() const { return safe_ratio(tp, tp + fp); }
    double rec() const { return safe_ratio(tp, tp + fn); }
    double f1() const { return harmonic_f1(pre(), rec()); }
    double acc() const { return safe_ratio(tp + tn, tp + fp + fn + tn); }
};

enum class ConfusionMode { full, binary };

struct ConfusionMatrix {
    ConfusionMode mode = ConfusionMode::full;
    std::vector<std::string> labels;                 // row/column names
    std::vector<std::vector<std::size_t>> counts;    // [gold][pred]

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& row : counts)
            for (std::size_t c : row) n += c;
        return n;
    }
};

using LabelCorpus = std::vector<LabelSequence>;

inline LabelCorpus gold_labels(const Dataset& d) {
    LabelCorpus out;
    out.reserve(d.size());
    for (const auto& s : d.sentences) out.push_back(s.gold);
    return out;
}

namespace detail {

inline void check_aligned(std::span<const LabelSequence> gold, std::span<const LabelSequence> pred) {
    if (gold.size() != pred.size()) {
        throw ValidationError("gold has " + std::to_string(gold.size()) + " sentences, prediction has " +
                              std::to_string(pred.size()));
    }
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].size() != pred[i].size()) {
            throw ValidationError("sentence " + std::to_string(i) + ": gold has " + std::to_string(gold[i].size()) +
                                  " tokens, prediction has " + std::to_string(pred[i].size()));
        }
    }
}

inline std::size_t cat_index(Category c) { return static_cast<std::size_t>(c); }

}  // namespace detail

// Exact (category, start, end) matching; both sides decoded leniently.
inline EntityReport entity_level_eval(std::span<const LabelSequence> gold, std::span<const LabelSequence> pred) {
    detail::check_aligned(gold, pred);
    EntityReport r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const SpanSet g = labels_to_spans(gold[i], DecodeMode::lenient);
        const SpanSet p = labels_to_spans(pred[i], DecodeMode::lenient);
        for (const Span& s : g) ++r.per_category[detail::cat_index(s.category)].gold;
        for (const Span& s : p) ++r.per_category[detail::cat_index(s.category)].predicted;
        // both sorted by start and non-overlapping
        std::size_t a = 0, b = 0;
        while (a < g.size() && b < p.size()) {
            if (g[a] == p[b]) {
                ++r.per_category[detail::cat_index(g[a].category)].correct;
                ++a;
                ++b;
            } else if (g[a] < p[b]) {
                ++a;
            } else {
                ++b;
            }
        }
        for (std::size_t k = 0; k < gold[i].size(); ++k) {
            ++r.tokens;
            if (gold[i][k] == pred[i][k]) ++r.tokens_correct;
        }
    }
    for (const auto& s : r.per_category) r.overall += s;
    return r;
}

// A token counts for category c when gold and prediction both carry c,
// whatever their B/I/E/S positions.
inline TokenReport token_level_eval(std::span<const LabelSequence> gold, std::span<const LabelSequence> pred) {
    detail::check_aligned(gold, pred);
    TokenReport r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        for (std::size_t k = 0; k < gold[i].size(); ++k) {
            const Label g = gold[i][k], p = pred[i][k];
            if (!g.is_outside()) ++r.per_category[detail::cat_index(g.category())].gold;
            if (!p.is_outside()) ++r.per_category[detail::cat_index(p.category())].predicted;
            if (!g.is_outside() && !p.is_outside() && g.category() == p.category()) {
                ++r.per_category[detail::cat_index(g.category())].correct;
            }
        }
    }
    return r;
}

inline BioesReport bioes_level_eval(std::span<const LabelSequence> gold, std::span<const LabelSequence> pred) {
    detail::check_aligned(gold, pred);
    BioesReport r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        for (std::size_t k = 0; k < gold[i].size(); ++k) {
            const Label g = gold[i][k], p = pred[i][k];
            ++r.per_label[g.index()].gold;
            ++r.per_label[p.index()].predicted;
            if (g == p) ++r.per_label[g.index()].correct;
        }
    }
    return r;
}

// Special (any non-O label) is the positive class.
inline BinaryReport binary_eval(std::span<const LabelSequence> gold, std::span<const LabelSequence> pred) {
    detail::check_aligned(gold, pred);
    BinaryReport r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        for (std::size_t k = 0; k < gold[i].size(); ++k) {
            const bool g = !gold[i][k].is_outside(), p = !pred[i][k].is_outside();
            if (g && p) ++r.tp;
            else if (!g && p) ++r.fp;
            else if (g && !p) ++r.fn;
            else ++r.tn;
        }
    }
    return r;
}

// Rows are gold, columns predicted. Binary order is {special, O}.
inline ConfusionMatrix confusion(std::span<const LabelSequence> gold, std::span<const LabelSequence> pred,
                                 ConfusionMode mode) {
    detail::check_aligned(gold, pred);
    ConfusionMatrix m;
    m.mode = mode;
    if (mode == ConfusionMode::full) {
        for (Label l : LabelSet::standard().labels()) m.labels.push_back(l.str());
    } else {
        m.labels = {"special", "O"};
    }
    m.counts.assign(m.labels.size(), std::vector<std::size_t>(m.labels.size(), 0));
    auto cell = [mode](Label l) -> std::size_t {
        if (mode == ConfusionMode::full) return l.index();
        return l.is_outside() ? 1 : 0;
    };
    for (std::size_t i = 0; i < gold.size(); ++i)
        for (std::size_t k = 0; k < gold[i].size(); ++k) ++m.counts[cell(gold[i][k])][cell(pred[i][k])];
    return m;
}

// --- rendering ------------------------------------------------------------

// Rate in [0, 1] as a percentage with two decimals, e.g. "75.01%".
inline std::string format_percent(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * rate);
    return buf;
}

inline std::string render_entity_table(const EntityReport& r, const std::string& report_epoch = {}) {
    std::ostringstream out;
    if (!report_epoch.empty()) out << "# epoch: " << report_epoch << '\n';
    out << "Acc,Pre,Rec,F1,Corr\n";
    out << format_percent(r.acc()) << ',' << format_percent(r.overall.pre()) << ','
        << format_percent(r.overall.rec()) << ',' << format_percent(r.overall.f1()) << ',' << r.corr() << '\n';
    out << "Category,Pre,Rec,F1,found\n";
    for (std::size_t c = 0; c < kNumCategories; ++c) {
        const Score& s = r.per_category[c];
        out << kCategoryNames[c] << ',' << format_percent(s.pre()) << ',' << format_percent(s.rec()) << ','
            << format_percent(s.f1()) << ',' << s.predicted << '\n';
    }
    return out.str();
}

inline std::string render_token_csv(const TokenReport& r) {
    std::ostringstream out;
    out << "category,pre,rec,f1,support\n";
    for (std::size_t c = 0; c < kNumCategories; ++c) {
        const Score& s = r.per_category[c];
        out << kCategoryNames[c] << ',' << format_percent(s.pre()) << ',' << format_percent(s.rec()) << ','
            << format_percent(s.f1()) << ',' << s.gold << '\n';
    }
    return out.str();
}

inline std::string render_bioes_csv(const BioesReport& r) {
    std::ostringstream out;
    out << "label,pre,rec,f1,support\n";
    for (std::size_t i = 0; i < kNumLabels; ++i) {
        const Score& s = r.per_label[i];
        out << Label::from_index(i).str() << ',' << format_percent(s.pre()) << ',' << format_percent(s.rec()) << ','
            << format_percent(s.f1()) << ',' << s.gold << '\n';
    }
    return out.str();
}

inline std::string render_binary_csv(const BinaryReport& r) {
    std::ostringstream out;
    out << "pre,rec,f1,acc,tp,fp,fn,tn\n";
    out << format_percent(r.pre()) << ',' << format_percent(r.rec()) << ',' << format_percent(r.f1()) << ','
        << format_percent(r.acc()) << ',' << r.tp << ',' << r.fp << ',' << r.fn << ',' << r.tn << '\n';
    return out.str();
}

inline std::string render_confusion_csv(const ConfusionMatrix& m) {
    std::ostringstream out;
    out << "gold\\pred";
    for (const auto& l : m.labels) out << ',' << l;
    out << '\n';
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
        out << m.labels[i];
        for (std::size_t c : m.counts[i]) out << ',' << c;
        out << '\n';
    }
    return out.str();
}

inline std::string render_model_summary(const std::string& model_name, std::size_t trainable_parameters) {
    return "Model,Trainable parameters\n" + model_name + ',' + std::to_string(trainable_parameters) + '\n';
}

inline constexpr std::array<const char*, 6> kReportBundleFiles = {
    "entity_report.csv", "token_report.csv",      "bioes_report.csv",
    "binary_report.csv", "confusion_full.csv", "confusion_binary.csv"};

// Writes all six report artifacts into dir and returns their paths.
inline std::vector<std::filesystem::path> write_report_bundle(const std::filesystem::path& dir,
                                                              std::span<const LabelSequence> gold,
                                                              std::span<const LabelSequence> pred,
                                                              const std::string& report_epoch = {}) {
    const std::array<std::string, 6> contents = {
        render_entity_table(entity_level_eval(gold, pred), report_epoch),
        render_token_csv(token_level_eval(gold, pred)),
        render_bioes_csv(bioes_level_eval(gold, pred)),
        render_binary_csv(binary_eval(gold, pred)),
        render_confusion_csv(confusion(gold, pred, ConfusionMode::full)),
        render_confusion_csv(confusion(gold, pred, ConfusionMode::binary)),
    };
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> paths;
    for (std::size_t i = 0; i < contents.size(); ++i) {
        const auto path = dir / kReportBundleFiles[i];
        std::ofstream out(path, std::ios::binary);
        out << contents[i];
        if (!out) throw Error("write failed: " + path.string());
        paths.push_back(path);
    }
    return paths;
}

}  // namespace tcrf
