#pragma once

// Templated clinical-style sentences over all nine categories, e.g.
// "take 1 tablet of aspirin 81 mg po daily for 5 days for pain".

#include <string>
#include <string_view>
#include <vector>

#include "tcrf/corpus.hpp"
#include "tcrf/rng.hpp"

namespace tcrf {

namespace detail {

using Phrase = std::vector<std::string_view>;

inline const std::vector<Phrase>& slot_fillers(Category c) {
    static const std::vector<Phrase> drug = {
        {"aspirin"},  {"ibuprofen"},   {"metformin"},  {"lisinopril"}, {"warfarin"},   {"heparin"},
        {"amoxicillin"}, {"vancomycin"}, {"insulin", "glargine"}, {"acetaminophen"}, {"prednisone"},
        {"furosemide"}, {"atorvastatin"}, {"morphine"}, {"oxycodone"}, {"metoprolol", "tartrate"},
        {"ceftriaxone"}, {"lorazepam"}, {"omeprazole"}, {"gabapentin"}};
    static const std::vector<Phrase> reason = {
        {"pain"}, {"headache"}, {"infection"}, {"hypertension"}, {"atrial", "fibrillation"}, {"diabetes"},
        {"fever"}, {"chest", "pain"}, {"anxiety"}, {"cellulitis"}, {"pneumonia"}, {"insomnia"}, {"nausea"},
        {"confusion"}};
    static const std::vector<Phrase> ade = {
        {"rash"}, {"hives"}, {"bleeding"}, {"hypotension"}, {"renal", "failure"}, {"diarrhea"},
        {"thrombocytopenia"}, {"angioedema"}, {"confusion"}, {"acute", "kidney", "injury"}, {"nausea"},
        {"headache"}};
    static const std::vector<Phrase> form = {
        {"tablet"}, {"tablets"}, {"capsule"}, {"capsules"}, {"injection"}, {"patch"}, {"solution"}, {"inhaler"}};
    static const std::vector<Phrase> route = {
        {"po"}, {"orally"}, {"by", "mouth"}, {"iv"}, {"intravenously"}, {"subcutaneously"}, {"topically"}, {"sq"}};
    static const std::vector<Phrase> frequency = {
        {"daily"}, {"twice", "daily"}, {"bid"}, {"tid"}, {"q6h"}, {"every", "8", "hours"}, {"once", "a", "day"},
        {"qhs"}, {"at", "bedtime"}, {"q4h"}};
    static const std::vector<Phrase> empty;
    switch (c) {
        case Category::Drug: return drug;
        case Category::Reason: return reason;
        case Category::ADE: return ade;
        case Category::Form: return form;
        case Category::Route: return route;
        case Category::Frequency: return frequency;
        default: return empty;
    }
}

// Made-up drug names; most occur only a handful of times, so held-out
// splits exercise out-of-vocabulary tokens.
inline std::string invented_drug_name(Rng& rng) {
    static const char* onsets[] = {"zo", "ta", "ri", "ve", "mo", "ca", "ne", "pi", "lu", "da"};
    static const char* middles[] = {"la", "ni", "fe", "mer", "tro", "xi", "po", "su"};
    static const char* endings[] = {"fex", "pril", "olol", "statin", "mab", "cillin", "zole", "done"};
    std::string name = onsets[rng.below(std::size(onsets))];
    name += middles[rng.below(std::size(middles))];
    name += endings[rng.below(std::size(endings))];
    return name;
}

inline std::vector<std::string> numeric_phrase(Category c, Rng& rng) {
    static const char* strengths[] = {"5", "10", "20", "25", "40", "50", "81", "100", "250", "500", "1000"};
    static const char* units[] = {"mg", "mcg", "units", "mg/ml", "g"};
    static const char* dosages[] = {"one", "two", "1", "2", "1-2", "half", "three"};
    static const char* counts[] = {"3", "5", "7", "10", "14", "two", "three"};
    static const char* spans[] = {"days", "weeks", "months"};
    auto pick = [&rng](const auto& arr) {
        return std::string(arr[rng.below(std::size(arr))]);
    };
    switch (c) {
        case Category::Strength: return {pick(strengths), pick(units)};
        case Category::Dosage: return {pick(dosages)};
        case Category::Duration:
            if (rng.uniform() < 0.5) return {"for", pick(counts), pick(spans)};
            return {"x", pick(counts), pick(spans)};
        default: return {};
    }
}

}  // namespace detail

inline Sentence generate_synthetic_sentence(Rng& rng) {
    // "{X}" marks a slot; everything else is an O token.
    static const std::vector<std::vector<std::string_view>> templates = {
        {"take", "{Dosage}", "{Form}", "of", "{Drug}", "{Strength}", "{Route}", "{Frequency}", "{Duration}", "for", "{Reason}"},
        {"start", "{Drug}", "{Strength}", "{Route}", "{Frequency}", "for", "{Reason}", "."},
        {"patient", "developed", "{ADE}", "after", "{Drug}", "was", "given", "."},
        {"{Drug}", "was", "discontinued", "due", "to", "{ADE}", "."},
        {"continue", "{Drug}", "{Dosage}", "{Form}", "{Frequency}", "."},
        {"she", "received", "{Drug}", "{Strength}", "{Route}", "{Duration}", "."},
        {"{Drug}", "{Strength}", "{Form}", "{Route}", "{Frequency}", "as", "needed", "for", "{Reason}"},
        {"he", "was", "treated", "with", "{Drug}", "for", "{Reason}", "{Duration}", "."},
        {"{ADE}", "likely", "secondary", "to", "{Drug}", "."},
        {"no", "known", "allergies", ".", "vital", "signs", "stable", "."},
        {"give", "{Drug}", "{Strength}", "{Route}", "now", "and", "then", "{Frequency}", "for", "{Reason}"},
        {"reports", "{ADE}", "while", "on", "{Drug}", "{Strength}", "{Frequency}", "."},
    };
    const auto& tpl = templates[rng.below(templates.size())];
    Sentence s;
    SpanSet spans;
    for (std::string_view piece : tpl) {
        if (piece.size() > 2 && piece.front() == '{') {
            const Category c = *parse_category(piece.substr(1, piece.size() - 2));
            std::vector<std::string> words;
            const auto& fillers = detail::slot_fillers(c);
            if (fillers.empty()) {
                words = detail::numeric_phrase(c, rng);
            } else if (c == Category::Drug && rng.uniform() < 0.25) {
                words = {detail::invented_drug_name(rng)};
            } else {
                for (auto w : fillers[rng.below(fillers.size())]) words.emplace_back(w);
            }
            spans.push_back({c, s.tokens.size(), s.tokens.size() + words.size()});
            for (auto& w : words) s.tokens.push_back(std::move(w));
        } else {
            s.tokens.emplace_back(piece);
        }
    }
    s.gold = spans_to_labels(spans, s.tokens.size());
    return s;
}

inline Dataset generate_synthetic_corpus(std::size_t sentences, std::uint64_t seed, std::string name = "synthetic") {
    Rng rng(seed);
    Dataset d;
    d.name = std::move(name);
    d.sentences.reserve(sentences);
    for (std::size_t i = 0; i < sentences; ++i) d.sentences.push_back(generate_synthetic_sentence(rng));
    return d;
}

}  // namespace tcrf
