#pragma once

// Decoding heads over emission lattices: the independent per-token
// classifier and the linear-chain CRF (forward, forward-backward, Viterbi,
// negative log-likelihood with gradients). All lattice arithmetic is done in
// the log domain.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tcrf/errors.hpp"
#include "tcrf/labels.hpp"

namespace tcrf {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

// Score of a forbidden BIOES transition when constraints are on.
inline constexpr double kPinnedScore = -1e4;

enum class EmissionSource { encoder_head, external_file };

struct EmissionLattice {
    Matrix scores;  // T x L
    EmissionSource source = EmissionSource::encoder_head;

    std::size_t length() const { return static_cast<std::size_t>(scores.rows()); }
    std::size_t num_labels() const { return static_cast<std::size_t>(scores.cols()); }
};

using LabelPath = std::vector<std::size_t>;

inline LabelPath to_path(std::span<const Label> labels) {
    LabelPath p;
    p.reserve(labels.size());
    for (Label l : labels) p.push_back(l.index());
    return p;
}

inline LabelSequence to_labels(const LabelPath& path) {
    LabelSequence out;
    out.reserve(path.size());
    for (std::size_t i : path) out.push_back(Label::from_index(i));
    return out;
}

struct TransitionMatrix {
    Matrix trans;     // L x L, row = previous label, column = next label
    RowVector start;  // L
    RowVector end;    // L
    bool constrain_bioes = false;

    static TransitionMatrix zeros(std::size_t num_labels, bool constrain = false) {
        TransitionMatrix t;
        const auto n = static_cast<Eigen::Index>(num_labels);
        t.trans = Matrix::Zero(n, n);
        t.start = RowVector::Zero(n);
        t.end = RowVector::Zero(n);
        t.constrain_bioes = constrain;
        t.apply_constraints();
        return t;
    }

    std::size_t num_labels() const { return static_cast<std::size_t>(trans.rows()); }

    bool trans_pinned(std::size_t from, std::size_t to) const {
        return constrain_bioes && !is_valid_transition(Label::from_index(from), Label::from_index(to));
    }
    bool start_pinned(std::size_t l) const { return constrain_bioes && !is_valid_start(Label::from_index(l)); }
    bool end_pinned(std::size_t l) const { return constrain_bioes && !is_valid_end(Label::from_index(l)); }

    // Re-pins forbidden entries; required after any external update.
    void apply_constraints() {
        if (!constrain_bioes) return;
        if (num_labels() != kNumLabels) {
            throw ValidationError("BIOES constraints need " + std::to_string(kNumLabels) + " labels, got " +
                                  std::to_string(num_labels()));
        }
        for (std::size_t i = 0; i < kNumLabels; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            if (start_pinned(i)) start(ii) = kPinnedScore;
            if (end_pinned(i)) end(ii) = kPinnedScore;
            for (std::size_t j = 0; j < kNumLabels; ++j) {
                if (trans_pinned(i, j)) trans(ii, static_cast<Eigen::Index>(j)) = kPinnedScore;
            }
        }
    }
};

struct TransitionGrad {
    Matrix trans;
    RowVector start;
    RowVector end;
};

struct DecodedPath {
    LabelPath path;
    double score = 0.0;
};

namespace detail {

inline void check_lattice(const EmissionLattice& e, const TransitionMatrix& t) {
    if (e.length() == 0) throw ValidationError("empty lattice (T = 0)");
    if (e.num_labels() != t.num_labels() || t.start.size() != t.trans.rows() || t.end.size() != t.trans.rows() ||
        t.trans.rows() != t.trans.cols()) {
        throw ValidationError("lattice has " + std::to_string(e.num_labels()) + " labels, transitions have " +
                              std::to_string(t.num_labels()));
    }
}

template <typename Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

// alpha(t, j): log-sum of scores of all prefixes ending in label j at t.
inline Matrix forward_table(const Matrix& e, const TransitionMatrix& t) {
    const Eigen::Index T = e.rows(), L = e.cols();
    Matrix alpha(T, L);
    alpha.row(0) = t.start + e.row(0);
    RowVector scratch(L);
    for (Eigen::Index k = 1; k < T; ++k) {
        for (Eigen::Index j = 0; j < L; ++j) {
            scratch = alpha.row(k - 1) + t.trans.col(j).transpose();
            alpha(k, j) = log_sum_exp(scratch) + e(k, j);
        }
    }
    return alpha;
}

// beta(t, i): log-sum of scores of all suffixes after label i at t, including end.
inline Matrix backward_table(const Matrix& e, const TransitionMatrix& t) {
    const Eigen::Index T = e.rows(), L = e.cols();
    Matrix beta(T, L);
    beta.row(T - 1) = t.end;
    RowVector scratch(L);
    for (Eigen::Index k = T - 2; k >= 0; --k) {
        for (Eigen::Index i = 0; i < L; ++i) {
            scratch = t.trans.row(i) + e.row(k + 1) + beta.row(k + 1);
            beta(k, i) = log_sum_exp(scratch);
        }
    }
    return beta;
}

}  // namespace detail

// Unnormalized score of one label path.
inline double path_score(const EmissionLattice& e, const TransitionMatrix& t, const LabelPath& path) {
    detail::check_lattice(e, t);
    if (path.size() != e.length()) throw ValidationError("path length does not match lattice");
    double s = t.start(static_cast<Eigen::Index>(path.front())) + t.end(static_cast<Eigen::Index>(path.back()));
    for (std::size_t k = 0; k < path.size(); ++k) {
        s += e.scores(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(path[k]));
        if (k > 0) s += t.trans(static_cast<Eigen::Index>(path[k - 1]), static_cast<Eigen::Index>(path[k]));
    }
    return s;
}

// Per-position argmax; ties go to the lowest label index.
inline LabelPath classify_decode(const EmissionLattice& e) {
    LabelPath out(e.length());
    for (Eigen::Index k = 0; k < e.scores.rows(); ++k) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < e.scores.cols(); ++j) {
            if (e.scores(k, j) > e.scores(k, best)) best = j;
        }
        out[static_cast<std::size_t>(k)] = static_cast<std::size_t>(best);
    }
    return out;
}

struct XentResult {
    double loss = 0.0;  // mean over positions
    Matrix grad;        // T x L
};

inline XentResult softmax_xent(const EmissionLattice& e, const LabelPath& gold) {
    if (gold.size() != e.length()) throw ValidationError("gold length does not match lattice");
    const Eigen::Index T = e.scores.rows();
    XentResult r;
    r.grad.resize(T, e.scores.cols());
    for (Eigen::Index k = 0; k < T; ++k) {
        const double m = e.scores.row(k).maxCoeff();
        const RowVector shifted = e.scores.row(k).array() - m;
        const double log_z = std::log(shifted.array().exp().sum());
        const auto g = static_cast<Eigen::Index>(gold[static_cast<std::size_t>(k)]);
        r.loss += log_z - shifted(g);
        r.grad.row(k) = (shifted.array() - log_z).exp();
        r.grad(k, g) -= 1.0;
    }
    r.loss /= static_cast<double>(T);
    r.grad /= static_cast<double>(T);
    return r;
}

// log of the sum over all L^T paths of exp(path score).
inline double crf_log_partition(const EmissionLattice& e, const TransitionMatrix& t) {
    detail::check_lattice(e, t);
    const Matrix alpha = detail::forward_table(e.scores, t);
    return detail::log_sum_exp(RowVector(alpha.row(alpha.rows() - 1) + t.end));
}

inline Matrix crf_marginals(const EmissionLattice& e, const TransitionMatrix& t) {
    detail::check_lattice(e, t);
    const Matrix alpha = detail::forward_table(e.scores, t);
    const Matrix beta = detail::backward_table(e.scores, t);
    const double log_z = detail::log_sum_exp(RowVector(alpha.row(alpha.rows() - 1) + t.end));
    return (alpha + beta).array().unaryExpr([log_z](double x) { return std::exp(x - log_z); });
}

inline DecodedPath crf_viterbi(const EmissionLattice& e, const TransitionMatrix& t) {
    detail::check_lattice(e, t);
    const Eigen::Index T = e.scores.rows(), L = e.scores.cols();
    Matrix delta(T, L);
    Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> back(T, L);
    delta.row(0) = t.start + e.scores.row(0);
    for (Eigen::Index k = 1; k < T; ++k) {
        for (Eigen::Index j = 0; j < L; ++j) {
            Eigen::Index best = 0;
            double best_score = delta(k - 1, 0) + t.trans(0, j);
            for (Eigen::Index i = 1; i < L; ++i) {
                const double s = delta(k - 1, i) + t.trans(i, j);
                if (s > best_score) {
                    best_score = s;
                    best = i;
                }
            }
            delta(k, j) = best_score + e.scores(k, j);
            back(k, j) = best;
        }
    }
    Eigen::Index last = 0;
    double best_score = delta(T - 1, 0) + t.end(0);
    for (Eigen::Index j = 1; j < L; ++j) {
        const double s = delta(T - 1, j) + t.end(j);
        if (s > best_score) {
            best_score = s;
            last = j;
        }
    }
    DecodedPath out;
    out.score = best_score;
    out.path.resize(static_cast<std::size_t>(T));
    out.path.back() = static_cast<std::size_t>(last);
    for (Eigen::Index k = T - 1; k > 0; --k) {
        last = back(k, last);
        out.path[static_cast<std::size_t>(k - 1)] = static_cast<std::size_t>(last);
    }
    return out;
}

struct CrfNllResult {
    double loss = 0.0;
    Matrix grad_emissions;  // T x L
    TransitionGrad grad_transitions;
};

// Negative log-likelihood of the gold path and its gradients
// (expected minus observed statistics). Pinned entries get zero gradient.
inline CrfNllResult crf_nll(const EmissionLattice& e, const TransitionMatrix& t, const LabelPath& gold) {
    detail::check_lattice(e, t);
    if (gold.size() != e.length()) throw ValidationError("gold length does not match lattice");
    for (std::size_t g : gold) {
        if (g >= e.num_labels()) throw ValidationError("gold label index out of range");
    }
    if (t.constrain_bioes) {
        const LabelSequence labels = to_labels(gold);
        if (auto bad = first_invalid_position(labels)) {
            const std::size_t p = *bad;
            std::string pair = p == 0                  ? "<start> -> " + labels[0].str()
                               : p == labels.size() ? labels.back().str() + " -> <end>"
                                                     : labels[p - 1].str() + " -> " + labels[p].str();
            throw GrammarError(p, "gold path has a forbidden transition " + pair);
        }
    }
    const Matrix& s = e.scores;
    const Eigen::Index T = s.rows(), L = s.cols();
    const Matrix alpha = detail::forward_table(s, t);
    const Matrix beta = detail::backward_table(s, t);
    const double log_z = detail::log_sum_exp(RowVector(alpha.row(T - 1) + t.end));

    CrfNllResult r;
    r.loss = std::max(0.0, log_z - path_score(e, t, gold));
    r.grad_emissions = (alpha + beta).array().unaryExpr([log_z](double x) { return std::exp(x - log_z); });
    r.grad_transitions.start = r.grad_emissions.row(0);
    r.grad_transitions.end = r.grad_emissions.row(T - 1);
    r.grad_transitions.trans = Matrix::Zero(L, L);
    for (Eigen::Index k = 0; k + 1 < T; ++k) {
        for (Eigen::Index i = 0; i < L; ++i) {
            for (Eigen::Index j = 0; j < L; ++j) {
                r.grad_transitions.trans(i, j) +=
                    std::exp(alpha(k, i) + t.trans(i, j) + s(k + 1, j) + beta(k + 1, j) - log_z);
            }
        }
    }
    for (Eigen::Index k = 0; k < T; ++k) {
        const auto g = static_cast<Eigen::Index>(gold[static_cast<std::size_t>(k)]);
        r.grad_emissions(k, g) -= 1.0;
        if (k > 0) r.grad_transitions.trans(static_cast<Eigen::Index>(gold[static_cast<std::size_t>(k - 1)]), g) -= 1.0;
    }
    r.grad_transitions.start(static_cast<Eigen::Index>(gold.front())) -= 1.0;
    r.grad_transitions.end(static_cast<Eigen::Index>(gold.back())) -= 1.0;

    if (t.constrain_bioes) {
        for (std::size_t i = 0; i < static_cast<std::size_t>(L); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            if (t.start_pinned(i)) r.grad_transitions.start(ii) = 0.0;
            if (t.end_pinned(i)) r.grad_transitions.end(ii) = 0.0;
            for (std::size_t j = 0; j < static_cast<std::size_t>(L); ++j) {
                if (t.trans_pinned(i, j)) r.grad_transitions.trans(ii, static_cast<Eigen::Index>(j)) = 0.0;
            }
        }
    }
    return r;
}

// --- emission files -------------------------------------------------------
//
// Header "#labels: <comma-joined labels>" pins the column order, then one
// line of L space-separated decimals per token and a blank line after each
// sentence.

inline void write_emissions(std::ostream& out, std::span<const EmissionLattice> lattices,
                            const LabelSet& labels = LabelSet::standard()) {
    out << "#labels: " << labels.joined(',') << '\n';
    char buf[64];
    for (const auto& e : lattices) {
        if (e.num_labels() != labels.size()) throw ValidationError("lattice width does not match the label set");
        for (Eigen::Index k = 0; k < e.scores.rows(); ++k) {
            for (Eigen::Index j = 0; j < e.scores.cols(); ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", e.scores(k, j));
                if (j) out << ' ';
                out << buf;
            }
            out << '\n';
        }
        out << '\n';
    }
}

// expected_lengths, when given, must list the token count of each sentence of
// the paired corpus.
inline std::vector<EmissionLattice> load_emissions(std::istream& in, const LabelSet& labels = LabelSet::standard(),
                                                   std::optional<std::vector<std::size_t>> expected_lengths = {}) {
    const std::size_t width = labels.size();
    std::string line;
    std::size_t lineno = 0;

    // column -> label index
    std::vector<std::size_t> column_to_label(width);
    {
        if (!std::getline(in, line)) return {};
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string prefix = "#labels:";
        if (line.rfind(prefix, 0) != 0) throw ParseError(lineno, "missing '#labels:' header");
        std::string_view rest(line);
        rest.remove_prefix(prefix.size());
        while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
        std::vector<bool> seen(width, false);
        std::size_t col = 0;
        while (true) {
            const auto comma = rest.find(',');
            const std::string_view name = rest.substr(0, comma);
            auto l = parse_label(name);
            if (!l) throw ParseError(lineno, "unknown label '" + std::string(name) + "' in header");
            if (col >= width) throw ParseError(lineno, "expected " + std::to_string(width) + " labels in header");
            if (seen[l->index()]) throw ParseError(lineno, "duplicate label '" + l->str() + "' in header");
            seen[l->index()] = true;
            column_to_label[col++] = labels.index_of(*l);
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (col != width) throw ParseError(lineno, "expected " + std::to_string(width) + " labels in header");
    }

    std::vector<EmissionLattice> out;
    std::vector<std::vector<double>> rows;
    auto flush = [&] {
        if (rows.empty()) return;
        const std::size_t idx = out.size();
        if (expected_lengths) {
            if (idx >= expected_lengths->size()) {
                throw ParseError(lineno, "emission file has more sentences than the corpus (" +
                                             std::to_string(expected_lengths->size()) + ")");
            }
            if ((*expected_lengths)[idx] != rows.size()) {
                throw ParseError(lineno, "sentence " + std::to_string(idx) + " has " + std::to_string(rows.size()) +
                                             " emission rows, corpus has " +
                                             std::to_string((*expected_lengths)[idx]) + " tokens");
            }
        }
        EmissionLattice e;
        e.source = EmissionSource::external_file;
        e.scores.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
        for (std::size_t k = 0; k < rows.size(); ++k) {
            for (std::size_t c = 0; c < width; ++c) {
                e.scores(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(column_to_label[c])) = rows[k][c];
            }
        }
        out.push_back(std::move(e));
        rows.clear();
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) {
            flush();
            continue;
        }
        std::vector<double> row;
        row.reserve(width);
        const char* p = line.data();
        const char* const end = line.data() + line.size();
        while (p < end) {
            while (p < end && (*p == ' ' || *p == '\t')) ++p;
            if (p == end) break;
            const char* field_end = p;
            while (field_end < end && *field_end != ' ' && *field_end != '\t') ++field_end;
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(p, field_end, v);
            if (ec != std::errc() || ptr != field_end || !std::isfinite(v)) {
                throw ParseError(lineno, "non-numeric field '" + std::string(p, field_end) + "' in column " +
                                             std::to_string(row.size() + 1));
            }
            row.push_back(v);
            p = field_end;
        }
        if (row.size() != width) {
            throw ParseError(lineno, "expected " + std::to_string(width) + " columns, got " + std::to_string(row.size()));
        }
        rows.push_back(std::move(row));
    }
    flush();
    if (expected_lengths && out.size() != expected_lengths->size()) {
        throw ParseError(lineno, "emission file has " + std::to_string(out.size()) + " sentences, corpus has " +
                                     std::to_string(expected_lengths->size()));
    }
    return out;
}

}  // namespace tcrf
