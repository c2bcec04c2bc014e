#pragma once

// The three model shapes built from the encoder and the decoding heads:
//
//   classify_head         encoder -> linear head -> per-token softmax
//   transformer_crf       encoder -> linear head -> linear-chain CRF
//   frozen_emissions_crf  externally supplied lattices -> linear-chain CRF
//
// All trainable tensors of a model live in one ParameterStore.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tcrf/corpus.hpp"
#include "tcrf/crf.hpp"
#include "tcrf/encoder.hpp"

namespace tcrf {

enum class ModelShape { classify_head, transformer_crf, frozen_emissions_crf };

inline std::string_view shape_name(ModelShape s) {
    switch (s) {
        case ModelShape::classify_head: return "classify_head";
        case ModelShape::transformer_crf: return "transformer_crf";
        case ModelShape::frozen_emissions_crf: return "frozen_emissions_crf";
    }
    return "?";
}

inline std::optional<ModelShape> parse_shape(std::string_view s) {
    for (auto shape : {ModelShape::classify_head, ModelShape::transformer_crf, ModelShape::frozen_emissions_crf}) {
        if (shape_name(shape) == s) return shape;
    }
    return std::nullopt;
}

// Name used in the parameter summary table.
inline std::string display_name(ModelShape s) {
    switch (s) {
        case ModelShape::classify_head: return "ClassifyHead";
        case ModelShape::transformer_crf: return "TransformerCRF";
        case ModelShape::frozen_emissions_crf: return "FrozenEmissionsCRF";
    }
    return "?";
}

struct Model {
    ModelShape shape = ModelShape::transformer_crf;
    EncoderConfig encoder;  // unused by frozen_emissions_crf
    bool constrain_bioes = true;
    Vocabulary vocabulary;
    ParameterStore params;

    bool has_encoder() const { return shape != ModelShape::frozen_emissions_crf; }
    bool has_crf() const { return shape != ModelShape::classify_head; }

    TransitionMatrix transitions() const {
        TransitionMatrix t;
        t.trans = params.get("crf.trans");
        t.start = params.get("crf.start").row(0);
        t.end = params.get("crf.end").row(0);
        t.constrain_bioes = constrain_bioes;
        return t;
    }
};

// Closed-form parameter count of a model shape.
inline std::size_t model_parameter_count(ModelShape shape, const EncoderConfig& c) {
    const std::size_t L = kNumLabels;
    std::size_t n = 0;
    if (shape != ModelShape::frozen_emissions_crf) n += encoder_parameter_count(c) + c.d_model * L + L;
    if (shape != ModelShape::classify_head) n += L * L + 2 * L;
    return n;
}

// encoder.vocabulary_size is taken from the vocabulary; encoder.seed seeds
// the initialization.
inline Model make_model(ModelShape shape, EncoderConfig encoder, Vocabulary vocabulary, bool constrain_bioes = true) {
    Model m;
    m.shape = shape;
    m.constrain_bioes = constrain_bioes && shape != ModelShape::classify_head;
    encoder.vocabulary_size = vocabulary.size();
    m.encoder = encoder;
    m.vocabulary = std::move(vocabulary);
    Rng rng(encoder.seed);
    const auto L = static_cast<Eigen::Index>(kNumLabels);
    if (m.has_encoder()) {
        add_encoder_parameters(m.params, m.encoder, rng);
        detail::glorot_fill(m.params.add("head.w", static_cast<Eigen::Index>(m.encoder.d_model), L), rng);
        m.params.add("head.b", 1, L);
    }
    if (m.has_crf()) {
        const auto t = TransitionMatrix::zeros(kNumLabels, m.constrain_bioes);
        m.params.add("crf.trans", L, L) = t.trans;
        m.params.add("crf.start", 1, L) = t.start;
        m.params.add("crf.end", 1, L) = t.end;
    }
    return m;
}

// One training or decoding unit: token ids (encoder shapes) or an external
// lattice (frozen shape).
struct SentenceInput {
    std::vector<std::size_t> ids;
    const EmissionLattice* external = nullptr;

    std::size_t length() const { return external ? external->length() : ids.size(); }
};

struct EmissionPass {
    EmissionLattice lattice;
    std::optional<SequenceRepresentation> rep;
};

inline EmissionPass compute_emissions(const Model& m, const SentenceInput& in, bool train_mode, std::uint64_t seed) {
    EmissionPass pass;
    if (!m.has_encoder()) {
        if (!in.external) throw ValidationError("frozen_emissions_crf needs an external lattice");
        if (in.external->num_labels() != kNumLabels) throw ValidationError("external lattice has the wrong width");
        pass.lattice = *in.external;
        return pass;
    }
    pass.rep = forward(in.ids, m.params, m.encoder, train_mode, seed);
    pass.lattice.scores = pass.rep->output * m.params.get("head.w");
    pass.lattice.scores.rowwise() += m.params.get("head.b").row(0);
    pass.lattice.source = EmissionSource::encoder_head;
    return pass;
}

// Adds weight * d(loss)/d(params) into grads and returns the unweighted loss.
// CRF shapes use the sentence NLL, classify_head the mean per-token
// cross-entropy.
inline double accumulate_gradients(const Model& m, const SentenceInput& in, const LabelPath& gold, bool train_mode,
                                   std::uint64_t seed, double weight, ParameterStore& grads) {
    EmissionPass pass = compute_emissions(m, in, train_mode, seed);
    double loss;
    Matrix grad_emissions;
    if (m.has_crf()) {
        auto r = crf_nll(pass.lattice, m.transitions(), gold);
        loss = r.loss;
        grads.mut("crf.trans") += weight * r.grad_transitions.trans;
        grads.mut("crf.start").row(0) += weight * r.grad_transitions.start;
        grads.mut("crf.end").row(0) += weight * r.grad_transitions.end;
        grad_emissions = std::move(r.grad_emissions);
    } else {
        auto r = softmax_xent(pass.lattice, gold);
        loss = r.loss;
        grad_emissions = std::move(r.grad);
    }
    if (m.has_encoder()) {
        grad_emissions *= weight;
        grads.mut("head.w") += pass.rep->output.transpose() * grad_emissions;
        grads.mut("head.b") += grad_emissions.colwise().sum();
        const Matrix grad_rep = grad_emissions * m.params.get("head.w").transpose();
        backward_into(*pass.rep, grad_rep, m.params, m.encoder, grads);
    }
    return loss;
}

// Decodes one unit that fits within max_sequence.
inline LabelPath decode(const Model& m, const SentenceInput& in) {
    const EmissionPass pass = compute_emissions(m, in, false, 0);
    if (!m.has_crf()) return classify_decode(pass.lattice);
    return crf_viterbi(pass.lattice, m.transitions()).path;
}

// Full-sentence prediction; over-length sentences are decoded in windows and
// the pieces concatenated.
inline LabelSequence predict_labels(const Model& m, const std::vector<std::string>& tokens,
                                    const EmissionLattice* external = nullptr) {
    if (!m.has_encoder()) {
        SentenceInput in;
        in.external = external;
        if (!external || external->length() != tokens.size()) {
            throw ValidationError("external lattice missing or not aligned with the sentence");
        }
        return to_labels(decode(m, in));
    }
    const std::vector<std::size_t> ids = m.vocabulary.encode(tokens);
    LabelSequence out;
    out.reserve(ids.size());
    for (auto [b, e] : window_bounds(ids.size(), m.encoder.max_sequence)) {
        SentenceInput in;
        in.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(b), ids.begin() + static_cast<std::ptrdiff_t>(e));
        for (std::size_t l : decode(m, in)) out.push_back(Label::from_index(l));
    }
    return out;
}

}  // namespace tcrf
