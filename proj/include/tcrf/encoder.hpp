#pragma once

// Transformer encoder with hand-written reverse mode.
//
//   tokens -> embedding -> input projection -> + positional encoding
//          -> layers x [self-attention, residual, layer norm,
//                       feed-forward (ReLU), residual, layer norm]
//
// Dropout follows each attention and feed-forward sublayer in train mode.
// Token id 0 is padding and is masked out of every attention row.

#include <cmath>
#include <cstring>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "tcrf/crf.hpp"
#include "tcrf/errors.hpp"
#include "tcrf/rng.hpp"

namespace tcrf {

struct EncoderConfig {
    std::size_t d_model = 512;
    std::size_t heads = 8;
    std::size_t layers = 6;
    std::size_t d_ff = 2048;
    std::size_t max_sequence = 128;
    double dropout = 0.1;
    std::size_t token_embedding_dim = 600;
    std::size_t vocabulary_size = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (d_model == 0 || heads == 0 || d_model % heads != 0) {
            throw ValidationError("d_model must be a positive multiple of heads");
        }
        if (d_model % 2 != 0) throw ValidationError("d_model must be even for the positional encoding");
        if (max_sequence < 1) throw ValidationError("max_sequence must be >= 1");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
        if (vocabulary_size < 1) throw ValidationError("vocabulary_size must be >= 1");
        if (token_embedding_dim < 1 || d_ff < 1 || layers < 1) {
            throw ValidationError("token_embedding_dim, d_ff and layers must be >= 1");
        }
    }
};

struct NamedTensor {
    std::string name;
    Matrix value;
};

// Ordered collection of named dense tensors. Also used for gradients, which
// mirror the shapes of the parameters they belong to.
class ParameterStore {
public:
    Matrix& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        if (index_.count(name)) throw ValidationError("duplicate tensor '" + name + "'");
        index_.emplace(name, tensors_.size());
        tensors_.push_back({name, Matrix::Zero(rows, cols)});
        ++version_;
        return tensors_.back().value;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Matrix& get(const std::string& name) const { return tensors_[position(name)].value; }

    // Mutable access invalidates cached forward passes.
    Matrix& mut(const std::string& name) {
        ++version_;
        return tensors_[position(name)].value;
    }

    std::size_t size() const { return tensors_.size(); }
    const NamedTensor& at(std::size_t i) const { return tensors_.at(i); }
    NamedTensor& at_mut(std::size_t i) {
        ++version_;
        return tensors_.at(i);
    }
    const std::vector<NamedTensor>& tensors() const { return tensors_; }

    std::uint64_t version() const { return version_; }

    ParameterStore zeros_like() const {
        ParameterStore z;
        for (const auto& t : tensors_) z.add(t.name, t.value.rows(), t.value.cols());
        return z;
    }

    void set_zero() {
        ++version_;
        for (auto& t : tensors_) t.value.setZero();
    }

    ParameterStore& operator+=(const ParameterStore& o) {
        check_same_layout(o);
        ++version_;
        for (std::size_t i = 0; i < tensors_.size(); ++i) tensors_[i].value += o.tensors_[i].value;
        return *this;
    }

    ParameterStore& operator*=(double s) {
        ++version_;
        for (auto& t : tensors_) t.value *= s;
        return *this;
    }

    void check_same_layout(const ParameterStore& o) const {
        if (o.tensors_.size() != tensors_.size()) throw ValidationError("parameter stores differ in tensor count");
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            const auto& a = tensors_[i];
            const auto& b = o.tensors_[i];
            if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
                throw ValidationError("tensor layout mismatch at '" + a.name + "'");
            }
        }
    }

    // Bitwise equality of names, shapes and values.
    bool identical(const ParameterStore& o) const {
        if (o.tensors_.size() != tensors_.size()) return false;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            const auto& a = tensors_[i].value;
            const auto& b = o.tensors_[i].value;
            if (tensors_[i].name != o.tensors_[i].name || a.rows() != b.rows() || a.cols() != b.cols()) return false;
            if (a.size() && std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0) {
                return false;
            }
        }
        return true;
    }

    std::size_t count_parameters() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
        return n;
    }

private:
    std::size_t position(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("no tensor named '" + name + "'");
        return it->second;
    }

    std::vector<NamedTensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
    std::uint64_t version_ = 0;
};

inline std::size_t count_parameters(const ParameterStore& params) { return params.count_parameters(); }

// Closed-form size of the encoder's tensors.
inline std::size_t encoder_parameter_count(const EncoderConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff;
    const std::size_t per_layer = 4 * (d * d + d)  // Q, K, V, O with biases
                                  + (d * f + f) + (f * d + d)  // feed-forward
                                  + 2 * 2 * d;                 // two layer norms
    return c.vocabulary_size * c.token_embedding_dim + c.token_embedding_dim * d + c.layers * per_layer;
}

namespace detail {

inline std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

inline void glorot_fill(Matrix& m, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
}

}  // namespace detail

// Adds the encoder tensors to store. Weights are uniform in
// +-sqrt(6 / (fan_in + fan_out)), biases 0, layer-norm gains 1.
inline void add_encoder_parameters(ParameterStore& store, const EncoderConfig& c, Rng& rng) {
    c.validate();
    const auto d = static_cast<Eigen::Index>(c.d_model);
    const auto f = static_cast<Eigen::Index>(c.d_ff);
    const auto e = static_cast<Eigen::Index>(c.token_embedding_dim);
    detail::glorot_fill(store.add("embed.tokens", static_cast<Eigen::Index>(c.vocabulary_size), e), rng);
    detail::glorot_fill(store.add("embed.proj", e, d), rng);
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = detail::layer_prefix(l);
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
            detail::glorot_fill(store.add(p + w, d, d), rng);
            store.add(p + std::string(w).replace(5, 1, "b"), 1, d);
        }
        store.add(p + "ln1.gain", 1, d).setOnes();
        store.add(p + "ln1.bias", 1, d);
        detail::glorot_fill(store.add(p + "ffn.w1", d, f), rng);
        store.add(p + "ffn.b1", 1, f);
        detail::glorot_fill(store.add(p + "ffn.w2", f, d), rng);
        store.add(p + "ffn.b2", 1, d);
        store.add(p + "ln2.gain", 1, d).setOnes();
        store.add(p + "ln2.bias", 1, d);
    }
}

inline ParameterStore init_parameters(const EncoderConfig& c) {
    ParameterStore store;
    Rng rng(c.seed);
    add_encoder_parameters(store, c, rng);
    return store;
}

// Sinusoidal encoding: (pos, 2i) = sin(pos / 10000^(2i/d)), (pos, 2i+1) = cos(...).
inline Matrix positional_encoding(std::size_t length, std::size_t dim) {
    if (length < 1) throw ValidationError("positional encoding needs length >= 1");
    if (dim == 0 || dim % 2 != 0) throw ValidationError("positional encoding dimension must be even");
    Matrix pe(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(dim));
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < dim / 2; ++i) {
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
            pe(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(2 * i)) = std::sin(angle);
            pe(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(2 * i + 1)) = std::cos(angle);
        }
    }
    return pe;
}

inline constexpr double kLayerNormEpsilon = 1e-6;

struct LayerNormCache {
    Matrix normalized;             // before gain/bias
    Eigen::VectorXd inv_std;       // per row
};

struct LayerCache {
    Matrix input;                  // T x d
    Matrix q, k, v;                // T x d
    std::vector<Matrix> attention; // per head, T x T
    Matrix heads;                  // concatenated head outputs, T x d
    Matrix attn_dropout;           // mask scaled by 1/(1-p), empty when off
    LayerNormCache ln1;
    Matrix after_ln1;              // T x d
    Matrix ffn_hidden;             // pre-activation, T x d_ff
    Matrix ffn_dropout;
    LayerNormCache ln2;
};

// Output of forward plus everything backward needs.
struct SequenceRepresentation {
    Matrix output;  // T x d_model
    std::vector<std::size_t> tokens;
    std::vector<bool> key_mask;  // true for real tokens
    Matrix embedded;             // T x token_embedding_dim
    std::vector<LayerCache> layers;
    const ParameterStore* store = nullptr;
    std::uint64_t store_version = 0;

    std::size_t length() const { return tokens.size(); }
    const Matrix& attention(std::size_t layer, std::size_t head) const { return layers.at(layer).attention.at(head); }
};

namespace detail {

inline Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
    const Eigen::Index T = x.rows(), d = x.cols();
    cache.normalized.resize(T, d);
    cache.inv_std.resize(T);
    for (Eigen::Index r = 0; r < T; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        cache.inv_std(r) = inv;
        cache.normalized.row(r) = (x.row(r).array() - mean) * inv;
    }
    Matrix y = cache.normalized.array().rowwise() * gain.row(0).array();
    y.rowwise() += bias.row(0);
    return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache, Matrix& dgain,
                                  Matrix& dbias) {
    const Eigen::Index T = dy.rows();
    const double d = static_cast<double>(dy.cols());
    dgain.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    Matrix dx(T, dy.cols());
    for (Eigen::Index r = 0; r < T; ++r) {
        const double sum = dxhat.row(r).sum();
        const double dot = dxhat.row(r).dot(cache.normalized.row(r));
        dx.row(r) = (cache.inv_std(r) / d) *
                    (d * dxhat.row(r).array() - sum - cache.normalized.row(r).array() * dot).matrix();
    }
    return dx;
}

inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
    Matrix m(rows, cols);
    const double keep = 1.0 / (1.0 - p);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform() < p ? 0.0 : keep;
    return m;
}

inline Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

}  // namespace detail

inline SequenceRepresentation forward(std::span<const std::size_t> tokens, const ParameterStore& params,
                                      const EncoderConfig& config, bool train_mode, std::uint64_t dropout_seed) {
    const std::size_t T = tokens.size();
    if (T == 0) throw ValidationError("encoder input is empty");
    if (T > config.max_sequence) {
        throw ValidationError("input of " + std::to_string(T) + " tokens exceeds max_sequence " +
                              std::to_string(config.max_sequence) + "; window it first");
    }
    const auto& table = params.get("embed.tokens");
    SequenceRepresentation rep;
    rep.tokens.assign(tokens.begin(), tokens.end());
    rep.key_mask.resize(T);
    rep.store = &params;
    rep.store_version = params.version();

    const auto d = static_cast<Eigen::Index>(config.d_model);
    const auto Ti = static_cast<Eigen::Index>(T);
    rep.embedded.resize(Ti, table.cols());
    for (std::size_t i = 0; i < T; ++i) {
        if (tokens[i] >= static_cast<std::size_t>(table.rows())) {
            throw ValidationError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
        }
        rep.embedded.row(static_cast<Eigen::Index>(i)) = table.row(static_cast<Eigen::Index>(tokens[i]));
        rep.key_mask[i] = tokens[i] != 0;
    }
    Matrix x = rep.embedded * params.get("embed.proj") + positional_encoding(T, config.d_model);

    const bool dropout_on = train_mode && config.dropout > 0.0;
    Rng rng(dropout_seed);
    const std::size_t H = config.heads;
    const auto dk = static_cast<Eigen::Index>(config.d_model / H);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    rep.layers.resize(config.layers);
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = detail::layer_prefix(l);
        LayerCache& c = rep.layers[l];
        c.input = x;
        c.q = detail::affine(x, params.get(p + "attn.wq"), params.get(p + "attn.bq"));
        c.k = detail::affine(x, params.get(p + "attn.wk"), params.get(p + "attn.bk"));
        c.v = detail::affine(x, params.get(p + "attn.wv"), params.get(p + "attn.bv"));
        c.heads.resize(Ti, d);
        c.attention.resize(H);
        for (std::size_t h = 0; h < H; ++h) {
            const Eigen::Index off = static_cast<Eigen::Index>(h) * dk;
            Matrix scores = (c.q.middleCols(off, dk) * c.k.middleCols(off, dk).transpose()) * scale;
            Matrix& a = c.attention[h];
            a.resize(Ti, Ti);
            for (Eigen::Index r = 0; r < Ti; ++r) {
                double m = -std::numeric_limits<double>::infinity();
                for (Eigen::Index s = 0; s < Ti; ++s)
                    if (rep.key_mask[static_cast<std::size_t>(s)]) m = std::max(m, scores(r, s));
                double z = 0.0;
                for (Eigen::Index s = 0; s < Ti; ++s) {
                    a(r, s) = rep.key_mask[static_cast<std::size_t>(s)] ? std::exp(scores(r, s) - m) : 0.0;
                    z += a(r, s);
                }
                if (z > 0.0) a.row(r) /= z;  // an all-padding row stays zero
            }
            c.heads.middleCols(off, dk) = a * c.v.middleCols(off, dk);
        }
        Matrix attn = detail::affine(c.heads, params.get(p + "attn.wo"), params.get(p + "attn.bo"));
        if (dropout_on) {
            c.attn_dropout = detail::dropout_mask(Ti, d, config.dropout, rng);
            attn = attn.cwiseProduct(c.attn_dropout);
        }
        c.after_ln1 = detail::layer_norm_forward(x + attn, params.get(p + "ln1.gain"), params.get(p + "ln1.bias"), c.ln1);

        c.ffn_hidden = detail::affine(c.after_ln1, params.get(p + "ffn.w1"), params.get(p + "ffn.b1"));
        Matrix ffn = detail::affine(c.ffn_hidden.cwiseMax(0.0), params.get(p + "ffn.w2"), params.get(p + "ffn.b2"));
        if (dropout_on) {
            c.ffn_dropout = detail::dropout_mask(Ti, d, config.dropout, rng);
            ffn = ffn.cwiseProduct(c.ffn_dropout);
        }
        x = detail::layer_norm_forward(c.after_ln1 + ffn, params.get(p + "ln2.gain"), params.get(p + "ln2.bias"), c.ln2);
    }
    rep.output = std::move(x);
    return rep;
}

// Accumulates parameter gradients into grads (same layout as params) and
// returns the gradient with respect to the encoder input rows, i.e. the
// projected embeddings plus positional encoding.
inline Matrix backward_into(const SequenceRepresentation& rep, const Matrix& grad_output, const ParameterStore& params,
                            const EncoderConfig& config, ParameterStore& grads) {
    if (rep.store != &params || rep.store_version != params.version()) {
        throw ValidationError("stale forward cache: parameters changed since forward");
    }
    if (grad_output.rows() != rep.output.rows() || grad_output.cols() != rep.output.cols()) {
        throw ValidationError("grad_output shape does not match the representation");
    }
    const Eigen::Index Ti = rep.output.rows();
    const std::size_t H = config.heads;
    const auto dk = static_cast<Eigen::Index>(config.d_model / H);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Matrix dx = grad_output;
    for (std::size_t li = config.layers; li-- > 0;) {
        const std::string p = detail::layer_prefix(li);
        const LayerCache& c = rep.layers[li];

        // second sublayer
        Matrix dz2 = detail::layer_norm_backward(dx, params.get(p + "ln2.gain"), c.ln2, grads.mut(p + "ln2.gain"),
                                                 grads.mut(p + "ln2.bias"));
        Matrix dffn = c.ffn_dropout.size() ? Matrix(dz2.cwiseProduct(c.ffn_dropout)) : dz2;
        const Matrix relu = c.ffn_hidden.cwiseMax(0.0);
        grads.mut(p + "ffn.w2") += relu.transpose() * dffn;
        grads.mut(p + "ffn.b2") += dffn.colwise().sum();
        Matrix dhidden = (dffn * params.get(p + "ffn.w2").transpose())
                             .cwiseProduct((c.ffn_hidden.array() > 0.0).cast<double>().matrix());
        grads.mut(p + "ffn.w1") += c.after_ln1.transpose() * dhidden;
        grads.mut(p + "ffn.b1") += dhidden.colwise().sum();
        Matrix dy1 = dz2 + dhidden * params.get(p + "ffn.w1").transpose();

        // first sublayer
        Matrix dz1 = detail::layer_norm_backward(dy1, params.get(p + "ln1.gain"), c.ln1, grads.mut(p + "ln1.gain"),
                                                 grads.mut(p + "ln1.bias"));
        Matrix dattn = c.attn_dropout.size() ? Matrix(dz1.cwiseProduct(c.attn_dropout)) : dz1;
        grads.mut(p + "attn.wo") += c.heads.transpose() * dattn;
        grads.mut(p + "attn.bo") += dattn.colwise().sum();
        const Matrix dheads = dattn * params.get(p + "attn.wo").transpose();

        Matrix dq(Ti, dheads.cols()), dk_(Ti, dheads.cols()), dv(Ti, dheads.cols());
        for (std::size_t h = 0; h < H; ++h) {
            const Eigen::Index off = static_cast<Eigen::Index>(h) * dk;
            const Matrix& a = c.attention[h];
            const auto dh = dheads.middleCols(off, dk);
            const Matrix da = dh * c.v.middleCols(off, dk).transpose();
            dv.middleCols(off, dk) = a.transpose() * dh;
            // softmax backward, row-wise
            Matrix ds = a.cwiseProduct(da);
            const Eigen::VectorXd row_dot = ds.rowwise().sum();
            ds -= a.cwiseProduct(row_dot.replicate(1, Ti));
            ds *= scale;
            dq.middleCols(off, dk) = ds * c.k.middleCols(off, dk);
            dk_.middleCols(off, dk) = ds.transpose() * c.q.middleCols(off, dk);
        }
        grads.mut(p + "attn.wq") += c.input.transpose() * dq;
        grads.mut(p + "attn.bq") += dq.colwise().sum();
        grads.mut(p + "attn.wk") += c.input.transpose() * dk_;
        grads.mut(p + "attn.bk") += dk_.colwise().sum();
        grads.mut(p + "attn.wv") += c.input.transpose() * dv;
        grads.mut(p + "attn.bv") += dv.colwise().sum();
        dx = dz1 + dq * params.get(p + "attn.wq").transpose() + dk_ * params.get(p + "attn.wk").transpose() +
             dv * params.get(p + "attn.wv").transpose();
    }

    grads.mut("embed.proj") += rep.embedded.transpose() * dx;
    const Matrix dembedded = dx * params.get("embed.proj").transpose();
    Matrix& dtable = grads.mut("embed.tokens");
    for (Eigen::Index i = 0; i < Ti; ++i) dtable.row(static_cast<Eigen::Index>(rep.tokens[static_cast<std::size_t>(i)])) += dembedded.row(i);
    return dx;
}

struct EncoderGradients {
    ParameterStore params;  // same layout as the encoder store
    Matrix input;           // T x d_model
};

inline EncoderGradients backward(const SequenceRepresentation& rep, const Matrix& grad_output,
                                 const ParameterStore& params, const EncoderConfig& config) {
    EncoderGradients g;
    g.params = params.zeros_like();
    g.input = backward_into(rep, grad_output, params, config, g.params);
    return g;
}

}  // namespace tcrf
