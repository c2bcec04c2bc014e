#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tcrf/encoder.hpp"

using namespace tcrf;

namespace {

EncoderConfig tiny_config(std::size_t layers = 1) {
    EncoderConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.layers = layers;
    c.d_ff = 16;
    c.token_embedding_dim = 6;
    c.vocabulary_size = 10;
    c.max_sequence = 5;
    c.dropout = 0.0;
    c.seed = 42;
    return c;
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1, 1);
    return m;
}

// Reference layer norm without gain/bias.
Matrix plain_layer_norm(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mean = 0, var = 0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) mean += x(r, c);
        mean /= static_cast<double>(x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
        var /= static_cast<double>(x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-6);
    }
    return y;
}

double max_gradient_error(const EncoderConfig& config, const std::vector<std::size_t>& tokens, bool train_mode) {
    ParameterStore params = init_parameters(config);
    Rng rng(7);
    // perturb biases and gains away from their init values so they are exercised
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& m = params.at_mut(i).value;
        if (m.rows() == 1) m += random_matrix(rng, 1, m.cols()) * 0.3;
    }
    const Matrix weight = random_matrix(rng, static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(config.d_model));
    auto loss = [&] {
        const auto rep = forward(tokens, params, config, train_mode, 99);
        return rep.output.cwiseProduct(weight).sum();
    };
    const auto rep = forward(tokens, params, config, train_mode, 99);
    const auto grads = backward(rep, weight, params, config);
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        const std::string& name = params.at(t).name;
        const Matrix& g = grads.params.get(name);
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            const double fd = oracle::central_difference(params.at_mut(t).value.data()[i], loss);
            const double err = oracle::relative_error(g.data()[i], fd);
            EXPECT_LT(err, 1e-4) << name << "[" << i << "]";
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace

TEST(EncoderConfig, Validation) {
    auto c = tiny_config();
    EXPECT_NO_THROW(c.validate());
    c.heads = 3;
    EXPECT_THROW(c.validate(), ValidationError);
    c = tiny_config();
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = tiny_config();
    c.max_sequence = 0;
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(InitParameters, DeterministicAndRuleBased) {
    const auto c = tiny_config(2);
    const auto a = init_parameters(c);
    const auto b = init_parameters(c);
    EXPECT_TRUE(a.identical(b));
    auto other = c;
    other.seed = 43;
    EXPECT_FALSE(a.identical(init_parameters(other)));
    for (const auto& t : a.tensors()) {
        if (t.name.find("gain") != std::string::npos) {
            EXPECT_TRUE((t.value.array() == 1.0).all()) << t.name;
        } else if (t.value.rows() == 1) {
            EXPECT_TRUE((t.value.array() == 0.0).all()) << t.name;
        } else {
            const double bound = std::sqrt(6.0 / static_cast<double>(t.value.rows() + t.value.cols()));
            EXPECT_LE(t.value.cwiseAbs().maxCoeff(), bound) << t.name;
            EXPECT_GT(t.value.cwiseAbs().maxCoeff(), 0.0) << t.name;
        }
    }
}

TEST(CountParameters, HandCountedTinyConfig) {
    EncoderConfig c;
    c.vocabulary_size = 10;
    c.d_model = 4;
    c.heads = 2;
    c.layers = 1;
    c.d_ff = 8;
    c.token_embedding_dim = 6;
    // embedding 10*6 = 60, projection 6*4 = 24, attention 4*(4*4+4) = 80,
    // feed-forward (4*8+8)+(8*4+4) = 76, two layer norms 2*(4+4) = 16
    EXPECT_EQ(count_parameters(init_parameters(c)), 256u);
    EXPECT_EQ(encoder_parameter_count(c), 256u);

    ParameterStore emb;
    emb.add("embed.tokens", 5, 3);
    EXPECT_EQ(count_parameters(emb), 15u);
}

TEST(PositionalEncoding, Formula) {
    const Matrix pe = positional_encoding(6, 4);
    for (Eigen::Index c = 0; c < 4; ++c) EXPECT_EQ(pe(0, c), c % 2 == 0 ? 0.0 : 1.0);
    EXPECT_NEAR(pe(1, 0), 0.8414709848, 1e-10);
    EXPECT_NEAR(pe(3, 2), std::sin(3.0 / 100.0), 1e-15);
    EXPECT_NEAR(pe(3, 3), std::cos(3.0 / 100.0), 1e-15);
    EXPECT_LE(positional_encoding(128, 64).cwiseAbs().maxCoeff(), 1.0);
    EXPECT_THROW(positional_encoding(3, 5), ValidationError);
}

TEST(Forward, ShapeDeterminismAndFiniteness) {
    const auto c = tiny_config(2);
    const auto params = init_parameters(c);
    for (std::size_t T = 1; T <= c.max_sequence; ++T) {
        std::vector<std::size_t> tokens(T);
        for (std::size_t i = 0; i < T; ++i) tokens[i] = 1 + (i * 3) % 9;
        const auto a = forward(tokens, params, c, false, 1);
        const auto b = forward(tokens, params, c, false, 2);
        EXPECT_EQ(a.output.rows(), static_cast<Eigen::Index>(T));
        EXPECT_EQ(a.output.cols(), 8);
        EXPECT_TRUE(a.output.allFinite());
        EXPECT_TRUE((a.output.array() == b.output.array()).all());
    }
    std::vector<std::size_t> too_long(c.max_sequence + 1, 2);
    EXPECT_THROW(forward(too_long, params, c, false, 0), ValidationError);
    std::vector<std::size_t> bad_id = {10};
    EXPECT_THROW(forward(bad_id, params, c, false, 0), ValidationError);
}

TEST(Forward, AttentionRowsAreDistributionsOverRealTokens) {
    const auto c = tiny_config(2);
    const auto params = init_parameters(c);
    const std::vector<std::size_t> tokens = {4, 7, 2, 0, 0};
    const auto rep = forward(tokens, params, c, false, 0);
    for (std::size_t l = 0; l < c.layers; ++l) {
        for (std::size_t h = 0; h < c.heads; ++h) {
            const Matrix& a = rep.attention(l, h);
            for (Eigen::Index r = 0; r < a.rows(); ++r) {
                EXPECT_NEAR(a.row(r).sum(), 1.0, 1e-9);
                EXPECT_GE(a.row(r).minCoeff(), 0.0);
                EXPECT_EQ(a(r, 3), 0.0);
                EXPECT_EQ(a(r, 4), 0.0);
            }
        }
    }
    // masking padding makes real positions independent of it
    const std::vector<std::size_t> unpadded = {4, 7, 2};
    const auto ref = forward(unpadded, params, c, false, 0);
    EXPECT_LT((rep.output.topRows(3) - ref.output).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, SingleTokenAttendsToItself) {
    const auto c = tiny_config();
    const auto params = init_parameters(c);
    const std::vector<std::size_t> one = {5};
    const auto rep = forward(one, params, c, false, 0);
    EXPECT_EQ(rep.attention(0, 0)(0, 0), 1.0);
    EXPECT_TRUE(rep.output.allFinite());
}

TEST(Forward, ZeroWeightsGiveLayerNormalizedPositionalEncoding) {
    const auto c = tiny_config(1);
    auto params = init_parameters(c);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& t = params.at_mut(i);
        if (t.name.find("gain") == std::string::npos) t.value.setZero();
    }
    const std::vector<std::size_t> tokens = {1, 2, 3, 4};
    const auto rep = forward(tokens, params, c, false, 0);
    const Matrix pe = positional_encoding(4, 8);
    // each sublayer contributes nothing, leaving two stacked normalizations
    EXPECT_LT((rep.output - plain_layer_norm(plain_layer_norm(pe))).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((rep.output - plain_layer_norm(pe)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Forward, LayerNormRowsAreStandardized) {
    const auto c = tiny_config(2);
    const auto params = init_parameters(c);
    const std::vector<std::size_t> tokens = {3, 1, 4, 1, 5};
    const auto rep = forward(tokens, params, c, true, 3);
    for (const auto& layer : rep.layers) {
        for (const auto* ln : {&layer.ln1, &layer.ln2}) {
            for (Eigen::Index r = 0; r < ln->normalized.rows(); ++r) {
                EXPECT_NEAR(ln->normalized.row(r).mean(), 0.0, 1e-6);
                EXPECT_NEAR(ln->normalized.row(r).array().square().mean(), 1.0, 1e-4);
            }
        }
    }
}

TEST(Forward, DropoutIsSeeded) {
    auto c = tiny_config(1);
    c.dropout = 0.3;
    const auto params = init_parameters(c);
    const std::vector<std::size_t> tokens = {1, 2, 3};
    const auto a = forward(tokens, params, c, true, 10);
    const auto b = forward(tokens, params, c, true, 10);
    const auto other = forward(tokens, params, c, true, 11);
    const auto eval = forward(tokens, params, c, false, 10);
    EXPECT_TRUE((a.output.array() == b.output.array()).all());
    EXPECT_FALSE((a.output.array() == other.output.array()).all());
    EXPECT_FALSE((a.output.array() == eval.output.array()).all());
}

TEST(Backward, MatchesFiniteDifferences) {
    const std::vector<std::size_t> tokens = {3, 7, 2};
    EXPECT_LT(max_gradient_error(tiny_config(1), tokens, false), 1e-4);
}

TEST(Backward, MatchesFiniteDifferencesWithDropoutAndPadding) {
    auto c = tiny_config(2);
    c.dropout = 0.2;
    const std::vector<std::size_t> tokens = {3, 7, 0};
    EXPECT_LT(max_gradient_error(c, tokens, true), 1e-4);
}

TEST(Backward, InputGradientMatchesFiniteDifferences) {
    const auto c = tiny_config(1);
    auto params = init_parameters(c);
    const std::vector<std::size_t> tokens = {3, 7};
    Rng rng(2);
    const Matrix weight = random_matrix(rng, 2, 8);
    const auto rep = forward(tokens, params, c, false, 0);
    const auto grads = backward(rep, weight, params, c);
    // the input row x = embedding * proj + pe, so d/d(embedding) = dx * proj^T
    const Matrix expected_emb = grads.input * params.get("embed.proj").transpose();
    for (Eigen::Index i = 0; i < 2; ++i) {
        for (Eigen::Index j = 0; j < 6; ++j) {
            const auto row = static_cast<Eigen::Index>(tokens[static_cast<std::size_t>(i)]);
            const double fd = oracle::central_difference(params.mut("embed.tokens")(row, j), [&] {
                return forward(tokens, params, c, false, 0).output.cwiseProduct(weight).sum();
            });
            EXPECT_LT(oracle::relative_error(expected_emb(i, j), fd), 1e-4);
        }
    }
}

TEST(Backward, LinearInGradOutput) {
    const auto c = tiny_config(2);
    const auto params = init_parameters(c);
    const std::vector<std::size_t> tokens = {1, 2, 3};
    const auto rep = forward(tokens, params, c, false, 0);
    const auto zero = backward(rep, Matrix::Zero(3, 8), params, c);
    for (const auto& t : zero.params.tensors()) EXPECT_TRUE((t.value.array() == 0.0).all()) << t.name;

    Rng rng(1);
    const Matrix g = random_matrix(rng, 3, 8);
    const auto one = backward(rep, g, params, c);
    const auto two = backward(rep, 2.0 * g, params, c);
    for (std::size_t i = 0; i < one.params.size(); ++i) {
        EXPECT_LT((2.0 * one.params.at(i).value - two.params.at(i).value).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Backward, StaleCacheIsRejected) {
    const auto c = tiny_config(1);
    auto params = init_parameters(c);
    const std::vector<std::size_t> tokens = {1, 2};
    const auto rep = forward(tokens, params, c, false, 0);
    params.mut("embed.proj")(0, 0) += 1.0;
    EXPECT_THROW(backward(rep, Matrix::Zero(2, 8), params, c), ValidationError);
    const ParameterStore copy = params;
    const auto fresh = forward(tokens, params, c, false, 0);
    EXPECT_THROW(backward(fresh, Matrix::Zero(2, 8), copy, c), ValidationError);
}
