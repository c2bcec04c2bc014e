#pragma once

// Textual run configuration: UTF-8 "key = value" lines, '#' starts a
// comment. Every key has a default; unknown keys are rejected. Values are
// kept as text so the resolved echo replays a run exactly.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tcrf/encoder.hpp"
#include "tcrf/errors.hpp"
#include "tcrf/trainer.hpp"

namespace tcrf {

class RunConfig {
public:
    // Key order here is the order of the resolved echo.
    static const std::vector<std::pair<std::string, std::string>>& defaults() {
        static const std::vector<std::pair<std::string, std::string>> d = {
            {"train", ""},
            {"dev", ""},
            {"test", ""},
            {"emissions", ""},
            {"dev_emissions", ""},
            {"checkpoint", ""},
            {"resume", ""},
            {"output_dir", "runs"},
            {"dev_fraction", "0.1"},
            {"min_frequency", "1"},
            {"model_shape", "transformer_crf"},
            {"constrain_bioes", "true"},
            {"d_model", "512"},
            {"heads", "8"},
            {"layers", "6"},
            {"d_ff", "2048"},
            {"max_sequence", "128"},
            {"token_embedding_dim", "600"},
            {"dropout", "0.1"},
            {"batch_size", "4"},
            {"learning_rate", "0.005"},
            {"max_epochs", "100"},
            {"patience", "20"},
            {"adam_beta1", "0.9"},
            {"adam_beta2", "0.999"},
            {"adam_epsilon", "1e-8"},
            {"grad_clip_norm", "none"},
            {"seed", "0"},
            {"report_epoch", "none"},
            {"log_wall_time", "false"},
        };
        return d;
    }

    RunConfig() {
        for (const auto& [k, v] : defaults()) values_[k] = v;
    }

    static bool is_known(std::string_view key) {
        const auto& d = defaults();
        return std::any_of(d.begin(), d.end(), [&](const auto& kv) { return kv.first == key; });
    }

    void set(const std::string& key, std::string value) {
        if (!is_known(key)) throw ValidationError("unknown configuration key '" + key + "'");
        values_[key] = std::move(value);
    }

    // "key=value" as given on the command line.
    void apply_override(std::string_view assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string_view::npos) {
            throw ValidationError("expected key=value, got '" + std::string(assignment) + "'");
        }
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    void parse(std::istream& in, const std::string& origin = "config") {
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!is_valid_utf8(line)) throw ParseError(lineno, "invalid UTF-8", origin);
            std::string_view body(line);
            if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
            if (trim(body).empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string_view::npos) throw ParseError(lineno, "expected 'key = value'", origin);
            const std::string key = trim(body.substr(0, eq));
            if (!is_known(key)) throw ParseError(lineno, "unknown configuration key '" + key + "'", origin);
            values_[key] = trim(body.substr(eq + 1));
        }
    }

    void load_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot open " + path);
        parse(in, path);
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ValidationError("unknown configuration key '" + key + "'");
        return it->second;
    }

    std::optional<std::string> path(const std::string& key) const {
        const auto& v = get(key);
        return v.empty() ? std::nullopt : std::optional<std::string>(v);
    }

    std::size_t get_size(const std::string& key) const {
        const auto& v = get(key);
        std::size_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
            throw ValidationError(key + ": expected a non-negative integer, got '" + v + "'");
        }
        return out;
    }

    double get_double(const std::string& key) const {
        const auto& v = get(key);
        double out = 0.0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
            throw ValidationError(key + ": expected a number, got '" + v + "'");
        }
        return out;
    }

    bool get_bool(const std::string& key) const {
        const auto& v = get(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ValidationError(key + ": expected true or false, got '" + v + "'");
    }

    bool is_none(const std::string& key) const {
        const auto& v = get(key);
        return v.empty() || v == "none";
    }

    ModelShape shape() const {
        const auto s = parse_shape(get("model_shape"));
        if (!s) {
            throw ValidationError("model_shape: expected classify_head, transformer_crf or frozen_emissions_crf, got '" +
                                  get("model_shape") + "'");
        }
        return *s;
    }

    EncoderConfig encoder_config() const {
        EncoderConfig c;
        c.d_model = get_size("d_model");
        c.heads = get_size("heads");
        c.layers = get_size("layers");
        c.d_ff = get_size("d_ff");
        c.max_sequence = get_size("max_sequence");
        c.token_embedding_dim = get_size("token_embedding_dim");
        c.dropout = get_double("dropout");
        c.seed = get_size("seed");
        return c;
    }

    TrainConfig train_config() const {
        TrainConfig c;
        c.batch_size = get_size("batch_size");
        c.learning_rate = get_double("learning_rate");
        c.max_epochs = get_size("max_epochs");
        c.patience = get_size("patience");
        c.dropout = get_double("dropout");
        c.adam_beta1 = get_double("adam_beta1");
        c.adam_beta2 = get_double("adam_beta2");
        c.adam_epsilon = get_double("adam_epsilon");
        if (!is_none("grad_clip_norm")) c.grad_clip_norm = get_double("grad_clip_norm");
        c.seed = get_size("seed");
        c.model_shape = shape();
        c.constrain_bioes = get_bool("constrain_bioes");
        if (!is_none("report_epoch")) c.report_epoch = get_size("report_epoch");
        c.log_wall_time = get_bool("log_wall_time");
        c.validate();
        return c;
    }

    void write_resolved(std::ostream& out) const {
        out << "# resolved configuration\n";
        for (const auto& [k, unused] : defaults()) out << k << " = " << values_.at(k) << '\n';
    }

private:
    static std::string trim(std::string_view s) {
        const auto b = s.find_first_not_of(" \t");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t");
        return std::string(s.substr(b, e - b + 1));
    }

    std::map<std::string, std::string> values_;
};

}  // namespace tcrf
