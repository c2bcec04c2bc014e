// tcrf: prepare corpora, train, predict, evaluate and sweep batch sizes.
//
// Exit status: 0 when every requested artifact was written, 1 on runtime
// failures, 2 on usage errors.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tcrf/corpus.hpp"
#include "tcrf/evaluation.hpp"
#include "tcrf/run_config.hpp"
#include "tcrf/synthetic.hpp"
#include "tcrf/trainer.hpp"

namespace fs = std::filesystem;
using namespace tcrf;

namespace {

struct UsageError : Error {
    using Error::Error;
};

constexpr const char* kOutputRootVar = "TCRF_OUTPUT_ROOT";

// Relative output locations are placed under $TCRF_OUTPUT_ROOT when set.
fs::path output_path(const std::string& p) {
    const fs::path path(p);
    const char* root = std::getenv(kOutputRootVar);
    if (root && *root && path.is_relative()) return fs::path(root) / path;
    return path;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error("write failed: " + path.string());
}

struct CommonOptions {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string output;
};

void add_common(CLI::App* cmd, CommonOptions& o, const std::string& output_help) {
    cmd->add_option("-c,--config", o.config_file, "RunConfig file (key = value lines)");
    cmd->add_option("--set", o.overrides, "Override a configuration key, key=value (repeatable)");
    cmd->add_option("-o,--output", o.output, output_help);
}

// Defaults, then the config file, then dedicated flags, then --set.
RunConfig resolve_config(const CommonOptions& o, const std::vector<std::pair<std::string, std::string>>& flags) {
    RunConfig rc;
    try {
        if (!o.config_file.empty()) rc.load_file(o.config_file);
        for (const auto& [k, v] : flags) {
            if (!v.empty()) rc.set(k, v);
        }
        if (!o.output.empty()) rc.set("output_dir", o.output);
        for (const auto& s : o.overrides) rc.apply_override(s);
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    } catch (const ParseError& e) {
        throw UsageError(e.what());
    }
    return rc;
}

void echo_config(const RunConfig& rc, const fs::path& dir) {
    std::ostringstream s;
    rc.write_resolved(s);
    write_text(dir / "resolved_config.txt", s.str());
}

std::string required_path(const RunConfig& rc, const std::string& key, const std::string& flag) {
    auto p = rc.path(key);
    if (!p) throw UsageError("missing " + flag + " (config key '" + key + "')");
    return *p;
}

std::vector<EmissionLattice> read_lattices(const std::string& path, const Dataset& d) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::vector<std::size_t> lengths;
    for (const auto& s : d.sentences) lengths.push_back(s.size());
    try {
        return load_emissions(in, LabelSet::standard(), lengths);
    } catch (const ParseError& e) {
        throw ParseError(e.line(), e.detail(), path);
    }
}

// Token-only or two-column input; a label column must belong to the label set.
Dataset read_tokens(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    Dataset d;
    d.name = path;
    Sentence cur;
    std::string line;
    std::size_t lineno = 0;
    auto flush = [&] {
        if (!cur.tokens.empty()) d.sentences.push_back(std::move(cur));
        cur = {};
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!is_valid_utf8(line)) throw ParseError(lineno, "invalid UTF-8", path);
        std::istringstream fields(line);
        std::vector<std::string> f;
        for (std::string x; fields >> x;) f.push_back(x);
        if (f.empty()) {
            flush();
            continue;
        }
        if (f.size() > 2) throw ParseError(lineno, "expected '<token>' or '<token> <label>'", path);
        if (f.size() == 2 && !parse_label(f[1])) {
            throw ParseError(lineno, "label '" + f[1] + "' is not in the model's label set", path);
        }
        cur.tokens.push_back(f[0]);
        cur.gold.push_back(Label::outside());
    }
    flush();
    return d;
}

// --- prepare ----------------------------------------------------------------

struct PrepareOptions {
    CommonOptions common;
    std::vector<std::string> inputs;
    std::string test, dev_fraction, seed;
};

int cmd_prepare(const PrepareOptions& o) {
    const RunConfig rc =
        resolve_config(o.common, {{"test", o.test}, {"dev_fraction", o.dev_fraction}, {"seed", o.seed}});
    std::vector<std::string> inputs = o.inputs;
    if (inputs.empty()) {
        if (auto t = rc.path("train")) inputs.push_back(*t);
    }
    if (inputs.empty()) throw UsageError("prepare needs at least one --input corpus");
    double fraction;
    std::size_t seed;
    try {
        fraction = rc.get_double("dev_fraction");
        seed = rc.get_size("seed");
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }

    Dataset merged{"all", {}};
    for (const auto& p : inputs) {
        Dataset d = read_conll_file(p);
        for (auto& s : d.sentences) merged.sentences.push_back(std::move(s));
    }
    auto [train, dev] = split_train_dev(merged, fraction, seed);
    std::vector<Dataset> splits{std::move(train), std::move(dev)};
    if (auto t = rc.path("test")) splits.push_back(read_conll_file(*t, "test"));

    const fs::path dir = output_path(rc.get("output_dir"));
    fs::create_directories(dir);
    for (const auto& d : splits) {
        write_conll_file((dir / (d.name + ".conll")).string(), d);
        std::cout << d.name << ": " << d.size() << " sentences, " << d.token_count() << " tokens\n";
    }
    std::ostringstream dist;
    write_distribution_csv(dist, label_distribution(splits));
    write_text(dir / "label_distribution.csv", dist.str());
    echo_config(rc, dir);
    return 0;
}

// --- train / sweep ----------------------------------------------------------

struct TrainOptions {
    CommonOptions common;
    std::string train, dev, emissions, dev_emissions, shape, resume, seed, batch_sizes;
};

struct LoadedData {
    Dataset train, dev;
    std::vector<EmissionLattice> train_lattices, dev_lattices;
    bool frozen = false;

    TrainInputs inputs() const {
        return {&train, &dev, frozen ? &train_lattices : nullptr, frozen ? &dev_lattices : nullptr};
    }
};

LoadedData load_training_data(const RunConfig& rc, ModelShape shape) {
    LoadedData data;
    data.frozen = shape == ModelShape::frozen_emissions_crf;
    const std::string train_path = required_path(rc, "train", "--train");
    const std::string dev_path = required_path(rc, "dev", "--dev");
    if (data.frozen) {
        if (!rc.path("emissions")) throw UsageError("frozen_emissions_crf requires --emissions");
        if (!rc.path("dev_emissions")) throw UsageError("frozen_emissions_crf requires --dev-emissions");
    }
    data.train = read_conll_file(train_path, "train");
    data.dev = read_conll_file(dev_path, "dev");
    if (data.frozen) {
        data.train_lattices = read_lattices(*rc.path("emissions"), data.train);
        data.dev_lattices = read_lattices(*rc.path("dev_emissions"), data.dev);
    }
    return data;
}

std::pair<EncoderConfig, TrainConfig> typed_configs(const RunConfig& rc) {
    try {
        EncoderConfig enc = rc.encoder_config();
        TrainConfig tc = rc.train_config();
        enc.vocabulary_size = 1;  // replaced by the vocabulary size
        enc.validate();
        return {enc, tc};
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }
}

Model initial_model(const RunConfig& rc, const EncoderConfig& enc, const TrainConfig& tc, const Dataset& train) {
    std::size_t min_freq;
    try {
        min_freq = rc.get_size("min_frequency");
        if (min_freq < 1) throw ValidationError("min_frequency must be >= 1");
    } catch (const ValidationError& e) {
        throw UsageError(e.what());
    }
    return make_model(tc.model_shape, enc, build_vocabulary(train, min_freq), tc.constrain_bioes);
}

void print_epoch(const EpochLog& l) {
    std::fprintf(stderr, "epoch %zu  loss %.6f  dev acc %.4f  dev P %.4f R %.4f F1 %.4f  (%.1fs)\n", l.epoch,
                 l.train_loss, l.dev_token_acc, l.dev_entity_p, l.dev_entity_r, l.dev_entity_f1, l.seconds);
}

int cmd_train(const TrainOptions& o) {
    const RunConfig rc = resolve_config(o.common, {{"train", o.train},
                                                   {"dev", o.dev},
                                                   {"emissions", o.emissions},
                                                   {"dev_emissions", o.dev_emissions},
                                                   {"model_shape", o.shape},
                                                   {"resume", o.resume},
                                                   {"seed", o.seed}});
    const auto [enc, tc] = typed_configs(rc);
    const LoadedData data = load_training_data(rc, tc.model_shape);
    const fs::path dir = output_path(rc.get("output_dir"));
    fs::create_directories(dir);
    echo_config(rc, dir);

    TrainResult result;
    if (auto resume = rc.path("resume")) {
        const Checkpoint last = load_checkpoint(fs::path(*resume) / "last.ckpt");
        const Checkpoint best = load_checkpoint(fs::path(*resume) / "best.ckpt");
        if (last.model.shape != tc.model_shape) throw UsageError("resume checkpoint has a different model_shape");
        result = train(data.inputs(), Model{}, tc, &last, &best, print_epoch);
    } else {
        result = train(data.inputs(), initial_model(rc, enc, tc, data.train), tc, nullptr, nullptr, print_epoch);
    }

    save_checkpoint(dir / "best.ckpt", result.best);
    save_checkpoint(dir / "last.ckpt", result.last);
    if (result.report) save_checkpoint(dir / "report.ckpt", *result.report);
    write_epoch_log_file(dir / "epoch_log.csv", result.logs, tc.log_wall_time);
    std::ostringstream curve;
    curve << "epoch,dev_entity_f1\n";
    for (const auto& l : result.logs) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", l.epoch, l.dev_entity_f1);
        curve << buf;
    }
    write_text(dir / "f1_curve.csv", curve.str());
    const Model& m = result.best.model;
    const std::string summary = render_model_summary(display_name(m.shape), m.params.count_parameters());
    write_text(dir / "model_summary.csv", summary);
    std::cout << summary;
    std::cout << "best epoch " << result.best.progress.best_epoch << ", dev entity F1 "
              << format_percent(result.best.progress.best_f1) << '\n';
    return 0;
}

std::vector<std::size_t> parse_sizes(const std::string& list) {
    std::vector<std::size_t> sizes;
    std::stringstream ss(list);
    for (std::string item; std::getline(ss, item, ',');) {
        std::size_t v = 0;
        const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
            throw UsageError("--batch-sizes: '" + item + "' is not a non-negative integer");
        }
        if (v < 1) throw UsageError("--batch-sizes: batch size must be >= 1");
        sizes.push_back(v);
    }
    if (sizes.empty()) throw UsageError("--batch-sizes is empty");
    return sizes;
}

int cmd_sweep(const TrainOptions& o) {
    const std::vector<std::size_t> sizes = parse_sizes(o.batch_sizes);
    const RunConfig rc = resolve_config(o.common, {{"train", o.train},
                                                   {"dev", o.dev},
                                                   {"emissions", o.emissions},
                                                   {"dev_emissions", o.dev_emissions},
                                                   {"model_shape", o.shape},
                                                   {"seed", o.seed}});
    const auto [enc, tc] = typed_configs(rc);
    const LoadedData data = load_training_data(rc, tc.model_shape);
    const fs::path dir = output_path(rc.get("output_dir"));
    fs::create_directories(dir);
    echo_config(rc, dir);

    const Model initial = initial_model(rc, enc, tc, data.train);
    const auto outcomes = sweep_batch_sizes(data.inputs(), initial, tc, sizes, dir);
    int status = 0;
    for (const auto& out : outcomes) {
        if (out.error) {
            std::cerr << "batch size " << out.batch_size << ": " << *out.error << '\n';
            status = 1;
        } else {
            std::cout << out.curve.string() << '\n';
        }
    }
    return status;
}

// --- predict / evaluate -----------------------------------------------------

struct PredictOptions {
    CommonOptions common;
    std::string checkpoint, input, emissions;
};

int cmd_predict(const PredictOptions& o) {
    const RunConfig rc = resolve_config(o.common, {{"checkpoint", o.checkpoint}, {"emissions", o.emissions}});
    const std::string ckpt_path = required_path(rc, "checkpoint", "--checkpoint");
    if (o.input.empty()) throw UsageError("missing --input");
    if (o.common.output.empty()) throw UsageError("missing --output prediction file");
    const Checkpoint ck = load_checkpoint(ckpt_path);
    const Model& m = ck.model;
    Dataset d = read_tokens(o.input);

    std::vector<EmissionLattice> lattices;
    if (!m.has_encoder()) {
        auto e = rc.path("emissions");
        if (!e) throw UsageError("frozen_emissions_crf requires --emissions");
        lattices = read_lattices(*e, d);
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        d.sentences[i].gold = predict_labels(m, d.sentences[i].tokens, m.has_encoder() ? nullptr : &lattices[i]);
    }
    const fs::path out = output_path(o.common.output);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_conll_file(out.string(), d);
    return 0;
}

struct EvaluateOptions {
    CommonOptions common;
    std::string gold, pred, report_epoch;
};

int cmd_evaluate(const EvaluateOptions& o) {
    const RunConfig rc = resolve_config(o.common, {});
    if (o.gold.empty() || o.pred.empty()) throw UsageError("evaluate needs --gold and --pred");
    const LabelCorpus gold = gold_labels(read_conll_file(o.gold));
    const LabelCorpus pred = gold_labels(read_conll_file(o.pred));
    const fs::path dir = output_path(rc.get("output_dir"));
    write_report_bundle(dir, gold, pred, o.report_epoch);
    std::cout << render_entity_table(entity_level_eval(gold, pred), o.report_epoch);
    return 0;
}

// --- synth ------------------------------------------------------------------

struct SynthOptions {
    std::size_t sentences = 2000;
    std::uint64_t seed = 0;
    std::string output;
};

int cmd_synth(const SynthOptions& o) {
    if (o.output.empty()) throw UsageError("missing --output corpus file");
    if (o.sentences < 1) throw UsageError("--sentences must be >= 1");
    const fs::path out = output_path(o.output);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_conll_file(out.string(), generate_synthetic_corpus(o.sentences, o.seed));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transformer/CRF sequence labelling for clinical BIOES corpora"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "tcrf 1.0.0");

    PrepareOptions prep;
    auto* prepare = app.add_subcommand("prepare", "Validate corpora, split train/dev, write label distribution");
    add_common(prepare, prep.common, "Output directory");
    prepare->add_option("-i,--input", prep.inputs, "Training corpus file(s); merged before splitting");
    prepare->add_option("--test", prep.test, "Test corpus, canonicalized and included in the distribution");
    prepare->add_option("--dev-fraction", prep.dev_fraction, "Share of sentences moved to dev");
    prepare->add_option("--seed", prep.seed, "Split seed");

    TrainOptions tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints and learning curves");
    add_common(train_cmd, tr.common, "Output directory");
    train_cmd->add_option("--train", tr.train, "Training corpus");
    train_cmd->add_option("--dev", tr.dev, "Dev corpus");
    train_cmd->add_option("--shape", tr.shape, "classify_head | transformer_crf | frozen_emissions_crf");
    train_cmd->add_option("--emissions", tr.emissions, "Emission lattices for the training corpus");
    train_cmd->add_option("--dev-emissions", tr.dev_emissions, "Emission lattices for the dev corpus");
    train_cmd->add_option("--resume", tr.resume, "Directory with last.ckpt and best.ckpt to continue from");
    train_cmd->add_option("--seed", tr.seed, "Seed for initialization, shuffling and dropout");

    TrainOptions sw;
    auto* sweep = app.add_subcommand("sweep", "Train once per batch size and write one curve per size");
    add_common(sweep, sw.common, "Output directory");
    sweep->add_option("--batch-sizes", sw.batch_sizes, "Comma-separated batch sizes, e.g. 1,4,10")->required();
    sweep->add_option("--train", sw.train, "Training corpus");
    sweep->add_option("--dev", sw.dev, "Dev corpus");
    sweep->add_option("--shape", sw.shape, "Model shape");
    sweep->add_option("--emissions", sw.emissions, "Emission lattices for the training corpus");
    sweep->add_option("--dev-emissions", sw.dev_emissions, "Emission lattices for the dev corpus");
    sweep->add_option("--seed", sw.seed, "Seed");

    PredictOptions pr;
    auto* predict = app.add_subcommand("predict", "Label a corpus with a trained checkpoint");
    add_common(predict, pr.common, "Prediction file");
    predict->add_option("--checkpoint", pr.checkpoint, "Checkpoint file");
    predict->add_option("-i,--input", pr.input, "Corpus to label (token or token+label lines)");
    predict->add_option("--emissions", pr.emissions, "Emission lattices (frozen_emissions_crf)");

    EvaluateOptions ev;
    auto* evaluate = app.add_subcommand("evaluate", "Score predictions and write the six-file report bundle");
    add_common(evaluate, ev.common, "Report directory");
    evaluate->add_option("--gold", ev.gold, "Gold corpus");
    evaluate->add_option("--pred", ev.pred, "Prediction file");
    evaluate->add_option("--report-epoch", ev.report_epoch, "Epoch label recorded in the entity table");

    SynthOptions sy;
    auto* synth = app.add_subcommand("synth", "Write a templated synthetic corpus");
    synth->add_option("-n,--sentences", sy.sentences, "Number of sentences");
    synth->add_option("--seed", sy.seed, "Generator seed");
    synth->add_option("-o,--output", sy.output, "Corpus file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*prepare) return cmd_prepare(prep);
        if (*train_cmd) return cmd_train(tr);
        if (*sweep) return cmd_sweep(sw);
        if (*predict) return cmd_predict(pr);
        if (*evaluate) return cmd_evaluate(ev);
        if (*synth) return cmd_synth(sy);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
