#pragma once

// Mini-batch Adam training with early stopping on dev entity F1.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcrf/adam.hpp"
#include "tcrf/checkpoint.hpp"
#include "tcrf/corpus.hpp"
#include "tcrf/evaluation.hpp"
#include "tcrf/model.hpp"
#include "tcrf/rng.hpp"

namespace tcrf {

struct TrainConfig {
    std::size_t batch_size = 4;
    double learning_rate = 0.005;
    std::size_t max_epochs = 100;
    std::size_t patience = 20;
    double dropout = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::optional<double> grad_clip_norm;
    std::uint64_t seed = 0;
    ModelShape model_shape = ModelShape::transformer_crf;
    bool constrain_bioes = true;
    std::optional<std::size_t> report_epoch;  // also keep the model of this epoch
    bool log_wall_time = false;               // seconds column stays empty when off

    void validate() const {
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (patience < 1) throw ValidationError("patience must be >= 1");
        if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
        if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
        if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ValidationError("grad_clip_norm must be > 0");
    }

    AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon, grad_clip_norm}; }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"batch_size", batch_size},
                            {"learning_rate", learning_rate},
                            {"max_epochs", max_epochs},
                            {"patience", patience},
                            {"dropout", dropout},
                            {"adam_beta1", adam_beta1},
                            {"adam_beta2", adam_beta2},
                            {"adam_epsilon", adam_epsilon},
                            {"seed", seed},
                            {"model_shape", std::string(shape_name(model_shape))},
                            {"constrain_bioes", constrain_bioes}};
        j["grad_clip_norm"] = grad_clip_norm ? nlohmann::json(*grad_clip_norm) : nlohmann::json(nullptr);
        j["report_epoch"] = report_epoch ? nlohmann::json(*report_epoch) : nlohmann::json(nullptr);
        return j;
    }
};

inline constexpr const char* kEpochLogHeader =
    "epoch,train_loss,dev_token_acc,dev_entity_p,dev_entity_r,dev_entity_f1,seconds";

inline void write_epoch_log_csv(std::ostream& out, std::span<const EpochLog> logs, bool with_wall_time) {
    out << kEpochLogHeader << '\n';
    char buf[256];
    for (const auto& l : logs) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,", l.epoch, l.train_loss, l.dev_token_acc,
                      l.dev_entity_p, l.dev_entity_r, l.dev_entity_f1);
        out << buf;
        if (with_wall_time) {
            std::snprintf(buf, sizeof buf, "%.3f", l.seconds);
            out << buf;
        }
        out << '\n';
    }
}

inline void write_epoch_log_file(const std::filesystem::path& path, std::span<const EpochLog> logs,
                                 bool with_wall_time) {
    std::ofstream out(path, std::ios::binary);
    write_epoch_log_csv(out, logs, with_wall_time);
    if (!out) throw Error("write failed: " + path.string());
}

// Training units derived from a dataset: windowed token ids for encoder
// shapes, external lattices for the frozen shape.
struct PreparedData {
    std::vector<SentenceInput> inputs;
    std::vector<LabelPath> gold;
};

inline PreparedData prepare_data(const Model& m, const Dataset& d, const std::vector<EmissionLattice>* emissions) {
    PreparedData p;
    if (!m.has_encoder()) {
        if (!emissions) throw ValidationError("frozen_emissions_crf needs emission lattices for '" + d.name + "'");
        if (emissions->size() != d.size()) {
            throw ValidationError("'" + d.name + "' has " + std::to_string(d.size()) + " sentences but " +
                                  std::to_string(emissions->size()) + " lattices");
        }
        for (std::size_t i = 0; i < d.size(); ++i) {
            if ((*emissions)[i].length() != d.sentences[i].size()) {
                throw ValidationError("sentence " + std::to_string(i) + " of '" + d.name +
                                      "' does not match its lattice length");
            }
            SentenceInput in;
            in.external = &(*emissions)[i];
            p.inputs.push_back(std::move(in));
            p.gold.push_back(to_path(d.sentences[i].gold));
        }
        return p;
    }
    for (const auto& s : d.sentences) {
        for (const auto& chunk : window_sentence(s, m.encoder.max_sequence)) {
            SentenceInput in;
            in.ids = m.vocabulary.encode(chunk.tokens);
            p.inputs.push_back(std::move(in));
            p.gold.push_back(to_path(chunk.gold));
        }
    }
    return p;
}

// Predictions for every sentence of d, reassembled from windows.
inline LabelCorpus predict_dataset(const Model& m, const Dataset& d, const std::vector<EmissionLattice>* emissions) {
    LabelCorpus out;
    out.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        out.push_back(predict_labels(m, d.sentences[i].tokens, emissions ? &(*emissions)[i] : nullptr));
    }
    return out;
}

struct TrainResult {
    Checkpoint best;
    Checkpoint last;
    std::optional<Checkpoint> report;  // model at TrainConfig::report_epoch
    std::vector<EpochLog> logs;
    bool stopped_early = false;
};

struct TrainInputs {
    const Dataset* train = nullptr;
    const Dataset* dev = nullptr;
    const std::vector<EmissionLattice>* train_emissions = nullptr;
    const std::vector<EmissionLattice>* dev_emissions = nullptr;
};

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

inline void check_finite_loss(double loss, std::size_t epoch, std::size_t batch) {
    if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
    }
}

}  // namespace detail

// Trains `initial` (or continues `resume` together with its best-so-far
// checkpoint). Per epoch: seeded shuffle, batches of batch_size, one Adam
// step per batch, dev evaluation, best-F1 tracking with patience.
inline TrainResult train(const TrainInputs& data, Model initial, const TrainConfig& config,
                         const Checkpoint* resume = nullptr, const Checkpoint* resume_best = nullptr,
                         const EpochCallback& on_epoch = {}) {
    config.validate();
    if (!data.train || data.train->empty()) throw ValidationError("training set is empty");
    if (!data.dev || data.dev->empty()) throw ValidationError("dev set is empty");

    TrainResult result;
    Checkpoint state;
    if (resume) {
        state = *resume;
        if (!state.optimizer) throw ValidationError("checkpoint has no optimizer state to resume from");
        if (!resume_best) throw ValidationError("resuming needs the best-so-far checkpoint");
        result.best = *resume_best;
    } else {
        state.model = std::move(initial);
        state.optimizer = AdamState::for_params(state.model.params);
    }
    state.config_echo = config.to_json();
    Model& model = state.model;
    model.encoder.dropout = config.dropout;
    AdamState& adam = *state.optimizer;
    const AdamConfig adam_config = config.adam();

    const PreparedData train_units = prepare_data(model, *data.train, data.train_emissions);
    if (!model.has_encoder() && !data.dev_emissions) {
        throw ValidationError("frozen_emissions_crf needs dev emission lattices");
    }
    const LabelCorpus dev_gold = gold_labels(*data.dev);
    ParameterStore grads = model.params.zeros_like();
    std::vector<std::size_t> order(train_units.inputs.size());

    for (std::size_t epoch = state.progress.epoch + 1; epoch <= config.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(config.seed, 0x5eed, epoch));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
            const std::size_t e = std::min(order.size(), b + config.batch_size);
            grads.set_zero();
            std::size_t batch_tokens = 0;
            for (std::size_t k = b; k < e; ++k) batch_tokens += train_units.inputs[order[k]].length();
            double batch_loss = 0.0;
            for (std::size_t k = b; k < e; ++k) {
                const std::size_t idx = order[k];
                const auto& in = train_units.inputs[idx];
                // CRF: mean of sentence losses; classifier: mean token loss over the batch
                const double weight = model.has_crf() ? 1.0 / static_cast<double>(e - b)
                                                      : static_cast<double>(in.length()) / static_cast<double>(batch_tokens);
                const double loss = accumulate_gradients(model, in, train_units.gold[idx], true,
                                                         mix_seed(config.seed, epoch, b, k), weight, grads);
                batch_loss += weight * loss;
            }
            detail::check_finite_loss(batch_loss, epoch, batches + 1);
            try {
                adam_step(model.params, grads, adam, adam_config);
            } catch (const DivergenceError& err) {
                throw DivergenceError(std::string(err.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(batches + 1));
            }
            loss_sum += batch_loss;
            ++batches;
        }

        const LabelCorpus pred = predict_dataset(model, *data.dev, data.dev_emissions);
        const EntityReport rep = entity_level_eval(dev_gold, pred);
        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(batches);
        log.dev_token_acc = rep.acc();
        log.dev_entity_p = rep.overall.pre();
        log.dev_entity_r = rep.overall.rec();
        log.dev_entity_f1 = rep.overall.f1();
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.progress.logs.push_back(log);
        state.progress.epoch = epoch;

        if (log.dev_entity_f1 > state.progress.best_f1) {
            state.progress.best_f1 = log.dev_entity_f1;
            state.progress.best_epoch = epoch;
            result.best = state;
            result.best.optimizer.reset();
        }
        if (config.report_epoch && *config.report_epoch == epoch) {
            result.report = state;
            result.report->optimizer.reset();
        }
        if (on_epoch) on_epoch(log);
        if (epoch - state.progress.best_epoch >= config.patience) {
            result.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    // the best checkpoint carries the final progress so it can seed a resume
    result.best.progress = state.progress;
    if (result.report) result.report->progress = state.progress;
    result.logs = state.progress.logs;
    result.last = std::move(state);
    return result;
}

struct SweepOutcome {
    std::size_t batch_size = 0;
    std::filesystem::path curve;
    std::optional<std::string> error;
};

inline std::filesystem::path sweep_curve_path(const std::filesystem::path& dir, std::size_t batch_size) {
    return dir / ("curve_bs" + std::to_string(batch_size) + ".csv");
}

// One training run per batch size with otherwise identical settings. A
// failing size is recorded and the sweep continues.
inline std::vector<SweepOutcome> sweep_batch_sizes(const TrainInputs& data, const Model& initial,
                                                   const TrainConfig& config, std::span<const std::size_t> sizes,
                                                   const std::filesystem::path& out_dir) {
    if (sizes.empty()) throw ValidationError("no batch sizes given");
    for (std::size_t s : sizes) {
        if (s < 1) throw ValidationError("batch sizes must be >= 1");
    }
    std::filesystem::create_directories(out_dir);
    std::vector<SweepOutcome> outcomes;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        SweepOutcome o;
        o.batch_size = sizes[i];
        auto path = sweep_curve_path(out_dir, sizes[i]);
        // repeated sizes get distinct files
        for (std::size_t k = 0; k < i; ++k) {
            if (sizes[k] == sizes[i]) {
                path = out_dir / ("curve_bs" + std::to_string(sizes[i]) + "_run" + std::to_string(i + 1) + ".csv");
                break;
            }
        }
        o.curve = path;
        try {
            TrainConfig c = config;
            c.batch_size = sizes[i];
            const TrainResult r = train(data, initial, c);
            write_epoch_log_file(path, r.logs, c.log_wall_time);
        } catch (const std::exception& e) {
            o.error = e.what();
        }
        outcomes.push_back(std::move(o));
    }
    return outcomes;
}

}  // namespace tcrf
