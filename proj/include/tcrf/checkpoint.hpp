#pragma once

// Checkpoint container.
//
//   "TCRFCKPT"            8 bytes
//   format version        u32 little-endian
//   header length         u64 little-endian
//   header                UTF-8 JSON: model config, vocabulary, parameter
//                         count, seed, progress, tensor directory
//   payload               every tensor in directory order, column-major
//                         IEEE-754 binary64 little-endian
//   checksum              u64 little-endian FNV-1a over all preceding bytes

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tcrf/adam.hpp"
#include "tcrf/model.hpp"

namespace tcrf {

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double dev_token_acc = 0.0;
    double dev_entity_p = 0.0;
    double dev_entity_r = 0.0;
    double dev_entity_f1 = 0.0;
    double seconds = 0.0;
};

struct TrainProgress {
    std::size_t epoch = 0;  // completed epochs
    double best_f1 = -1.0;
    std::size_t best_epoch = 0;
    std::vector<EpochLog> logs;  // wall time is not persisted
};

struct Checkpoint {
    Model model;
    std::optional<AdamState> optimizer;
    TrainProgress progress;
    nlohmann::json config_echo = nlohmann::json::object();
};

inline constexpr char kCheckpointMagic[8] = {'T', 'C', 'R', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t pos) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

inline nlohmann::json encoder_to_json(const EncoderConfig& c) {
    return {{"d_model", c.d_model},
            {"heads", c.heads},
            {"layers", c.layers},
            {"d_ff", c.d_ff},
            {"max_sequence", c.max_sequence},
            {"dropout", c.dropout},
            {"token_embedding_dim", c.token_embedding_dim},
            {"vocabulary_size", c.vocabulary_size},
            {"seed", c.seed}};
}

inline EncoderConfig encoder_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.layers = j.at("layers");
    c.d_ff = j.at("d_ff");
    c.max_sequence = j.at("max_sequence");
    c.dropout = j.at("dropout");
    c.token_embedding_dim = j.at("token_embedding_dim");
    c.vocabulary_size = j.at("vocabulary_size");
    c.seed = j.at("seed");
    return c;
}

inline nlohmann::json logs_to_json(const std::vector<EpochLog>& logs) {
    auto arr = nlohmann::json::array();
    for (const auto& l : logs) {
        arr.push_back({l.epoch, l.train_loss, l.dev_token_acc, l.dev_entity_p, l.dev_entity_r, l.dev_entity_f1});
    }
    return arr;
}

inline std::vector<EpochLog> logs_from_json(const nlohmann::json& arr) {
    std::vector<EpochLog> logs;
    for (const auto& r : arr) {
        EpochLog l;
        l.epoch = r.at(0);
        l.train_loss = r.at(1);
        l.dev_token_acc = r.at(2);
        l.dev_entity_p = r.at(3);
        l.dev_entity_r = r.at(4);
        l.dev_entity_f1 = r.at(5);
        logs.push_back(l);
    }
    return logs;
}

inline void put_tensor(std::string& out, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    const Model& m = ck.model;
    nlohmann::json header;
    header["format"] = "tcrf-checkpoint";
    header["shape"] = std::string(shape_name(m.shape));
    header["constrain_bioes"] = m.constrain_bioes;
    header["encoder"] = detail::encoder_to_json(m.encoder);
    header["vocabulary"] = m.vocabulary.entries();
    header["parameter_count"] = m.params.count_parameters();
    header["seed"] = m.encoder.seed;
    header["progress"] = {{"epoch", ck.progress.epoch},
                          {"best_f1", ck.progress.best_f1},
                          {"best_epoch", ck.progress.best_epoch},
                          {"logs", detail::logs_to_json(ck.progress.logs)}};
    header["config"] = ck.config_echo;
    auto dir = nlohmann::json::array();
    for (const auto& t : m.params.tensors()) dir.push_back({t.name, t.value.rows(), t.value.cols()});
    header["tensors"] = dir;
    header["optimizer"] = ck.optimizer.has_value();
    header["optimizer_step"] = ck.optimizer ? ck.optimizer->step : 0;

    const std::string head = header.dump();
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, head.size());
    out += head;
    for (const auto& t : m.params.tensors()) detail::put_tensor(out, t.value);
    if (ck.optimizer) {
        for (const auto& t : ck.optimizer->m.tensors()) detail::put_tensor(out, t.value);
        for (const auto& t : ck.optimizer->v.tensors()) detail::put_tensor(out, t.value);
    }
    detail::put_u64(out, fnv1a64(out));
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    constexpr std::size_t kPrefix = sizeof kCheckpointMagic + 4 + 8;
    if (bytes.size() < kPrefix + 8 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
        throw Error("not a checkpoint file");
    }
    const std::uint64_t stored = detail::get_u64(bytes, bytes.size() - 8);
    if (stored != fnv1a64(bytes.substr(0, bytes.size() - 8))) throw Error("checkpoint checksum mismatch");
    const std::uint32_t version = static_cast<std::uint32_t>(detail::get_u64(bytes, 8) & 0xFFFFFFFFu);
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t head_len = detail::get_u64(bytes, 12);
    if (kPrefix + head_len + 8 > bytes.size()) throw Error("truncated checkpoint header");
    const auto header = nlohmann::json::parse(bytes.substr(kPrefix, head_len));

    Checkpoint ck;
    Model& m = ck.model;
    const auto shape = parse_shape(header.at("shape").get<std::string>());
    if (!shape) throw Error("unknown model shape in checkpoint");
    m.shape = *shape;
    m.constrain_bioes = header.at("constrain_bioes");
    m.encoder = detail::encoder_from_json(header.at("encoder"));
    m.vocabulary = Vocabulary(header.at("vocabulary").get<std::vector<std::string>>());
    const auto& prog = header.at("progress");
    ck.progress.epoch = prog.at("epoch");
    ck.progress.best_f1 = prog.at("best_f1");
    ck.progress.best_epoch = prog.at("best_epoch");
    ck.progress.logs = detail::logs_from_json(prog.at("logs"));
    ck.config_echo = header.at("config");

    std::size_t pos = kPrefix + head_len;
    auto read_store = [&](ParameterStore& store) {
        for (const auto& entry : header.at("tensors")) {
            const Eigen::Index rows = entry.at(1), cols = entry.at(2);
            const auto n = static_cast<std::size_t>(rows * cols);
            if (pos + 8 * n + 8 > bytes.size()) throw Error("truncated checkpoint payload");
            Matrix& t = store.add(entry.at(0).get<std::string>(), rows, cols);
            for (std::size_t i = 0; i < n; ++i, pos += 8) t.data()[i] = std::bit_cast<double>(detail::get_u64(bytes, pos));
        }
    };
    read_store(m.params);
    if (header.at("optimizer").get<bool>()) {
        AdamState st;
        read_store(st.m);
        read_store(st.v);
        st.step = header.at("optimizer_step");
        ck.optimizer = std::move(st);
    }
    if (pos + 8 != bytes.size()) throw Error("trailing bytes in checkpoint");
    if (m.params.count_parameters() != header.at("parameter_count").get<std::size_t>()) {
        throw Error("checkpoint parameter count does not match its tensors");
    }
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    const std::string bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace tcrf
