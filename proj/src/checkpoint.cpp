#include <cstring>
#include <fstream>

#include "json.hpp"
#include "vlp/errors.hpp"
#include "vlp/hash.hpp"
#include "vlp/training.hpp"

namespace vlp {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'L', 'P', 'R'};
constexpr std::uint32_t kVersion = 1;

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(const std::string& buf, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    }
    return v;
}

std::string fingerprint_hex(std::uint64_t fp) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

struct BlobWriter {
    std::vector<double> data;

    json add(const std::string& name, const Shape& shape, const std::vector<double>& values) {
        json entry;
        entry["name"] = name;
        entry["shape"] = shape;
        entry["offset"] = data.size();
        data.insert(data.end(), values.begin(), values.end());
        return entry;
    }
};

json manifest_of_params(BlobWriter& blob, const ParamStore& params) {
    json list = json::array();
    for (const auto& [name, t] : params.tensors()) list.push_back(blob.add(name, t.shape, t.values));
    return list;
}

json manifest_of_moments(BlobWriter& blob, const ParamStore& params,
                         const std::map<std::string, std::vector<double>>& moments) {
    json list = json::array();
    for (const auto& [name, t] : params.tensors()) {
        static const std::vector<double> kEmpty;
        auto it = moments.find(name);
        const std::vector<double>& values =
            it != moments.end() && it->second.size() == t.size()
                ? it->second
                : (kEmpty.size() == t.size() ? kEmpty : std::vector<double>(t.size(), 0.0));
        list.push_back(blob.add(name, t.shape, values));
    }
    return list;
}

void write_container(const json& meta, const std::vector<double>& blob,
                     const std::string& path) {
    std::string bytes;
    bytes.append(kMagic, 4);
    append_u32(bytes, kVersion);
    const std::string meta_str = meta.dump();
    append_u64(bytes, meta_str.size());
    bytes += meta_str;
    const std::size_t at = bytes.size();
    bytes.resize(at + blob.size() * sizeof(double));
    std::memcpy(bytes.data() + at, blob.data(), blob.size() * sizeof(double));
    append_u64(bytes, crc64(bytes.data(), bytes.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

struct Container {
    json meta;
    std::vector<double> blob;
};

Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 + 4 + 8 + 8) throw IntegrityError("checkpoint: truncated file");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw IntegrityError("checkpoint: bad magic");
    }
    std::uint32_t version = 0;
    for (int i = 0; i < 4; ++i) {
        version |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
    }
    if (version != kVersion) {
        throw IntegrityError("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint64_t stored_crc = read_u64(bytes, bytes.size() - 8);
    const std::uint64_t actual_crc = crc64(bytes.data(), bytes.size() - 8);
    if (stored_crc != actual_crc) {
        throw IntegrityError("checkpoint: checksum failure");
    }
    const std::uint64_t meta_len = read_u64(bytes, 8);
    const std::size_t meta_at = 16;
    if (meta_at + meta_len > bytes.size() - 8) {
        throw IntegrityError("checkpoint: truncated metadata");
    }
    Container c;
    c.meta = json::parse(bytes.substr(meta_at, meta_len), nullptr, false);
    if (c.meta.is_discarded()) throw IntegrityError("checkpoint: malformed metadata");
    const std::size_t data_at = meta_at + meta_len;
    const std::size_t data_bytes = bytes.size() - 8 - data_at;
    if (data_bytes % sizeof(double) != 0) throw IntegrityError("checkpoint: misaligned data");
    c.blob.resize(data_bytes / sizeof(double));
    std::memcpy(c.blob.data(), bytes.data() + data_at, data_bytes);
    return c;
}

std::vector<double> blob_slice(const Container& c, const json& entry) {
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t count = shape_numel(shape);
    if (offset + count > c.blob.size()) throw IntegrityError("checkpoint: manifest out of range");
    return std::vector<double>(c.blob.begin() + static_cast<std::ptrdiff_t>(offset),
                               c.blob.begin() + static_cast<std::ptrdiff_t>(offset + count));
}

void load_params(const Container& c, const json& manifest, ParamStore& params) {
    std::size_t matched = 0;
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name").get<std::string>();
        if (!params.contains(name)) {
            throw IntegrityError("checkpoint: unexpected parameter '" + name + "'");
        }
        Tensor& t = params.at(name);
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape != t.shape) {
            throw IntegrityError("checkpoint: shape mismatch for '" + name + "'");
        }
        t.values = blob_slice(c, entry);
        ++matched;
    }
    if (matched != params.tensors().size()) {
        throw IntegrityError("checkpoint: parameter manifest incomplete");
    }
}

void load_moments(const Container& c, const json& manifest,
                  std::map<std::string, std::vector<double>>& moments) {
    moments.clear();
    for (const auto& entry : manifest) {
        moments[entry.at("name").get<std::string>()] = blob_slice(c, entry);
    }
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
    BlobWriter blob;
    json meta;
    meta["kind"] = "train_state";
    meta["config"] = state.cfg.to_text();
    meta["vocab"] = state.vocab_words;
    meta["entity_count"] = state.model.entity_count();
    meta["answer_count"] = state.model.answer_count();
    meta["step"] = state.step;
    meta["seed"] = state.seed;
    meta["schedule"] = {{"peak_lr", state.schedule.peak_lr},
                        {"warmup_ratio", state.schedule.warmup_ratio},
                        {"total_steps", state.schedule.total_steps}};
    meta["prompter_fingerprint"] = fingerprint_hex(state.prompter_fingerprint);
    meta["tau_p"] = state.tau_p;
    meta["params"] = manifest_of_params(blob, state.model.params());
    meta["m1"] = manifest_of_moments(blob, state.model.params(), state.m1);
    meta["m2"] = manifest_of_moments(blob, state.model.params(), state.m2);
    write_container(meta, blob.data, path);
}

TrainState load_checkpoint(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "train_state") {
        throw IntegrityError("checkpoint: '" + path + "' is not a train state");
    }
    Config cfg = Config::from_text(c.meta.at("config").get<std::string>());
    std::vector<std::string> vocab = c.meta.at("vocab").get<std::vector<std::string>>();
    Tokenizer tokenizer = Tokenizer::from_words(vocab);
    ModelConfig mc = cfg.model;
    mc.vocab_size = tokenizer.vocab_size();
    TrainState state{cfg,
                     vocab,
                     tokenizer,
                     Model(mc, c.meta.at("entity_count").get<std::size_t>(),
                           c.meta.at("answer_count").get<std::size_t>()),
                     {},
                     {},
                     c.meta.at("step").get<std::uint64_t>(),
                     ScheduleConfig{c.meta.at("schedule").at("peak_lr").get<double>(),
                                    c.meta.at("schedule").at("warmup_ratio").get<double>(),
                                    c.meta.at("schedule").at("total_steps").get<std::size_t>()},
                     c.meta.at("seed").get<std::uint64_t>(),
                     std::stoull(c.meta.at("prompter_fingerprint").get<std::string>(), nullptr, 16),
                     c.meta.at("tau_p").get<double>()};
    load_params(c, c.meta.at("params"), state.model.params());
    load_moments(c, c.meta.at("m1"), state.m1);
    load_moments(c, c.meta.at("m2"), state.m2);
    return state;
}

void save_prompter(const PrompterModel& prompter, const Config& cfg,
                   const std::vector<std::string>& vocab_words, const std::string& path) {
    BlobWriter blob;
    json meta;
    meta["kind"] = "prompter";
    meta["config"] = cfg.to_text();
    meta["vocab"] = vocab_words;
    meta["frozen"] = prompter.frozen();
    meta["fingerprint"] = fingerprint_hex(prompter.fingerprint());
    meta["params"] = manifest_of_params(blob, prompter.params());
    write_container(meta, blob.data, path);
}

LoadedPrompter load_prompter(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "prompter") {
        throw IntegrityError("checkpoint: '" + path + "' is not a prompter");
    }
    Config cfg = Config::from_text(c.meta.at("config").get<std::string>());
    std::vector<std::string> vocab = c.meta.at("vocab").get<std::vector<std::string>>();
    ModelConfig pc = cfg.prompter;
    pc.vocab_size = vocab.size() + 4;
    LoadedPrompter out{PrompterModel(pc), cfg, vocab};
    load_params(c, c.meta.at("params"), out.model.params());
    if (c.meta.value("frozen", false)) out.model.freeze();
    const std::string fp = c.meta.at("fingerprint").get<std::string>();
    if (out.model.frozen() && std::stoull(fp, nullptr, 16) != out.model.fingerprint()) {
        throw IntegrityError("checkpoint: prompter fingerprint mismatch after load");
    }
    return out;
}

}  // namespace vlp
