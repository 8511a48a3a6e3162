#include "vlp/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "vlp/errors.hpp"

namespace vlp {

void ModelConfig::validate() const {
    if (d == 0 || heads == 0) throw ConfigError("model: d and heads must be positive");
    if (d % heads != 0) {
        throw ConfigError("model: d=" + std::to_string(d) + " not divisible by heads=" +
                          std::to_string(heads));
    }
    if (patch_size == 0 || frame_size % patch_size != 0) {
        throw ConfigError("model: frame_size=" + std::to_string(frame_size) +
                          " not divisible by patch_size=" + std::to_string(patch_size));
    }
    if (proj_dim > d) {
        throw ConfigError("model: proj_dim=" + std::to_string(proj_dim) + " exceeds d=" +
                          std::to_string(d));
    }
    if (video_layers % 2 != 0) {
        throw ConfigError("model: video_layers must be even (temporal+spatial pairs)");
    }
    if (max_frames == 0 || max_text == 0) {
        throw ConfigError("model: max_frames and max_text must be positive");
    }
}

std::size_t ModelConfig::patches_per_frame() const {
    return (frame_size / patch_size) * (frame_size / patch_size);
}

ModelConfig ModelConfig::desk_default() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_preset() {
    ModelConfig c;
    c.d = 768;
    c.heads = 12;
    c.video_layers = 24;
    c.text_layers = 6;
    c.mm_layers = 6;
    c.patch_size = 16;
    c.frame_size = 224;
    c.max_frames = 4;
    c.max_text = 40;
    c.proj_dim = 256;
    return c;
}

ModelConfig ModelConfig::prompter_default() {
    ModelConfig c;
    c.d = 32;
    c.heads = 2;
    c.video_layers = 2;
    c.text_layers = 1;
    c.mm_layers = 0;  // the prompter has no multimodal encoder
    c.max_text = 16;
    c.proj_dim = 16;
    return c;
}

std::string loss_set_str(const std::set<LossKind>& set) {
    std::string out;
    for (LossKind k : {LossKind::vtc, LossKind::pem, LossKind::mlm, LossKind::vtm}) {
        if (!set.count(k)) continue;
        if (!out.empty()) out += ',';
        switch (k) {
            case LossKind::vtc: out += "vtc"; break;
            case LossKind::pem: out += "pem"; break;
            case LossKind::mlm: out += "mlm"; break;
            case LossKind::vtm: out += "vtm"; break;
        }
    }
    return out;
}

std::set<LossKind> parse_loss_set(const std::string& csv) {
    std::set<LossKind> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty()) continue;
        if (item == "vtc") out.insert(LossKind::vtc);
        else if (item == "pem") out.insert(LossKind::pem);
        else if (item == "mlm") out.insert(LossKind::mlm);
        else if (item == "vtm") out.insert(LossKind::vtm);
        else throw ConfigError("loss_set: unknown loss '" + item + "'");
    }
    if (out.empty()) throw ConfigError("loss_set: at least one loss required");
    return out;
}

void TrainConfig::validate() const {
    if (optimizer != "adamw") throw ConfigError("train.optimizer: only 'adamw' is supported");
    if (schedule != "warmup-linear") {
        throw ConfigError("train.schedule: only 'warmup-linear' is supported");
    }
    if (augmentation != "none") {
        throw ConfigError("train.augmentation: only 'none' is supported");
    }
    if (peak_lr <= 0.0) throw ConfigError("train.peak_lr must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) {
        throw ConfigError("train.warmup_ratio must lie in [0,1]");
    }
    if (batch == 0 || steps == 0) throw ConfigError("train.batch and train.steps must be positive");
    if (grad_accum == 0) throw ConfigError("train.grad_accum must be positive");
    if (label_threshold < 0.0 || label_threshold > 1.0) {
        throw ConfigError("train.label_threshold must lie in [0,1]");
    }
    if (!(crop_min_frac > 0.0) || crop_min_frac > crop_max_frac || crop_max_frac > 1.0) {
        throw ConfigError("train: crop fractions must satisfy 0 < min <= max <= 1");
    }
    if (tau_init <= 0.0) throw ConfigError("train.tau_init must be positive");
    if (frames == 0) throw ConfigError("train.frames must be positive");
}

void DataConfig::validate() const {
    if (samples_train == 0) throw ConfigError("data.samples_train must be positive");
    if (frames == 0) throw ConfigError("data.frames must be positive");
    if (entities_min == 0 || entities_min > entities_max) {
        throw ConfigError("data: entity count bounds must satisfy 1 <= min <= max");
    }
    if (image_fraction < 0.0 || image_fraction > 1.0) {
        throw ConfigError("data.image_fraction must lie in [0,1]");
    }
}

void EvalConfig::validate() const {
    if (scorer != "vtc" && scorer != "vtm") {
        throw ConfigError("eval.scorer must be 'vtc' or 'vtm'");
    }
}

void Config::validate() const {
    model.validate();
    prompter.validate();
    train.validate();
    data.validate();
    eval.validate();
    if (data.height % model.patch_size != 0 || data.width % model.patch_size != 0) {
        throw ConfigError("data: resolution " + std::to_string(data.width) + "x" +
                          std::to_string(data.height) + " not divisible by model.patch_size");
    }
}

namespace {

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

void set_model_key(ModelConfig& m, const std::string& key, const std::string& field,
                   const std::string& v) {
    if (field == "d") m.d = parse_u64(key, v);
    else if (field == "heads") m.heads = parse_u64(key, v);
    else if (field == "video_layers") m.video_layers = parse_u64(key, v);
    else if (field == "text_layers") m.text_layers = parse_u64(key, v);
    else if (field == "mm_layers") m.mm_layers = parse_u64(key, v);
    else if (field == "patch_size") m.patch_size = parse_u64(key, v);
    else if (field == "frame_size") m.frame_size = parse_u64(key, v);
    else if (field == "max_frames") m.max_frames = parse_u64(key, v);
    else if (field == "max_text") m.max_text = parse_u64(key, v);
    else if (field == "proj_dim") m.proj_dim = parse_u64(key, v);
    else if (field == "ffn_mult") m.ffn_mult = parse_u64(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    const std::size_t dot = key.find('.');
    const std::string section = dot == std::string::npos ? key : key.substr(0, dot);
    const std::string field = dot == std::string::npos ? "" : key.substr(dot + 1);

    if (key == "seed") { seed = parse_u64(key, v); return; }

    if (section == "model") { set_model_key(model, key, field, v); return; }
    if (section == "prompter") { set_model_key(prompter, key, field, v); return; }

    if (section == "train") {
        if (field == "optimizer") train.optimizer = v;
        else if (field == "peak_lr") train.peak_lr = parse_double(key, v);
        else if (field == "weight_decay") train.weight_decay = parse_double(key, v);
        else if (field == "beta1") train.beta1 = parse_double(key, v);
        else if (field == "beta2") train.beta2 = parse_double(key, v);
        else if (field == "schedule") train.schedule = v;
        else if (field == "warmup_ratio") train.warmup_ratio = parse_double(key, v);
        else if (field == "steps") train.steps = parse_u64(key, v);
        else if (field == "epochs") train.epochs = parse_u64(key, v);
        else if (field == "batch") train.batch = parse_u64(key, v);
        else if (field == "frames") train.frames = parse_u64(key, v);
        else if (field == "grad_accum") train.grad_accum = parse_u64(key, v);
        else if (field == "augmentation") train.augmentation = v;
        else if (field == "loss_set") train.loss_set = parse_loss_set(v);
        else if (field == "crops_per_video") train.crops_per_video = parse_u64(key, v);
        else if (field == "entities") train.entities = parse_u64(key, v);
        else if (field == "ensemble") train.ensemble = parse_bool(key, v);
        else if (field == "label_threshold") train.label_threshold = parse_double(key, v);
        else if (field == "crop_min_frac") train.crop_min_frac = parse_double(key, v);
        else if (field == "crop_max_frac") train.crop_max_frac = parse_double(key, v);
        else if (field == "tau_init") train.tau_init = parse_double(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
        return;
    }

    if (section == "data") {
        if (field == "samples_train") data.samples_train = parse_u64(key, v);
        else if (field == "samples_test") data.samples_test = parse_u64(key, v);
        else if (field == "frames") data.frames = parse_u64(key, v);
        else if (field == "height") data.height = parse_u64(key, v);
        else if (field == "width") data.width = parse_u64(key, v);
        else if (field == "entities_min") data.entities_min = parse_u64(key, v);
        else if (field == "entities_max") data.entities_max = parse_u64(key, v);
        else if (field == "image_fraction") data.image_fraction = parse_double(key, v);
        else if (field == "qa") data.qa = parse_bool(key, v);
        else if (field == "blink") data.blink = parse_bool(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
        return;
    }

    if (section == "eval") {
        if (field == "scorer") eval.scorer = v;
        else throw ConfigError("unknown config key '" + key + "'");
        return;
    }

    throw ConfigError("unknown config key '" + key + "'");
}

Config Config::from_text(const std::string& text) {
    Config cfg;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value, got '" + line + "'");
        }
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

Config Config::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return from_text(buffer.str());
}

namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void emit_model(std::map<std::string, std::string>& out, const std::string& section,
                const ModelConfig& m) {
    out[section + ".d"] = std::to_string(m.d);
    out[section + ".heads"] = std::to_string(m.heads);
    out[section + ".video_layers"] = std::to_string(m.video_layers);
    out[section + ".text_layers"] = std::to_string(m.text_layers);
    out[section + ".mm_layers"] = std::to_string(m.mm_layers);
    out[section + ".patch_size"] = std::to_string(m.patch_size);
    out[section + ".frame_size"] = std::to_string(m.frame_size);
    out[section + ".max_frames"] = std::to_string(m.max_frames);
    out[section + ".max_text"] = std::to_string(m.max_text);
    out[section + ".proj_dim"] = std::to_string(m.proj_dim);
    out[section + ".ffn_mult"] = std::to_string(m.ffn_mult);
}

}  // namespace

std::map<std::string, std::string> Config::to_map() const {
    std::map<std::string, std::string> out;
    out["seed"] = std::to_string(seed);
    emit_model(out, "model", model);
    emit_model(out, "prompter", prompter);
    out["train.optimizer"] = train.optimizer;
    out["train.peak_lr"] = fmt_double(train.peak_lr);
    out["train.weight_decay"] = fmt_double(train.weight_decay);
    out["train.beta1"] = fmt_double(train.beta1);
    out["train.beta2"] = fmt_double(train.beta2);
    out["train.schedule"] = train.schedule;
    out["train.warmup_ratio"] = fmt_double(train.warmup_ratio);
    out["train.steps"] = std::to_string(train.steps);
    out["train.epochs"] = std::to_string(train.epochs);
    out["train.batch"] = std::to_string(train.batch);
    out["train.frames"] = std::to_string(train.frames);
    out["train.grad_accum"] = std::to_string(train.grad_accum);
    out["train.augmentation"] = train.augmentation;
    out["train.loss_set"] = loss_set_str(train.loss_set);
    out["train.crops_per_video"] = std::to_string(train.crops_per_video);
    out["train.entities"] = std::to_string(train.entities);
    out["train.ensemble"] = train.ensemble ? "on" : "off";
    out["train.label_threshold"] = fmt_double(train.label_threshold);
    out["train.crop_min_frac"] = fmt_double(train.crop_min_frac);
    out["train.crop_max_frac"] = fmt_double(train.crop_max_frac);
    out["train.tau_init"] = fmt_double(train.tau_init);
    out["data.samples_train"] = std::to_string(data.samples_train);
    out["data.samples_test"] = std::to_string(data.samples_test);
    out["data.frames"] = std::to_string(data.frames);
    out["data.height"] = std::to_string(data.height);
    out["data.width"] = std::to_string(data.width);
    out["data.entities_min"] = std::to_string(data.entities_min);
    out["data.entities_max"] = std::to_string(data.entities_max);
    out["data.image_fraction"] = fmt_double(data.image_fraction);
    out["data.qa"] = data.qa ? "on" : "off";
    out["data.blink"] = data.blink ? "on" : "off";
    out["eval.scorer"] = eval.scorer;
    return out;
}

std::string Config::to_text() const {
    std::string out;
    for (const auto& [k, v] : to_map()) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    }
    return out;
}

}  // namespace vlp
