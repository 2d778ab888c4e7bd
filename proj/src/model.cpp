#include "flowvc/model.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace flowvc {

using ordered_json = nlohmann::ordered_json;

void ModelConfig::validate() const {
    flow.validate();
    if (flow.text_conditioned && mode != PriorMode::Fixed)
        throw ConfigError("text-conditioned flow requires the fixed prior");
    if (uses_encoder()) {
        if (!encoder) throw ConfigError("this mode requires a phoneme encoder config");
        encoder->validate();
        if (encoder->mel_dim != flow.mel_dim)
            throw ConfigError("encoder mel_dim must match flow mel_dim");
    }
}

Model Model::build(const ModelConfig& cfg, SeededRng& rng) {
    cfg.validate();
    Model model;
    model.cfg = cfg;
    SeededRng flow_rng = rng.child(11);
    model.stack.build(model.store, cfg.flow, flow_rng);
    if (cfg.uses_encoder()) {
        SeededRng enc_rng = rng.child(12);
        model.encoder.emplace();
        model.encoder->build(model.store, *cfg.encoder, enc_rng);
    }
    return model;
}

namespace {

constexpr char kCkptMagic[4] = {'F', 'C', 'K', 'P'};

ordered_json flow_config_to_json(const FlowConfig& f) {
    return {{"mel_dim", f.mel_dim},
            {"n_steps", f.n_steps},
            {"squeeze_factor", f.squeeze_factor},
            {"split_every", f.split_every},
            {"split_channels", f.split_channels},
            {"hidden_width", f.hidden_width},
            {"speaker_dim", f.speaker_dim},
            {"coupling_kernel", f.coupling_kernel},
            {"text_conditioned", f.text_conditioned}};
}

FlowConfig flow_config_from_json(const ordered_json& j) {
    FlowConfig f;
    f.mel_dim = j.at("mel_dim").get<int>();
    f.n_steps = j.at("n_steps").get<int>();
    f.squeeze_factor = j.at("squeeze_factor").get<int>();
    f.split_every = j.at("split_every").get<int>();
    f.split_channels = j.at("split_channels").get<int>();
    f.hidden_width = j.at("hidden_width").get<int>();
    f.speaker_dim = j.at("speaker_dim").get<int>();
    f.coupling_kernel = j.at("coupling_kernel").get<int>();
    f.text_conditioned = j.at("text_conditioned").get<bool>();
    return f;
}

ordered_json encoder_config_to_json(const PhonemeEncoderConfig& e) {
    return {{"n_phonemes", e.n_phonemes},
            {"embed_dim", e.embed_dim},
            {"hidden", e.hidden},
            {"mel_dim", e.mel_dim},
            {"kernel", e.kernel}};
}

PhonemeEncoderConfig encoder_config_from_json(const ordered_json& j) {
    PhonemeEncoderConfig e;
    e.n_phonemes = j.at("n_phonemes").get<int>();
    e.embed_dim = j.at("embed_dim").get<int>();
    e.hidden = j.at("hidden").get<int>();
    e.mel_dim = j.at("mel_dim").get<int>();
    e.kernel = j.at("kernel").get<int>();
    return e;
}

ordered_json manifest_json(const ParamStore& store, const std::string& prefix) {
    ordered_json m = ordered_json::array();
    size_t running = 0;
    for (const auto& e : store.entries()) {
        if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
        m.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", running}});
        running += e.size;
    }
    return m;
}

void write_container(const std::string& path, const ordered_json& config,
                     const ParamStore& store, const std::string& prefix) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write(kCkptMagic, 4);
    std::string cfg_str = config.dump();
    uint32_t cfg_len = static_cast<uint32_t>(cfg_str.size());
    os.write(reinterpret_cast<const char*>(&cfg_len), sizeof(cfg_len));
    os.write(cfg_str.data(), cfg_len);
    uint64_t total = 0;
    for (const auto& e : store.entries())
        if (prefix.empty() || e.name.rfind(prefix, 0) == 0) total += e.size;
    os.write(reinterpret_cast<const char*>(&total), sizeof(total));
    for (const auto& e : store.entries()) {
        if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
        os.write(reinterpret_cast<const char*>(store.values(e.offset)),
                 static_cast<std::streamsize>(e.size * sizeof(double)));
    }
}

struct Container {
    ordered_json config;
    std::vector<double> blob;
};

Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path + ": cannot open");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw FormatError(path + ": bad checkpoint magic");
    uint32_t cfg_len = 0;
    is.read(reinterpret_cast<char*>(&cfg_len), sizeof(cfg_len));
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), cfg_len);
    if (!is) throw FormatError(path + ": truncated config block");
    Container c;
    c.config = ordered_json::parse(cfg_str);
    uint64_t total = 0;
    is.read(reinterpret_cast<char*>(&total), sizeof(total));
    c.blob.resize(total);
    is.read(reinterpret_cast<char*>(c.blob.data()),
            static_cast<std::streamsize>(total * sizeof(double)));
    if (!is) throw FormatError(path + ": truncated parameter blob");
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
    ordered_json config;
    config["type"] = "model";
    config["flow"] = flow_config_to_json(model.cfg.flow);
    config["mode"] = prior_mode_name(model.cfg.mode);
    if (model.cfg.encoder) config["encoder"] = encoder_config_to_json(*model.cfg.encoder);
    config["actnorm_initialized"] = model.stack.is_initialized();
    config["trained_steps"] = model.trained_steps;
    config["manifest"] = manifest_json(model.store, "");
    write_container(path, config, model.store, "");
}

Model load_checkpoint(const std::string& path) {
    Container c = read_container(path);
    if (c.config.at("type").get<std::string>() != "model")
        throw FormatError(path + ": not a model checkpoint");
    ModelConfig cfg;
    cfg.flow = flow_config_from_json(c.config.at("flow"));
    cfg.mode = prior_mode_from_name(c.config.at("mode").get<std::string>());
    if (c.config.contains("encoder"))
        cfg.encoder = encoder_config_from_json(c.config.at("encoder"));
    SeededRng rng(0);
    Model model = Model::build(cfg, rng);
    if (model.store.total_size() != c.blob.size())
        throw FormatError(path + ": parameter blob size mismatch");
    model.store.flat_values() = std::move(c.blob);
    if (c.config.at("actnorm_initialized").get<bool>()) model.stack.mark_initialized();
    model.trained_steps = c.config.at("trained_steps").get<int>();
    return model;
}

void save_encoder_checkpoint(const std::string& path, const ParamStore& store,
                             const PhonemeEncoderConfig& cfg) {
    ordered_json config;
    config["type"] = "encoder";
    config["encoder"] = encoder_config_to_json(cfg);
    config["manifest"] = manifest_json(store, "enc.");
    write_container(path, config, store, "enc.");
}

PhonemeEncoderConfig peek_encoder_config(const std::string& path) {
    Container c = read_container(path);
    if (c.config.at("type").get<std::string>() != "encoder")
        throw FormatError(path + ": not an encoder checkpoint");
    return encoder_config_from_json(c.config.at("encoder"));
}

PhonemeEncoderConfig load_encoder_checkpoint(const std::string& path, Model& model) {
    Container c = read_container(path);
    if (c.config.at("type").get<std::string>() != "encoder")
        throw FormatError(path + ": not an encoder checkpoint");
    PhonemeEncoderConfig cfg = encoder_config_from_json(c.config.at("encoder"));
    if (!model.encoder) throw ConfigError("model has no encoder to load into");
    if (cfg.n_phonemes != model.cfg.encoder->n_phonemes ||
        cfg.embed_dim != model.cfg.encoder->embed_dim ||
        cfg.hidden != model.cfg.encoder->hidden || cfg.mel_dim != model.cfg.encoder->mel_dim ||
        cfg.kernel != model.cfg.encoder->kernel)
        throw ConfigError(path + ": encoder config mismatch");
    size_t cursor = 0;
    for (const auto& e : model.store.entries()) {
        if (e.name.rfind("enc.", 0) != 0) continue;
        if (cursor + e.size > c.blob.size())
            throw FormatError(path + ": encoder blob too small");
        std::copy(c.blob.begin() + cursor, c.blob.begin() + cursor + e.size,
                  model.store.values(e.offset));
        cursor += e.size;
    }
    if (cursor != c.blob.size()) throw FormatError(path + ": encoder blob size mismatch");
    return cfg;
}

uint64_t param_hash(const ParamStore& store, const std::string& prefix) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& e : store.entries()) {
        if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
        mix(store.values(e.offset), e.size * sizeof(double));
    }
    return h;
}

}  // namespace flowvc
